//! Synthetic "moving actor" world with measurable conditioning effects.
//!
//! Every clip shows one actor disk in an identity color moving along a
//! trajectory, a small object square at a fixed offset from it, and a grey
//! mouth window whose intensity follows the audio envelope frame by frame.
//!
//! The text prompt names the trajectory and the color *family* of actor and
//! object. Which of the three family colors is used is only visible through
//! references or the first frame, and the mouth phase only through audio.

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{interpolate_to_fps, AudioFeatures};
use crate::codec::{Clip, Geometry, Keypoint, PoseTrack};
use crate::condition::TaskKind;
use crate::error::{shape_err, Error, Result};

pub type Rgb = [f64; 3];

/// Actor identity colors; indices `0..3` are the warm family, `3..6` the cool one.
pub const ACTOR_PALETTE: [Rgb; 6] = [
    [0.90, 0.20, 0.15],
    [0.95, 0.55, 0.10],
    [0.85, 0.15, 0.75],
    [0.15, 0.80, 0.25],
    [0.15, 0.35, 0.95],
    [0.10, 0.80, 0.85],
];

/// Object identity colors, same family split as [`ACTOR_PALETTE`].
pub const OBJECT_PALETTE: [Rgb; 6] = [
    [0.95, 0.90, 0.10],
    [0.95, 0.55, 0.65],
    [0.55, 0.30, 0.10],
    [0.50, 0.15, 0.90],
    [0.60, 0.95, 0.15],
    [0.05, 0.50, 0.50],
];

pub const FAMILY_SIZE: usize = 3;

/// Motion kinds: four bouncing diagonals, then clockwise / counter-clockwise circles.
pub const MOTION_KINDS: usize = 6;
/// Start slots per motion kind.
pub const START_SLOTS: usize = 2;
const BOUNCE_STARTS: [(f64, f64); START_SLOTS] = [(4.0, 5.0), (8.0, 10.0)];
const CIRCLE_CENTRES: [(f64, f64); START_SLOTS] = [(5.5, 6.5), (6.5, 9.5)];
const BOUNCE_VELOCITY: [(f64, f64); 4] = [(0.25, 0.1875), (0.25, -0.1875), (-0.25, 0.1875), (-0.25, -0.1875)];
const CIRCLE_RADIUS: f64 = 1.5;
const CIRCLE_PERIOD: f64 = 16.0;

pub const ENVELOPE_FREQS: [f64; 3] = [0.5, 0.75, 1.0];
const ENVELOPE_MEAN: f64 = 0.5;
const ENVELOPE_AMP: f64 = 0.35;
const DISTRACTOR_FREQS: [f64; 4] = [2.0, 3.0, 4.0, 5.0];

pub const AUDIO_RATE: f64 = 32.0;
pub const AUDIO_DIM: usize = 8;

/// Disk footprint: offsets with `dx² + dy² ≤ ACTOR_RADIUS_SQ`.
pub const ACTOR_RADIUS_SQ: i64 = 6;
/// Mouth window rows `[y+1, y+2]`, cols `[x-1, x]` relative to the centroid.
pub const MOUTH_OFFSETS: [(i64, i64); 4] = [(1, -1), (1, 0), (2, -1), (2, 0)];
/// Object square rows `[y-1, y]`, cols `[x+4, x+5]`.
pub const OBJECT_OFFSETS: [(i64, i64); 4] = [(-1, 4), (-1, 5), (0, 4), (0, 5)];

/// Nearest-color match tolerance (per-channel max distance).
pub const COLOR_TOL: f64 = 0.15;
/// Minimum intensity mass for a detection.
pub const MIN_DETECT_MASS: f64 = 1.0;
/// Pixels whose brightest channel reaches this count as foreground.
pub const FOREGROUND_LEVEL: f64 = 0.3;
/// Correct-keypoint threshold in pixels.
pub const PCK_THRESHOLD: f64 = 2.0;

pub const TEXT_BOS: usize = 1;
const TEXT_ACTOR_FAMILY: usize = 8;
const TEXT_OBJECT_FAMILY: usize = 12;
const TEXT_MOTION: usize = 16;

/// Generation-time facts about one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    pub task: TaskKind,
    pub actor_color: usize,
    pub object_color: usize,
    pub motion: usize,
    pub start: usize,
    pub envelope_freq: f64,
    pub envelope_phase: f64,
}

/// One fully labelled clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub clip: Clip,
    pub text_ids: Vec<usize>,
    /// `[C × H × W]` actor disk on black.
    pub ref_human: Tensor,
    /// `[C × H × W]` object square on black.
    pub ref_object: Tensor,
    pub pose: PoseTrack,
    pub audio: AudioFeatures,
    pub meta: SampleMeta,
}

impl SynthSample {
    pub fn actor_rgb(&self) -> Rgb {
        ACTOR_PALETTE[self.meta.actor_color]
    }

    pub fn object_rgb(&self) -> Rgb {
        OBJECT_PALETTE[self.meta.object_color]
    }

    /// Ground-truth envelope at each video frame.
    pub fn envelope(&self) -> Vec<f64> {
        envelope_series(&self.audio, self.clip.fps, self.clip.len())
    }
}

fn envelope_value(freq: f64, phase: f64, time: f64) -> f64 {
    ENVELOPE_MEAN + ENVELOPE_AMP * (std::f64::consts::TAU * freq * time + phase).sin()
}

/// Channel 0 of the audio resampled to video frames.
pub fn envelope_series(audio: &AudioFeatures, fps: u32, frames: usize) -> Vec<f64> {
    let per_frame = interpolate_to_fps(audio, f64::from(fps), frames).expect("audio covers clip");
    (0..frames).map(|t| per_frame.row(t)[0]).collect()
}

fn check_world(g: &Geometry) -> Result<()> {
    g.validate()?;
    if g.channels != 3 || g.width != 16 || g.height != 16 {
        return Err(Error::Config(format!(
            "synthetic world is laid out for a 3-channel 16x16 canvas, got {}ch {}x{}",
            g.channels, g.width, g.height
        )));
    }
    Ok(())
}

/// Allowed centroid box `(x_lo, x_hi, y_lo, y_hi)` keeping actor, mouth and object on canvas.
pub fn trajectory_box(g: &Geometry) -> (f64, f64, f64, f64) {
    (2.0, (g.width - 6) as f64, 2.0, (g.height - 3) as f64)
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let u = (p - lo).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

/// Continuous actor position at frame `t`.
pub fn trajectory(motion: usize, start: usize, g: &Geometry, t: usize) -> (f64, f64) {
    let (x0, x1, y0, y1) = trajectory_box(g);
    let tf = t as f64;
    if motion < BOUNCE_VELOCITY.len() {
        let (vx, vy) = BOUNCE_VELOCITY[motion];
        let (ox, oy) = BOUNCE_STARTS[start];
        (reflect(ox + vx * tf, x0, x1), reflect(oy + vy * tf, y0, y1))
    } else {
        let dir = if motion == 4 { 1.0 } else { -1.0 };
        let ang = dir * std::f64::consts::TAU * tf / CIRCLE_PERIOD;
        let (cx, cy) = CIRCLE_CENTRES[start];
        (cx + CIRCLE_RADIUS * ang.cos(), cy + CIRCLE_RADIUS * ang.sin())
    }
}

pub fn family_of(color: usize) -> usize {
    color / FAMILY_SIZE
}

pub fn text_ids_for(meta: &SampleMeta) -> Vec<usize> {
    vec![
        TEXT_BOS,
        TEXT_ACTOR_FAMILY + family_of(meta.actor_color),
        TEXT_OBJECT_FAMILY + family_of(meta.object_color),
        TEXT_MOTION + meta.motion * START_SLOTS + meta.start,
    ]
}

fn put(frame: &mut [f64], h: usize, w: usize, y: i64, x: i64, rgb: Rgb) {
    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
        return;
    }
    for (c, v) in rgb.iter().enumerate() {
        frame[(c * h + y as usize) * w + x as usize] = *v;
    }
}

fn disk_offsets() -> impl Iterator<Item = (i64, i64)> {
    (-2i64..=2).flat_map(|dy| (-2i64..=2).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= ACTOR_RADIUS_SQ)
}

/// Draws actor, mouth and object into a black `[C × H × W]` frame.
pub fn render_frame(frame: &mut [f64], g: &Geometry, center: (i64, i64), actor: Rgb, object: Rgb, mouth: f64) {
    let (h, w) = (g.height, g.width);
    let (cx, cy) = center;
    for (dy, dx) in disk_offsets() {
        put(frame, h, w, cy + dy, cx + dx, actor);
    }
    for (dy, dx) in MOUTH_OFFSETS {
        put(frame, h, w, cy + dy, cx + dx, [mouth; 3]);
    }
    for (dy, dx) in OBJECT_OFFSETS {
        put(frame, h, w, cy + dy, cx + dx, object);
    }
}

fn reference_image(g: &Geometry, offsets: &[(i64, i64)], rgb: Rgb, anchor: (i64, i64)) -> Tensor {
    let mut img = Tensor::zeros(&[g.channels, g.height, g.width]);
    for &(dy, dx) in offsets {
        put(img.data_mut(), g.height, g.width, anchor.1 + dy, anchor.0 + dx, rgb);
    }
    img
}

/// Generates sample `index` of the stream identified by `seed`. Each index uses
/// its own RNG stream, so a sample never depends on how many were requested.
pub fn generate_one(seed: u64, index: u64, task: TaskKind, g: &Geometry) -> Result<SynthSample> {
    check_world(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let actor_color = rng.random_range(0..ACTOR_PALETTE.len());
    let object_color = rng.random_range(0..OBJECT_PALETTE.len());
    let motion = rng.random_range(0..MOTION_KINDS);
    let start = rng.random_range(0..START_SLOTS);
    let envelope_freq = ENVELOPE_FREQS[rng.random_range(0..ENVELOPE_FREQS.len())];
    let envelope_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let distractors: Vec<(f64, f64)> = (1..AUDIO_DIM)
        .map(|_| {
            (
                DISTRACTOR_FREQS[rng.random_range(0..DISTRACTOR_FREQS.len())],
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let meta = SampleMeta {
        seed,
        index,
        task,
        actor_color,
        object_color,
        motion,
        start,
        envelope_freq,
        envelope_phase,
    };

    let duration = g.frames as f64 / f64::from(g.fps);
    let n_audio = (duration * AUDIO_RATE).round() as usize;
    let mut feats = Vec::with_capacity(n_audio * AUDIO_DIM);
    for i in 0..n_audio {
        let time = i as f64 / AUDIO_RATE;
        let env = envelope_value(envelope_freq, envelope_phase, time);
        feats.push(env);
        for &(f, ph) in &distractors {
            feats.push(env * (0.5 + 0.5 * (std::f64::consts::TAU * f * time + ph).sin()));
        }
    }
    let audio = AudioFeatures::new(Tensor::new(vec![n_audio, AUDIO_DIM], feats)?, AUDIO_RATE)?;

    let actor = ACTOR_PALETTE[actor_color];
    let object = OBJECT_PALETTE[object_color];
    let mut clip = Clip::black(g);
    let mut keypoints = Vec::with_capacity(g.frames);
    for t in 0..g.frames {
        let (px, py) = trajectory(motion, start, g, t);
        let center = (px.round() as i64, py.round() as i64);
        let mouth = envelope_value(envelope_freq, envelope_phase, t as f64 / f64::from(g.fps));
        render_frame(clip.frame_mut(t), g, center, actor, object, mouth);
        keypoints.push(Keypoint {
            x: center.0 as f64,
            y: center.1 as f64,
            visible: true,
        });
    }

    let mid = ((g.width / 2) as i64, (g.height / 2) as i64);
    let disk: Vec<(i64, i64)> = disk_offsets().collect();
    let square = [(-1, -1), (-1, 0), (0, -1), (0, 0)];
    Ok(SynthSample {
        clip,
        text_ids: text_ids_for(&meta),
        ref_human: reference_image(g, &disk, actor, mid),
        ref_object: reference_image(g, &square, object, mid),
        pose: PoseTrack { keypoints },
        audio,
        meta,
    })
}

/// `count` samples of stream `seed`, indices `0..count`.
pub fn generate(seed: u64, count: usize, task: TaskKind, g: &Geometry) -> Result<Vec<SynthSample>> {
    (0..count as u64).map(|i| generate_one(seed, i, task, g)).collect()
}

// ---- measurement -------------------------------------------------------

/// Every identity color of the world.
pub fn identity_palette() -> Vec<Rgb> {
    ACTOR_PALETTE.iter().chain(OBJECT_PALETTE.iter()).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub mass: f64,
    pub color: Rgb,
}

fn pixel_rgb(frame: &[f64], h: usize, w: usize, y: usize, x: usize) -> Rgb {
    let plane = h * w;
    [
        frame[y * w + x],
        frame[plane + y * w + x],
        frame[2 * plane + y * w + x],
    ]
}

fn linf(a: Rgb, b: Rgb) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max)
}

/// Locates the pixels of `frame` (`[3 × H × W]`) whose nearest palette color is
/// `query` within [`COLOR_TOL`], returning their intensity-weighted centroid.
pub fn detect_actor(frame: &[f64], h: usize, w: usize, query: Rgb, palette: &[Rgb]) -> Option<Detection> {
    let mut mass = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    let mut col = [0.0; 3];
    let mut count = 0.0;
    for y in 0..h {
        for x in 0..w {
            let p = pixel_rgb(frame, h, w, y, x);
            let (nearest, dist) = palette
                .iter()
                .map(|&c| (c, linf(p, c)))
                .fold((query, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best });
            if dist > COLOR_TOL || linf(nearest, query) > 0.0 {
                continue;
            }
            let inten = (p[0] + p[1] + p[2]) / 3.0;
            mass += inten;
            sx += inten * x as f64;
            sy += inten * y as f64;
            count += 1.0;
            for c in 0..3 {
                col[c] += p[c];
            }
        }
    }
    if mass < MIN_DETECT_MASS {
        return None;
    }
    Some(Detection {
        x: sx / mass,
        y: sy / mass,
        mass,
        color: col.map(|v| v / count),
    })
}

/// Intensity-weighted centroid of all foreground pixels, regardless of color.
pub fn foreground_centroid(frame: &[f64], h: usize, w: usize) -> Option<(f64, f64)> {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = pixel_rgb(frame, h, w, y, x);
            if p.iter().copied().fold(0.0, f64::max) < FOREGROUND_LEVEL {
                continue;
            }
            let inten = (p[0] + p[1] + p[2]) / 3.0;
            m += inten;
            sx += inten * x as f64;
            sy += inten * y as f64;
        }
    }
    (m >= MIN_DETECT_MASS).then(|| (sx / m, sy / m))
}

/// Mean intensity of the mouth window below a centroid (clamped to the canvas).
pub fn mouth_intensity(frame: &[f64], h: usize, w: usize, centroid: (f64, f64)) -> f64 {
    let (cx, cy) = (centroid.0.round() as i64, centroid.1.round() as i64);
    let mut acc = 0.0;
    for (dy, dx) in MOUTH_OFFSETS {
        let y = (cy + dy).clamp(0, h as i64 - 1) as usize;
        let x = (cx + dx).clamp(0, w as i64 - 1) as usize;
        let p = pixel_rgb(frame, h, w, y, x);
        acc += (p[0] + p[1] + p[2]) / 3.0;
    }
    acc / MOUTH_OFFSETS.len() as f64
}

/// Pearson correlation; a zero-variance input yields `(0, true)`.
pub fn pearson(a: &[f64], b: &[f64]) -> (f64, bool) {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-18 || sbb <= 1e-18 {
        return (0.0, true);
    }
    ((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0), false)
}

/// Desk-scale evaluation scores of one generated clip (or a mean over several).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeskMetrics {
    pub sync_corr: f64,
    /// Set when the mouth series had no variance and `sync_corr` was forced to 0.
    pub sync_degenerate: bool,
    pub pose_err: Option<f64>,
    pub pck: Option<f64>,
    pub ref_err_human: f64,
    pub ref_err_object: f64,
    pub recon_ref_mse: Option<f64>,
}

impl DeskMetrics {
    pub fn mean(all: &[DeskMetrics]) -> DeskMetrics {
        let n = all.len().max(1) as f64;
        let avg = |f: &dyn Fn(&DeskMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&DeskMetrics) -> Option<f64>| {
            let v: Vec<f64> = all.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        DeskMetrics {
            sync_corr: avg(&|m| m.sync_corr),
            sync_degenerate: all.iter().any(|m| m.sync_degenerate),
            pose_err: avg_opt(&|m| m.pose_err),
            pck: avg_opt(&|m| m.pck),
            ref_err_human: avg(&|m| m.ref_err_human),
            ref_err_object: avg(&|m| m.ref_err_object),
            recon_ref_mse: avg_opt(&|m| m.recon_ref_mse),
        }
    }
}

/// Penalty distance for frames where the actor cannot be found.
fn miss_penalty(h: usize, w: usize) -> f64 {
    (h.max(w)) as f64
}

fn region_error(frame: &[f64], h: usize, w: usize, center: (i64, i64), offsets: &[(i64, i64)], rgb: Rgb) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0.0;
    for &(dy, dx) in offsets {
        let (y, x) = (center.1 + dy, center.0 + dx);
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            continue;
        }
        let p = pixel_rgb(frame, h, w, y as usize, x as usize);
        acc += (0..3).map(|c| (p[c] - rgb[c]).abs()).sum::<f64>() / 3.0;
        n += 1.0;
    }
    (n > 0.0).then(|| acc / n)
}

/// Scores a clip against the labels of the sample it was conditioned on.
///
/// `with_pose` enables the pose metrics; otherwise they are reported absent.
/// `recon` holds the decoded pseudo frames for `[ref_human, ref_object]` when
/// the clip was generated with references.
pub fn evaluate(clip: &Clip, labels: &SynthSample, with_pose: bool, recon: Option<&[Clip]>) -> Result<DeskMetrics> {
    let (t, h, w) = (clip.len(), clip.height(), clip.width());
    if t != labels.clip.len() || h != labels.clip.height() || w != labels.clip.width() || clip.channels() != 3 {
        return Err(shape_err!(
            "clip {:?} does not match labels {:?}",
            clip.frames.shape(),
            labels.clip.frames.shape()
        ));
    }
    if labels.pose.keypoints.len() != t {
        return Err(shape_err!("pose track has {} frames, clip {t}", labels.pose.keypoints.len()));
    }
    let palette = identity_palette();
    let human = labels.actor_rgb();
    let object = labels.object_rgb();
    let envelope = labels.envelope();
    let body: Vec<(i64, i64)> = disk_offsets().filter(|o| !MOUTH_OFFSETS.contains(o)).collect();

    let mut mouth = Vec::with_capacity(t);
    let mut err_h = 0.0;
    let mut err_o = 0.0;
    let mut pose_err = 0.0;
    let mut hits = 0usize;
    for ti in 0..t {
        let frame = clip.frame(ti);
        let kp = labels.pose.keypoints[ti];
        let detected = detect_actor(frame, h, w, human, &palette);
        let center = detected
            .map(|d| (d.x, d.y))
            .or_else(|| foreground_centroid(frame, h, w))
            .unwrap_or((kp.x, kp.y));
        let sync_center = detected.map_or((kp.x, kp.y), |d| (d.x, d.y));
        mouth.push(mouth_intensity(frame, h, w, sync_center));

        let c = (center.0.round() as i64, center.1.round() as i64);
        err_h += region_error(frame, h, w, c, &body, human).unwrap_or(1.0);
        err_o += region_error(frame, h, w, c, &OBJECT_OFFSETS, object).unwrap_or(1.0);

        if with_pose {
            let d = match detected {
                Some(d) => (d.x - kp.x).hypot(d.y - kp.y),
                None => miss_penalty(h, w),
            };
            pose_err += d;
            if d <= PCK_THRESHOLD {
                hits += 1;
            }
        }
    }
    let (sync_corr, sync_degenerate) = pearson(&mouth, &envelope);
    let recon_ref_mse = match recon {
        Some(frames) => {
            let refs = [&labels.ref_human, &labels.ref_object];
            let mut acc = 0.0;
            let mut n = 0.0f64;
            for (dec, want) in frames.iter().zip(refs) {
                for ti in 0..dec.len() {
                    for (a, b) in dec.frame(ti).iter().zip(want.data()) {
                        acc += (a - b) * (a - b);
                        n += 1.0;
                    }
                }
            }
            Some(acc / n.max(1.0))
        }
        None => None,
    };
    let tf = t as f64;
    Ok(DeskMetrics {
        sync_corr,
        sync_degenerate,
        pose_err: with_pose.then(|| pose_err / tf),
        pck: with_pose.then(|| hits as f64 / tf),
        ref_err_human: err_h / tf,
        ref_err_object: err_o / tf,
        recon_ref_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palettes_are_separable() {
        let pal = identity_palette();
        for (i, a) in pal.iter().enumerate() {
            for b in &pal[i + 1..] {
                assert!(linf(*a, *b) >= 2.0 * COLOR_TOL, "{a:?} vs {b:?}");
            }
            // Grey mouth pixels never match an identity color.
            for k in 0..=100 {
                let e = k as f64 / 100.0;
                if (ENVELOPE_MEAN - ENVELOPE_AMP..=ENVELOPE_MEAN + ENVELOPE_AMP).contains(&e) {
                    assert!(linf([e; 3], *a) > COLOR_TOL, "{e} vs {a:?}");
                }
            }
        }
    }

    #[test]
    fn reflect_is_a_triangle_wave() {
        assert_eq!(reflect(3.0, 2.0, 10.0), 3.0);
        assert_eq!(reflect(11.0, 2.0, 10.0), 9.0);
        assert_eq!(reflect(1.0, 2.0, 10.0), 3.0);
        assert_eq!(reflect(19.0, 2.0, 10.0), 3.0);
    }

    #[test]
    fn pearson_degenerate_and_perfect() {
        assert_eq!(pearson(&[0.5; 4], &[1.0, 2.0, 3.0, 4.0]), (0.0, true));
        let (r, d) = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        assert!((r - 1.0).abs() < 1e-12 && !d);
    }

    #[test]
    fn world_rejects_tiny_canvas() {
        let g = Geometry {
            width: 8,
            height: 8,
            ..Geometry::default()
        };
        assert!(generate_one(0, 0, TaskKind::T2V, &g).is_err());
    }
}
