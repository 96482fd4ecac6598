//! Lossless patchify codec between pixel clips and latent token grids.
//!
//! A latent token covers `TEMPORAL_STRIDE` consecutive frames and a `p × p`
//! spatial patch of every channel. Inside a token the channel index is
//! `((dt · C + c) · p + py) · p + px`, so latent frame `k` holds pixel frames
//! `[4k, 4k + 3]`.

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Pixel frames folded into one latent frame.
pub const TEMPORAL_STRIDE: usize = 4;

/// Pixel and latent extents of a run. All derived sizes follow from these fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub fps: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            frames: 16,
            channels: 3,
            height: 16,
            width: 16,
            patch: 2,
            fps: 8,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames % TEMPORAL_STRIDE != 0 {
            return Err(shape_err!("frame count {} not a positive multiple of {TEMPORAL_STRIDE}", self.frames));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(shape_err!(
                "{}x{} canvas not divisible by patch {}",
                self.height,
                self.width,
                self.patch
            ));
        }
        if self.channels == 0 || self.fps == 0 {
            return Err(shape_err!("channels and fps must be positive"));
        }
        Ok(())
    }

    pub fn latent_frames(&self) -> usize {
        self.frames / TEMPORAL_STRIDE
    }

    pub fn latent_height(&self) -> usize {
        self.height / self.patch
    }

    pub fn latent_width(&self) -> usize {
        self.width / self.patch
    }

    /// Channel width `D` of a latent token.
    pub fn token_dim(&self) -> usize {
        TEMPORAL_STRIDE * self.patch * self.patch * self.channels
    }

    /// Tokens per latent frame, `H_l · W_l`.
    pub fn tokens_per_frame(&self) -> usize {
        self.latent_height() * self.latent_width()
    }

    /// Video token count `N`.
    pub fn video_tokens(&self) -> usize {
        self.latent_frames() * self.tokens_per_frame()
    }

    /// Pseudo-frame token count `N′` for `refs` reference images.
    pub fn pseudo_tokens(&self, refs: usize) -> usize {
        refs * self.tokens_per_frame()
    }
}

/// Pixel clip `[T × C × H × W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Tensor,
    pub fps: u32,
}

impl Clip {
    pub fn new(frames: Tensor, fps: u32) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(shape_err!("clip must be rank 4, got {:?}", frames.shape()));
        }
        Ok(Self { frames, fps })
    }

    pub fn black(g: &Geometry) -> Self {
        Self {
            frames: Tensor::zeros(&[g.frames, g.channels, g.height, g.width]),
            fps: g.fps,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    fn frame_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    /// Frame `t` as a flat `[C × H × W]` slice.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.frames.data_mut()[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.frame(t)[(c * self.height() + y) * self.width() + x]
    }

    pub fn clamp_unit(&mut self) {
        self.frames.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Latent token grid `[T_l × H_l × W_l × D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub tokens: Tensor,
}

impl LatentGrid {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 4 {
            return Err(shape_err!("latent grid must be rank 4, got {:?}", tokens.shape()));
        }
        Ok(Self { tokens })
    }

    pub fn latent_frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens.shape()[1] * self.tokens.shape()[2]
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[3]
    }

    /// All tokens as rows, `[T_l · H_l · W_l × D]`.
    pub fn as_rows(&self) -> Tensor {
        let d = self.token_dim();
        self.tokens.reshape(&[self.tokens.len() / d, d]).expect("row view")
    }

    /// Latent frame `k` as `[H_l × W_l × D]`.
    pub fn frame(&self, k: usize) -> Tensor {
        let s = self.tokens.shape();
        let n = s[1] * s[2] * s[3];
        Tensor::new(s[1..].to_vec(), self.tokens.data()[k * n..(k + 1) * n].to_vec()).expect("frame view")
    }
}

/// Maps pixel clips to latent grids and back without loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub patch: usize,
}

impl Codec {
    pub fn new(patch: usize) -> Self {
        Self { patch }
    }

    pub fn for_geometry(g: &Geometry) -> Self {
        Self::new(g.patch)
    }

    fn check(&self, t: usize, h: usize, w: usize) -> Result<()> {
        if t == 0 || t % TEMPORAL_STRIDE != 0 {
            return Err(shape_err!("clip length {t} not a positive multiple of {TEMPORAL_STRIDE}"));
        }
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(shape_err!("frame {h}x{w} not divisible by patch {}", self.patch));
        }
        Ok(())
    }

    pub fn encode(&self, clip: &Clip) -> Result<LatentGrid> {
        let (t, c, h, w) = (clip.len(), clip.channels(), clip.height(), clip.width());
        self.check(t, h, w)?;
        let p = self.patch;
        let (tl, hl, wl) = (t / TEMPORAL_STRIDE, h / p, w / p);
        let d = TEMPORAL_STRIDE * p * p * c;
        let src = clip.frames.data();
        let mut out = vec![0.0; tl * hl * wl * d];
        for k in 0..tl {
            for i in 0..hl {
                for j in 0..wl {
                    let base = ((k * hl + i) * wl + j) * d;
                    for dt in 0..TEMPORAL_STRIDE {
                        for ch in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    let ti = k * TEMPORAL_STRIDE + dt;
                                    let (y, x) = (i * p + py, j * p + px);
                                    let di = ((dt * c + ch) * p + py) * p + px;
                                    out[base + di] = src[((ti * c + ch) * h + y) * w + x];
                                }
                            }
                        }
                    }
                }
            }
        }
        LatentGrid::new(Tensor::new(vec![tl, hl, wl, d], out)?)
    }

    pub fn decode(&self, grid: &LatentGrid, fps: u32) -> Result<Clip> {
        let s = grid.tokens.shape();
        let (tl, hl, wl, d) = (s[0], s[1], s[2], s[3]);
        let p = self.patch;
        let per = TEMPORAL_STRIDE * p * p;
        if p == 0 || d % per != 0 {
            return Err(shape_err!("token width {d} not a multiple of {per}"));
        }
        let c = d / per;
        let (t, h, w) = (tl * TEMPORAL_STRIDE, hl * p, wl * p);
        let src = grid.tokens.data();
        let mut out = vec![0.0; t * c * h * w];
        for k in 0..tl {
            for i in 0..hl {
                for j in 0..wl {
                    let base = ((k * hl + i) * wl + j) * d;
                    for dt in 0..TEMPORAL_STRIDE {
                        for ch in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    let ti = k * TEMPORAL_STRIDE + dt;
                                    let (y, x) = (i * p + py, j * p + px);
                                    let di = ((dt * c + ch) * p + py) * p + px;
                                    out[((ti * c + ch) * h + y) * w + x] = src[base + di];
                                }
                            }
                        }
                    }
                }
            }
        }
        Clip::new(Tensor::new(vec![t, c, h, w], out)?, fps)
    }

    /// Encodes a still image `[C × H × W]` as one latent frame `[H_l × W_l × D]`
    /// by repeating it across a temporal group.
    pub fn encode_image(&self, img: &Tensor) -> Result<Tensor> {
        if img.rank() != 3 {
            return Err(shape_err!("image must be rank 3, got {:?}", img.shape()));
        }
        let s = img.shape();
        let mut data = Vec::with_capacity(TEMPORAL_STRIDE * img.len());
        for _ in 0..TEMPORAL_STRIDE {
            data.extend_from_slice(img.data());
        }
        let clip = Clip::new(Tensor::new(vec![TEMPORAL_STRIDE, s[0], s[1], s[2]], data)?, 1)?;
        Ok(self.encode(&clip)?.frame(0))
    }

    /// Decodes one latent frame `[H_l × W_l × D]` into its `TEMPORAL_STRIDE` pixel frames.
    pub fn decode_frame(&self, frame: &Tensor, fps: u32) -> Result<Clip> {
        let mut shape = vec![1];
        shape.extend_from_slice(frame.shape());
        self.decode(&LatentGrid::new(frame.reshape(&shape)?)?, fps)
    }
}

/// One pose keypoint in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Per-frame keypoints of the actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseTrack {
    pub keypoints: Vec<Keypoint>,
}

/// Default pose disk radius in pixels (one latent pixel).
pub const POSE_RADIUS: f64 = 2.0;

/// Renders a pose track as a clip: black frames with a white disk of `radius`
/// pixels around each visible keypoint.
pub fn rasterize_pose(
    track: &PoseTrack,
    channels: usize,
    height: usize,
    width: usize,
    radius: f64,
    fps: u32,
) -> Result<Clip> {
    let t = track.keypoints.len();
    let mut frames = Tensor::zeros(&[t.max(1), channels, height, width]);
    if t == 0 {
        return Err(shape_err!("empty pose track"));
    }
    let plane = height * width;
    let data = frames.data_mut();
    for (ti, kp) in track.keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        if !(0.0..=(width - 1) as f64).contains(&kp.x) || !(0.0..=(height - 1) as f64).contains(&kp.y) {
            return Err(shape_err!(
                "keypoint ({}, {}) at frame {ti} outside {width}x{height} canvas",
                kp.x,
                kp.y
            ));
        }
        let r2 = radius * radius;
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 - kp.x, y as f64 - kp.y);
                if dx * dx + dy * dy <= r2 {
                    for c in 0..channels {
                        data[(ti * channels + c) * plane + y * width + x] = 1.0;
                    }
                }
            }
        }
    }
    Clip::new(frames, fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry::default()
    }

    #[test]
    fn default_geometry_sizes() {
        let g = geom();
        assert_eq!(g.token_dim(), 48);
        assert_eq!(g.video_tokens(), 256);
        assert_eq!(g.pseudo_tokens(2), 128);
        assert_eq!((g.latent_frames(), g.latent_height(), g.latent_width()), (4, 8, 8));
    }

    #[test]
    fn encode_rejects_bad_extents() {
        let codec = Codec::new(2);
        let clip = Clip::new(Tensor::zeros(&[6, 3, 16, 16]), 8).unwrap();
        assert!(codec.encode(&clip).is_err());
        let clip = Clip::new(Tensor::zeros(&[8, 3, 15, 16]), 8).unwrap();
        assert!(codec.encode(&clip).is_err());
        assert!(codec.encode_image(&Tensor::zeros(&[3, 16, 15])).is_err());
    }

    #[test]
    fn zero_clip_encodes_to_zero_grid() {
        let g = geom();
        let grid = Codec::for_geometry(&g).encode(&Clip::black(&g)).unwrap();
        assert_eq!(grid.tokens.shape(), &[4, 8, 8, 48]);
        assert!(grid.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pose_disk_radius_one_is_a_cross() {
        let track = PoseTrack {
            keypoints: vec![Keypoint { x: 8.0, y: 8.0, visible: true }],
        };
        let clip = rasterize_pose(&track, 3, 16, 16, 1.0, 8).unwrap();
        let mut lit = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                if clip.pixel(0, 0, y, x) > 0.0 {
                    lit.push((y, x));
                }
            }
        }
        assert_eq!(lit, vec![(7, 8), (8, 7), (8, 8), (8, 9), (9, 8)]);
    }

    #[test]
    fn pose_out_of_bounds_is_an_error() {
        let track = PoseTrack {
            keypoints: vec![Keypoint { x: 16.0, y: 3.0, visible: true }],
        };
        assert!(rasterize_pose(&track, 3, 16, 16, 2.0, 8).is_err());
        let hidden = PoseTrack {
            keypoints: vec![Keypoint { x: 16.0, y: 3.0, visible: false }],
        };
        let clip = rasterize_pose(&hidden, 3, 16, 16, 2.0, 8).unwrap();
        assert!(clip.frames.data().iter().all(|&v| v == 0.0));
    }
}
