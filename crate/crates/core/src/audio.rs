//! Audio context packing and gated, frame-local audio cross-attention.

use numcore::{Graph, Tensor, Var};

use crate::codec::TEMPORAL_STRIDE;
use crate::error::{shape_err, Error, Result};

/// Initial value of every gate entry.
pub const GATE_INIT: f64 = 1e-5;

/// Per-step audio features `[L × F]` sampled at `rate` per second.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub feats: Tensor,
    pub rate: f64,
}

impl AudioFeatures {
    pub fn new(feats: Tensor, rate: f64) -> Result<Self> {
        if feats.rank() != 2 || !(rate > 0.0) {
            return Err(shape_err!("audio features must be [L x F] with positive rate"));
        }
        if !feats.all_finite() {
            return Err(Error::Numeric("non-finite audio features".into()));
        }
        Ok(Self { feats, rate })
    }

    pub fn len(&self) -> usize {
        self.feats.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.rate
    }
}

/// Linearly resamples features onto video-frame timestamps `k / fps`, `k < frames`.
pub fn interpolate_to_fps(audio: &AudioFeatures, fps: f64, frames: usize) -> Result<Tensor> {
    let (l, f) = (audio.len(), audio.dim());
    let last = (frames.max(1) - 1) as f64 / fps * audio.rate;
    // One sample of slack past the final feature.
    if last > l as f64 {
        return Err(shape_err!(
            "audio of {:.3}s does not cover {frames} frames at {fps} fps",
            audio.duration()
        ));
    }
    let src = audio.feats.data();
    let mut out = Vec::with_capacity(frames * f);
    for k in 0..frames {
        let pos = (k as f64 / fps * audio.rate).min((l - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(l - 1);
        let frac = pos - i0 as f64;
        for c in 0..f {
            let (a, b) = (src[i0 * f + c], src[i1 * f + c]);
            out.push(if frac == 0.0 { a } else { a + (b - a) * frac });
        }
    }
    Ok(Tensor::new(vec![frames, f], out)?)
}

/// Packed audio tokens for one sequence plus the frame-local attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioContext {
    /// `[(n_pseudo_frames + T_l) · w × F]`; pseudo-frame groups are zero.
    pub tokens: Tensor,
    pub window: usize,
    pub n_pseudo_frames: usize,
    pub latent_frames: usize,
    pub tokens_per_frame: usize,
    /// Row-major `[(N′ + N) × N_a]` 0/1 matrix.
    pub attn_mask: Vec<f64>,
}

impl AudioContext {
    pub fn n_audio_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn n_video_rows(&self) -> usize {
        (self.n_pseudo_frames + self.latent_frames) * self.tokens_per_frame
    }

    /// Column range admissible for sequence row `row`.
    pub fn window_of(&self, row: usize) -> std::ops::Range<usize> {
        let group = row / self.tokens_per_frame;
        group * self.window..(group + 1) * self.window
    }
}

/// Gathers, for every latent frame `k`, the `w` per-frame features centred on
/// frame `k · s` (edges replicated), prepends `n_pseudo_frames` zero groups and
/// builds the mask letting each latent frame's tokens see only its own group.
pub fn pack_context(
    frame_feats: &Tensor,
    window: usize,
    stride: usize,
    n_pseudo_frames: usize,
    tokens_per_frame: usize,
) -> Result<AudioContext> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("audio window must be odd, got {window}")));
    }
    if stride != TEMPORAL_STRIDE {
        return Err(Error::Config(format!(
            "audio stride {stride} must equal the temporal compression {TEMPORAL_STRIDE}"
        )));
    }
    if frame_feats.rank() != 2 {
        return Err(shape_err!("frame features must be [T x F], got {:?}", frame_feats.shape()));
    }
    let (t, f) = (frame_feats.shape()[0], frame_feats.shape()[1]);
    if t % stride != 0 {
        return Err(shape_err!("{t} frames not divisible by stride {stride}"));
    }
    if tokens_per_frame == 0 {
        return Err(shape_err!("tokens_per_frame must be positive"));
    }
    let latent = t / stride;
    let half = (window / 2) as isize;
    let groups = n_pseudo_frames + latent;
    let mut tokens = vec![0.0; groups * window * f];
    for k in 0..latent {
        let anchor = (k * stride) as isize;
        for (slot, off) in (-half..=half).enumerate() {
            let src = (anchor + off).clamp(0, t as isize - 1) as usize;
            let dst = ((n_pseudo_frames + k) * window + slot) * f;
            tokens[dst..dst + f].copy_from_slice(frame_feats.row(src));
        }
    }
    let rows = groups * tokens_per_frame;
    let cols = groups * window;
    let mut attn_mask = vec![0.0; rows * cols];
    for r in 0..rows {
        let g = r / tokens_per_frame;
        attn_mask[r * cols + g * window..r * cols + (g + 1) * window].fill(1.0);
    }
    Ok(AudioContext {
        tokens: Tensor::new(vec![cols, f], tokens)?,
        window,
        n_pseudo_frames,
        latent_frames: latent,
        tokens_per_frame,
        attn_mask,
    })
}

/// Graph handles of one audio cross-attention site.
#[derive(Debug, Clone, Copy)]
pub struct AudioAttnVars {
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
    pub gate: Var,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// Projects packed audio tokens `[N_a × F]` into the hidden width with the shared projector.
pub fn project_audio(g: &mut Graph, ctx: &AudioContext, proj_w: Var, proj_b: Var) -> Result<Var> {
    let a = g.constant(ctx.tokens.clone());
    linear(g, a, proj_w, proj_b)
}

/// `softmax(QKᵀ/√d_k + log M)·V` followed by the output projection, with queries
/// from the (normalized) sequence rows and keys/values from the projected audio.
pub fn masked_cross_attention(
    g: &mut Graph,
    h: Var,
    audio: Var,
    ctx: &AudioContext,
    p: &AudioAttnVars,
    heads: usize,
) -> Result<Var> {
    let rows = g.shape(h)[0];
    if rows != ctx.n_video_rows() || g.shape(audio)[0] != ctx.n_audio_tokens() {
        return Err(shape_err!(
            "audio attention: {rows} sequence rows / {} audio rows vs context {}x{}",
            g.shape(audio)[0],
            ctx.n_video_rows(),
            ctx.n_audio_tokens()
        ));
    }
    let n = g.layernorm(h, p.norm_gain, p.norm_bias, 1e-5)?;
    let q = linear(g, n, p.q_w, p.q_b)?;
    let k = linear(g, audio, p.k_w, p.k_b)?;
    let v = linear(g, audio, p.v_w, p.v_b)?;
    let a = g.attention(q, k, v, heads, Some(&ctx.attn_mask))?;
    linear(g, a, p.o_w, p.o_b)
}

/// `h_o = h_i + F_attn(h_i, a) ⊙ g`.
pub fn gated_inject(
    g: &mut Graph,
    h: Var,
    audio: Var,
    ctx: &AudioContext,
    p: &AudioAttnVars,
    heads: usize,
) -> Result<Var> {
    let a = masked_cross_attention(g, h, audio, ctx, p, heads)?;
    let gated = g.mul_row(a, p.gate)?;
    Ok(g.add(h, gated)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(vals: &[f64]) -> Tensor {
        Tensor::new(vec![vals.len(), 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_identity_when_rates_match() {
        let feats: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let a = AudioFeatures::new(column(&feats), 8.0).unwrap();
        let out = interpolate_to_fps(&a, 8.0, 16).unwrap();
        assert_eq!(out.data(), &feats[..16]);
    }

    #[test]
    fn interpolation_of_a_ramp_at_double_rate_steps_by_two() {
        let ramp: Vec<f64> = (0..32).map(f64::from).collect();
        let a = AudioFeatures::new(column(&ramp), 16.0).unwrap();
        let out = interpolate_to_fps(&a, 8.0, 16).unwrap();
        let want: Vec<f64> = (0..16).map(|k| 2.0 * k as f64).collect();
        assert_eq!(out.data(), want.as_slice());
        // Half-way between samples at 1.5x rate.
        let a = AudioFeatures::new(column(&ramp), 12.0).unwrap();
        let out = interpolate_to_fps(&a, 8.0, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 1.5, 3.0, 4.5]);
    }

    #[test]
    fn interpolation_of_constant_is_constant() {
        let a = AudioFeatures::new(Tensor::full(&[64, 3], 0.25), 32.0).unwrap();
        let out = interpolate_to_fps(&a, 8.0, 16).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn short_audio_is_rejected() {
        let a = AudioFeatures::new(Tensor::zeros(&[10, 2]), 8.0).unwrap();
        assert!(interpolate_to_fps(&a, 8.0, 16).is_err());
        // One sample of slack is tolerated.
        let a = AudioFeatures::new(Tensor::zeros(&[15, 2]), 8.0).unwrap();
        assert!(interpolate_to_fps(&a, 8.0, 16).is_ok());
    }

    #[test]
    fn hand_indexed_window_of_three() {
        let feats = column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let ctx = pack_context(&feats, 3, 4, 0, 1).unwrap();
        assert_eq!(ctx.tokens.data(), &[0.0, 0.0, 1.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn window_one_takes_the_anchor_row() {
        let feats: Vec<f64> = (0..16).map(f64::from).collect();
        let ctx = pack_context(&column(&feats), 1, 4, 0, 2).unwrap();
        assert_eq!(ctx.tokens.data(), &[0.0, 4.0, 8.0, 12.0]);
    }

    #[test]
    fn pseudo_groups_are_zero_and_counted() {
        let feats = Tensor::full(&[16, 8], 1.0);
        let ctx = pack_context(&feats, 5, 4, 2, 64).unwrap();
        assert_eq!(ctx.n_audio_tokens(), 30);
        assert!(ctx.tokens.data()[..10 * 8].iter().all(|&v| v == 0.0));
        assert!(ctx.tokens.data()[10 * 8..].iter().all(|&v| v == 1.0));
        let cols = 30;
        for r in 0..ctx.n_video_rows() {
            let row = &ctx.attn_mask[r * cols..(r + 1) * cols];
            assert_eq!(row.iter().sum::<f64>(), 5.0);
            let range = ctx.window_of(r);
            for (c, &m) in row.iter().enumerate() {
                assert_eq!(m == 1.0, range.contains(&c));
            }
        }
        // A video token of latent frame 1 sees group 2 + 1.
        assert_eq!(ctx.window_of(3 * 64 + 5), 15..20);
    }

    #[test]
    fn packing_rejects_bad_arguments() {
        let feats = Tensor::zeros(&[16, 2]);
        assert!(matches!(pack_context(&feats, 4, 4, 0, 1), Err(Error::Config(_))));
        assert!(pack_context(&feats, 5, 2, 0, 1).is_err());
        assert!(pack_context(&Tensor::zeros(&[14, 2]), 5, 4, 0, 1).is_err());
    }
}
