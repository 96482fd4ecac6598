//! Channel-wise conditioning: noisy tokens, condition tokens and a presence
//! mask are concatenated along channels, with reference images hosted in
//! pseudo latent frames prepended along time.

use std::fmt;
use std::str::FromStr;

use numcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::{rasterize_pose, Codec, LatentGrid, POSE_RADIUS};
use crate::error::{shape_err, Error, Result};
use crate::model::{rope_indices, RopeStrategy};
use crate::synthdata::SynthSample;

/// Mask channels per token; the presence bit is replicated across them.
pub const MASK_CHANNELS: usize = 4;
/// Weight of the reference reconstruction term in the total loss.
pub const REF_LOSS_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    T2V,
    I2V,
    R2V,
    A2V,
    RA2V,
    RP2V,
    RAP2V,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::T2V,
        TaskKind::I2V,
        TaskKind::R2V,
        TaskKind::A2V,
        TaskKind::RA2V,
        TaskKind::RP2V,
        TaskKind::RAP2V,
    ];

    pub fn uses_references(self) -> bool {
        matches!(self, TaskKind::R2V | TaskKind::RA2V | TaskKind::RP2V | TaskKind::RAP2V)
    }

    pub fn uses_audio(self) -> bool {
        matches!(self, TaskKind::A2V | TaskKind::RA2V | TaskKind::RAP2V)
    }

    pub fn uses_pose(self) -> bool {
        matches!(self, TaskKind::RP2V | TaskKind::RAP2V)
    }

    pub fn needs_first_frame(self) -> bool {
        matches!(self, TaskKind::I2V | TaskKind::A2V)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2V => "T2V",
            TaskKind::I2V => "I2V",
            TaskKind::R2V => "R2V",
            TaskKind::A2V => "A2V",
            TaskKind::RA2V => "RA2V",
            TaskKind::RP2V => "RP2V",
            TaskKind::RAP2V => "RAP2V",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?}")))
    }
}

/// Which conditions accompany one clip, already in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpec {
    /// Reference latent frames `[H_l × W_l × D]`, human first then object.
    pub references: Vec<Tensor>,
    pub pose: Option<LatentGrid>,
    /// Latent frame `[H_l × W_l × D]` of the first video frame.
    pub first_frame: Option<Tensor>,
    pub task_kind: TaskKind,
}

impl ConditionSpec {
    pub fn text_only() -> Self {
        Self {
            references: Vec::new(),
            pose: None,
            first_frame: None,
            task_kind: TaskKind::T2V,
        }
    }

    /// Conditions of `task` taken from a labelled sample. `with_pose = false`
    /// drops the pose even when the task allows it.
    pub fn from_sample(sample: &SynthSample, task: TaskKind, codec: &Codec, with_pose: bool) -> Result<Self> {
        let references = if task.uses_references() {
            vec![
                codec.encode_image(&sample.ref_human)?,
                codec.encode_image(&sample.ref_object)?,
            ]
        } else {
            Vec::new()
        };
        let pose = if task.uses_pose() && with_pose {
            let c = &sample.clip;
            let raster = rasterize_pose(&sample.pose, c.channels(), c.height(), c.width(), POSE_RADIUS, c.fps)?;
            Some(codec.encode(&raster)?)
        } else {
            None
        };
        let first_frame = if task.needs_first_frame() {
            let c = &sample.clip;
            let img = Tensor::new(vec![c.channels(), c.height(), c.width()], c.frame(0).to_vec())?;
            Some(codec.encode_image(&img)?)
        } else {
            None
        };
        Ok(Self {
            references,
            pose,
            first_frame,
            task_kind: task,
        })
    }

    pub fn n_pseudo_frames(&self) -> usize {
        self.references.len()
    }

    /// Checks the fields against the task kind and the latent geometry `(T_l, H_l, W_l, D)`.
    pub fn validate(&self, dims: (usize, usize, usize, usize)) -> Result<()> {
        let (tl, hl, wl, d) = dims;
        let k = self.task_kind;
        if self.references.len() > 2 {
            return Err(Error::Config(format!("{} references given, at most 2", self.references.len())));
        }
        if k.uses_references() == self.references.is_empty() {
            return Err(Error::Config(format!(
                "{k} with {} references is inconsistent",
                self.references.len()
            )));
        }
        if self.pose.is_some() && !k.uses_pose() {
            return Err(Error::Config(format!("{k} does not take a pose")));
        }
        if k.needs_first_frame() && self.first_frame.is_none() {
            return Err(Error::Config(format!("{k} requires a first frame")));
        }
        if k == TaskKind::T2V && self.first_frame.is_some() {
            return Err(Error::Config("T2V takes no first frame".into()));
        }
        for r in self.references.iter().chain(self.first_frame.iter()) {
            if r.shape() != [hl, wl, d] {
                return Err(shape_err!("condition frame {:?}, expected {:?}", r.shape(), [hl, wl, d]));
            }
        }
        if let Some(p) = &self.pose {
            if p.tokens.shape() != [tl, hl, wl, d] {
                return Err(shape_err!("pose grid {:?}, expected {:?}", p.tokens.shape(), [tl, hl, wl, d]));
            }
        }
        Ok(())
    }
}

/// Model input rows `[x′ ∥ x_t]`, `[r ∥ p]`, `[m′ ∥ m]` plus rotary positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub noisy: Tensor,
    pub cond: Tensor,
    pub mask: Tensor,
    pub pos: Vec<[i64; 3]>,
    pub n_pseudo_frames: usize,
    pub latent_frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub task_kind: TaskKind,
}

impl LatentSequence {
    pub fn tokens_per_frame(&self) -> usize {
        self.latent_height * self.latent_width
    }

    pub fn n_pseudo_rows(&self) -> usize {
        self.n_pseudo_frames * self.tokens_per_frame()
    }

    pub fn len(&self) -> usize {
        self.noisy.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.noisy.shape()[1]
    }

    /// `[noisy ∥ cond ∥ mask]` per row, `D + D + 4` channels.
    pub fn channel_concat(&self) -> Tensor {
        let (l, d) = (self.len(), self.token_dim());
        let w = 2 * d + MASK_CHANNELS;
        let mut out = Vec::with_capacity(l * w);
        for r in 0..l {
            out.extend_from_slice(self.noisy.row(r));
            out.extend_from_slice(self.cond.row(r));
            out.extend_from_slice(self.mask.row(r));
        }
        Tensor::new(vec![l, w], out).expect("consistent parts")
    }
}

/// Regression targets of one assembled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTargets {
    /// `[N′ × D]`, `r − noise_pseudo`; absent without references.
    pub pseudo: Option<Tensor>,
    /// `[N × D]`, `x₁ − noise_video`.
    pub video: Tensor,
    /// The single timestep shared by both parts.
    pub t: f64,
}

/// Condition rows, mask rows and positions for a spec; the noisy part is left zero.
pub fn conditioning(
    spec: &ConditionSpec,
    dims: (usize, usize, usize, usize),
    strategy: RopeStrategy,
) -> Result<LatentSequence> {
    spec.validate(dims)?;
    let (tl, hl, wl, d) = dims;
    let per = hl * wl;
    let npf = spec.n_pseudo_frames();
    let rows = (npf + tl) * per;
    // Unconditioned fill: encode(black) is exactly zero under the patchify codec.
    let mut cond = vec![0.0; rows * d];
    let mut present = vec![false; rows];
    for (i, r) in spec.references.iter().enumerate() {
        cond[i * per * d..(i + 1) * per * d].copy_from_slice(r.data());
        present[i * per..(i + 1) * per].fill(true);
    }
    let video0 = npf * per;
    if let Some(p) = &spec.pose {
        cond[video0 * d..].copy_from_slice(p.tokens.data());
        present[video0..].fill(true);
    }
    if let Some(f) = &spec.first_frame {
        cond[video0 * d..(video0 + per) * d].copy_from_slice(f.data());
        present[video0..video0 + per].fill(true);
    }
    let mask: Vec<f64> = present
        .iter()
        .flat_map(|&p| [if p { 1.0 } else { 0.0 }; MASK_CHANNELS])
        .collect();
    let mut seq = LatentSequence {
        noisy: Tensor::zeros(&[rows, d]),
        cond: Tensor::new(vec![rows, d], cond)?,
        mask: Tensor::new(vec![rows, MASK_CHANNELS], mask)?,
        pos: Vec::new(),
        n_pseudo_frames: npf,
        latent_frames: tl,
        latent_height: hl,
        latent_width: wl,
        task_kind: spec.task_kind,
    };
    seq.pos = rope_indices(&seq, strategy);
    Ok(seq)
}

/// Builds the training input at timestep `t`: `x_t = (1−t)·noise + t·x₁` on the
/// video rows and the same interpolation towards the clean references on the
/// pseudo rows.
pub fn assemble(
    x1: &LatentGrid,
    spec: &ConditionSpec,
    t: f64,
    noise: &Tensor,
    strategy: RopeStrategy,
) -> Result<(LatentSequence, FlowTargets)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("timestep {t} outside [0, 1]")));
    }
    let dims = (x1.latent_frames(), x1.tokens.shape()[1], x1.tokens.shape()[2], x1.token_dim());
    let mut seq = conditioning(spec, dims, strategy)?;
    let (rows, d) = (seq.len(), seq.token_dim());
    if noise.shape() != [rows, d] {
        return Err(shape_err!("noise {:?}, expected {:?}", noise.shape(), [rows, d]));
    }
    let np = seq.n_pseudo_rows();
    let clean: Vec<f64> = spec
        .references
        .iter()
        .flat_map(|r| r.data().iter().copied())
        .chain(x1.tokens.data().iter().copied())
        .collect();
    let nz = noise.data();
    let noisy: Vec<f64> = clean.iter().zip(nz).map(|(c, n)| (1.0 - t) * n + t * c).collect();
    let target: Vec<f64> = clean.iter().zip(nz).map(|(c, n)| c - n).collect();
    seq.noisy = Tensor::new(vec![rows, d], noisy)?;
    let pseudo = if np == 0 {
        None
    } else {
        Some(Tensor::new(vec![np, d], target[..np * d].to_vec())?)
    };
    let video = Tensor::new(vec![rows - np, d], target[np * d..].to_vec())?;
    Ok((seq, FlowTargets { pseudo, video, t }))
}

/// Splits predictions at the pseudo/video boundary. The pseudo part is `None`
/// when there are no pseudo frames.
pub fn split_outputs(
    v_pred: &Tensor,
    n_pseudo_frames: usize,
    tokens_per_frame: usize,
) -> Result<(Option<Tensor>, Tensor)> {
    let np = n_pseudo_frames * tokens_per_frame;
    if v_pred.rank() != 2 || v_pred.shape()[0] <= np {
        return Err(shape_err!(
            "prediction {:?} cannot hold {np} pseudo rows plus video",
            v_pred.shape()
        ));
    }
    let (rows, d) = (v_pred.shape()[0], v_pred.shape()[1]);
    let data = v_pred.data();
    let video = Tensor::new(vec![rows - np, d], data[np * d..].to_vec())?;
    let pseudo = if np == 0 {
        None
    } else {
        Some(Tensor::new(vec![np, d], data[..np * d].to_vec())?)
    };
    Ok((pseudo, video))
}

/// Loss terms of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub fm: f64,
    pub fm_ref: f64,
    pub total: f64,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `L_FM` on the video rows, `L_FM-ref` on the pseudo rows, `total = L_FM + 1·L_FM-ref`.
pub fn loss(v_pred: &Tensor, targets: &FlowTargets) -> Result<LossTerms> {
    let d = targets.video.shape()[1];
    let np = targets.pseudo.as_ref().map_or(0, |p| p.shape()[0]);
    if v_pred.rank() != 2 || v_pred.shape() != [np + targets.video.shape()[0], d] {
        return Err(shape_err!(
            "prediction {:?} vs {np} pseudo + {:?} video rows",
            v_pred.shape(),
            targets.video.shape()
        ));
    }
    let data = v_pred.data();
    let fm = mse(&data[np * d..], targets.video.data());
    let fm_ref = match &targets.pseudo {
        Some(p) => mse(&data[..np * d], p.data()),
        None => 0.0,
    };
    Ok(LossTerms {
        fm,
        fm_ref,
        total: fm + REF_LOSS_WEIGHT * fm_ref,
    })
}

/// Graph form of [`loss`]; returns `(total, L_FM, L_FM-ref)` where the last is
/// `None` without pseudo frames.
pub fn loss_graph(g: &mut Graph, v_pred: Var, targets: &FlowTargets) -> Result<(Var, Var, Option<Var>)> {
    let rows = g.shape(v_pred)[0];
    let nv = targets.video.shape()[0];
    let np = targets.pseudo.as_ref().map_or(0, |p| p.shape()[0]);
    if rows != np + nv {
        return Err(shape_err!("prediction has {rows} rows, targets {np} + {nv}"));
    }
    let video = g.slice_rows(v_pred, np, rows)?;
    let tv = g.constant(targets.video.clone());
    let fm = g.mse(video, tv)?;
    let Some(tp) = &targets.pseudo else {
        return Ok((fm, fm, None));
    };
    let pseudo = g.slice_rows(v_pred, 0, np)?;
    let tp = g.constant(tp.clone());
    let fr = g.mse(pseudo, tp)?;
    let weighted = g.scale(fr, REF_LOSS_WEIGHT);
    let total = g.add(fm, weighted)?;
    Ok((total, fm, Some(fr)))
}
