//! Toy multimodal diffusion transformer predicting flow velocities.
//!
//! Text and video tokens keep separate weights in the dual-stream blocks and
//! meet in one joint self-attention; single-stream blocks then run over the
//! video (and pseudo-frame) tokens alone. Audio enters through gated,
//! frame-local cross-attention after each dual-stream block.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use numcore::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{gated_inject, pack_context, project_audio, AudioAttnVars, AudioContext, AudioFeatures, GATE_INIT};
use crate::audio::interpolate_to_fps;
use crate::codec::{Clip, Codec, Geometry, LatentGrid, TEMPORAL_STRIDE};
use crate::condition::{conditioning, ConditionSpec, LatentSequence, MASK_CHANNELS};
use crate::error::{shape_err, Error, Result};

const ROPE_BASE: f64 = 10_000.0;
const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeStrategy {
    /// Pseudo frames take `t̂ = 0..n_pf`, video continues after them.
    Native,
    /// Pseudo frames take `t̂ = −1, −2, …`, video starts at 0.
    TemporalShift,
    /// Temporal shift plus a `(H_l, W_l)` offset on pseudo-frame `(ĥ, ŵ)`.
    SpatiotemporalShift,
}

impl RopeStrategy {
    pub const ALL: [RopeStrategy; 3] = [
        RopeStrategy::Native,
        RopeStrategy::TemporalShift,
        RopeStrategy::SpatiotemporalShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RopeStrategy::Native => "native",
            RopeStrategy::TemporalShift => "temporal_shift",
            RopeStrategy::SpatiotemporalShift => "spatiotemporal_shift",
        }
    }
}

impl fmt::Display for RopeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RopeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RopeStrategy::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rope strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioPlacement {
    DualOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub n_dual: usize,
    pub n_single: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub rope_strategy: RopeStrategy,
    pub audio_placement: AudioPlacement,
    /// Audio context window `w` (odd).
    pub window: usize,
    /// Audio feature width `F`.
    pub audio_dim: usize,
    /// Latent token width `D`.
    pub token_dim: usize,
    pub prediction: Prediction,
}

/// What the output head regresses. With `Data` the head predicts clean tokens
/// `x̂` and the returned velocity is `(x̂ − x_t) / max(1 − t, DATA_T_CLAMP)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Velocity,
    #[default]
    Data,
}

pub const DATA_T_CLAMP: f64 = 0.05;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            n_dual: 3,
            n_single: 1,
            heads: 4,
            vocab: 64,
            max_text_len: 8,
            rope_strategy: RopeStrategy::Native,
            audio_placement: AudioPlacement::DualOnly,
            window: 5,
            audio_dim: 8,
            token_dim: 48,
            prediction: Prediction::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible into {} heads", self.hidden, self.heads));
        }
        let dk = self.head_dim();
        if dk % 2 != 0 || dk < 8 {
            return bad(format!("head width {dk} must be even and at least 8 for 3-axis rotary"));
        }
        if self.window % 2 == 0 {
            return bad(format!("audio window {} must be odd", self.window));
        }
        if self.vocab == 0 || self.max_text_len == 0 || self.token_dim == 0 || self.audio_dim == 0 {
            return bad("vocab, max_text_len, token_dim and audio_dim must be positive".into());
        }
        if self.n_dual == 0 {
            return bad("at least one dual-stream block is required".into());
        }
        Ok(())
    }

    /// Rotary pairs per head given to `(t̂, ĥ, ŵ)`.
    pub fn rope_split(&self) -> (usize, usize, usize) {
        let dk = self.head_dim();
        let hw = 2 * (dk / 8);
        ((dk - 2 * hw) / 2, hw / 2, hw / 2)
    }

    /// Block indices that carry an audio attention site.
    pub fn audio_sites(&self) -> Vec<usize> {
        let n = match self.audio_placement {
            AudioPlacement::DualOnly => self.n_dual,
            AudioPlacement::All => self.n_dual + self.n_single,
        };
        (0..n).collect()
    }

    fn site_prefix(&self, block: usize) -> String {
        if block < self.n_dual {
            format!("audio.dual.{block}")
        } else {
            format!("audio.single.{}", block - self.n_dual)
        }
    }

    pub fn input_width(&self) -> usize {
        2 * self.token_dim + MASK_CHANNELS
    }
}

/// Parameter partition used when merging checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Base,
    Audio,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Base => 0,
            ParamGroup::Audio => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Base),
            1 => Some(ParamGroup::Audio),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Const(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    init: Init,
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, group: ParamGroup) {
    linear_specs_with(out, prefix, fan_in, fan_out, group, Init::Normal(1.0 / (fan_in as f64).sqrt()));
}

fn linear_specs_with(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, group: ParamGroup, init: Init) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![fan_in, fan_out],
        group,
        init,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![fan_out],
        group,
        init: Init::Zeros,
    });
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, width: usize, group: ParamGroup) {
    out.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![width],
        group,
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![width],
        group,
        init: Init::Zeros,
    });
}

fn stream_specs(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    let b = ParamGroup::Base;
    norm_specs(out, &format!("{prefix}.ln1"), h, b);
    linear_specs(out, &format!("{prefix}.qkv"), h, 3 * h, b);
    // Residual branches start closed so every block begins as the identity.
    linear_specs_with(out, &format!("{prefix}.out"), h, h, b, Init::Zeros);
    norm_specs(out, &format!("{prefix}.ln2"), h, b);
    linear_specs(out, &format!("{prefix}.mlp1"), h, MLP_RATIO * h, b);
    linear_specs_with(out, &format!("{prefix}.mlp2"), MLP_RATIO * h, h, b, Init::Zeros);
}

fn param_specs(cfg: &ModelConfig, with_audio: bool) -> Vec<ParamSpec> {
    let h = cfg.hidden;
    let b = ParamGroup::Base;
    let mut out = Vec::new();
    linear_specs(&mut out, "embed.in", cfg.input_width(), h, b);
    out.push(ParamSpec {
        name: "text.embed".into(),
        shape: vec![cfg.vocab, h],
        group: b,
        init: Init::Normal(1.0),
    });
    out.push(ParamSpec {
        name: "text.pos".into(),
        shape: vec![cfg.max_text_len, h],
        group: b,
        init: Init::Normal(0.1),
    });
    for (w, bias, fan_in) in [("time.w1", "time.b1", h), ("time.w2", "time.b2", h)] {
        out.push(ParamSpec {
            name: w.into(),
            shape: vec![fan_in, h],
            group: b,
            init: Init::Normal(1.0 / (fan_in as f64).sqrt()),
        });
        out.push(ParamSpec {
            name: bias.into(),
            shape: vec![h],
            group: b,
            init: Init::Zeros,
        });
    }
    for i in 0..cfg.n_dual {
        stream_specs(&mut out, &format!("dual.{i}.txt"), h);
        stream_specs(&mut out, &format!("dual.{i}.vid"), h);
    }
    for j in 0..cfg.n_single {
        stream_specs(&mut out, &format!("single.{j}"), h);
    }
    norm_specs(&mut out, "head.ln", h, b);
    linear_specs_with(&mut out, "head", h, cfg.token_dim, b, Init::Zeros);
    if with_audio {
        let a = ParamGroup::Audio;
        linear_specs(&mut out, "audio.proj", cfg.audio_dim, h, a);
        for site in cfg.audio_sites() {
            let p = cfg.site_prefix(site);
            norm_specs(&mut out, &format!("{p}.ln"), h, a);
            for proj in ["q", "k", "v", "o"] {
                linear_specs(&mut out, &format!("{p}.{proj}"), h, h, a);
            }
            out.push(ParamSpec {
                name: format!("{p}.gate"),
                shape: vec![h],
                group: a,
                init: Init::Const(GATE_INIT),
            });
        }
    }
    out
}

/// One named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Named parameters in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Param>,
}

impl ModelParams {
    /// Fresh parameters; `with_audio = false` builds the audio-free architecture.
    pub fn init(cfg: &ModelConfig, with_audio: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg, with_audio) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(v) => vec![v; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..n).map(|_| d.sample(&mut rng)).collect()
                }
            };
            tensors.insert(
                spec.name,
                Param {
                    tensor: Tensor::new(spec.shape, data)?,
                    group: spec.group,
                },
            );
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn has_audio(&self) -> bool {
        self.tensors.values().any(|p| p.group == ParamGroup::Audio)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.keys().map(String::as_str).collect()
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Drops every audio-module tensor.
    pub fn without_audio(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(_, p)| p.group == ParamGroup::Base)
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.tensors
            .values()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Checks names and shapes against the architecture of `cfg`.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let want = param_specs(cfg, self.has_audio());
        if want.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, architecture expects {}",
                self.tensors.len(),
                want.len()
            )));
        }
        for s in want {
            let p = self
                .tensors
                .get(&s.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", s.name)))?;
            if p.tensor.shape() != s.shape.as_slice() || p.group != s.group {
                return Err(shape_err!("parameter {} has shape {:?}, expected {:?}", s.name, p.tensor.shape(), s.shape));
            }
        }
        Ok(())
    }
}

/// Exact parameter counts `(base, audio)` of an architecture.
pub fn count_params(cfg: &ModelConfig) -> (usize, usize) {
    let mut base = 0;
    let mut audio = 0;
    for s in param_specs(cfg, true) {
        let n: usize = s.shape.iter().product();
        match s.group {
            ParamGroup::Base => base += n,
            ParamGroup::Audio => audio += n,
        }
    }
    (base, audio)
}

/// Per-site mean `|g|`, as `(block index, value)` in block order.
pub fn gate_norm_report(params: &ModelParams, cfg: &ModelConfig) -> Vec<(usize, f64)> {
    cfg.audio_sites()
        .into_iter()
        .filter_map(|site| {
            let gate = params.get(&format!("{}.gate", cfg.site_prefix(site))).ok()?;
            let m = gate.data().iter().map(|v| v.abs()).sum::<f64>() / gate.len() as f64;
            Some((site, m))
        })
        .collect()
}

/// Graph handles for every parameter.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
    has_audio: bool,
}

impl ParamVars {
    /// Inserts all parameters as leaves; `trainable` marks them for gradients.
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(n, p)| {
                let t = if trainable { p.tensor.clone().with_grad() } else { p.tensor.clone() };
                (n.clone(), if trainable { g.leaf(t) } else { g.constant(t) })
            })
            .collect();
        Self {
            vars,
            has_audio: params.has_audio(),
        }
    }

    /// Wraps existing vars, e.g. the inputs of a gradient check. `names` must
    /// be in the same order as `vars`.
    pub fn from_vars(names: &[String], vars: &[Var], has_audio: bool) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
            has_audio,
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Rotary `(t̂, ĥ, ŵ)` of every row, pseudo frames first.
pub fn rope_indices(seq: &LatentSequence, strategy: RopeStrategy) -> Vec<[i64; 3]> {
    let (hl, wl) = (seq.latent_height, seq.latent_width);
    let npf = seq.n_pseudo_frames;
    let mut out = Vec::with_capacity((npf + seq.latent_frames) * hl * wl);
    for f in 0..npf + seq.latent_frames {
        let pseudo = f < npf;
        let t = match (strategy, pseudo) {
            (RopeStrategy::Native, _) => f as i64,
            (_, true) => -(f as i64) - 1,
            (_, false) => (f - npf) as i64,
        };
        let (oh, ow) = if pseudo && strategy == RopeStrategy::SpatiotemporalShift {
            (hl as i64, wl as i64)
        } else {
            (0, 0)
        };
        for i in 0..hl {
            for j in 0..wl {
                out.push([t, i as i64 + oh, j as i64 + ow]);
            }
        }
    }
    out
}

/// Cos/sin tables `[L × dk/2]` for the rows' positions.
pub fn rope_tables(cfg: &ModelConfig, pos: &[[i64; 3]]) -> (Rc<Vec<f64>>, Rc<Vec<f64>>) {
    let (pt, ph, pw) = cfg.rope_split();
    let half = pt + ph + pw;
    let mut freqs = Vec::with_capacity(half);
    for (axis, n) in [(0usize, pt), (1, ph), (2, pw)] {
        for i in 0..n {
            freqs.push((axis, ROPE_BASE.powf(-(i as f64) / n as f64)));
        }
    }
    let mut cos = Vec::with_capacity(pos.len() * half);
    let mut sin = Vec::with_capacity(pos.len() * half);
    for p in pos {
        for &(axis, f) in &freqs {
            let a = p[axis] as f64 * f;
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    (Rc::new(cos), Rc::new(sin))
}

fn sinusoidal(t: f64, width: usize) -> Tensor {
    let half = width / 2;
    let mut v = vec![0.0; width];
    for i in 0..half {
        let f = (-(ROPE_BASE.ln()) * i as f64 / half as f64).exp();
        v[i] = (TIME_SCALE * t * f).sin();
        v[half + i] = (TIME_SCALE * t * f).cos();
    }
    Tensor::new(vec![1, width], v).expect("positive width")
}

fn linear(g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let w = pv.get(&format!("{prefix}.w"))?;
    let b = pv.get(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

fn norm(g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let gain = pv.get(&format!("{prefix}.g"))?;
    let bias = pv.get(&format!("{prefix}.b"))?;
    Ok(g.layernorm(x, gain, bias, LN_EPS)?)
}

fn mlp_residual(g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let n = norm(g, pv, x, &format!("{prefix}.ln2"))?;
    let h = linear(g, pv, n, &format!("{prefix}.mlp1"))?;
    let h = g.silu(h);
    let h = linear(g, pv, h, &format!("{prefix}.mlp2"))?;
    Ok(g.add(x, h)?)
}

struct Qkv {
    q: Var,
    k: Var,
    v: Var,
}

fn qkv(g: &mut Graph, pv: &ParamVars, x: Var, prefix: &str, width: usize, rope: Option<&(Rc<Vec<f64>>, Rc<Vec<f64>>)>, heads: usize) -> Result<Qkv> {
    let n = norm(g, pv, x, &format!("{prefix}.ln1"))?;
    let all = linear(g, pv, n, &format!("{prefix}.qkv"))?;
    let mut q = g.slice_cols(all, 0, width)?;
    let mut k = g.slice_cols(all, width, 2 * width)?;
    let v = g.slice_cols(all, 2 * width, 3 * width)?;
    if let Some((cos, sin)) = rope {
        q = g.rope(q, cos.clone(), sin.clone(), heads)?;
        k = g.rope(k, cos.clone(), sin.clone(), heads)?;
    }
    Ok(Qkv { q, k, v })
}

fn site_vars(pv: &ParamVars, prefix: &str) -> Result<AudioAttnVars> {
    let p = |s: &str| pv.get(&format!("{prefix}.{s}"));
    Ok(AudioAttnVars {
        norm_gain: p("ln.g")?,
        norm_bias: p("ln.b")?,
        q_w: p("q.w")?,
        q_b: p("q.b")?,
        k_w: p("k.w")?,
        k_b: p("k.b")?,
        v_w: p("v.w")?,
        v_b: p("v.b")?,
        o_w: p("o.w")?,
        o_b: p("o.b")?,
        gate: p("gate")?,
    })
}

fn check_text(cfg: &ModelConfig, text: &[usize]) -> Result<()> {
    if text.is_empty() || text.len() > cfg.max_text_len {
        return Err(Error::Config(format!(
            "text length {} outside 1..={}",
            text.len(),
            cfg.max_text_len
        )));
    }
    if let Some(&bad) = text.iter().find(|&&id| id >= cfg.vocab) {
        return Err(Error::Config(format!("text id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    Ok(())
}

/// Velocity prediction `[(N′ + N) × D]` for one sequence.
///
/// `ctx` is required when the sequence's task uses audio and the parameters
/// carry audio modules; audio-free parameters ignore the audio path entirely.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    seq: &LatentSequence,
    text: &[usize],
    ctx: Option<&AudioContext>,
    t: f64,
) -> Result<Var> {
    check_text(cfg, text)?;
    if seq.token_dim() != cfg.token_dim {
        return Err(shape_err!("sequence token width {} vs model {}", seq.token_dim(), cfg.token_dim));
    }
    if seq.pos.len() != seq.len() {
        return Err(shape_err!("{} positions for {} rows", seq.pos.len(), seq.len()));
    }
    let audio = match (ctx, pv.has_audio) {
        (Some(_), false) => return Err(Error::Config("audio context given to a model without audio modules".into())),
        (None, true) if seq.task_kind.uses_audio() => {
            return Err(Error::Config(format!("{} requires an audio context", seq.task_kind)))
        }
        (Some(c), true) => {
            if c.n_video_rows() != seq.len() || c.window != cfg.window {
                return Err(shape_err!(
                    "audio context covers {} rows with window {}, sequence has {} rows and model window {}",
                    c.n_video_rows(),
                    c.window,
                    seq.len(),
                    cfg.window
                ));
            }
            Some(c)
        }
        _ => None,
    };
    let h = cfg.hidden;

    let x_in = g.constant(seq.channel_concat());
    let mut vid = linear(g, pv, x_in, "embed.in")?;

    let te = g.constant(sinusoidal(t, h));
    let te = {
        let w1 = pv.get("time.w1")?;
        let b1 = pv.get("time.b1")?;
        let w2 = pv.get("time.w2")?;
        let b2 = pv.get("time.b2")?;
        let a = g.matmul(te, w1)?;
        let a = g.add_row(a, b1)?;
        let a = g.silu(a);
        let a = g.matmul(a, w2)?;
        g.add_row(a, b2)?
    };
    let te = g.reshape(te, &[h])?;
    vid = g.add_row(vid, te)?;

    let table = pv.get("text.embed")?;
    let mut txt = g.gather_rows(table, text)?;
    let tpos = pv.get("text.pos")?;
    let tpos = g.slice_rows(tpos, 0, text.len())?;
    txt = g.add(txt, tpos)?;
    txt = g.add_row(txt, te)?;

    let rope = rope_tables(cfg, &seq.pos);
    let audio_tokens = match audio {
        Some(c) => {
            let w = pv.get("audio.proj.w")?;
            let b = pv.get("audio.proj.b")?;
            Some(project_audio(g, c, w, b)?)
        }
        None => None,
    };
    let n_txt = text.len();
    let sites = cfg.audio_sites();

    for i in 0..cfg.n_dual {
        let tp = format!("dual.{i}.txt");
        let vp = format!("dual.{i}.vid");
        let a = qkv(g, pv, txt, &tp, h, None, cfg.heads)?;
        let b = qkv(g, pv, vid, &vp, h, Some(&rope), cfg.heads)?;
        let q = g.concat_rows(&[a.q, b.q])?;
        let k = g.concat_rows(&[a.k, b.k])?;
        let v = g.concat_rows(&[a.v, b.v])?;
        let att = g.attention(q, k, v, cfg.heads, None)?;
        let rows = g.shape(att)[0];
        let at = g.slice_rows(att, 0, n_txt)?;
        let av = g.slice_rows(att, n_txt, rows)?;
        let at = linear(g, pv, at, &format!("{tp}.out"))?;
        let av = linear(g, pv, av, &format!("{vp}.out"))?;
        txt = g.add(txt, at)?;
        vid = g.add(vid, av)?;
        txt = mlp_residual(g, pv, txt, &tp)?;
        vid = mlp_residual(g, pv, vid, &vp)?;
        if let (Some(c), Some(a)) = (audio, audio_tokens) {
            if sites.contains(&i) {
                let p = site_vars(pv, &cfg.site_prefix(i))?;
                vid = gated_inject(g, vid, a, c, &p, cfg.heads)?;
            }
        }
    }
    for j in 0..cfg.n_single {
        let sp = format!("single.{j}");
        let b = qkv(g, pv, vid, &sp, h, Some(&rope), cfg.heads)?;
        let att = g.attention(b.q, b.k, b.v, cfg.heads, None)?;
        let av = linear(g, pv, att, &format!("{sp}.out"))?;
        vid = g.add(vid, av)?;
        vid = mlp_residual(g, pv, vid, &sp)?;
        let block = cfg.n_dual + j;
        if let (Some(c), Some(a)) = (audio, audio_tokens) {
            if sites.contains(&block) {
                let p = site_vars(pv, &cfg.site_prefix(block))?;
                vid = gated_inject(g, vid, a, c, &p, cfg.heads)?;
            }
        }
    }
    let n = norm(g, pv, vid, "head.ln")?;
    let out = linear(g, pv, n, "head")?;
    match cfg.prediction {
        Prediction::Velocity => Ok(out),
        Prediction::Data => {
            let xt = g.constant(seq.noisy.clone());
            let d = g.sub(out, xt)?;
            Ok(g.scale(d, 1.0 / (1.0 - t).max(DATA_T_CLAMP)))
        }
    }
}

/// Parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Output of [`Model::sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub clip: Clip,
    /// Decoded pseudo frames, one clip of `TEMPORAL_STRIDE` frames per reference.
    pub pseudo: Vec<Clip>,
}

impl Model {
    pub fn new(config: ModelConfig, with_audio: bool, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, with_audio, seed)?;
        Ok(Self { config, params })
    }

    /// Latent dims `(T_l, H_l, W_l, D)` of a geometry, checked against the model.
    pub fn dims(&self, geo: &Geometry) -> Result<(usize, usize, usize, usize)> {
        geo.validate()?;
        if geo.token_dim() != self.config.token_dim {
            return Err(shape_err!(
                "geometry token width {} vs model {}",
                geo.token_dim(),
                self.config.token_dim
            ));
        }
        Ok((geo.latent_frames(), geo.latent_height(), geo.latent_width(), geo.token_dim()))
    }

    /// Packs audio for a sequence with `n_pseudo_frames` pseudo frames.
    pub fn audio_context(&self, audio: &AudioFeatures, geo: &Geometry, n_pseudo_frames: usize) -> Result<AudioContext> {
        if audio.dim() != self.config.audio_dim {
            return Err(shape_err!("audio width {} vs model {}", audio.dim(), self.config.audio_dim));
        }
        let per_frame = interpolate_to_fps(audio, f64::from(geo.fps), geo.frames)?;
        pack_context(
            &per_frame,
            self.config.window,
            TEMPORAL_STRIDE,
            n_pseudo_frames,
            geo.tokens_per_frame(),
        )
    }

    /// Velocity without recording gradients.
    pub fn velocity(&self, seq: &LatentSequence, text: &[usize], ctx: Option<&AudioContext>, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &self.params, false);
        let out = forward(&mut g, &pv, &self.config, seq, text, ctx, t)?;
        Ok(g.value(out).clone())
    }

    /// Euler integration of `dx/dt = v_θ` from noise at `t = 0` to `t = 1`.
    ///
    /// Audio is only used when the task takes it and the model has audio modules.
    pub fn sample(
        &self,
        spec: &ConditionSpec,
        text: &[usize],
        audio: Option<&AudioFeatures>,
        geo: &Geometry,
        steps: usize,
        seed: u64,
    ) -> Result<Generated> {
        if steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        let dims = self.dims(geo)?;
        let mut seq = conditioning(spec, dims, self.config.rope_strategy)?;
        let ctx = match audio {
            Some(a) if spec.task_kind.uses_audio() && self.params.has_audio() => {
                Some(self.audio_context(a, geo, seq.n_pseudo_frames)?)
            }
            None if spec.task_kind.uses_audio() && self.params.has_audio() => {
                return Err(Error::Config(format!("{} requires audio features", spec.task_kind)))
            }
            _ => None,
        };
        let (rows, d) = (seq.len(), seq.token_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dt = 1.0 / steps as f64;
        for i in 0..steps {
            seq.noisy = Tensor::new(vec![rows, d], x.clone())?;
            let v = self.velocity(&seq, text, ctx.as_ref(), i as f64 * dt)?;
            if !v.all_finite() {
                return Err(Error::Numeric(format!("non-finite velocity at step {i}")));
            }
            for (xi, vi) in x.iter_mut().zip(v.data()) {
                *xi += dt * vi;
            }
        }
        let codec = Codec::for_geometry(geo);
        let (tl, hl, wl, _) = dims;
        let per = hl * wl * d;
        let np = seq.n_pseudo_frames;
        let video = Tensor::new(vec![tl, hl, wl, d], x[np * per..].to_vec())?;
        let mut clip = codec.decode(&LatentGrid::new(video)?, geo.fps)?;
        clip.clamp_unit();
        let mut pseudo = Vec::with_capacity(np);
        for f in 0..np {
            let frame = Tensor::new(vec![hl, wl, d], x[f * per..(f + 1) * per].to_vec())?;
            let mut c = codec.decode_frame(&frame, geo.fps)?;
            c.clamp_unit();
            pseudo.push(c);
        }
        Ok(Generated { clip, pseudo })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::TaskKind;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            heads: 2,
            n_dual: 1,
            n_single: 1,
            token_dim: 48,
            ..ModelConfig::default()
        }
    }

    fn seq(npf: usize, tl: usize, strategy: RopeStrategy) -> LatentSequence {
        let mut s = LatentSequence {
            noisy: Tensor::zeros(&[(npf + tl) * 4, 48]),
            cond: Tensor::zeros(&[(npf + tl) * 4, 48]),
            mask: Tensor::zeros(&[(npf + tl) * 4, 4]),
            pos: Vec::new(),
            n_pseudo_frames: npf,
            latent_frames: tl,
            latent_height: 2,
            latent_width: 2,
            task_kind: if npf > 0 { TaskKind::R2V } else { TaskKind::T2V },
        };
        s.pos = rope_indices(&s, strategy);
        s
    }

    fn frame_t(pos: &[[i64; 3]], per: usize) -> Vec<i64> {
        pos.iter().step_by(per).map(|p| p[0]).collect()
    }

    #[test]
    fn rope_index_examples() {
        for s in RopeStrategy::ALL {
            assert_eq!(frame_t(&seq(0, 4, s).pos, 4), vec![0, 1, 2, 3]);
        }
        assert_eq!(frame_t(&seq(2, 4, RopeStrategy::Native).pos, 4), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(frame_t(&seq(2, 4, RopeStrategy::TemporalShift).pos, 4), vec![-1, -2, 0, 1, 2, 3]);
        let st = seq(2, 4, RopeStrategy::SpatiotemporalShift).pos;
        assert_eq!(st[0], [-1, 2, 2]);
        assert_eq!(st[3], [-1, 3, 3]);
        assert_eq!(st[8], [0, 0, 0]);
    }

    #[test]
    fn rope_split_defaults() {
        assert_eq!(ModelConfig::default().rope_split(), (4, 2, 2));
        let bad = ModelConfig {
            hidden: 12,
            heads: 2,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn names_are_a_function_of_config() {
        let cfg = small();
        let a = ModelParams::init(&cfg, true, 1).unwrap();
        let b = ModelParams::init(&cfg, true, 2).unwrap();
        assert_eq!(a.names(), b.names());
        assert_ne!(a, b);
        assert!(a.check(&cfg).is_ok());
        assert!(a.without_audio().check(&cfg).is_ok());
        assert!(!a.without_audio().has_audio());
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let cfg = ModelConfig {
            prediction: Prediction::Velocity,
            ..small()
        };
        let mut m = Model::new(cfg, false, 3).unwrap();
        m.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
        let mut s = seq(0, 4, RopeStrategy::Native);
        s.noisy = Tensor::full(&[16, 48], 0.3);
        let v = m.velocity(&s, &[1, 2], None, 0.4).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_head_in_data_mode_points_at_the_origin() {
        let mut m = Model::new(small(), false, 3).unwrap();
        m.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
        let mut s = seq(0, 4, RopeStrategy::Native);
        s.noisy = Tensor::full(&[16, 48], 0.3);
        let v = m.velocity(&s, &[1, 2], None, 0.4).unwrap();
        assert!(v.data().iter().all(|&x| (x + 0.3 / 0.6).abs() < 1e-15));
        let v = m.velocity(&s, &[1, 2], None, 1.0).unwrap();
        assert!(v.data().iter().all(|&x| (x + 0.3 / DATA_T_CLAMP).abs() < 1e-12));
    }

    #[test]
    fn text_errors() {
        let m = Model::new(small(), false, 0).unwrap();
        let s = seq(0, 4, RopeStrategy::Native);
        assert!(matches!(m.velocity(&s, &[], None, 0.0), Err(Error::Config(_))));
        assert!(matches!(m.velocity(&s, &[99], None, 0.0), Err(Error::Config(_))));
        assert!(matches!(m.velocity(&s, &[1; 9], None, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn gate_report_reads_gates() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(&cfg, true, 0).unwrap();
        let r = gate_norm_report(&p, &cfg);
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|&(_, v)| (v - GATE_INIT).abs() < 1e-18));
        p.get_mut("audio.dual.2.gate").unwrap().data_mut().fill(0.5);
        assert_eq!(gate_norm_report(&p, &cfg)[2], (2, 0.5));
    }
}
