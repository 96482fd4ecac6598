//! Decoupled-then-joint training: specialist R2V and A2V stages, a weight
//! merge, then joint RA2V and RAP2V fine-tuning.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use numcore::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, Checkpoint, RngState, StageCursor};
use crate::codec::{Codec, Geometry};
use crate::condition::{assemble, loss_graph, ConditionSpec, TaskKind};
use crate::config::{EvalConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::{forward, gate_norm_report, Model, ModelConfig, ModelParams, ParamGroup, ParamVars};
use crate::synthdata::{evaluate, generate_one, DeskMetrics, SynthSample, ACTOR_PALETTE};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
/// Steps whose gradient norm exceeds this are skipped.
pub const GRAD_NORM_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageName {
    /// Text and first-frame pretraining standing in for a pretrained backbone.
    BASE,
    R2V,
    A2V,
    MERGE,
    RA2V,
    RAP2V,
}

impl StageName {
    pub const ALL: [StageName; 6] = [
        StageName::BASE,
        StageName::R2V,
        StageName::A2V,
        StageName::MERGE,
        StageName::RA2V,
        StageName::RAP2V,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageName::BASE => "BASE",
            StageName::R2V => "R2V",
            StageName::A2V => "A2V",
            StageName::MERGE => "MERGE",
            StageName::RA2V => "RA2V",
            StageName::RAP2V => "RAP2V",
        }
    }

    /// Task kinds drawn during the stage.
    pub fn tasks(self) -> &'static [TaskKind] {
        match self {
            StageName::BASE => &[TaskKind::T2V, TaskKind::I2V],
            StageName::R2V => &[TaskKind::R2V],
            StageName::A2V => &[TaskKind::A2V],
            StageName::MERGE => &[],
            StageName::RA2V => &[TaskKind::RA2V],
            StageName::RAP2V => &[TaskKind::RAP2V],
        }
    }

    /// Whether the stage trains a model carrying audio modules.
    pub fn with_audio(self) -> bool {
        matches!(self, StageName::A2V | StageName::RA2V | StageName::RAP2V)
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSelector {
    /// Every sample of the stage's stream.
    #[default]
    All,
    /// Only samples whose actor color is in the brightest quartile of the palette.
    HighContrast,
}

fn default_batch() -> usize {
    1
}
fn default_lr() -> f64 {
    3e-5
}
fn default_wd() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    0.6
}
fn default_pose_dropout() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: StageName,
    #[serde(default)]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// MERGE only: weight of the A2V model.
    #[serde(default = "default_alpha")]
    pub alpha_a2v: f64,
    /// Probability of replacing the pose by the unconditioned fill.
    #[serde(default = "default_pose_dropout")]
    pub pose_dropout: f64,
    #[serde(default)]
    pub data: DataSelector,
}

impl StageConfig {
    pub fn new(name: StageName, steps: usize) -> Self {
        Self {
            name,
            steps,
            batch: default_batch(),
            lr: default_lr(),
            weight_decay: default_wd(),
            alpha_a2v: default_alpha(),
            pose_dropout: default_pose_dropout(),
            data: DataSelector::All,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<StageConfig>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let pos = |n: StageName| self.stages.iter().position(|s| s.name == n);
        let count = |n: StageName| self.stages.iter().filter(|s| s.name == n).count();
        for n in [StageName::BASE, StageName::R2V, StageName::A2V, StageName::MERGE, StageName::RAP2V] {
            if count(n) > 1 {
                return bad(format!("stage {n} appears {} times", count(n)));
            }
        }
        if let Some(b) = pos(StageName::BASE) {
            if b != 0 {
                return bad("BASE must be the first stage".into());
            }
        }
        let merge = pos(StageName::MERGE);
        if let Some(m) = merge {
            match (pos(StageName::R2V), pos(StageName::A2V)) {
                (Some(r), Some(a)) if r < m && a < m => {}
                _ => return bad("MERGE needs both R2V and A2V before it".into()),
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if matches!(s.name, StageName::RA2V | StageName::RAP2V) && merge.is_none_or(|m| m > i) {
                return bad(format!("{} must follow MERGE", s.name));
            }
            if matches!(s.name, StageName::R2V | StageName::A2V) && merge.is_some_and(|m| m < i) {
                return bad(format!("{} must precede MERGE", s.name));
            }
            if s.batch == 0 {
                return bad(format!("stage {} has batch 0", s.name));
            }
            if !(s.lr >= 0.0 && s.weight_decay >= 0.0) || !(0.0..=1.0).contains(&s.pose_dropout) {
                return bad(format!("stage {} has invalid lr, weight decay or pose dropout", s.name));
            }
            if s.name == StageName::MERGE && !(0.0..=1.0).contains(&s.alpha_a2v) {
                return bad(format!("merge alpha {} outside [0, 1]", s.alpha_a2v));
            }
        }
        if let Some(p) = pos(StageName::RAP2V) {
            if p + 1 != self.stages.len() {
                return bad("RAP2V must be the last stage".into());
            }
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: String,
    pub step: u64,
    pub fm: f64,
    pub fm_ref: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    /// Mean `|g|` per audio site in block order.
    pub gates: Vec<f64>,
}

impl LogRow {
    pub const HEADER: &'static str = "stage\tstep\tl_fm\tl_fm_ref\ttotal\tgrad_norm\tskipped\tgates";

    pub fn to_tsv(&self) -> String {
        let gates: Vec<String> = self.gates.iter().map(|g| format!("{g:.6e}")).collect();
        format!(
            "{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}",
            self.stage,
            self.step,
            self.fm,
            self.fm_ref,
            self.total,
            self.grad_norm,
            u8::from(self.skipped),
            gates.join(",")
        )
    }
}

/// Labelled evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub task: TaskKind,
    pub metrics: DeskMetrics,
}

/// Where training samples come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fresh samples `generate_one(seed, i, …)` for `i = 0, 1, …`.
    Stream { seed: u64 },
    /// A fixed pool, cycled in order.
    Pool(Vec<SynthSample>),
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn high_contrast(sample: &SynthSample) -> bool {
    let mut bright: Vec<f64> = ACTOR_PALETTE.iter().map(|c| c.iter().sum::<f64>()).collect();
    bright.sort_by(f64::total_cmp);
    let cut = bright[(bright.len() * 3) / 4];
    sample.actor_rgb().iter().sum::<f64>() >= cut
}

struct Feed<'a> {
    source: &'a DataSource,
    geometry: Geometry,
    selector: DataSelector,
    pool: Vec<&'a SynthSample>,
}

impl<'a> Feed<'a> {
    fn new(source: &'a DataSource, geometry: Geometry, stage: &StageConfig) -> Result<Self> {
        let pool: Vec<&SynthSample> = match source {
            DataSource::Pool(all) => all
                .iter()
                .filter(|s| stage.name.tasks().contains(&s.meta.task))
                .filter(|s| stage.data == DataSelector::All || high_contrast(s))
                .collect(),
            DataSource::Stream { .. } => Vec::new(),
        };
        if matches!(source, DataSource::Pool(_)) && pool.is_empty() && stage.steps > 0 {
            return Err(Error::Config(format!(
                "data pool has no samples for stage {} (tasks {:?})",
                stage.name,
                stage.name.tasks()
            )));
        }
        Ok(Self {
            source,
            geometry,
            selector: stage.data,
            pool,
        })
    }

    /// The `i`-th training sample of the stage.
    fn get(&self, i: u64, task: TaskKind) -> Result<SynthSample> {
        match self.source {
            DataSource::Pool(_) => Ok(self.pool[(i % self.pool.len() as u64) as usize].clone()),
            DataSource::Stream { seed } => match self.selector {
                DataSelector::All => generate_one(*seed, i, task, &self.geometry),
                DataSelector::HighContrast => {
                    // Walk forward through the stream, one block of 64 per index.
                    for k in 0..64 {
                        let s = generate_one(*seed, i * 64 + k, task, &self.geometry)?;
                        if high_contrast(&s) {
                            return Ok(s);
                        }
                    }
                    Err(Error::Config("no high-contrast sample found".into()))
                }
            },
        }
    }
}

/// Per-sample loss and gradients.
pub struct SampleGrad {
    pub fm: f64,
    pub fm_ref: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
}

/// Loss and parameter gradients of one conditioned training example.
pub fn sample_gradient(
    model: &Model,
    geo: &Geometry,
    sample: &SynthSample,
    spec: &ConditionSpec,
    t: f64,
    noise: &Tensor,
) -> Result<SampleGrad> {
    let codec = Codec::for_geometry(geo);
    let x1 = codec.encode(&sample.clip)?;
    let (seq, targets) = assemble(&x1, spec, t, noise, model.config.rope_strategy)?;
    let ctx = if spec.task_kind.uses_audio() && model.params.has_audio() {
        Some(model.audio_context(&sample.audio, geo, seq.n_pseudo_frames)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &model.params, true);
    let out = forward(&mut g, &pv, &model.config, &seq, &sample.text_ids, ctx.as_ref(), t)?;
    let (total, fm, fr) = loss_graph(&mut g, out, &targets)?;
    g.backward(total)?;
    let mut grads = BTreeMap::new();
    for (name, &v) in pv.iter() {
        let n = g.value(v).len();
        grads.insert(name.clone(), g.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec));
    }
    Ok(SampleGrad {
        fm: g.value(fm).item(),
        fm_ref: fr.map_or(0.0, |v| g.value(v).item()),
        total: g.value(total).item(),
        grads,
    })
}

/// Decoupled AdamW update of every parameter.
fn adamw_update(params: &mut ModelParams, adam: &mut AdamState, grads: &BTreeMap<String, Vec<f64>>, lr: f64, wd: f64) {
    adam.step += 1;
    let t = adam.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let g = &grads[name];
        let shape = p.tensor.shape().to_vec();
        let m = adam.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let v = adam.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g[i];
            vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let upd = (md[i] / c1) / ((vd[i] / c2).sqrt() + ADAM_EPS);
            *w -= lr * (upd + wd * *w);
        }
    }
}

/// Runs `stage.steps` optimizer steps on `ckpt`, continuing from its cursor.
///
/// R2V and BASE require an audio-free parameter set, the audio stages one with
/// audio modules.
pub fn train_stage(ckpt: &mut Checkpoint, stage: &StageConfig, data: &DataSource) -> Result<Vec<LogRow>> {
    if stage.name == StageName::MERGE {
        return Err(Error::Config("MERGE is not a training stage".into()));
    }
    if ckpt.params.has_audio() != stage.name.with_audio() {
        return Err(Error::Config(format!(
            "stage {} expects {} audio modules",
            stage.name,
            if stage.name.with_audio() { "" } else { "no" }
        )));
    }
    if ckpt.cursor.stage != stage.name.name() {
        ckpt.cursor = StageCursor {
            stage: stage.name.name().into(),
            steps_done: 0,
        };
    }
    let geo = ckpt.geometry;
    let feed = Feed::new(data, geo, stage)?;
    let mut rng: ChaCha8Rng = ckpt.rng.restore();
    let mut model = Model {
        config: ckpt.config.clone(),
        params: std::mem::take(&mut ckpt.params),
    };
    let codec = Codec::for_geometry(&geo);
    let rows_video = geo.video_tokens();
    let d = geo.token_dim();
    let tasks = stage.name.tasks();
    let mut log = Vec::with_capacity(stage.steps);
    let result = (|| -> Result<()> {
        for _ in 0..stage.steps {
            let step = ckpt.cursor.steps_done;
            let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let (mut fm, mut fr, mut tot) = (0.0, 0.0, 0.0);
            for b in 0..stage.batch {
                let task = tasks[rng.random_range(0..tasks.len())];
                let sample = feed.get(step * stage.batch as u64 + b as u64, task)?;
                let with_pose = !(task.uses_pose() && rng.random::<f64>() < stage.pose_dropout);
                let spec = ConditionSpec::from_sample(&sample, task, &codec, with_pose)?;
                let rows = rows_video + geo.pseudo_tokens(spec.n_pseudo_frames());
                let t: f64 = rng.random();
                let noise: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let noise = Tensor::new(vec![rows, d], noise)?;
                let sg = sample_gradient(&model, &geo, &sample, &spec, t, &noise)?;
                fm += sg.fm;
                fr += sg.fm_ref;
                tot += sg.total;
                for (n, gv) in sg.grads {
                    match sum.get_mut(&n) {
                        Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, g)| *a += g),
                        None => {
                            sum.insert(n, gv);
                        }
                    }
                }
            }
            let inv = 1.0 / stage.batch as f64;
            let mut sq = 0.0;
            for gv in sum.values_mut() {
                for g in gv.iter_mut() {
                    *g *= inv;
                    sq += *g * *g;
                }
            }
            let norm = sq.sqrt();
            let skipped = !norm.is_finite() || norm > GRAD_NORM_LIMIT;
            if !skipped {
                adamw_update(&mut model.params, &mut ckpt.adam, &sum, stage.lr, stage.weight_decay);
            }
            ckpt.cursor.steps_done += 1;
            log.push(LogRow {
                stage: stage.name.name().into(),
                step,
                fm: fm * inv,
                fm_ref: fr * inv,
                total: tot * inv,
                grad_norm: norm,
                skipped,
                gates: gate_norm_report(&model.params, &model.config).into_iter().map(|(_, g)| g).collect(),
            });
        }
        Ok(())
    })();
    ckpt.params = model.params;
    ckpt.rng = RngState::capture(&rng);
    result.map(|_| log)
}

/// Audio modules inherited from `a2v`; every base tensor becomes
/// `alpha·a2v + (1 − alpha)·r2v`. Optimizer moments start fresh.
pub fn merge(r2v: &Checkpoint, a2v: &Checkpoint, alpha_a2v: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&alpha_a2v) {
        return Err(Error::Config(format!("merge alpha {alpha_a2v} outside [0, 1]")));
    }
    if r2v.config != a2v.config || r2v.geometry != a2v.geometry {
        return Err(Error::Config("R2V and A2V checkpoints have different configurations".into()));
    }
    if r2v.params.has_audio() {
        return Err(Error::Config("R2V checkpoint carries audio modules".into()));
    }
    if !a2v.params.has_audio() {
        return Err(Error::Config("A2V checkpoint has no audio modules".into()));
    }
    if r2v.params.names_in(ParamGroup::Base) != a2v.params.names_in(ParamGroup::Base) {
        return Err(Error::Config("base parameter names differ between R2V and A2V".into()));
    }
    let mut params = a2v.params.clone();
    for (name, p) in params.tensors.iter_mut() {
        if p.group != ParamGroup::Base {
            continue;
        }
        let r = r2v.params.get(name)?;
        if r.shape() != p.tensor.shape() {
            return Err(Error::Config(format!("parameter {name} differs in shape")));
        }
        for (w, rv) in p.tensor.data_mut().iter_mut().zip(r.data()) {
            *w = alpha_a2v * *w + (1.0 - alpha_a2v) * rv;
        }
    }
    Ok(Checkpoint {
        geometry: a2v.geometry,
        config: a2v.config.clone(),
        params,
        adam: AdamState::default(),
        rng: a2v.rng,
        cursor: StageCursor {
            stage: StageName::RA2V.name().into(),
            steps_done: 0,
        },
    })
}

/// Mean desk metrics of `model` over `eval.samples` held-out samples of `task`.
///
/// Pose metrics are computed only when the task takes a pose and `with_pose` is set.
pub fn evaluate_model(
    model: &Model,
    geo: &Geometry,
    task: TaskKind,
    with_pose: bool,
    eval: &EvalConfig,
) -> Result<DeskMetrics> {
    evaluate_with(model, geo, task, task, with_pose, eval)
}

/// Scores text-only generations against the labels of `task`: the baseline
/// that conditioned models are compared with.
pub fn evaluate_control(model: &Model, geo: &Geometry, task: TaskKind, eval: &EvalConfig) -> Result<DeskMetrics> {
    evaluate_with(model, geo, task, TaskKind::T2V, false, eval)
}

fn evaluate_with(
    model: &Model,
    geo: &Geometry,
    label_task: TaskKind,
    gen_task: TaskKind,
    with_pose: bool,
    eval: &EvalConfig,
) -> Result<DeskMetrics> {
    let codec = Codec::for_geometry(geo);
    let mut all = Vec::with_capacity(eval.samples);
    for i in 0..eval.samples as u64 {
        let sample = generate_one(eval.seed, i, label_task, geo)?;
        let use_pose = with_pose && gen_task.uses_pose();
        let spec = ConditionSpec::from_sample(&sample, gen_task, &codec, use_pose)?;
        let out = model.sample(&spec, &sample.text_ids, Some(&sample.audio), geo, eval.steps, mix_seed(eval.seed, i))?;
        let recon = (!out.pseudo.is_empty()).then_some(out.pseudo.as_slice());
        all.push(evaluate(&out.clip, &sample, use_pose, recon)?);
    }
    Ok(DeskMetrics::mean(&all))
}

/// Everything produced by [`run_plan`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Checkpoint after each stage, in plan order.
    pub stages: Vec<(StageName, Checkpoint)>,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
}

impl RunOutput {
    pub fn checkpoint(&self, name: StageName) -> Option<&Checkpoint> {
        self.stages.iter().find(|(n, _)| *n == name).map(|(_, c)| c)
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.stages.last().map(|(_, c)| c)
    }

    pub fn eval(&self, label: &str) -> Option<&DeskMetrics> {
        self.evals.iter().find(|r| r.label == label).map(|r| &r.metrics)
    }
}

fn fresh_checkpoint(geo: Geometry, config: &ModelConfig, params: ModelParams, rng_seed: u64, stage: StageName) -> Checkpoint {
    Checkpoint {
        geometry: geo,
        config: config.clone(),
        params,
        adam: AdamState::default(),
        rng: RngState::from_seed(rng_seed),
        cursor: StageCursor {
            stage: stage.name().into(),
            steps_done: 0,
        },
    }
}

/// Executes the plan stage by stage. R2V and A2V both start from the base
/// weights (BASE output, or the initialization); A2V adds fresh audio modules.
///
/// With `eval.samples > 0` every trained stage is scored on its own task, the
/// merged model zero-shot on RA2V, and RAP2V both with and without pose. Each
/// scored task also gets a `control/{task}` row from the base weights
/// generating from text alone.
///
/// `data` overrides the per-stage synthetic streams when given.
pub fn run_plan(cfg: &RunConfig, data: Option<&DataSource>) -> Result<RunOutput> {
    cfg.validate()?;
    let geo = cfg.geometry;
    let seed = cfg.seed;
    let mut base = ModelParams::init(&cfg.model, false, seed)?;
    let audio_init = ModelParams::init(&cfg.model, true, mix_seed(seed, 1))?;
    let mut out = RunOutput {
        stages: Vec::new(),
        log: Vec::new(),
        evals: Vec::new(),
    };
    let mut current: Option<Checkpoint> = None;
    for (idx, stage) in cfg.plan.stages.iter().enumerate() {
        let stage_seed = mix_seed(seed, 100 + idx as u64);
        let stream = DataSource::Stream {
            seed: mix_seed(seed, 200 + idx as u64),
        };
        let source = data.unwrap_or(&stream);
        let ckpt = match stage.name {
            StageName::BASE | StageName::R2V => {
                let mut c = fresh_checkpoint(geo, &cfg.model, base.clone(), stage_seed, stage.name);
                out.log.extend(train_stage(&mut c, stage, source)?);
                if stage.name == StageName::BASE {
                    base = c.params.clone();
                }
                c
            }
            StageName::A2V => {
                let mut params = base.clone();
                for (n, p) in &audio_init.tensors {
                    if p.group == ParamGroup::Audio {
                        params.tensors.insert(n.clone(), p.clone());
                    }
                }
                let mut c = fresh_checkpoint(geo, &cfg.model, params, stage_seed, stage.name);
                out.log.extend(train_stage(&mut c, stage, source)?);
                c
            }
            StageName::MERGE => {
                let r2v = out.checkpoint(StageName::R2V).expect("validated plan");
                let a2v = out.checkpoint(StageName::A2V).expect("validated plan");
                let merged = merge(r2v, a2v, stage.alpha_a2v)?;
                if cfg.eval.samples > 0 {
                    let model = Model {
                        config: merged.config.clone(),
                        params: merged.params.clone(),
                    };
                    let m = evaluate_model(&model, &geo, TaskKind::RA2V, false, &cfg.eval)?;
                    out.evals.push(EvalRow {
                        label: "zero_shot_merged".into(),
                        task: TaskKind::RA2V,
                        metrics: m,
                    });
                }
                merged
            }
            StageName::RA2V | StageName::RAP2V => {
                let mut c = current.take().expect("validated plan");
                c.rng = RngState::from_seed(stage_seed);
                out.log.extend(train_stage(&mut c, stage, source)?);
                c
            }
        };
        if cfg.eval.samples > 0 && stage.name != StageName::BASE && stage.name != StageName::MERGE {
            let model = Model {
                config: ckpt.config.clone(),
                params: ckpt.params.clone(),
            };
            let task = stage.name.tasks()[0];
            let label = stage.name.name().to_ascii_lowercase();
            if task.uses_pose() {
                for (with_pose, suffix) in [(true, "pose"), (false, "no_pose")] {
                    out.evals.push(EvalRow {
                        label: format!("{label}_{suffix}"),
                        task,
                        metrics: evaluate_model(&model, &geo, task, with_pose, &cfg.eval)?,
                    });
                }
            } else {
                out.evals.push(EvalRow {
                    label,
                    task,
                    metrics: evaluate_model(&model, &geo, task, false, &cfg.eval)?,
                });
            }
        }
        current = Some(ckpt.clone());
        out.stages.push((stage.name, ckpt));
    }
    if cfg.eval.samples > 0 {
        let control = Model {
            config: cfg.model.clone(),
            params: base,
        };
        let mut tasks: Vec<TaskKind> = out.evals.iter().map(|r| r.task).collect();
        tasks.sort_by_key(|t| t.to_string());
        tasks.dedup();
        for task in tasks {
            out.evals.push(EvalRow {
                label: format!("control/{task}"),
                task,
                metrics: evaluate_control(&control, &geo, task, &cfg.eval)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(names: &[StageName]) -> StagePlan {
        StagePlan {
            stages: names.iter().map(|&n| StageConfig::new(n, 0)).collect(),
        }
    }

    #[test]
    fn plan_ordering_rules() {
        use StageName::*;
        assert!(plan(&[R2V]).validate().is_ok());
        assert!(plan(&[BASE, R2V, A2V, MERGE, RA2V, RAP2V]).validate().is_ok());
        assert!(plan(&[R2V, MERGE]).validate().is_err());
        assert!(plan(&[R2V, A2V, MERGE, MERGE]).validate().is_err());
        assert!(plan(&[R2V, A2V, RA2V]).validate().is_err());
        assert!(plan(&[R2V, A2V, MERGE, RAP2V, RA2V]).validate().is_err());
        assert!(plan(&[R2V, BASE]).validate().is_err());
        assert!(plan(&[R2V, A2V, MERGE, RA2V, RA2V, RAP2V]).validate().is_ok());
    }

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(0, 1), mix_seed(0, 2));
        assert_ne!(mix_seed(1, 0), mix_seed(0, 1));
    }

    #[test]
    fn log_row_tsv_columns() {
        let r = LogRow {
            stage: "A2V".into(),
            step: 3,
            fm: 1.0,
            fm_ref: 0.0,
            total: 1.0,
            grad_norm: 2.0,
            skipped: false,
            gates: vec![1e-5, 2e-5],
        };
        assert_eq!(r.to_tsv().split('\t').count(), LogRow::HEADER.split('\t').count());
    }
}
