use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use condvid::checkpoint::{AdamState, Checkpoint, RngState, StageCursor};
use condvid::codec::Codec;
use condvid::condition::{ConditionSpec, TaskKind};
use condvid::config::RunConfig;
use condvid::dataset::{self, ClipSet};
use condvid::gradsuite::run_suite;
use condvid::model::{count_params, gate_norm_report, Model, ModelParams, ParamGroup};
use condvid::synthdata::{evaluate, generate, DeskMetrics};
use condvid::trainer::{merge, mix_seed, run_plan, train_stage, DataSource, LogRow, StageConfig, StageName, StagePlan};
use condvid::{Error, ErrorCategory};
use serde::Serialize;

const CONFIG_ECHO: &str = "resolved_config.toml";

#[derive(Parser)]
#[command(name = "condvid", version, about = "Desk-scale multimodal-conditioned video generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labelled synthetic sample set.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the stage plan, or a single stage with --stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Sample set to cycle through instead of fresh synthetic streams.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train only this stage.
        #[arg(long)]
        stage: Option<StageName>,
        /// Step count for --stage.
        #[arg(long, requires = "stage")]
        steps: Option<usize>,
        /// Checkpoint to continue from with --stage.
        #[arg(long, requires = "stage")]
        init: Option<PathBuf>,
        /// Overrides the MERGE weight of the A2V model.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Merge an R2V and an A2V checkpoint.
    Merge {
        #[arg(long)]
        r2v: PathBuf,
        #[arg(long)]
        a2v: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate clips for every sample of a sample set.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample set providing conditions (written by gen-data).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Condition on this task instead of each sample's own.
        #[arg(long)]
        task: Option<TaskKind>,
        /// Drop the pose condition.
        #[arg(long)]
        no_pose: bool,
    },
    /// Score clips against the labels of a sample set.
    Eval {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Report pose metrics when the sample's task uses pose.
        #[arg(long)]
        pose: bool,
    },
    /// Finite-difference check of every module.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Append a fixture with a corrupted backward rule.
        #[arg(long)]
        fault: bool,
    },
    /// Per-block mean |g| of a checkpoint, or of a fresh initialization.
    GateReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Shape => 4,
            ErrorCategory::Numeric => 5,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 3, msg: e.to_string() }
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

type Res<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure {
                code: 3,
                msg: format!("{}: {e}", p.display()),
            })?;
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Res<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(cfg).map_err(|e| config_err(e.to_string()))?;
    fs::write(dir.join(CONFIG_ECHO), text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Res<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| config_err(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn print_json<T: Serialize>(v: &T) -> Res<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| config_err(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn cmd_gen_data(common: &Common, out: &Path) -> Res<()> {
    let cfg = load_config(common)?;
    let geo = cfg.geometry;
    let mut samples = Vec::new();
    for (i, &task) in cfg.data.tasks.iter().enumerate() {
        if cfg.data.count > 0 {
            samples.extend(generate(mix_seed(cfg.data.seed, i as u64), cfg.data.count, task, &geo)?);
        }
        eprintln!("{task}: {} samples", cfg.data.count);
    }
    dataset::save_samples(out, &geo, &samples)?;
    echo_config(out, &cfg)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

/// Parameters for `stage` starting from `init`, adding or dropping audio modules.
fn stage_params(init: &Checkpoint, cfg: &RunConfig, stage: StageName) -> Res<ModelParams> {
    let mut params = init.params.clone();
    if stage.with_audio() && !params.has_audio() {
        let fresh = ModelParams::init(&init.config, true, mix_seed(cfg.seed, 1))?;
        for (n, p) in fresh.tensors {
            if p.group == ParamGroup::Audio {
                params.tensors.insert(n, p);
            }
        }
    } else if !stage.with_audio() && params.has_audio() {
        params = params.without_audio();
    }
    Ok(params)
}

struct TrainArgs<'a> {
    out: &'a Path,
    data: Option<&'a Path>,
    stage: Option<StageName>,
    steps: Option<usize>,
    init: Option<&'a Path>,
    alpha: Option<f64>,
}

fn cmd_train(common: &Common, a: TrainArgs) -> Res<()> {
    let mut cfg = load_config(common)?;
    if let Some(alpha) = a.alpha {
        for s in cfg.plan.stages.iter_mut().filter(|s| s.name == StageName::MERGE) {
            s.alpha_a2v = alpha;
        }
    }
    if let Some(stage) = a.stage {
        if stage == StageName::MERGE {
            return Err(config_err("use the merge subcommand for MERGE"));
        }
        let mut sc = cfg
            .plan
            .stages
            .iter()
            .find(|s| s.name == stage)
            .cloned()
            .unwrap_or_else(|| StageConfig::new(stage, 0));
        if let Some(n) = a.steps {
            sc.steps = n;
        }
        cfg.plan = StagePlan { stages: vec![sc] };
    }
    let pool = match a.data {
        Some(dir) => {
            let (geo, samples) = dataset::load_samples(dir)?;
            if geo != cfg.geometry {
                return Err(config_err("sample set geometry differs from the configuration"));
            }
            Some(DataSource::Pool(samples))
        }
        None => None,
    };
    fs::create_dir_all(a.out)?;
    echo_config(a.out, &cfg)?;
    let mut written = Vec::new();
    let (log, evals) = match (a.stage, a.init) {
        (Some(stage), Some(init)) => {
            let init = Checkpoint::load(init)?;
            if init.config != cfg.model || init.geometry != cfg.geometry {
                return Err(config_err("initial checkpoint does not match the configuration"));
            }
            let fresh = init.cursor.stage != stage.name();
            let mut ckpt = Checkpoint {
                params: stage_params(&init, &cfg, stage)?,
                adam: if fresh { AdamState::default() } else { init.adam.clone() },
                rng: if fresh { RngState::from_seed(mix_seed(cfg.seed, 100)) } else { init.rng },
                cursor: if fresh {
                    StageCursor {
                        stage: stage.name().into(),
                        steps_done: 0,
                    }
                } else {
                    init.cursor.clone()
                },
                ..init
            };
            let stream = DataSource::Stream {
                seed: mix_seed(cfg.seed, 200),
            };
            let log = train_stage(&mut ckpt, &cfg.plan.stages[0], pool.as_ref().unwrap_or(&stream))?;
            let path = a.out.join(format!("{stage}.ckpt"));
            ckpt.save(&path)?;
            written.push(path);
            (log, Vec::new())
        }
        _ => {
            let run = run_plan(&cfg, pool.as_ref())?;
            for (name, ckpt) in &run.stages {
                let path = a.out.join(format!("{name}.ckpt"));
                ckpt.save(&path)?;
                written.push(path);
            }
            (run.log, run.evals)
        }
    };
    let mut f = fs::File::create(a.out.join("train_log.tsv"))?;
    writeln!(f, "{}", LogRow::HEADER)?;
    for r in &log {
        writeln!(f, "{}", r.to_tsv())?;
    }
    if !evals.is_empty() {
        write_json(&a.out.join("evals.json"), &evals)?;
    }
    let last = log.last();
    let summary = serde_json::json!({
        "steps": log.len(),
        "skipped": log.iter().filter(|r| r.skipped).count(),
        "final_l_fm": last.map(|r| r.fm),
        "final_l_fm_ref": last.map(|r| r.fm_ref),
        "checkpoints": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "evals": evals,
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)
}

fn cmd_merge(r2v: &Path, a2v: &Path, alpha: f64, out: &Path) -> Res<()> {
    let r = Checkpoint::load(r2v)?;
    let a = Checkpoint::load(a2v)?;
    let merged = merge(&r, &a, alpha)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    merged.save(out)?;
    let (base, audio) = count_params(&merged.config);
    print_json(&serde_json::json!({
        "out": out.display().to_string(),
        "alpha_a2v": alpha,
        "base_params": base,
        "audio_params": audio,
    }))
}

fn cmd_sample(common: &Common, ckpt: &Path, spec_dir: &Path, out: &Path, task: Option<TaskKind>, no_pose: bool) -> Res<()> {
    let cfg = load_config(common)?;
    let ck = Checkpoint::load(ckpt)?;
    let geo = ck.geometry;
    let (sgeo, samples) = dataset::load_samples(spec_dir)?;
    if sgeo != geo {
        return Err(config_err("sample set geometry differs from the checkpoint"));
    }
    let model = Model {
        config: ck.config.clone(),
        params: ck.params,
    };
    let codec = Codec::for_geometry(&geo);
    let mut set = ClipSet {
        clips: Default::default(),
    };
    for (i, s) in samples.iter().enumerate() {
        let task = task.unwrap_or(s.meta.task);
        let spec = ConditionSpec::from_sample(s, task, &codec, !no_pose)?;
        let g = model.sample(
            &spec,
            &s.text_ids,
            Some(&s.audio),
            &geo,
            cfg.eval.steps,
            mix_seed(cfg.seed, i as u64),
        )?;
        set.clips.insert(dataset::sample_name(s), (g.clip, g.pseudo));
    }
    dataset::save_clips(out, &set)?;
    echo_config(out, &cfg)?;
    println!("wrote {} clips to {}", set.clips.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    mean: DeskMetrics,
    per_sample: Vec<(String, DeskMetrics)>,
}

fn cmd_eval(clips: &Path, labels: &Path, pose: bool) -> Res<()> {
    let (geo, samples) = dataset::load_samples(labels)?;
    let set = dataset::load_clips(clips, geo.fps)?;
    let mut per_sample = Vec::new();
    for s in &samples {
        let name = dataset::sample_name(s);
        let Some((clip, pseudo)) = set.clips.get(&name) else {
            return Err(Failure {
                code: 3,
                msg: format!("no clip for sample {name}"),
            });
        };
        let recon = (!pseudo.is_empty()).then_some(pseudo.as_slice());
        let m = evaluate(clip, s, pose && s.meta.task.uses_pose(), recon)?;
        per_sample.push((name, m));
    }
    let all: Vec<DeskMetrics> = per_sample.iter().map(|(_, m)| m.clone()).collect();
    print_json(&EvalReport {
        samples: all.len(),
        mean: DeskMetrics::mean(&all),
        per_sample,
    })
}

fn cmd_gradcheck(common: &Common, fault: bool) -> Res<()> {
    let cfg = load_config(common)?;
    let reports = run_suite(&cfg.model, &cfg.geometry, cfg.seed, fault)?;
    println!("module\tmax_rel_err\tchecked\ttol\tstatus");
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("{}\t{:.3e}\t{}\t{:.0e}\t{status}", r.module, r.max_rel_err, r.checked, r.tol);
        if !r.passed {
            failed.push(r.module.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 5,
            msg: format!("gradient check failed for: {}", failed.join(", ")),
        })
    }
}

fn cmd_gate_report(common: &Common, ckpt: Option<&Path>) -> Res<()> {
    let (params, config) = match ckpt {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            (c.params, c.config)
        }
        None => {
            let cfg = load_config(common)?;
            (ModelParams::init(&cfg.model, true, cfg.seed)?, cfg.model)
        }
    };
    if !params.has_audio() {
        return Err(config_err("model has no audio modules"));
    }
    println!("block_index\tmean_abs_gate");
    for (block, g) in gate_norm_report(&params, &config) {
        println!("{block}\t{g:.6e}");
    }
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::GenData { common, out } => cmd_gen_data(&common, &out),
        Cmd::Train {
            common,
            out,
            data,
            stage,
            steps,
            init,
            alpha,
        } => cmd_train(
            &common,
            TrainArgs {
                out: &out,
                data: data.as_deref(),
                stage,
                steps,
                init: init.as_deref(),
                alpha,
            },
        ),
        Cmd::Merge { r2v, a2v, alpha, out } => cmd_merge(&r2v, &a2v, alpha, &out),
        Cmd::Sample {
            common,
            ckpt,
            spec,
            out,
            task,
            no_pose,
        } => cmd_sample(&common, &ckpt, &spec, &out, task, no_pose),
        Cmd::Eval { clips, labels, pose } => cmd_eval(&clips, &labels, pose),
        Cmd::Gradcheck { common, fault } => cmd_gradcheck(&common, fault),
        Cmd::GateReport { common, ckpt } => cmd_gate_report(&common, ckpt.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
