use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condvid::checkpoint::Checkpoint;
use condvid::trainer::merge;

const TINY: &str = r#"
seed = 1

[eval]
samples = 1
steps = 2

[data]
count = 2
tasks = ["A2V", "RAP2V"]

[[plan.stages]]
name = "BASE"
steps = 1

[[plan.stages]]
name = "R2V"
steps = 2
lr = 1e-3

[[plan.stages]]
name = "A2V"
steps = 2
lr = 1e-3

[[plan.stages]]
name = "MERGE"

[[plan.stages]]
name = "RA2V"
steps = 1

[[plan.stages]]
name = "RAP2V"
steps = 1
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condvid")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&b)]);
    for f in ["samples.cvt", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "5", "--out", s(&c)]);
    assert_ne!(std::fs::read(a.join("samples.cvt")).unwrap(), std::fs::read(c.join("samples.cvt")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["samples"].as_array().unwrap().len(), 4);

    let empty_cfg = dir.path().join("empty.toml");
    std::fs::write(&empty_cfg, "[data]\ncount = 0\n").unwrap();
    let e = dir.path().join("e");
    ok(&["gen-data", "--config", s(&empty_cfg), "--out", s(&e)]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(e.join("manifest.json")).unwrap()).unwrap();
    assert!(m["samples"].as_array().unwrap().is_empty());
}

#[test]
fn train_merge_sample_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let summary = ok(&["train", "--config", s(&cfg), "--out", s(&run_dir)]);
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["steps"], 7);
    for stage in ["BASE", "R2V", "A2V", "MERGE", "RA2V", "RAP2V"] {
        assert!(run_dir.join(format!("{stage}.ckpt")).exists(), "{stage}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert!(run_dir.join("evals.json").exists() && run_dir.join("resolved_config.toml").exists());

    let merged = dir.path().join("merged.ckpt");
    ok(&[
        "merge",
        "--r2v",
        s(&run_dir.join("R2V.ckpt")),
        "--a2v",
        s(&run_dir.join("A2V.ckpt")),
        "--alpha",
        "0.6",
        "--out",
        s(&merged),
    ]);
    let r2v = Checkpoint::load(&run_dir.join("R2V.ckpt")).unwrap();
    let a2v = Checkpoint::load(&run_dir.join("A2V.ckpt")).unwrap();
    let want = merge(&r2v, &a2v, 0.6).unwrap().to_bytes().unwrap();
    assert_eq!(std::fs::read(&merged).unwrap(), want);
    assert_eq!(std::fs::read(run_dir.join("MERGE.ckpt")).unwrap(), want);

    let ckpt = run_dir.join("RAP2V.ckpt");
    let (c1, c2) = (dir.path().join("clips1"), dir.path().join("clips2"));
    ok(&["sample", "--config", s(&cfg), "--ckpt", s(&ckpt), "--spec", s(&data), "--out", s(&c1)]);
    ok(&["sample", "--config", s(&cfg), "--ckpt", s(&ckpt), "--spec", s(&data), "--out", s(&c2)]);
    assert_eq!(std::fs::read(c1.join("clips.cvt")).unwrap(), std::fs::read(c2.join("clips.cvt")).unwrap());

    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--clips", s(&c1), "--labels", s(&data), "--pose"])).unwrap();
    assert_eq!(report["samples"], 4);
    assert!(report["mean"]["pck"].is_number());

    // Ground truth scored against itself sits at the metric ceiling.
    let gt: serde_json::Value = serde_json::from_str(&ok(&["eval", "--clips", s(&data), "--labels", s(&data), "--pose"])).unwrap();
    assert!(gt["mean"]["sync_corr"].as_f64().unwrap() >= 0.98);
    assert_eq!(gt["mean"]["pck"].as_f64().unwrap(), 1.0);

    let stage_dir = dir.path().join("stage");
    let stage_args = |stage: &'static str| {
        vec![
            "train".to_string(),
            "--config".into(),
            s(&cfg).into(),
            "--out".into(),
            s(&stage_dir).into(),
            "--stage".into(),
            stage.into(),
            "--steps".into(),
            "1".into(),
            "--init".into(),
            s(&merged).into(),
            "--data".into(),
            s(&data).into(),
        ]
    };
    let rap = stage_args("RAP2V");
    ok(&rap.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(stage_dir.join("RAP2V.ckpt").exists());
    // The sample set holds no RA2V samples.
    let ra = stage_args("RA2V");
    assert_eq!(code(&ra.iter().map(String::as_str).collect::<Vec<_>>()), 2);

    let gates = ok(&["gate-report", "--ckpt", s(&ckpt)]);
    let trained: Vec<f64> = gates.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(trained.len(), 3);
    assert!(trained.iter().all(|&g| g != 1e-5));
    assert_eq!(code(&["gate-report", "--ckpt", s(&run_dir.join("R2V.ckpt"))]), 2);
}

#[test]
fn gate_report_at_init() {
    let out = ok(&["gate-report"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("block_index\tmean_abs_gate"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (b, g) = l.split_once('\t').unwrap();
            (b.parse().unwrap(), g.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(rows.iter().all(|r| r.1 == 1e-5));
}

#[test]
fn gradcheck_passes_and_flags_the_fault() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().skip(1).all(|l| l.ends_with("pass")));
    assert!(table.lines().count() > 10);
    let o = run(&["gradcheck", "--fault"]);
    assert_eq!(o.status.code(), Some(5));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().any(|l| l.starts_with("fault_fixture") && l.ends_with("FAIL")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("x"))]), 2);
    let geo = dir.path().join("geo.toml");
    std::fs::write(&geo, "[geometry]\nheight = 15\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&geo), "--out", s(&dir.path().join("x"))]), 2);
    assert_eq!(code(&["gate-report", "--ckpt", s(&dir.path().join("missing.ckpt"))]), 3);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&["gate-report", "--ckpt", s(&junk)]), 3);
    assert_eq!(code(&["train", "--stage", "NOPE", "--out", s(dir.path())]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["--help"]), 0);
}
