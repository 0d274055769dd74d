use std::path::Path;
use std::process::{Command, Output};

use lowrank::harness::{ExperimentConfig, TRACE_HEADER};
use lowrank::model::{Instance, Parameters};

fn lowrank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowrank"))
        .current_dir(dir)
        .env("LOWRANK_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--n", "50", "--r", "1", "--d", "2", "--seed", "7", "--N", "1000"];
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let inst = format!("{tag}.json");
        let batch = format!("{tag}.bin");
        let mut full = args.to_vec();
        full.extend(["--instance", &inst, "--batch", &batch]);
        let out = lowrank(dir.path(), &full);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push((
            std::fs::read(dir.path().join(&inst)).unwrap(),
            std::fs::read(dir.path().join(&batch)).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].1.len(), 16 + 8 * 1000 * 51);
}

#[test]
fn eval_of_truth_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let gen = lowrank(dir.path(), &["generate", "--n", "8", "--r", "2", "--d", "3", "--seed", "1", "--N", "500"]);
    assert_eq!(gen.status.code(), Some(0));
    let inst: Instance = serde_json::from_slice(&std::fs::read(dir.path().join("instance.json")).unwrap()).unwrap();
    std::fs::write(dir.path().join("truth.json"), serde_json::to_string(&inst.truth).unwrap()).unwrap();
    let out = lowrank(dir.path(), &["eval", "--params", "truth.json", "--batch", "batch.bin"]);
    assert_eq!(out.status.code(), Some(0));
    let err: f64 = stdout(&out).trim().parse().unwrap();
    assert!(err.abs() <= 1e-12, "{err}");
}

#[test]
fn warmstart_then_boost_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let gen = lowrank(dir.path(), &["generate", "--n", "10", "--r", "1", "--d", "2", "--seed", "3", "--N", "10"]);
    assert_eq!(gen.status.code(), Some(0));
    let warm = lowrank(
        dir.path(),
        &["warmstart", "--instance", "instance.json", "--r", "1", "--samples-per-round", "50000", "--seed", "4"],
    );
    assert_eq!(warm.status.code(), Some(0), "{}", String::from_utf8_lossy(&warm.stderr));
    let text = stdout(&warm);
    let dp: f64 = text.lines().find_map(|l| l.strip_prefix("procrustes ")).unwrap().parse().unwrap();
    assert!(dp < 0.3, "{text}");

    let boost_cfg = ExperimentConfig::phase_retrieval(0, 1).boost.unwrap();
    std::fs::write(dir.path().join("boost.json"), serde_json::to_string(&boost_cfg).unwrap()).unwrap();
    let boost = lowrank(
        dir.path(),
        &["boost", "--instance", "instance.json", "--frame", "frame.json", "--d", "2", "--config", "boost.json"],
    );
    assert_eq!(boost.status.code(), Some(0), "{}", String::from_utf8_lossy(&boost.stderr));
    let text = stdout(&boost);
    let dp: f64 = text.lines().find_map(|l| l.strip_prefix("procrustes ")).unwrap().parse().unwrap();
    assert!(dp < 1e-6, "{text}");
    let params: Parameters = serde_json::from_slice(&std::fs::read(dir.path().join("params.json")).unwrap()).unwrap();
    assert_eq!(params.n(), 10);
}

#[test]
fn run_writes_trace_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::phase_retrieval(5, 2);
    cfg.n = 12;
    cfg.warm.samples_per_round = 20_000;
    cfg.boost.as_mut().unwrap().t_outer = 2;
    cfg.record_wall_time = false;
    std::fs::write(dir.path().join("cfg.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let mut traces = Vec::new();
    for out in ["t1.csv", "t2.csv"] {
        let run = lowrank(dir.path(), &["run", "--config", "cfg.json", "--out", out]);
        assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
        traces.push(std::fs::read_to_string(dir.path().join(out)).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    let mut lines = traces[0].lines();
    assert_eq!(lines.next().unwrap(), TRACE_HEADER.join(","));
    assert_eq!(lines.count(), 2 * 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lowrank(dir.path(), &["generate", "--bogus"]).status.code(), Some(1));
    assert_eq!(lowrank(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(lowrank(dir.path(), &["--help"]).status.code(), Some(0));
    let missing = lowrank(dir.path(), &["run", "--config", "missing.json", "--out", "x.csv"]);
    assert_eq!(missing.status.code(), Some(1));

    // A learning rate this large trips the coefficient divergence guard.
    let mut cfg = ExperimentConfig::phase_retrieval(5, 1);
    cfg.n = 8;
    cfg.warm.samples_per_round = 5_000;
    cfg.boost.as_mut().unwrap().eta_coef = 1e3;
    std::fs::write(dir.path().join("bad.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let run = lowrank(dir.path(), &["run", "--config", "bad.json", "--out", "bad.csv"]);
    assert_eq!(run.status.code(), Some(2));
    assert!(dir.path().join("bad.csv").exists());
}
