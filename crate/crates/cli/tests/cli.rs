use std::path::Path;
use std::process::Command;

use gfdt::experiment::{ExperimentConfig, RunManifest, ScoreMethod};

fn gfdt(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_gfdt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn tiny(dir: &Path) -> String {
    let mut c = ExperimentConfig::preset("scalar").unwrap();
    c.simulation.rows = 5_000;
    c.simulation.burn_in = 5.0;
    c.score.samples = 2_000;
    c.score.method = ScoreMethod::Gaussian;
    c.response.max_lag = 2.0;
    c.langevin = None;
    c.maxent = None;
    let p = dir.join("tiny.json");
    c.save(&p).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn stages_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    for verb in ["simulate", "fit-score", "respond", "report"] {
        assert_eq!(gfdt(&[verb, "--config", &cfg, "--out", out]), 0, "{verb}");
    }
    let m = RunManifest::read(&Path::new(out).join("manifest.json")).unwrap();
    assert_eq!(m.stages.len(), 4);
    assert!(m.artifact("responses/x1_m1_gfdt-analytic.csv").is_some());
    assert!(m.artifact("report/metrics.csv").is_some());
}

#[test]
fn same_seed_same_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let hashes = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(gfdt(&["all", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "9"]), 0);
        let m = RunManifest::read(&out.join("manifest.json")).unwrap();
        m.artifacts.into_iter().map(|a| (a.path, a.sha256)).collect::<Vec<_>>()
    };
    assert_eq!(hashes("a"), hashes("b"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    assert_eq!(gfdt(&["all", "--preset", "nope", "--out", out]), 2);
    let cfg = tiny(dir.path());
    // respond without data is an ordinary failure
    assert_eq!(gfdt(&["respond", "--config", &cfg, "--out", out]), 1);

    let mut c = ExperimentConfig::load(Path::new(&cfg)).unwrap();
    c.simulation.dt = 50.0;
    c.simulation.stride = 1;
    let bad = dir.path().join("unstable.json");
    c.save(&bad).unwrap();
    assert_eq!(gfdt(&["simulate", "--config", bad.to_str().unwrap(), "--out", out]), 3);
}
