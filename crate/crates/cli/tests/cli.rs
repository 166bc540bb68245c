use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deepc_cli::ExperimentConfig;

fn deepc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepc")).args(args).output().expect("spawn deepc")
}

fn ok(args: &[&str]) -> String {
    let out = deepc(args);
    assert!(
        out.status.success(),
        "deepc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_small_config(path: &Path) {
    let mut cfg = ExperimentConfig::default();
    cfg.hankel.trajectories = 4;
    cfg.hankel.length = 30;
    cfg.datamodel.n_train = 16;
    cfg.datamodel.hidden = vec![8];
    cfg.datamodel.epochs = 2;
    cfg.bench.ks = vec![12];
    cfg.bench.seeds = vec![0, 1];
    cfg.bench.t_sim = 10;
    fs::write(path, cfg.to_json()).unwrap();
}

#[test]
fn full_workflow_produces_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    write_small_config(&dir.path().join("cfg.json"));
    let cfg = d("cfg.json");

    ok(&["collect", "-c", &cfg, "-o", &d("traj")]);
    assert!(dir.path().join("traj/traj_000.csv").exists());
    assert!(dir.path().join("traj/traj_000.meta").exists());

    ok(&[
        "gendata",
        "-c",
        &cfg,
        "--traj-dir",
        &d("traj"),
        "--alpha",
        "0.25",
        "-o",
        &d("data.jsonl"),
    ]);
    ok(&["train", "-c", &cfg, "-o", &d("models"), &d("data.jsonl")]);
    assert!(dir.path().join("models/model_alpha_0.25.json").exists());

    ok(&[
        "bench",
        "-c",
        &cfg,
        "--traj-dir",
        &d("traj"),
        "--models",
        &d("models"),
        "-o",
        &d("results.csv"),
    ]);
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,K,seed,cost,iae,ise,mean_step_ms,infeasible_steps"));
    // datamodel, l1 and random × one K × two seeds
    assert_eq!(lines.count(), 6);
    assert!(dir.path().join("results.tsv").exists());
    assert!(dir.path().join("results.dat").exists());

    let report = ok(&["report", "--results", &d("results.csv")]);
    assert!(report.contains("datamodel"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    write_small_config(&cfg_path);
    let cfg = cfg_path.to_string_lossy().into_owned();
    let traj = dir.path().join("traj").to_string_lossy().into_owned();
    ok(&["collect", "-c", &cfg, "-o", &traj]);
    let again = deepc(&["collect", "-c", &cfg, "-o", &traj]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["collect", "-c", &cfg, "-o", &traj, "--force"]);
}

#[test]
fn seed_override_changes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    write_small_config(&cfg_path);
    let cfg = cfg_path.to_string_lossy().into_owned();
    let a = dir.path().join("a").to_string_lossy().into_owned();
    let b = dir.path().join("b").to_string_lossy().into_owned();
    ok(&["collect", "-c", &cfg, "-o", &a, "--seed", "1"]);
    ok(&["collect", "-c", &cfg, "-o", &b, "--seed", "2"]);
    assert_ne!(
        fs::read(dir.path().join("a/traj_000.csv")).unwrap(),
        fs::read(dir.path().join("b/traj_000.csv")).unwrap()
    );
}

#[test]
fn rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, r#"{"seed": 1, "bogus": true}"#).unwrap();
    let out = deepc(&[
        "collect",
        "-c",
        &cfg_path.to_string_lossy(),
        "-o",
        &dir.path().join("t").to_string_lossy(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.json");
    ok(&["init-config", "-o", &path.to_string_lossy()]);
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.to_json(), ExperimentConfig::default().to_json());
}
