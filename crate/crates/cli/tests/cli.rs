use std::path::Path;
use std::process::{Command, Output};

use crackuq::experiment::{DatasetKind, ExperimentConfig, METRICS_HEADER};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crackuq")).args(args).output().unwrap()
}

fn tiny_moons() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "cli".into();
    cfg.dataset.kind = DatasetKind::Moons;
    cfg.dataset.n_train = 60;
    cfg.dataset.n_val = 20;
    cfg.dataset.n_test = 40;
    cfg.twomoons.hidden = vec![16, 16];
    cfg.loss.nll_samples = 2;
    cfg.max_epochs = 3;
    cfg.mc_samples = 5;
    cfg.seeds = vec![0, 1];
    cfg
}

fn tiny_cracks() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.n_train = 4;
    cfg.dataset.n_val = 2;
    cfg.dataset.n_test = 2;
    cfg.dataset.height = 32;
    cfg.dataset.width = 32;
    cfg.segmenter.encoder_channels = vec![4, 8];
    cfg.max_epochs = 1;
    cfg.mc_samples = 2;
    cfg.loss.nll_samples = 1;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml_string().unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn train_eval_calibrate_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_moons());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let m = stdout_json(&bin(&["train", "--config", &cfg, "--out", run_s]));
    for k in ["f1", "epistemic", "entropy", "aleatoric", "ece"] {
        assert!(m[k].is_number(), "{k}");
    }
    assert!(run.join("run.json").exists());
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));

    let ev = dir.path().join("eval");
    let e = stdout_json(&bin(&["eval", "--checkpoint", run_s, "--out", ev.to_str().unwrap()]));
    assert_eq!(e, m);
    assert!(ev.join("reliability.csv").exists());

    let cal = dir.path().join("cal");
    let c = stdout_json(&bin(&["calibrate", "--checkpoint", run_s, "--out", cal.to_str().unwrap()]));
    assert!(c["temperature"].as_f64().unwrap() > 0.0);
    assert!(cal.join("calibration_after.csv").exists());

    let plots = dir.path().join("plots");
    let p = stdout_json(&bin(&["plot", "--runs", run_s, "--out", plots.to_str().unwrap()]));
    assert!(p["files"].as_u64().unwrap() >= 1);
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_moons());
    let out = dir.path().join("sweep");
    let args = ["sweep", "--config", &cfg, "--out", out.to_str().unwrap()];
    let s = stdout_json(&bin(&[&args[..], &["--axis", "dropout_ratio", "--values", "0.1,0.3"]].concat()));
    assert_eq!(s["runs"], 4);
    assert_eq!(s["failed"], 0);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
}

#[test]
fn cracks_gen_data_and_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_cracks());
    let data = dir.path().join("data");
    let o = bin(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let n = std::fs::read_dir(data.join("train/images")).unwrap().count();
    assert_eq!(n, 4);
    let run = dir.path().join("run");
    stdout_json(&bin(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]));
    assert!(run.join("panels.png").exists());
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = tiny_moons();
    bad.mc_samples = 0;
    let cfg = write_config(dir.path(), &bad);
    let o = bin(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());

    let o = bin(&["plot", "--runs", dir.path().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    let o = bin(&["eval", "--checkpoint", dir.path().join("missing").to_str().unwrap(), "--out", "/tmp/none"]);
    assert!(!o.status.success());
    assert!(serde_json::from_slice::<serde_json::Value>(&o.stderr).is_ok());
}
