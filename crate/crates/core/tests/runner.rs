use crackuq::experiment::*;
use crackuq::models::{StochasticModel, VariationalMode};
use crackuq::nn::StepDecay;
use crackuq::output::HeteroscedasticOutput;
use crackuq::rng::{seeded, Rng};
use crackuq::tensor::Tensor;
use proptest::prelude::*;

fn tiny_moons() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "tiny".into();
    cfg.dataset.kind = DatasetKind::Moons;
    cfg.dataset.n_train = 60;
    cfg.dataset.n_val = 20;
    cfg.dataset.n_test = 40;
    cfg.twomoons.hidden = vec![16, 16];
    cfg.loss.nll_samples = 2;
    cfg.max_epochs = 4;
    cfg.mc_samples = 5;
    cfg
}

#[test]
fn learning_rate_schedule() {
    let s = StepDecay::default();
    let lr: Vec<f64> = [0, 49, 50, 100].iter().map(|&e| s.lr(e)).collect();
    assert!((lr[0] - 0.01).abs() < 1e-15 && (lr[1] - 0.01).abs() < 1e-15);
    assert!((lr[2] - 0.008).abs() < 1e-15);
    assert!((lr[3] - 0.0064).abs() < 1e-15);
}

proptest! {
    #[test]
    fn early_stop_reads_only_the_window(
        prefix in prop::collection::vec(0.0f64..10.0, 0..40),
        other in prop::collection::vec(0.0f64..10.0, 0..40),
        window in prop::collection::vec(0.0f64..2.0, 50),
    ) {
        let e = EarlyStop::default();
        let a: Vec<f64> = prefix.iter().chain(&window).copied().collect();
        let b: Vec<f64> = other.iter().chain(&window).copied().collect();
        prop_assert_eq!(e.should_stop(&a), e.should_stop(&b));
        let mean_gain = (window[0] - window[49]) / 49.0;
        prop_assert_eq!(e.should_stop(&a), mean_gain < 0.001);
    }

    #[test]
    fn early_stop_on_flat_and_falling(level in 0.0f64..5.0, slope in 0.0011f64..0.1, n in 50usize..120) {
        let e = EarlyStop::default();
        prop_assert!(e.should_stop(&vec![level; n]));
        let falling: Vec<f64> = (0..n).map(|i| level - slope * i as f64).collect();
        prop_assert!(!e.should_stop(&falling));
        prop_assert!(!e.should_stop(&falling[..49]));
    }
}

#[test]
fn early_stop_fires_in_training() {
    let mut cfg = tiny_moons();
    cfg.early_stop.window = 3;
    cfg.early_stop.min_improvement = 10.0;
    cfg.max_epochs = 20;
    let run = run_experiment(&cfg, 0).unwrap();
    assert!(run.record.history.stopped_early);
    assert_eq!(run.record.history.epochs.len(), 3);
}

#[test]
fn runs_replay_exactly() {
    let cfg = tiny_moons();
    let a = run_experiment(&cfg, 3).unwrap().record;
    let b = run_experiment(&cfg, 3).unwrap().record;
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.history, b.history);
    assert_eq!(a.config, cfg);
    assert_eq!(a.config_hash, crackuq::models::config_hash(&cfg).unwrap());
    let c = run_experiment(&cfg, 4).unwrap().record;
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn diverged_training_is_reported() {
    let mut cfg = tiny_moons();
    cfg.schedule.initial = 1e30;
    match run_experiment(&cfg, 0) {
        Err(crackuq::Error::Diverged { epoch, loss }) => assert!(epoch < cfg.max_epochs && !loss.is_finite()),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training should diverge"),
    }
}

/// Emits saturated logits for the labels of one fixed set, in order.
struct Oracle {
    labels: Vec<usize>,
}

impl StochasticModel for Oracle {
    fn forward(&self, input: &Tensor, _sampling: bool, _rng: &mut Rng) -> crackuq::Result<HeteroscedasticOutput> {
        let n = input.n();
        let mut logits = vec![0.0; 2 * n];
        for (i, &l) in self.labels[..n].iter().enumerate() {
            logits[i * 2 + l] = 30.0;
        }
        HeteroscedasticOutput::new([n, 2, 1, 1], logits, vec![0.0; 2 * n])
    }

    fn mode(&self) -> VariationalMode {
        VariationalMode::Mcd
    }
}

#[test]
fn oracle_model_scores_perfectly() {
    let data = load_data(&tiny_moons(), 0).unwrap();
    let oracle = Oracle {
        labels: data.test.labels.clone(),
    };
    let e = evaluate(&oracle, &data.test, 25, data.test.len(), &mut seeded(0)).unwrap();
    assert_eq!(e.metrics.f1, 1.0);
    assert!(e.metrics.ece < 0.01);
    assert_eq!(e.metrics.epistemic, 0.0);
    assert_eq!(MetricsRow::FIELDS, ["f1", "epistemic", "entropy", "aleatoric", "ece"]);
    assert!(evaluate(&oracle, &LabeledSet::from_moons(&[]).unwrap(), 5, 4, &mut seeded(0)).is_err());
}

#[test]
fn zero_dropout_gives_zero_epistemic() {
    let mut cfg = tiny_moons();
    cfg.twomoons.dropout.rate = 0.0;
    let run = run_experiment(&cfg, 1).unwrap();
    assert_eq!(run.record.metrics.epistemic, 0.0);
}

#[test]
fn sweep_table_shape_and_failed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<String> = ["30", "1", "50", "60"].iter().map(|s| s.to_string()).collect();
    let res = sweep(&tiny_moons(), SweepAxis::TrainSamples, &values, &[0, 1, 2], Some(dir.path())).unwrap();
    assert_eq!(res.rows.len(), 12);
    assert_eq!(res.aggregates.len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + 12 + 4);
    let failed: Vec<&&str> = lines.iter().filter(|l| l.contains("failed:")).collect();
    assert_eq!(failed.len(), 3);
    assert!(failed.iter().all(|l| l.split(',').nth(1) == Some("1")));
    assert!(lines[13..].iter().all(|l| l.starts_with("mean,")));
    assert!(lines.iter().all(|l| l.split(',').count() == 9));
    for r in &res.rows {
        if r.status == "ok" {
            assert!(dir.path().join("runs").join(&r.run_id).join(RUN_FILE).exists());
        }
    }
}

#[test]
fn plots_and_byte_identical_csv() {
    let run = run_experiment(&tiny_moons(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plots(std::slice::from_ref(&run.record), dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    assert!(files.iter().any(|f| f.extension().unwrap() == "png"));
    let csv = files.iter().find(|f| f.extension().unwrap() == "csv").unwrap();
    let first = std::fs::read(csv).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with("bin_lo,bin_hi,count,accuracy,confidence"));
    emit_plots(std::slice::from_ref(&run.record), dir.path()).unwrap();
    assert_eq!(first, std::fs::read(csv).unwrap());
    assert!(emit_plots(&[], dir.path()).is_err());
    assert_eq!(PANEL_ORDER, ["input", "prediction", "ground_truth", "epistemic", "aleatoric"]);
}

#[test]
fn uncertainty_panel_grid() {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.n_train = 4;
    cfg.dataset.n_val = 2;
    cfg.dataset.n_test = 3;
    cfg.dataset.height = 32;
    cfg.dataset.width = 32;
    cfg.segmenter.encoder_channels = vec![4, 8];
    cfg.max_epochs = 1;
    cfg.mc_samples = 3;
    cfg.loss.nll_samples = 1;
    let run = run_experiment(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("panels.png");
    let csv = uncertainty_panels(&run.model, &run.data.test, &[0, 2], 3, &mut seeded(0), &png).unwrap();
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (5 * 32, 2 * 32));
    let text = std::fs::read_to_string(csv).unwrap();
    let panels: Vec<&str> = text.lines().skip(1).take(5).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(panels, PANEL_ORDER);
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_moons();
    let mut run = run_experiment(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), &mut run).unwrap();
    let (model, back) = TrainedModel::load(&dir.path().join(CHECKPOINT_DIR), None).unwrap();
    assert_eq!(back, cfg);
    let (main, _) = evaluate_all(&model, &run.data, &cfg, 2).unwrap();
    assert_eq!(main.metrics, run.record.metrics);
    let mut other = cfg.clone();
    other.max_epochs += 1;
    assert!(matches!(
        TrainedModel::load(&dir.path().join(CHECKPOINT_DIR), Some(&other)),
        Err(crackuq::Error::ConfigHashMismatch { .. })
    ));
    assert_eq!(RunRecord::read(&dir.path().join(RUN_FILE)).unwrap(), run.record);
}
