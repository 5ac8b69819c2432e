use crackuq::data::{gen_two_moons, moons_to_batch};
use crackuq::experiment::{run_experiment, DatasetKind, ExperimentConfig, TrainedModel};
use crackuq::models::{build_twomoons_net, StochasticModel, Trainable, TwoMoonsNetConfig, VariationalMode};
use crackuq::output::HeteroscedasticOutput;
use crackuq::rng::seeded;
use crackuq::tensor::Tensor;
use crackuq::uncertainty::*;
use crackuq::variational::DropoutSpec;
use proptest::prelude::*;

fn set_from(samples: Vec<Vec<f64>>, shape: [usize; 4]) -> MCPredictionSet {
    MCPredictionSet {
        shape,
        m: samples.len(),
        sampling_mode: VariationalMode::Mcd,
        mean_logits: vec![0.0; shape.iter().product()],
        samples: samples.concat(),
    }
}

fn moons_input(n: usize) -> Tensor {
    let pts = gen_two_moons(n, 0.1, &mut seeded(4)).unwrap();
    moons_to_batch(&pts, &(0..n).collect::<Vec<_>>()).unwrap().0
}

#[test]
fn mc_predict_contracts() {
    let net = build_twomoons_net(&TwoMoonsNetConfig::default(), &mut seeded(0)).unwrap();
    let x = moons_input(20);
    let a = mc_predict(&net, &x, DEFAULT_MC_SAMPLES, &mut seeded(1)).unwrap();
    assert_eq!(a.m, 25);
    assert_eq!(a.samples.len(), 25 * 20 * 2);
    assert_eq!(a, mc_predict(&net, &x, 25, &mut seeded(1)).unwrap());
    assert!(mc_predict(&net, &x, 0, &mut seeded(1)).is_err());
    for k in 0..a.m {
        for px in 0..20 {
            let s = a.sample(k);
            assert!((s[px * 2] + s[px * 2 + 1] - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn zero_rate_passes_are_identical() {
    let cfg = TwoMoonsNetConfig {
        dropout: DropoutSpec::new(0.0).unwrap(),
        ..Default::default()
    };
    let net = build_twomoons_net(&cfg, &mut seeded(0)).unwrap();
    let x = moons_input(16);
    let set = mc_predict(&net, &x, 25, &mut seeded(2)).unwrap();
    for k in 1..25 {
        assert_eq!(set.sample(k), set.sample(0));
    }
    assert!(epistemic_variance(&set).iter().all(|&v| v == 0.0));
    let single = net.forward(&x, false, &mut seeded(0)).unwrap();
    assert_eq!(predictive_entropy(&set), entropy_of(&single.probabilities(), single.shape));
}

#[test]
fn disabled_sampling_gives_zero_variance() {
    let net = build_twomoons_net(&TwoMoonsNetConfig::default(), &mut seeded(0)).unwrap();
    let x = moons_input(16);
    let set = mc_predict_with(&net, &x, 10, false, &mut seeded(2)).unwrap();
    assert!(epistemic_variance(&set).iter().all(|&v| v == 0.0));
    let single = net.forward(&x, false, &mut seeded(9)).unwrap();
    assert_eq!(predictive_entropy(&set), entropy_of(&single.probabilities(), single.shape));
}

#[test]
fn variance_and_entropy_examples() {
    let s = set_from(vec![vec![0.4, 0.6], vec![0.6, 0.4]], [1, 2, 1, 1]);
    let v = epistemic_variance(&s);
    assert!((v[0] - 0.01).abs() < 1e-15 && (v[1] - 0.01).abs() < 1e-15);
    let h = |p: [f64; 2]| entropy_of(&p, [1, 2, 1, 1])[0];
    assert!((h([0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(h([1.0, 0.0]), 0.0);
    let want = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    assert!((h([0.9, 0.1]) - want).abs() < 1e-15);
    assert!((h([0.9, 0.1]) - 0.3251).abs() < 1e-4);
}

#[test]
fn aleatoric_examples() {
    let out = HeteroscedasticOutput::new([1, 2, 2, 2], vec![0.0; 8], vec![0.0; 8]).unwrap();
    let a = aleatoric_map(&out).unwrap();
    assert!(a.iter().all(|&v| v == 1.0));
    assert_eq!(mean(&a), 1.0);
    let out = HeteroscedasticOutput::new([1, 2, 1, 1], vec![0.0; 2], vec![2.0 * 2f64.ln(); 2]).unwrap();
    assert!(aleatoric_map(&out).unwrap().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    let bad = HeteroscedasticOutput::new([1, 2, 1, 1], vec![0.0; 2], vec![f64::NAN, 0.0]).unwrap();
    assert!(aleatoric_map(&bad).is_err());
}

#[test]
fn decompose_composes_the_maps() {
    let s = set_from(vec![vec![0.3, 0.3, 0.7, 0.7]; 4], [1, 2, 1, 2]);
    let out = HeteroscedasticOutput::new([1, 2, 1, 2], vec![0.0; 4], vec![0.0; 4]).unwrap();
    let d = decompose(&s, &out, Some(&[0, 1])).unwrap();
    assert_eq!(d.mean_epistemic(), 0.0);
    assert_eq!(d.mean_aleatoric(), 1.0);
    for c in &d.per_class {
        assert_eq!(c.aleatoric, 1.0);
        assert!((c.entropy - d.predictive_entropy[0]).abs() < 1e-15);
    }
    let gt = d.per_class_gt.unwrap();
    assert_eq!(gt[0].unwrap().pixels, 1);
    let wrong = HeteroscedasticOutput::new([1, 2, 2, 1], vec![0.0; 4], vec![0.0; 4]).unwrap();
    assert!(decompose(&s, &wrong, None).is_err());
}

proptest! {
    #[test]
    fn variance_permutation_invariant_and_bounded(
        raw in prop::collection::vec(0.0f64..=1.0, 2..12),
        rot in 0usize..12,
    ) {
        let samples: Vec<Vec<f64>> = raw.iter().map(|&p| vec![p, 1.0 - p]).collect();
        let mut rotated = samples.clone();
        rotated.rotate_left(rot % samples.len());
        let a = epistemic_variance(&set_from(samples, [1, 2, 1, 1]));
        let b = epistemic_variance(&set_from(rotated, [1, 2, 1, 1]));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(*x >= 0.0 && *x <= 0.25 + 1e-12);
        }
    }

    #[test]
    fn entropy_bounded_by_log_classes(raw in prop::collection::vec(0.001f64..1.0, 4)) {
        let z: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let h = entropy_of(&p, [1, 4, 1, 1])[0];
        prop_assert!(h >= 0.0 && h <= 4f64.ln() + 1e-12);
    }
}

/// A trained two-moons network evaluated at increasing dropout rates.
#[test]
fn epistemic_grows_with_dropout_rate() {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.kind = DatasetKind::Moons;
    cfg.dataset.n_train = 300;
    cfg.dataset.n_val = 50;
    cfg.dataset.n_test = 200;
    cfg.loss.nll_samples = 5;
    cfg.max_epochs = 40;
    cfg.mc_samples = 25;
    cfg.schedule.initial = 0.05;
    let run = run_experiment(&cfg, 0).unwrap();
    let TrainedModel::TwoMoons(net) = run.model else { panic!("expected a two-moons network") };
    let (x, _) = run.data.test.batch(&(0..run.data.test.len()).collect::<Vec<_>>()).unwrap();
    let mut means = Vec::new();
    for p in [0.1, 0.3, 0.5] {
        let mut m = net.clone();
        m.set_dropout_rate(p).unwrap();
        let avg = (0..5)
            .map(|s| mean(&epistemic_variance(&mc_predict(&m, &x, 25, &mut seeded(100 + s)).unwrap())))
            .sum::<f64>()
            / 5.0;
        means.push(avg);
    }
    assert!(means[0] <= means[1] && means[1] <= means[2], "{means:?}");
}
