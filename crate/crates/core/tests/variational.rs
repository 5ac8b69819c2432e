use crackuq::rng::seeded;
use crackuq::variational::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn inv_softplus(s: f64) -> f64 {
    s.exp_m1().ln()
}

#[test]
fn inverted_dropout_mean_over_a_million_units() {
    let x = vec![1.0f64; 1_000_000];
    let y = mc_dropout_apply(&x, &DropoutSpec::new(0.5).unwrap(), &mut seeded(1)).unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");
}

#[test]
fn dropout_rate_edges() {
    let spec = DropoutSpec::new(0.0).unwrap();
    assert_eq!(mc_dropout_apply(&[3.0, -1.0], &spec, &mut seeded(0)).unwrap(), vec![3.0, -1.0]);
    assert!(DropoutSpec::new(1.0).is_err());
    let bad = DropoutSpec { rate: 1.0, ..Default::default() };
    assert!(mc_dropout_apply(&[1.0f64], &bad, &mut seeded(0)).is_err());
    assert!(mc_dropout_apply(&[f64::NAN], &spec, &mut seeded(0)).is_err());
}

#[test]
fn dropout_is_deterministic_per_rng_state() {
    let spec = DropoutSpec::new(0.3).unwrap();
    let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let a = mc_dropout_apply(&x, &spec, &mut seeded(9)).unwrap();
    let b = mc_dropout_apply(&x, &spec, &mut seeded(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn moment_examples() {
    let m = propagate_dropout_moments(MomentPair { mean: 2.0, variance: 1.0 }, 0.5).unwrap();
    assert!((m.mean - 1.0).abs() < 1e-12 && (m.variance - 1.5).abs() < 1e-12);
    let id = MomentPair { mean: -0.7, variance: 3.2 };
    assert_eq!(propagate_dropout_moments(id, 0.0).unwrap(), id);
    let z = propagate_dropout_moments(MomentPair { mean: 0.0, variance: 0.0 }, 0.3).unwrap();
    assert_eq!((z.mean, z.variance), (0.0, 0.0));
    assert!(propagate_dropout_moments(MomentPair { mean: 0.0, variance: -1.0 }, 0.3).is_err());
}

/// Sampled output moments of a plain dropout unit fed i.i.d. Gaussian inputs.
#[test]
fn moments_match_sampled_masks() {
    let mut rng = seeded(42);
    for case in 0..4 {
        let mean: f64 = rng.random_range(1.0..3.0);
        let variance: f64 = rng.random_range(0.5..2.0);
        let p: f64 = rng.random_range(0.1..0.7);
        let n = 1_000_000;
        let normal = Normal::new(mean, variance.sqrt()).unwrap();
        let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let y = mc_dropout_apply(&x, &DropoutSpec::plain(p).unwrap(), &mut rng).unwrap();
        let m = y.iter().sum::<f64>() / n as f64;
        let v = y.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
        let want = propagate_dropout_moments(MomentPair { mean, variance }, p).unwrap();
        let (em, ev) = ((m - want.mean).abs() / want.mean, (v - want.variance).abs() / want.variance);
        assert!(em < 0.01 && ev < 0.01, "case {case}: mean err {em}, var err {ev}");
    }
}

/// `E ||y - (Z * X) w||^2 = ||y - X w~||^2 + (1 - p) / p ||G w~||^2` with keep
/// probability `p`, `w~ = p w` and `G` the diagonal of column norms.
#[test]
fn dropout_regression_matches_ridge_penalty() {
    let (n, d) = (50, 5);
    let mut rng = seeded(7);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    for keep in [0.3, 0.5, 0.7] {
        let spec = DropoutSpec::plain(1.0 - keep).unwrap();
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let z: Vec<f64> = dropout_mask(n * d, &spec, &mut rng).unwrap();
            for i in 0..n {
                let pred: f64 = (0..d).map(|j| z[i * d + j] * x[i * d + j] * w[j]).sum();
                acc += (y[i] - pred).powi(2);
            }
        }
        let mc = acc / draws as f64;
        let wt: Vec<f64> = w.iter().map(|v| keep * v).collect();
        let fit: f64 = (0..n)
            .map(|i| (y[i] - (0..d).map(|j| x[i * d + j] * wt[j]).sum::<f64>()).powi(2))
            .sum();
        let penalty: f64 = (0..d)
            .map(|j| (0..n).map(|i| x[i * d + j].powi(2)).sum::<f64>() * wt[j] * wt[j])
            .sum();
        let closed = fit + (1.0 - keep) / keep * penalty;
        let rel = (mc - closed).abs() / closed;
        assert!(rel < 0.01, "keep {keep}: mc {mc} closed {closed}");
    }
}

#[test]
fn concrete_symmetry_and_zero_input() {
    for t in [0.01, 0.1, 1.0, 5.0] {
        assert!((concrete_drop_indicator(logit(0.5f64), t, 0.5) - 0.5).abs() < 1e-12);
    }
    let state = ConcreteDropoutState::with_rate(0.4);
    let out = concrete_dropout_sample(&[0.0f64; 16], &state, &mut seeded(3)).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
    let bad = ConcreteDropoutState { relaxation_temperature: 0.0, ..state };
    assert!(concrete_dropout_sample(&[1.0f64], &bad, &mut seeded(3)).is_err());
}

#[test]
fn concrete_hard_limit_mean() {
    let mut rng = seeded(11);
    let theta = logit(0.3);
    let n = 100_000;
    let mean = (0..n)
        .map(|_| concrete_drop_indicator(theta, 0.01, concrete_uniform::<f64>(&mut rng)))
        .sum::<f64>()
        / n as f64;
    assert!((0.29..=0.31).contains(&mean), "mean {mean}");
}

#[test]
fn concrete_regularizer_examples() {
    let state = ConcreteDropoutState {
        p_logit: 0.0,
        weight_reg_coeff: 1.0,
        dropout_reg_coeff: 1.0,
        ..Default::default()
    };
    let r = concrete_dropout_regularizer(&state, 0.0, 4).unwrap();
    assert!((r + std::f64::consts::LN_2 / 4.0).abs() < 1e-12);
    let small = ConcreteDropoutState { p_logit: logit(1e-9), ..state };
    assert!((concrete_dropout_regularizer(&small, 1.0, 1).unwrap() - 1.0).abs() < 1e-6);
    let s = ConcreteDropoutState { p_logit: logit(0.2), ..state };
    let one = concrete_dropout_regularizer(&s, 2.5, 10).unwrap();
    let two = concrete_dropout_regularizer(&s, 2.5, 20).unwrap();
    assert!((one - 2.0 * two).abs() < 1e-12);
}

#[test]
fn concrete_regularizer_gradient_matches_differences() {
    let s = ConcreteDropoutState {
        p_logit: -0.8,
        ..Default::default()
    };
    let (g, _) = concrete_regularizer_grad(&s, 3.0, 7);
    let h = 1e-6;
    let f = |t: f64| concrete_dropout_regularizer(&ConcreteDropoutState { p_logit: t, ..s }, 3.0, 7).unwrap();
    let fd = (f(s.p_logit + h) - f(s.p_logit - h)) / (2.0 * h);
    assert!((g - fd).abs() < 1e-6 * fd.abs().max(1.0));
}

#[test]
fn bbb_noise_free_and_shape() {
    let param = GaussianVariationalParam::new(vec![0.5, -1.0, 2.0], vec![-3.0, 0.0, 1.0]).unwrap();
    assert_eq!(bbb_weights_with_noise(&param, &[0.0; 3]), param.mu);
    assert_eq!(bbb_sample_weights(&param, &mut seeded(0)).len(), 3);
    assert!(GaussianVariationalParam::new(vec![0.0; 2], vec![0.0; 3]).is_err());
}

#[test]
fn bbb_sample_variance() {
    let param = GaussianVariationalParam::new(vec![1.0, -2.0, 0.0], vec![-1.0, 0.5, 2.0]).unwrap();
    let mut rng = seeded(5);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| bbb_sample_weights(&param, &mut rng)).collect();
    for (k, sigma) in param.sigma().iter().enumerate() {
        let m = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let rel = (v - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel < 0.03, "element {k}: {v} vs {}", sigma * sigma);
    }
}

#[test]
fn gaussian_kl_closed_form_cases() {
    let kl = |mu: f64, sigma: f64| bbb_kl(&GaussianVariationalParam::new(vec![mu], vec![inv_softplus(sigma)]).unwrap()).unwrap();
    assert!(kl(0.0, 1.0).abs() < 1e-12);
    assert!((kl(1.0, 1.0) - 0.5).abs() < 1e-12);
    assert!((kl(0.0, 2.0) - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-12);
    assert!((kl(0.0, 2.0) - 0.8069).abs() < 1e-4);
    let mut bad = GaussianVariationalParam::new(vec![0.0], vec![0.0]).unwrap();
    bad.prior_sigma = 0.0;
    assert!(bbb_kl(&bad).is_err());
}

proptest! {
    #[test]
    fn kl_nonnegative_and_zero_only_at_prior(
        mu in prop::collection::vec(-3.0f64..3.0, 1..8),
        sig in prop::collection::vec(0.05f64..4.0, 8),
        prior_mu in -1.0f64..1.0,
        prior_sigma in 0.2f64..3.0,
    ) {
        let rho: Vec<f64> = sig[..mu.len()].iter().map(|&s| inv_softplus(s)).collect();
        let mut p = GaussianVariationalParam::new(mu.clone(), rho).unwrap();
        p.prior_mu = prior_mu;
        p.prior_sigma = prior_sigma;
        prop_assert!(bbb_kl(&p).unwrap() >= -1e-12);
        let mut at_prior = GaussianVariationalParam::new(vec![prior_mu; mu.len()], vec![inv_softplus(prior_sigma); mu.len()]).unwrap();
        at_prior.prior_mu = prior_mu;
        at_prior.prior_sigma = prior_sigma;
        prop_assert!(bbb_kl(&at_prior).unwrap().abs() < 1e-9);
    }

    #[test]
    fn concrete_indicator_monotone(
        u1 in 0.001f64..0.999, u2 in 0.001f64..0.999,
        p1 in 0.01f64..0.99, p2 in 0.01f64..0.99,
        t in 0.05f64..2.0,
    ) {
        let (ulo, uhi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        let (plo, phi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        prop_assert!(concrete_drop_indicator(logit(p1), t, ulo) <= concrete_drop_indicator(logit(p1), t, uhi));
        prop_assert!(concrete_drop_indicator(logit(plo), t, u1) <= concrete_drop_indicator(logit(phi), t, u1));
    }

    #[test]
    fn propagated_variance_nonnegative(mean in -5.0f64..5.0, var in 0.0f64..5.0, p in 0.0f64..=1.0) {
        let m = propagate_dropout_moments(MomentPair { mean, variance: var }, p).unwrap();
        prop_assert!(m.variance >= 0.0);
    }
}
