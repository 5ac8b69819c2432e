//! Posterior approximations over network weights: Bernoulli (MC) dropout,
//! Concrete dropout with a learnable rate, and factorized Gaussian weights
//! trained by Bayes-by-Backprop. Moment propagation through a plain dropout
//! unit is provided as an analytic cross-check of the sampled masks.
//!
//! The slice-level functions here are generic over the float type so the
//! `f32` network layers and the `f64` reference checks share one code path.

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How surviving units are rescaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutScaling {
    /// Survivors are multiplied by `1 / (1 - p)`, keeping the mean unchanged.
    #[default]
    Inverted,
    /// Survivors pass through unscaled.
    Plain,
}

/// Dropout configuration for one site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutSpec {
    /// Probability of zeroing a unit, in `[0, 1)`.
    pub rate: f64,
    /// Learn the rate (Concrete dropout) instead of keeping it fixed.
    #[serde(default)]
    pub learnable: bool,
    #[serde(default)]
    pub scaling: DropoutScaling,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        DropoutSpec {
            rate: 0.5,
            learnable: false,
            scaling: DropoutScaling::Inverted,
        }
    }
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        let spec = DropoutSpec {
            rate,
            ..Default::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn plain(rate: f64) -> Result<Self> {
        let spec = DropoutSpec {
            rate,
            learnable: false,
            scaling: DropoutScaling::Plain,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::DegenerateDropoutRate(self.rate));
        }
        Ok(())
    }

    /// Unconstrained logit of the rate, the stored form when learnable.
    pub fn rate_logit(&self) -> f64 {
        logit(self.rate)
    }
}

/// Mean and variance of one activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: f64,
    pub variance: f64,
}

/// State of a Concrete dropout site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConcreteDropoutState {
    /// Unconstrained rate parameter; the rate is `sigmoid(p_logit)`.
    pub p_logit: f64,
    pub relaxation_temperature: f64,
    pub weight_reg_coeff: f64,
    pub dropout_reg_coeff: f64,
}

impl Default for ConcreteDropoutState {
    fn default() -> Self {
        ConcreteDropoutState {
            p_logit: 0.0,
            relaxation_temperature: 0.1,
            weight_reg_coeff: 1e-2,
            dropout_reg_coeff: 1.0,
        }
    }
}

impl ConcreteDropoutState {
    pub fn with_rate(rate: f64) -> Self {
        ConcreteDropoutState {
            p_logit: logit(rate),
            ..Default::default()
        }
    }

    /// Effective dropout rate, always strictly inside `(0, 1)`.
    pub fn rate(&self) -> f64 {
        sigmoid(self.p_logit)
    }

    fn validate(&self) -> Result<()> {
        if !(self.relaxation_temperature > 0.0) || !self.relaxation_temperature.is_finite() {
            return Err(Error::invalid(format!(
                "relaxation temperature must be positive, got {}",
                self.relaxation_temperature
            )));
        }
        Ok(())
    }
}

/// Factorized Gaussian over a weight array, `sigma = softplus(rho)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariationalParam<F = f64> {
    pub mu: Vec<F>,
    pub rho: Vec<F>,
    pub prior_mu: F,
    pub prior_sigma: F,
}

impl<F: Float> GaussianVariationalParam<F> {
    /// Standard-normal prior, the default for every Bayesian layer.
    pub fn new(mu: Vec<F>, rho: Vec<F>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(Error::shape(format!(
                "mu has {} elements but rho has {}",
                mu.len(),
                rho.len()
            )));
        }
        Ok(GaussianVariationalParam {
            mu,
            rho,
            prior_mu: F::zero(),
            prior_sigma: F::one(),
        })
    }

    pub fn sigma(&self) -> Vec<F> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }
}

pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn logit<F: Float>(p: F) -> F {
    (p / (F::one() - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<F: Float>(x: F) -> F {
    let twenty = F::from(20.0).unwrap();
    if x > twenty {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("f64 fits the target float")
}

/// Draw a dropout mask of `len` multipliers (0 for dropped units, 1 or
/// `1/(1-p)` for survivors depending on the scaling).
pub fn dropout_mask<F: Float>(len: usize, spec: &DropoutSpec, rng: &mut impl Rng) -> Result<Vec<F>> {
    spec.validate()?;
    let keep = match spec.scaling {
        DropoutScaling::Inverted => cast::<F>(1.0 / (1.0 - spec.rate)),
        DropoutScaling::Plain => F::one(),
    };
    if spec.rate == 0.0 {
        return Ok(vec![keep; len]);
    }
    Ok((0..len)
        .map(|_| {
            if rng.random::<f64>() < spec.rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect())
}

/// Zero each unit of `x` independently with probability `spec.rate`.
pub fn mc_dropout_apply<F: Float>(x: &[F], spec: &DropoutSpec, rng: &mut impl Rng) -> Result<Vec<F>> {
    spec.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dropout input"));
    }
    let mask = dropout_mask::<F>(x.len(), spec, rng)?;
    Ok(x.iter().zip(&mask).map(|(&v, &m)| v * m).collect())
}

/// Mean and variance of `x * z` for `z ~ Bernoulli(1 - p)` independent of
/// `x`, with no rescaling of survivors.
pub fn propagate_dropout_moments(m: MomentPair, p: f64) -> Result<MomentPair> {
    if m.variance < 0.0 || !m.variance.is_finite() {
        return Err(Error::invalid(format!(
            "variance must be nonnegative, got {}",
            m.variance
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout rate {p} outside [0, 1]")));
    }
    let q = 1.0 - p;
    Ok(MomentPair {
        mean: m.mean * q,
        variance: m.variance * p * q + m.variance * q * q + m.mean * m.mean * p * q,
    })
}

/// Relaxed Bernoulli drop indicator for uniform draw `u`.
pub fn concrete_drop_indicator<F: Float>(p_logit: F, temperature: F, u: F) -> F {
    sigmoid((p_logit + logit(u)) / temperature)
}

/// Uniform draw kept away from 0 and 1 so its logit stays finite.
pub fn concrete_uniform<F: Float>(rng: &mut impl Rng) -> F {
    let eps = 1e-7;
    cast(rng.random::<f64>().clamp(eps, 1.0 - eps))
}

/// Relaxed drop indicators and the resulting output of a Concrete dropout
/// site.
pub struct ConcreteSample<F> {
    pub indicators: Vec<F>,
    pub output: Vec<F>,
}

/// Apply Concrete dropout: `z = sigmoid((logit p + logit u) / t)` and
/// output `x * (1 - z) / (1 - p)`.
pub fn concrete_dropout_draw<F: Float>(
    x: &[F],
    state: &ConcreteDropoutState,
    rng: &mut impl Rng,
) -> Result<ConcreteSample<F>> {
    state.validate()?;
    let theta = cast::<F>(state.p_logit);
    let t = cast::<F>(state.relaxation_temperature);
    let inv_keep = cast::<F>(1.0 / (1.0 - state.rate()));
    let indicators: Vec<F> = (0..x.len())
        .map(|_| concrete_drop_indicator(theta, t, concrete_uniform::<F>(rng)))
        .collect();
    let output = x
        .iter()
        .zip(&indicators)
        .map(|(&v, &z)| v * (F::one() - z) * inv_keep)
        .collect();
    Ok(ConcreteSample { indicators, output })
}

pub fn concrete_dropout_sample<F: Float>(
    x: &[F],
    state: &ConcreteDropoutState,
    rng: &mut impl Rng,
) -> Result<Vec<F>> {
    Ok(concrete_dropout_draw(x, state, rng)?.output)
}

/// Derivative of one Concrete output `x (1 - z) / (1 - p)` with respect to
/// `p_logit`, given the realized indicator `z`.
pub fn concrete_output_dlogit(x: f64, z: f64, state: &ConcreteDropoutState) -> f64 {
    let p = state.rate();
    let t = state.relaxation_temperature;
    x * (-z * (1.0 - z) / (t * (1.0 - p)) + (1.0 - z) * p / (1.0 - p))
}

/// Concrete dropout regularizer:
/// `wrc / n * weight_l2 / (1 - p) + drc / n * (p ln p + (1 - p) ln(1 - p))`.
pub fn concrete_dropout_regularizer(
    state: &ConcreteDropoutState,
    weight_l2: f64,
    n_data: usize,
) -> Result<f64> {
    if n_data == 0 {
        return Err(Error::invalid("n_data must be at least 1"));
    }
    let p = state.rate();
    let n = n_data as f64;
    let weight_term = state.weight_reg_coeff / n * weight_l2 / (1.0 - p);
    let entropy_term = state.dropout_reg_coeff / n * (xlogx(p) + xlogx(1.0 - p));
    Ok(weight_term + entropy_term)
}

/// Gradients of [`concrete_dropout_regularizer`] with respect to `p_logit`
/// and to `weight_l2`.
pub fn concrete_regularizer_grad(state: &ConcreteDropoutState, weight_l2: f64, n_data: usize) -> (f64, f64) {
    let p = state.rate();
    let n = n_data.max(1) as f64;
    // d/dθ of 1/(1-p) is p/(1-p); d/dθ of the entropy term is θ p (1-p).
    let d_logit = state.weight_reg_coeff / n * weight_l2 * p / (1.0 - p)
        + state.dropout_reg_coeff / n * state.p_logit * p * (1.0 - p);
    let d_weight_l2 = state.weight_reg_coeff / n / (1.0 - p);
    (d_logit, d_weight_l2)
}

fn xlogx(v: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        v * v.ln()
    }
}

/// `w = mu + softplus(rho) * eps` for the given noise.
pub fn bbb_weights_with_noise<F: Float>(param: &GaussianVariationalParam<F>, eps: &[F]) -> Vec<F> {
    param
        .mu
        .iter()
        .zip(&param.rho)
        .zip(eps)
        .map(|((&m, &r), &e)| m + softplus(r) * e)
        .collect()
}

/// Standard normal noise of the given length.
pub fn standard_normal<F: Float>(len: usize, rng: &mut impl Rng) -> Vec<F> {
    (0..len).map(|_| cast(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Reparameterized weight draw `w = mu + softplus(rho) * eps`, `eps ~ N(0, I)`.
pub fn bbb_sample_weights<F: Float>(param: &GaussianVariationalParam<F>, rng: &mut impl Rng) -> Vec<F> {
    let eps = standard_normal(param.mu.len(), rng);
    bbb_weights_with_noise(param, &eps)
}

/// Closed-form `KL[q(w | theta) || N(prior_mu, prior_sigma^2)]` summed over elements.
pub fn bbb_kl<F: Float>(param: &GaussianVariationalParam<F>) -> Result<f64> {
    let prior_sigma = param.prior_sigma.to_f64().unwrap_or(f64::NAN);
    if !(prior_sigma > 0.0) {
        return Err(Error::invalid(format!(
            "prior sigma must be positive, got {prior_sigma}"
        )));
    }
    let prior_mu = param.prior_mu.to_f64().unwrap_or(f64::NAN);
    let prior_var = prior_sigma * prior_sigma;
    let mut kl = 0.0;
    for (&m, &r) in param.mu.iter().zip(&param.rho) {
        let sigma = softplus(r.to_f64().unwrap());
        let d = m.to_f64().unwrap() - prior_mu;
        kl += (prior_sigma / sigma).ln() + (sigma * sigma + d * d) / (2.0 * prior_var) - 0.5;
    }
    Ok(kl)
}

/// Gradient of [`bbb_kl`] with respect to `mu` and `rho`.
pub fn bbb_kl_grad<F: Float>(param: &GaussianVariationalParam<F>) -> (Vec<F>, Vec<F>) {
    let prior_var = param.prior_sigma * param.prior_sigma;
    let mut d_mu = Vec::with_capacity(param.mu.len());
    let mut d_rho = Vec::with_capacity(param.rho.len());
    for (&m, &r) in param.mu.iter().zip(&param.rho) {
        let sigma = softplus(r);
        d_mu.push((m - param.prior_mu) / prior_var);
        d_rho.push((sigma / prior_var - F::one() / sigma) * sigmoid(r));
    }
    (d_mu, d_rho)
}
