//! A small layer engine with hand-written backward passes.
//!
//! Layers return an explicit cache from `forward` and consume it in
//! `backward`, so inference is `&self` and a model can be shared by
//! concurrent stochastic passes.

mod layers;
mod optim;
mod site;

pub use layers::{relu, relu_backward, BatchNorm2d, BnCache, Conv2d, ConvCache, ConvTranspose2d, Linear, LinearCache};
pub use optim::{Sgd, StepDecay};
pub use site::{SiteCache, StochasticSite};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::variational::{self, GaussianVariationalParam};

/// A trainable buffer with its gradient and momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            decay: true,
        }
    }

    pub fn without_decay(mut self) -> Self {
        self.decay = false;
        self
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    /// He-normal initialization for `fan_in` inputs.
    pub fn he(n: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        Self::new(
            (0..n)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
    }
}

/// How a layer with Gaussian weights realizes them on a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightNoise {
    /// Use the posterior mean.
    Mean,
    /// Draw `mu + sigma * eps`.
    Sample,
    /// Draw with `eps` forced to zero (equals `Mean`, but through the sampling path).
    Zero,
}

/// Weights realized for one pass; `eps` is kept for the backward pass.
#[derive(Clone, Debug)]
pub struct WeightDraw {
    pub values: Vec<f32>,
    pub eps: Option<Vec<f32>>,
}

/// Weight storage of an affine layer: point estimates or a factorized
/// Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Point(Param),
    Gaussian {
        mu: Param,
        rho: Param,
        prior_mu: f32,
        prior_sigma: f32,
    },
}

/// Initial `rho` of Gaussian weights, `softplus(-5) ~ 0.0067`.
pub const INITIAL_RHO: f32 = -5.0;

impl Weights {
    /// Turn point weights into a Gaussian posterior centred on them.
    pub fn into_gaussian(self) -> Weights {
        match self {
            Weights::Point(p) => {
                let n = p.len();
                Weights::Gaussian {
                    mu: p,
                    rho: Param::new(vec![INITIAL_RHO; n]).without_decay(),
                    prior_mu: 0.0,
                    prior_sigma: 1.0,
                }
            }
            g => g,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Weights::Gaussian { .. })
    }

    /// Point weights, or the posterior mean.
    pub fn mean(&self) -> &[f32] {
        match self {
            Weights::Point(p) => &p.value,
            Weights::Gaussian { mu, .. } => &mu.value,
        }
    }

    pub fn mean_mut(&mut self) -> &mut Param {
        match self {
            Weights::Point(p) => p,
            Weights::Gaussian { mu, .. } => mu,
        }
    }

    pub fn len(&self) -> usize {
        self.mean().len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean().is_empty()
    }

    pub fn variational(&self) -> Option<GaussianVariationalParam<f32>> {
        match self {
            Weights::Point(_) => None,
            Weights::Gaussian {
                mu,
                rho,
                prior_mu,
                prior_sigma,
            } => Some(GaussianVariationalParam {
                mu: mu.value.clone(),
                rho: rho.value.clone(),
                prior_mu: *prior_mu,
                prior_sigma: *prior_sigma,
            }),
        }
    }

    pub fn draw(&self, noise: WeightNoise, rng: &mut impl Rng) -> WeightDraw {
        match (self, noise) {
            (Weights::Point(p), _) => WeightDraw {
                values: p.value.clone(),
                eps: None,
            },
            (Weights::Gaussian { mu, .. }, WeightNoise::Mean) => WeightDraw {
                values: mu.value.clone(),
                eps: None,
            },
            (Weights::Gaussian { .. }, _) => {
                let param = self.variational().expect("gaussian weights");
                let eps: Vec<f32> = match noise {
                    WeightNoise::Zero => vec![0.0; param.mu.len()],
                    _ => variational::standard_normal(param.mu.len(), rng),
                };
                WeightDraw {
                    values: variational::bbb_weights_with_noise(&param, &eps),
                    eps: Some(eps),
                }
            }
        }
    }

    /// Accumulate `dL/dw` for a pass that used `draw`.
    pub fn accumulate(&mut self, dw: &[f32], draw: &WeightDraw) {
        match self {
            Weights::Point(p) => add_into(&mut p.grad, dw),
            Weights::Gaussian { mu, rho, .. } => {
                add_into(&mut mu.grad, dw);
                if let Some(eps) = &draw.eps {
                    for ((g, &d), (&e, &r)) in rho.grad.iter_mut().zip(dw).zip(eps.iter().zip(&rho.value)) {
                        *g += d * e * variational::sigmoid(r);
                    }
                }
            }
        }
    }

    /// `KL[q || prior]` scaled by `scale`, adding its gradient. Zero for point weights.
    pub fn add_kl(&mut self, scale: f64) -> f64 {
        let Some(param) = self.variational() else {
            return 0.0;
        };
        let kl = variational::bbb_kl(&param).unwrap_or(f64::INFINITY);
        let (dmu, drho) = variational::bbb_kl_grad(&param);
        if let Weights::Gaussian { mu, rho, .. } = self {
            for (g, d) in mu.grad.iter_mut().zip(dmu) {
                *g += (scale as f32) * d;
            }
            for (g, d) in rho.grad.iter_mut().zip(drho) {
                *g += (scale as f32) * d;
            }
        }
        kl * scale
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Weights::Point(p) => f(p),
            Weights::Gaussian { mu, rho, .. } => {
                f(mu);
                f(rho);
            }
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        match self {
            Weights::Point(p) => f(&format!("{prefix}.weight"), &mut p.value),
            Weights::Gaussian { mu, rho, .. } => {
                f(&format!("{prefix}.weight_mu"), &mut mu.value);
                f(&format!("{prefix}.weight_rho"), &mut rho.value);
            }
        }
    }
}

pub(crate) fn add_into(dst: &mut [f32], src: &[f32]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
