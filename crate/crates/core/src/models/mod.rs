//! Model builders: a two-moons MLP and a small encoder-decoder segmenter,
//! both with a mean-logit head and a log-variance head.

mod checkpoint;
mod segmenter;
mod twomoons;

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use segmenter::{build_segmenter, Segmenter, SegmenterCache, SegmenterConfig};
pub use twomoons::{build_twomoons_net, TwoMoonsCache, TwoMoonsNet, TwoMoonsNetConfig};

use crate::error::Result;
use crate::nn::Param;
use crate::output::{HeteroscedasticOutput, OutputGrad};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Posterior approximation used by a model's stochastic sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationalMode {
    #[default]
    Mcd,
    Concrete,
    Bbb,
}

impl std::str::FromStr for VariationalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mcd" | "dropout" => Ok(VariationalMode::Mcd),
            "concrete" => Ok(VariationalMode::Concrete),
            "bbb" => Ok(VariationalMode::Bbb),
            other => Err(format!("unknown variational mode {other:?}")),
        }
    }
}

impl std::fmt::Display for VariationalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VariationalMode::Mcd => "mcd",
            VariationalMode::Concrete => "concrete",
            VariationalMode::Bbb => "bbb",
        })
    }
}

/// Which decoder layers carry a stochastic site.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    #[default]
    FinalLayer,
    LastTwo,
    AllDecoder,
}

impl DropoutPlacement {
    /// Number of trailing decoder sites (out of `total`) that are active.
    pub fn active_sites(self, total: usize) -> usize {
        match self {
            DropoutPlacement::FinalLayer => 1.min(total),
            DropoutPlacement::LastTwo => 2.min(total),
            DropoutPlacement::AllDecoder => total,
        }
    }
}

impl std::str::FromStr for DropoutPlacement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "final_layer" => Ok(DropoutPlacement::FinalLayer),
            "last_two" => Ok(DropoutPlacement::LastTwo),
            "all_decoder" => Ok(DropoutPlacement::AllDecoder),
            other => Err(format!("unknown dropout placement {other:?}")),
        }
    }
}

impl std::fmt::Display for DropoutPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropoutPlacement::FinalLayer => "final_layer",
            DropoutPlacement::LastTwo => "last_two",
            DropoutPlacement::AllDecoder => "all_decoder",
        })
    }
}

/// A model that can be run stochastically for MC inference.
pub trait StochasticModel: Sync {
    /// `sampling = true` draws dropout masks / weights; `false` uses mean
    /// weights and identity masks. Normalization always uses running statistics.
    fn forward(&self, input: &Tensor, sampling: bool, rng: &mut Rng) -> Result<HeteroscedasticOutput>;

    fn mode(&self) -> VariationalMode;
}

/// Training interface over the hand-written backward passes.
pub trait Trainable: StochasticModel {
    type Cache;

    /// Pass with batch statistics in normalization layers.
    fn forward_train(&self, input: &Tensor, sampling: bool, rng: &mut Rng)
        -> Result<(HeteroscedasticOutput, Self::Cache)>;

    /// Accumulate parameter gradients and fold batch statistics into the
    /// running estimates.
    fn backward(&mut self, cache: Self::Cache, grad: &OutputGrad) -> Result<()>;

    /// Add the variational regularizers (Gaussian KL, Concrete regularizer),
    /// each divided by `n_data`, to the gradients; returns their value.
    fn regularize(&mut self, n_data: usize) -> Result<f64>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Every persistent buffer by name, for checkpoints.
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>));

    /// Current rates of the active stochastic sites.
    fn dropout_rates(&self) -> Vec<f64>;

    /// Set the rate of every active Bernoulli site.
    fn set_dropout_rate(&mut self, rate: f64) -> Result<()>;

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}

/// Split a `[n, 2C, h, w]` head output into the two heads.
pub(crate) fn split_heads(out: &Tensor, classes: usize) -> Result<HeteroscedasticOutput> {
    let (mean, logv) = out.split_channels(classes);
    HeteroscedasticOutput::new(
        [out.n(), classes, out.h(), out.w()],
        mean.data().iter().map(|&v| v as f64).collect(),
        logv.data().iter().map(|&v| v as f64).collect(),
    )
}

/// Inverse of [`split_heads`] for gradients.
pub(crate) fn join_head_grads(grad: &OutputGrad, shape: [usize; 4]) -> Result<Tensor> {
    let to_tensor = |v: &[f64]| Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect());
    Tensor::concat_channels(&to_tensor(&grad.d_mean)?, &to_tensor(&grad.d_log_variance)?)
}

/// Concrete regularizer of `site` against the weights of the layer it feeds.
pub(crate) fn regularize_concrete(
    site: &mut crate::nn::StochasticSite,
    weights: &mut crate::nn::Weights,
    n_data: usize,
) -> Result<f64> {
    let Some(state) = site.concrete_state() else {
        return Ok(0.0);
    };
    let w = weights.mean_mut();
    let weight_l2: f64 = w.value.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let value = crate::variational::concrete_dropout_regularizer(&state, weight_l2, n_data)?;
    let (d_logit, d_l2) = crate::variational::concrete_regularizer_grad(&state, weight_l2, n_data);
    for (g, &v) in w.grad.iter_mut().zip(&w.value) {
        *g += (2.0 * d_l2) as f32 * v;
    }
    site.visit_params(&mut |p| p.grad[0] += d_logit as f32);
    Ok(value)
}

/// Site for one placement slot under `mode`. Gaussian-weight models drop
/// nothing; their stochasticity lives in the layer the slot feeds.
pub(crate) fn make_site(
    mode: VariationalMode,
    active: bool,
    dropout: &crate::variational::DropoutSpec,
    concrete: &crate::variational::ConcreteDropoutState,
) -> Result<crate::nn::StochasticSite> {
    use crate::nn::StochasticSite;
    dropout.validate()?;
    if !active {
        return Ok(StochasticSite::Identity);
    }
    Ok(match mode {
        VariationalMode::Mcd => StochasticSite::Bernoulli(*dropout),
        VariationalMode::Concrete => {
            let rate = dropout.rate.clamp(1e-3, 1.0 - 1e-3);
            StochasticSite::concrete(crate::variational::ConcreteDropoutState {
                p_logit: crate::variational::logit(rate),
                ..*concrete
            })
        }
        VariationalMode::Bbb => StochasticSite::Identity,
    })
}

pub(crate) fn set_site_rate(site: &mut crate::nn::StochasticSite, rate: f64) -> Result<()> {
    if let crate::nn::StochasticSite::Bernoulli(spec) = site {
        let updated = crate::variational::DropoutSpec { rate, ..*spec };
        updated.validate()?;
        *spec = updated;
    }
    Ok(())
}
