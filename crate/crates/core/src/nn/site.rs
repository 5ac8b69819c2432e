use rand::Rng;

use super::Param;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::variational::{self, ConcreteDropoutState, DropoutScaling, DropoutSpec};

/// A point in the network where activations may be stochastically masked.
#[derive(Clone, Debug, PartialEq)]
pub enum StochasticSite {
    Identity,
    Bernoulli(DropoutSpec),
    /// Concrete dropout; the learnable logit lives in `p_logit`, the rest of
    /// the state (temperature, coefficients) in `state`.
    Concrete {
        state: ConcreteDropoutState,
        p_logit: Param,
    },
}

pub enum SiteCache {
    Identity,
    Mask(Vec<f32>),
    Concrete { input: Tensor, indicators: Vec<f32> },
}

impl StochasticSite {
    pub fn concrete(state: ConcreteDropoutState) -> Self {
        StochasticSite::Concrete {
            state,
            p_logit: Param::new(vec![state.p_logit as f32]).without_decay(),
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, StochasticSite::Identity)
    }

    /// Current dropout rate, if this site drops units.
    pub fn rate(&self) -> Option<f64> {
        match self {
            StochasticSite::Identity => None,
            StochasticSite::Bernoulli(spec) => Some(spec.rate),
            StochasticSite::Concrete { .. } => Some(self.concrete_state().unwrap().rate()),
        }
    }

    /// Concrete state with the live logit.
    pub fn concrete_state(&self) -> Option<ConcreteDropoutState> {
        match self {
            StochasticSite::Concrete { state, p_logit } => Some(ConcreteDropoutState {
                p_logit: p_logit.value[0] as f64,
                ..*state
            }),
            _ => None,
        }
    }

    /// With `sampling` off the site is deterministic: identity under inverted
    /// scaling, expectation scaling `1 - p` for plain dropout.
    pub fn forward(&self, x: &Tensor, sampling: bool, rng: &mut impl Rng) -> Result<(Tensor, SiteCache)> {
        match self {
            StochasticSite::Identity => Ok((x.clone(), SiteCache::Identity)),
            StochasticSite::Bernoulli(spec) => {
                let mask: Vec<f32> = if sampling {
                    variational::dropout_mask(x.len(), spec, rng)?
                } else {
                    spec.validate()?;
                    let scale = match spec.scaling {
                        DropoutScaling::Inverted => 1.0,
                        DropoutScaling::Plain => (1.0 - spec.rate) as f32,
                    };
                    vec![scale; x.len()]
                };
                let mut y = x.clone();
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                Ok((y, SiteCache::Mask(mask)))
            }
            StochasticSite::Concrete { .. } => {
                if !sampling {
                    return Ok((x.clone(), SiteCache::Identity));
                }
                let state = self.concrete_state().unwrap();
                let draw = variational::concrete_dropout_draw(x.data(), &state, rng)?;
                let y = Tensor::from_vec(x.shape(), draw.output)?;
                Ok((
                    y,
                    SiteCache::Concrete {
                        input: x.clone(),
                        indicators: draw.indicators,
                    },
                ))
            }
        }
    }

    pub fn backward(&mut self, cache: SiteCache, dy: &Tensor) -> Tensor {
        match cache {
            SiteCache::Identity => dy.clone(),
            SiteCache::Mask(mask) => {
                let mut dx = dy.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(&mask) {
                    *d *= m;
                }
                dx
            }
            SiteCache::Concrete { input, indicators } => {
                let state = self.concrete_state().expect("concrete cache on concrete site");
                let inv_keep = (1.0 / (1.0 - state.rate())) as f32;
                let mut dlogit = 0.0f64;
                let mut dx = dy.clone();
                for ((d, &x), &z) in dx.data_mut().iter_mut().zip(input.data()).zip(&indicators) {
                    dlogit += *d as f64 * variational::concrete_output_dlogit(x as f64, z as f64, &state);
                    *d *= (1.0 - z) * inv_keep;
                }
                if let StochasticSite::Concrete { p_logit, .. } = self {
                    p_logit.grad[0] += dlogit as f32;
                }
                dx
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let StochasticSite::Concrete { p_logit, .. } = self {
            f(p_logit);
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        if let StochasticSite::Concrete { p_logit, .. } = self {
            f(&format!("{prefix}.p_logit"), &mut p_logit.value);
        }
    }
}
