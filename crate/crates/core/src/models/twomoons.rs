use serde::{Deserialize, Serialize};

use super::{
    join_head_grads, make_site, regularize_concrete, set_site_rate, split_heads, StochasticModel, Trainable,
    VariationalMode,
};
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Linear, LinearCache, Param, SiteCache, StochasticSite, WeightNoise, Weights};
use crate::output::{HeteroscedasticOutput, OutputGrad};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::variational::{ConcreteDropoutState, DropoutSpec};

/// Two logits and two log-variances.
pub const TWO_MOONS_OUTPUTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoMoonsNetConfig {
    pub hidden: Vec<usize>,
    pub dropout: DropoutSpec,
    pub variational_mode: VariationalMode,
    pub concrete: ConcreteDropoutState,
}

impl Default for TwoMoonsNetConfig {
    fn default() -> Self {
        TwoMoonsNetConfig {
            hidden: vec![64, 64],
            dropout: DropoutSpec::new(0.1).expect("valid rate"),
            variational_mode: VariationalMode::Mcd,
            concrete: ConcreteDropoutState::default(),
        }
    }
}

/// MLP `2 -> hidden -> 4` with ReLU and one stochastic site before the
/// output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoMoonsNet {
    pub config: TwoMoonsNetConfig,
    hidden: Vec<Linear>,
    out: Linear,
    site: StochasticSite,
}

pub struct TwoMoonsCache {
    hidden: Vec<(LinearCache, Tensor)>,
    site: SiteCache,
    out: LinearCache,
    n: usize,
}

pub fn build_twomoons_net(cfg: &TwoMoonsNetConfig, rng: &mut Rng) -> Result<TwoMoonsNet> {
    if cfg.hidden.contains(&0) {
        return Err(Error::invalid("hidden widths must be positive"));
    }
    let mut hidden = Vec::with_capacity(cfg.hidden.len());
    let mut prev = 2;
    for &w in &cfg.hidden {
        hidden.push(Linear::new(prev, w, rng));
        prev = w;
    }
    let mut out = Linear::new(prev, TWO_MOONS_OUTPUTS, rng);
    if cfg.variational_mode == VariationalMode::Bbb {
        let w = std::mem::replace(&mut out.weights, Weights::Point(Param::zeros(0)));
        out.weights = w.into_gaussian();
    }
    let site = make_site(cfg.variational_mode, true, &cfg.dropout, &cfg.concrete)?;
    Ok(TwoMoonsNet {
        config: cfg.clone(),
        hidden,
        out,
        site,
    })
}

impl TwoMoonsNet {
    /// Override every weight and bias with zeros.
    pub fn zero_weights(&mut self) {
        self.visit_params(&mut |p| p.value.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Raw `[n, 4]` outputs.
    pub fn forward_raw(&self, input: &Tensor, sampling: bool, rng: &mut Rng) -> Result<Tensor> {
        Ok(self.run(input, sampling, rng)?.0)
    }

    fn run(&self, x: &Tensor, sampling: bool, rng: &mut Rng) -> Result<(Tensor, TwoMoonsCache)> {
        if x.c() * x.spatial() != 2 {
            return Err(Error::shape(format!("two-moons input must be [n, 2], got {:?}", x.shape())));
        }
        let noise = if sampling { WeightNoise::Sample } else { WeightNoise::Mean };
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let (y, c) = layer.forward(&h, WeightNoise::Mean, rng)?;
            h = relu(&y);
            caches.push((c, h.clone()));
        }
        let (h, site) = self.site.forward(&h, sampling, rng)?;
        let (y, out) = self.out.forward(&h, noise, rng)?;
        let n = y.n();
        Ok((
            y,
            TwoMoonsCache {
                hidden: caches,
                site,
                out,
                n,
            },
        ))
    }
}

fn to_output(y: &Tensor) -> Result<HeteroscedasticOutput> {
    split_heads(y, 2)
}

impl StochasticModel for TwoMoonsNet {
    fn forward(&self, input: &Tensor, sampling: bool, rng: &mut Rng) -> Result<HeteroscedasticOutput> {
        to_output(&self.run(input, sampling, rng)?.0)
    }

    fn mode(&self) -> VariationalMode {
        self.config.variational_mode
    }
}

impl Trainable for TwoMoonsNet {
    type Cache = TwoMoonsCache;

    fn forward_train(
        &self,
        input: &Tensor,
        sampling: bool,
        rng: &mut Rng,
    ) -> Result<(HeteroscedasticOutput, TwoMoonsCache)> {
        let (y, cache) = self.run(input, sampling, rng)?;
        Ok((to_output(&y)?, cache))
    }

    fn backward(&mut self, cache: TwoMoonsCache, grad: &OutputGrad) -> Result<()> {
        let dy = join_head_grads(grad, [cache.n, 2, 1, 1])?;
        let mut dh = self.out.backward(cache.out, &dy);
        dh = self.site.backward(cache.site, &dh);
        for (layer, (c, a)) in self.hidden.iter_mut().zip(cache.hidden).rev() {
            let dz = relu_backward(&a, &dh);
            dh = layer.backward(c, &dz);
        }
        Ok(())
    }

    fn regularize(&mut self, n_data: usize) -> Result<f64> {
        if n_data == 0 {
            return Err(Error::invalid("n_data must be at least 1"));
        }
        let kl = self.out.weights.add_kl(1.0 / n_data as f64);
        Ok(kl + regularize_concrete(&mut self.site, &mut self.out.weights, n_data)?)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.hidden {
            l.visit_params(f);
        }
        self.out.visit_params(f);
        self.site.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.visit_buffers(&format!("hidden{i}"), f);
        }
        self.out.visit_buffers("out", f);
        self.site.visit_buffers("site", f);
    }

    fn dropout_rates(&self) -> Vec<f64> {
        self.site.rate().into_iter().collect()
    }

    fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        set_site_rate(&mut self.site, rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn batch(n: usize) -> Tensor {
        Tensor::matrix(n, 2, (0..2 * n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn outputs_four_values() {
        let net = build_twomoons_net(&TwoMoonsNetConfig::default(), &mut seeded(0)).unwrap();
        let y = net.forward_raw(&batch(5), true, &mut seeded(1)).unwrap();
        assert_eq!(y.shape(), [5, 4, 1, 1]);
        let out = net.forward(&batch(5), true, &mut seeded(1)).unwrap();
        assert_eq!(out.shape, [5, 2, 1, 1]);
    }

    #[test]
    fn deterministic_without_sampling() {
        let net = build_twomoons_net(&TwoMoonsNetConfig::default(), &mut seeded(0)).unwrap();
        let a = net.forward(&batch(3), false, &mut seeded(1)).unwrap();
        let b = net.forward(&batch(3), false, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_constant_output() {
        let mut net = build_twomoons_net(&TwoMoonsNetConfig::default(), &mut seeded(0)).unwrap();
        net.zero_weights();
        let y = net.forward_raw(&batch(4), false, &mut seeded(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bbb_zero_noise_equals_mean() {
        let cfg = TwoMoonsNetConfig {
            variational_mode: VariationalMode::Bbb,
            ..Default::default()
        };
        let net = build_twomoons_net(&cfg, &mut seeded(0)).unwrap();
        let x = batch(3);
        let mean = net.forward_raw(&x, false, &mut seeded(0)).unwrap();
        let mut h = x.clone();
        for l in &net.hidden {
            h = relu(&l.forward(&h, WeightNoise::Mean, &mut seeded(0)).unwrap().0);
        }
        let (zero, _) = net.out.forward(&h, WeightNoise::Zero, &mut seeded(0)).unwrap();
        assert_eq!(mean, zero);
    }

    #[test]
    fn seeds_change_sampled_outputs() {
        let net = build_twomoons_net(&TwoMoonsNetConfig::default(), &mut seeded(0)).unwrap();
        let a = net.forward(&batch(8), true, &mut seeded(1)).unwrap();
        let b = net.forward(&batch(8), true, &mut seeded(2)).unwrap();
        assert_ne!(a, b);
    }
}
