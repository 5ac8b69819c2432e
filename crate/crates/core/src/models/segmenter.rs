use serde::{Deserialize, Serialize};

use super::{
    join_head_grads, make_site, regularize_concrete, set_site_rate, split_heads, DropoutPlacement, StochasticModel,
    Trainable, VariationalMode,
};
use crate::error::{Error, Result};
use crate::nn::{
    relu, relu_backward, BatchNorm2d, BnCache, Conv2d, ConvCache, ConvTranspose2d, Param, SiteCache, StochasticSite,
    WeightNoise,
};
use crate::output::{HeteroscedasticOutput, OutputGrad};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::variational::{ConcreteDropoutState, DropoutSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub classes: usize,
    pub dropout: DropoutSpec,
    pub dropout_placement: DropoutPlacement,
    pub variational_mode: VariationalMode,
    pub skip_connections: bool,
    /// Temperature and coefficients for Concrete sites; the initial rate
    /// comes from `dropout.rate`.
    pub concrete: ConcreteDropoutState,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            in_channels: 1,
            encoder_channels: vec![16, 32, 64, 128],
            classes: 2,
            dropout: DropoutSpec::default(),
            dropout_placement: DropoutPlacement::FinalLayer,
            variational_mode: VariationalMode::Mcd,
            skip_connections: true,
            concrete: ConcreteDropoutState::default(),
        }
    }
}

impl SegmenterConfig {
    /// Total downsampling factor; input sides must be multiples of it.
    pub fn stride(&self) -> usize {
        1 << self.encoder_channels.len()
    }
}

/// Stride-2 conv encoder, mirrored transposed-conv decoder with skips, and a
/// 1x1 projection to `2C` channels (mean logits then log-variances).
///
/// Stochastic slots sit on the inputs of the decoder layers and of the head,
/// deepest first; placements activate a trailing subset of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    encoder: Vec<(Conv2d, BatchNorm2d)>,
    decoder: Vec<(ConvTranspose2d, BatchNorm2d)>,
    head: Conv2d,
    sites: Vec<StochasticSite>,
}

struct BlockCache {
    site: SiteCache,
    conv: ConvCache,
    bn: BnCache,
    out: Tensor,
}

pub struct SegmenterCache {
    encoder: Vec<(ConvCache, BnCache, Tensor)>,
    decoder: Vec<BlockCache>,
    head_site: SiteCache,
    head: ConvCache,
    out_shape: [usize; 4],
}

pub fn build_segmenter(cfg: &SegmenterConfig, rng: &mut Rng) -> Result<Segmenter> {
    let depth = cfg.encoder_channels.len();
    if depth == 0 || cfg.encoder_channels.contains(&0) || cfg.classes < 2 || cfg.in_channels == 0 {
        return Err(Error::invalid(format!("invalid segmenter config {cfg:?}")));
    }
    let ch = &cfg.encoder_channels;
    let mut encoder = Vec::with_capacity(depth);
    let mut prev = cfg.in_channels;
    for &c in ch {
        encoder.push((Conv2d::new(prev, c, 3, 2, 1, rng), BatchNorm2d::new(c)));
        prev = c;
    }
    let mut decoder = Vec::with_capacity(depth);
    for j in 0..depth {
        let out = if j + 1 < depth { ch[depth - 2 - j] } else { ch[0] };
        decoder.push((ConvTranspose2d::new(prev, out, 3, 2, 1, 1, rng), BatchNorm2d::new(out)));
        prev = out;
        if cfg.skip_connections && j + 1 < depth {
            prev += ch[depth - 2 - j];
        }
    }
    let mut head = Conv2d::new(prev, 2 * cfg.classes, 1, 1, 0, rng);
    let slots = depth + 1;
    let active = cfg.dropout_placement.active_sites(slots);
    let mut sites = Vec::with_capacity(slots);
    for s in 0..slots {
        let on = s >= slots - active;
        sites.push(make_site(cfg.variational_mode, on, &cfg.dropout, &cfg.concrete)?);
        if on && cfg.variational_mode == VariationalMode::Bbb {
            if s < depth {
                let w = std::mem::replace(&mut decoder[s].0.weights, crate::nn::Weights::Point(Param::zeros(0)));
                decoder[s].0.weights = w.into_gaussian();
            } else {
                let w = std::mem::replace(&mut head.weights, crate::nn::Weights::Point(Param::zeros(0)));
                head.weights = w.into_gaussian();
            }
        }
    }
    Ok(Segmenter {
        config: cfg.clone(),
        encoder,
        decoder,
        head,
        sites,
    })
}

impl Segmenter {
    /// Number of slots carrying stochasticity (dropout sites or Gaussian layers).
    pub fn active_sites(&self) -> usize {
        let depth = self.decoder.len();
        (0..=depth)
            .filter(|&s| {
                self.sites[s].is_active()
                    || if s < depth {
                        self.decoder[s].0.weights.is_gaussian()
                    } else {
                        self.head.weights.is_gaussian()
                    }
            })
            .count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.config.stride();
        if x.c() != self.config.in_channels || !x.h().is_multiple_of(s) || !x.w().is_multiple_of(s) || x.h() == 0 || x.w() == 0 {
            return Err(Error::shape(format!(
                "segmenter needs {} channels and sides divisible by {s}, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, sampling: bool, batch_stats: bool, rng: &mut Rng) -> Result<(Tensor, SegmenterCache)> {
        self.check_input(x)?;
        let noise = if sampling { WeightNoise::Sample } else { WeightNoise::Mean };
        let depth = self.encoder.len();
        let mut enc_cache = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (conv, bn) in &self.encoder {
            let (y, cc) = conv.forward(&h, WeightNoise::Mean, rng)?;
            let (z, bc) = bn.forward(&y, batch_stats)?;
            h = relu(&z);
            enc_cache.push((cc, bc, h.clone()));
        }
        let mut dec_cache = Vec::with_capacity(depth);
        for (j, (conv, bn)) in self.decoder.iter().enumerate() {
            let (hin, sc) = self.sites[j].forward(&h, sampling, rng)?;
            let (y, cc) = conv.forward(&hin, noise, rng)?;
            let (z, bc) = bn.forward(&y, batch_stats)?;
            let a = relu(&z);
            h = if self.config.skip_connections && j + 1 < depth {
                Tensor::concat_channels(&a, &enc_cache[depth - 2 - j].2)?
            } else {
                a.clone()
            };
            dec_cache.push(BlockCache {
                site: sc,
                conv: cc,
                bn: bc,
                out: a,
            });
        }
        let (hin, head_site) = self.sites[depth].forward(&h, sampling, rng)?;
        let (out, head) = self.head.forward(&hin, noise, rng)?;
        let out_shape = [out.n(), self.config.classes, out.h(), out.w()];
        Ok((
            out,
            SegmenterCache {
                encoder: enc_cache,
                decoder: dec_cache,
                head_site,
                head,
                out_shape,
            },
        ))
    }

    /// Override every weight and bias with zeros.
    pub fn zero_weights(&mut self) {
        self.visit_params(&mut |p| p.value.iter_mut().for_each(|v| *v = 0.0));
    }
}

impl StochasticModel for Segmenter {
    fn forward(&self, input: &Tensor, sampling: bool, rng: &mut Rng) -> Result<HeteroscedasticOutput> {
        let (out, _) = self.run(input, sampling, false, rng)?;
        split_heads(&out, self.config.classes)
    }

    fn mode(&self) -> VariationalMode {
        self.config.variational_mode
    }
}

impl Trainable for Segmenter {
    type Cache = SegmenterCache;

    fn forward_train(
        &self,
        input: &Tensor,
        sampling: bool,
        rng: &mut Rng,
    ) -> Result<(HeteroscedasticOutput, SegmenterCache)> {
        let (out, cache) = self.run(input, sampling, true, rng)?;
        Ok((split_heads(&out, self.config.classes)?, cache))
    }

    fn backward(&mut self, cache: SegmenterCache, grad: &OutputGrad) -> Result<()> {
        let depth = self.encoder.len();
        let dy = join_head_grads(grad, cache.out_shape)?;
        let mut dh = self.head.backward(cache.head, &dy);
        dh = self.sites[depth].backward(cache.head_site, &dh);
        let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for (j, block) in cache.decoder.into_iter().enumerate().rev() {
            let da = if self.config.skip_connections && j + 1 < depth {
                let (da, ds) = dh.split_channels(block.out.c());
                skip_grads[depth - 2 - j] = Some(ds);
                da
            } else {
                dh
            };
            let dz = relu_backward(&block.out, &da);
            let (conv, bn) = &mut self.decoder[j];
            bn.update_running(&block.bn);
            let dy = bn.backward(block.bn, &dz);
            let dx = conv.backward(block.conv, &dy);
            dh = self.sites[j].backward(block.site, &dx);
        }
        for (i, (cc, bc, a)) in cache.encoder.into_iter().enumerate().rev() {
            if let Some(ds) = skip_grads[i].take() {
                dh.add_assign(&ds);
            }
            let dz = relu_backward(&a, &dh);
            let (conv, bn) = &mut self.encoder[i];
            bn.update_running(&bc);
            let dy = bn.backward(bc, &dz);
            dh = conv.backward(cc, &dy);
        }
        Ok(())
    }

    fn regularize(&mut self, n_data: usize) -> Result<f64> {
        if n_data == 0 {
            return Err(Error::invalid("n_data must be at least 1"));
        }
        let scale = 1.0 / n_data as f64;
        let depth = self.decoder.len();
        let mut total = 0.0;
        for j in 0..depth {
            total += self.decoder[j].0.weights.add_kl(scale);
            total += regularize_concrete(&mut self.sites[j], &mut self.decoder[j].0.weights, n_data)?;
        }
        total += self.head.weights.add_kl(scale);
        total += regularize_concrete(&mut self.sites[depth], &mut self.head.weights, n_data)?;
        Ok(total)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (conv, bn) in &mut self.encoder {
            conv.visit_params(f);
            bn.visit_params(f);
        }
        for (conv, bn) in &mut self.decoder {
            conv.visit_params(f);
            bn.visit_params(f);
        }
        self.head.visit_params(f);
        for s in &mut self.sites {
            s.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f32>)) {
        for (i, (conv, bn)) in self.encoder.iter_mut().enumerate() {
            conv.visit_buffers(&format!("enc{i}.conv"), f);
            bn.visit_buffers(&format!("enc{i}.bn"), f);
        }
        for (j, (conv, bn)) in self.decoder.iter_mut().enumerate() {
            conv.visit_buffers(&format!("dec{j}.conv"), f);
            bn.visit_buffers(&format!("dec{j}.bn"), f);
        }
        self.head.visit_buffers("head", f);
        for (s, site) in self.sites.iter_mut().enumerate() {
            site.visit_buffers(&format!("site{s}"), f);
        }
    }

    fn dropout_rates(&self) -> Vec<f64> {
        self.sites.iter().filter_map(|s| s.rate()).collect()
    }

    fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        self.sites.iter_mut().try_for_each(|s| set_site_rate(s, rate))
    }
}

#[cfg(test)]
/// Fresh segmenter initialized from the `Init` stream of `seed`.
pub(crate) fn seeded_segmenter(cfg: &SegmenterConfig, seed: u64) -> Result<Segmenter> {
    build_segmenter(cfg, &mut crate::rng::substream(seed, crate::rng::Stream::Init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small(mode: VariationalMode, placement: DropoutPlacement) -> SegmenterConfig {
        SegmenterConfig {
            encoder_channels: vec![4, 8],
            dropout_placement: placement,
            variational_mode: mode,
            ..Default::default()
        }
    }

    fn input(n: usize, side: usize, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = seeded(seed);
        Tensor::from_vec([n, 1, side, side], (0..n * side * side).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn shape_contract() {
        let m = seeded_segmenter(&SegmenterConfig::default(), 0).unwrap();
        let out = m.forward(&input(1, 64, 1), true, &mut seeded(2)).unwrap();
        assert_eq!(out.shape, [1, 2, 64, 64]);
        assert!(m.forward(&input(1, 40, 1), false, &mut seeded(2)).is_err());
    }

    #[test]
    fn placement_site_counts() {
        for (p, k) in [
            (DropoutPlacement::FinalLayer, 1),
            (DropoutPlacement::LastTwo, 2),
            (DropoutPlacement::AllDecoder, 3),
        ] {
            for mode in [VariationalMode::Mcd, VariationalMode::Concrete, VariationalMode::Bbb] {
                assert_eq!(seeded_segmenter(&small(mode, p), 0).unwrap().active_sites(), k);
            }
        }
    }

    /// Finite-difference check of the whole network on a weighted sum of the
    /// outputs, with batch statistics and sampling off.
    #[test]
    fn end_to_end_gradient() {
        let cfg = small(VariationalMode::Mcd, DropoutPlacement::AllDecoder);
        let mut m = seeded_segmenter(&cfg, 3).unwrap();
        let x = input(2, 8, 4);
        let (out, cache) = m.forward_train(&x, false, &mut seeded(0)).unwrap();
        let r: Vec<f64> = (0..out.mean_logits.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let objective = |o: &HeteroscedasticOutput| -> f64 {
            o.mean_logits.iter().chain(&o.log_variance).zip(r.iter().chain(&r)).map(|(a, b)| a * b).sum()
        };
        let grad = OutputGrad {
            d_mean: r.clone(),
            d_log_variance: r.clone(),
        };
        let pristine = m.clone();
        m.backward(cache, &grad).unwrap();
        let mut analytic = Vec::new();
        m.visit_params(&mut |p| analytic.push(p.grad.clone()));
        let probe = pristine;
        let mut count = 0;
        let mut misses = 0;
        for (pi, grads) in analytic.iter().enumerate() {
            for k in [0, grads.len() / 2, grads.len() - 1] {
                let eval = |delta: f32| {
                    let mut m2 = probe.clone();
                    let mut idx = 0;
                    m2.visit_params(&mut |p| {
                        if idx == pi {
                            p.value[k] += delta;
                        }
                        idx += 1;
                    });
                    objective(&m2.forward_train(&x, false, &mut seeded(0)).unwrap().0)
                };
                let ana = grads[k] as f64;
                // ReLU kinks can sit inside a difference stencil, so accept
                // either step size and tolerate isolated misses.
                let ok = [3e-3f32, 1e-3].iter().any(|&h| {
                    let num = (eval(h) - eval(-h)) / (2.0 * h as f64);
                    (num - ana).abs() <= 1e-2 * ana.abs().max(num.abs()).max(1.0)
                });
                if !ok {
                    misses += 1;
                }
                count += 1;
            }
        }
        assert!(count > 20);
        assert!(misses <= 2, "{misses} of {count} gradient checks failed");
    }

    #[test]
    fn zero_rate_sampling_is_deterministic() {
        let mut cfg = small(VariationalMode::Mcd, DropoutPlacement::AllDecoder);
        cfg.dropout = DropoutSpec::new(0.0).unwrap();
        let m = seeded_segmenter(&cfg, 0).unwrap();
        let x = input(1, 8, 1);
        let a = m.forward(&x, true, &mut seeded(1)).unwrap();
        let b = m.forward(&x, false, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_grows_with_width() {
        let mut a = seeded_segmenter(&small(VariationalMode::Mcd, DropoutPlacement::FinalLayer), 0).unwrap();
        let mut cfg = small(VariationalMode::Mcd, DropoutPlacement::FinalLayer);
        cfg.encoder_channels = vec![8, 16];
        let mut b = seeded_segmenter(&cfg, 0).unwrap();
        assert!(b.parameter_count() > a.parameter_count());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for mode in [VariationalMode::Mcd, VariationalMode::Concrete, VariationalMode::Bbb] {
            let mut m = seeded_segmenter(&small(mode, DropoutPlacement::AllDecoder), 5).unwrap();
            let x = input(2, 8, 6);
            let (out, cache) = m.forward_train(&x, true, &mut seeded(7)).unwrap();
            let labels: Vec<usize> = (0..out.sites()).map(|i| (i / 3) % 2).collect();
            let (_, g) =
                crate::losses::heteroscedastic_nll_with_grad(&out, &labels, 4, &mut seeded(8)).unwrap();
            m.backward(cache, &g).unwrap();
            m.regularize(128).unwrap();
            let mut norms = Vec::new();
            m.visit_params(&mut |p| norms.push(p.grad_norm()));
            assert!(norms.iter().all(|&n| n > 0.0), "{mode:?}: {norms:?}");
        }
    }
}
