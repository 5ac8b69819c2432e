//! Monte Carlo inference and the epistemic / entropy / aleatoric decomposition.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{write_arrays, NamedArray};
use crate::models::{StochasticModel, VariationalMode};
use crate::output::{softmax_classes, HeteroscedasticOutput};
use crate::rng::{derived, Rng, Stream};
use crate::tensor::Tensor;

/// Paper default number of stochastic passes.
pub const DEFAULT_MC_SAMPLES: usize = 25;

/// `m` stochastic passes over one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCPredictionSet {
    /// `[n, classes, h, w]` of one pass.
    pub shape: [usize; 4],
    pub m: usize,
    pub sampling_mode: VariationalMode,
    /// Softmax probabilities, pass-major.
    pub samples: Vec<f64>,
    /// Mean of the mean-logit head over the passes.
    pub mean_logits: Vec<f64>,
}

impl MCPredictionSet {
    pub fn from_outputs(outputs: &[HeteroscedasticOutput], mode: VariationalMode) -> Result<Self> {
        let first = outputs.first().ok_or_else(|| Error::invalid("need at least one pass"))?;
        let len = first.mean_logits.len();
        let mut samples = Vec::with_capacity(outputs.len() * len);
        let mut mean_logits = vec![0.0; len];
        for o in outputs {
            if o.shape != first.shape {
                return Err(Error::shape("passes differ in shape"));
            }
            samples.extend(o.probabilities());
            for (a, b) in mean_logits.iter_mut().zip(&o.mean_logits) {
                *a += b;
            }
        }
        let m = outputs.len();
        mean_logits.iter_mut().for_each(|v| *v /= m as f64);
        Ok(MCPredictionSet {
            shape: first.shape,
            m,
            sampling_mode: mode,
            samples,
            mean_logits,
        })
    }

    fn per_pass(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        let l = self.per_pass();
        &self.samples[k * l..(k + 1) * l]
    }

    /// MC-mean class probabilities.
    pub fn mean_probabilities(&self) -> Vec<f64> {
        // Running mean: exact when every pass agrees.
        let mut mean = self.sample(0).to_vec();
        for k in 1..self.m {
            let inv = 1.0 / (k + 1) as f64;
            for (a, b) in mean.iter_mut().zip(self.sample(k)) {
                *a += (b - *a) * inv;
            }
        }
        mean
    }

    /// Softmax of the MC-mean logits at temperature `t`.
    pub fn mean_logit_probabilities(&self, t: f64) -> Vec<f64> {
        softmax_classes(&self.mean_logits, self.shape, t)
    }
}

/// `m` stochastic passes; pass `k` draws from its own substream of a seed
/// taken from `rng`, so the result does not depend on thread scheduling.
pub fn mc_predict(model: &impl StochasticModel, input: &Tensor, m: usize, rng: &mut Rng) -> Result<MCPredictionSet> {
    mc_predict_with(model, input, m, true, rng)
}

/// As [`mc_predict`], with stochasticity optionally disabled.
pub fn mc_predict_with(
    model: &impl StochasticModel,
    input: &Tensor,
    m: usize,
    sampling: bool,
    rng: &mut Rng,
) -> Result<MCPredictionSet> {
    if m < 1 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let base: u64 = rng.random();
    let outputs = (0..m)
        .into_par_iter()
        .map(|k| model.forward(input, sampling, &mut derived(base, Stream::Dropout, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    MCPredictionSet::from_outputs(&outputs, model.mode())
}

/// Population variance over passes, `[n, classes, h, w]`.
pub fn epistemic_variance(set: &MCPredictionSet) -> Vec<f64> {
    let mean = set.mean_probabilities();
    let mut var = vec![0.0; mean.len()];
    for k in 0..set.m {
        for ((v, &s), &mu) in var.iter_mut().zip(set.sample(k)).zip(&mean) {
            *v += (s - mu) * (s - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= set.m as f64);
    var
}

/// Entropy (nats) of the MC-mean distribution, `[n, h, w]`.
pub fn predictive_entropy(set: &MCPredictionSet) -> Vec<f64> {
    entropy_of(&set.mean_probabilities(), set.shape)
}

/// Per-pixel entropy of `[n, classes, h, w]` probabilities.
pub fn entropy_of(probs: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for px in 0..p {
            let mut h = 0.0;
            for k in 0..c {
                let q = probs[(i * c + k) * p + px];
                if q > 0.0 {
                    h -= q * q.ln();
                }
            }
            out[i * p + px] = h.max(0.0);
        }
    }
    out
}

/// `sigma = exp(log_variance / 2)` per class and pixel.
pub fn aleatoric_map(out: &HeteroscedasticOutput) -> Result<Vec<f64>> {
    if out.log_variance.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-variance"));
    }
    Ok(out.log_variance.iter().map(|v| (0.5 * v).exp()).collect())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Scalar summaries for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassUncertainty {
    pub epistemic: f64,
    pub entropy: f64,
    pub aleatoric: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub shape: [usize; 4],
    /// `[n, classes, h, w]`.
    pub epistemic_variance: Vec<f64>,
    /// `[n, h, w]`.
    pub predictive_entropy: Vec<f64>,
    /// `[n, classes, h, w]`.
    pub aleatoric: Vec<f64>,
    /// Means over all pixels, per class (entropy is shared by the classes).
    pub per_class: Vec<ClassUncertainty>,
    /// Means restricted to each class's ground-truth region; `None` for a
    /// class with no ground-truth pixels.
    pub per_class_gt: Option<Vec<Option<ClassUncertainty>>>,
}

pub fn decompose(
    set: &MCPredictionSet,
    out: &HeteroscedasticOutput,
    gt: Option<&[usize]>,
) -> Result<UncertaintyDecomposition> {
    if out.shape != set.shape {
        return Err(Error::shape(format!(
            "prediction set {:?} and output {:?} differ",
            set.shape, out.shape
        )));
    }
    let (n, c, p) = (set.shape[0], set.shape[1], set.shape[2] * set.shape[3]);
    if let Some(g) = gt {
        if g.len() != n * p {
            return Err(Error::shape(format!("{} ground-truth labels for {} pixels", g.len(), n * p)));
        }
    }
    let epistemic = epistemic_variance(set);
    let entropy = predictive_entropy(set);
    let aleatoric = aleatoric_map(out)?;
    let summarize = |k: usize, keep: &dyn Fn(usize) -> bool| -> ClassUncertainty {
        let mut s = ClassUncertainty::default();
        for i in 0..n {
            for px in 0..p {
                if !keep(i * p + px) {
                    continue;
                }
                let j = (i * c + k) * p + px;
                s.epistemic += epistemic[j];
                s.aleatoric += aleatoric[j];
                s.entropy += entropy[i * p + px];
                s.pixels += 1;
            }
        }
        if s.pixels > 0 {
            let d = s.pixels as f64;
            s.epistemic /= d;
            s.aleatoric /= d;
            s.entropy /= d;
        }
        s
    };
    let per_class = (0..c).map(|k| summarize(k, &|_| true)).collect();
    let per_class_gt = gt.map(|g| {
        (0..c)
            .map(|k| {
                let s = summarize(k, &|site| g[site] == k);
                (s.pixels > 0).then_some(s)
            })
            .collect()
    });
    Ok(UncertaintyDecomposition {
        shape: set.shape,
        epistemic_variance: epistemic,
        predictive_entropy: entropy,
        aleatoric,
        per_class,
        per_class_gt,
    })
}

impl UncertaintyDecomposition {
    pub fn mean_epistemic(&self) -> f64 {
        mean(&self.epistemic_variance)
    }

    pub fn mean_entropy(&self) -> f64 {
        mean(&self.predictive_entropy)
    }

    pub fn mean_aleatoric(&self) -> f64 {
        mean(&self.aleatoric)
    }

    fn plane(&self, data: &[f64], image: usize, class: Option<usize>) -> Grid<f64> {
        let (c, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
        let p = h * w;
        let start = match class {
            Some(k) => (image * c + k) * p,
            None => image * p,
        };
        Grid {
            height: h,
            width: w,
            data: data[start..start + p].to_vec(),
        }
    }

    pub fn epistemic_grid(&self, image: usize, class: usize) -> Grid<f64> {
        self.plane(&self.epistemic_variance, image, Some(class))
    }

    pub fn entropy_grid(&self, image: usize) -> Grid<f64> {
        self.plane(&self.predictive_entropy, image, None)
    }

    pub fn aleatoric_grid(&self, image: usize, class: usize) -> Grid<f64> {
        self.plane(&self.aleatoric, image, Some(class))
    }

    /// All three maps in one array container.
    pub fn write(&self, path: &Path) -> Result<()> {
        let [n, c, h, w] = self.shape;
        write_arrays(
            path,
            &[
                NamedArray::f64("epistemic_variance", vec![n, c, h, w], self.epistemic_variance.clone()),
                NamedArray::f64("predictive_entropy", vec![n, h, w], self.predictive_entropy.clone()),
                NamedArray::f64("aleatoric", vec![n, c, h, w], self.aleatoric.clone()),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(samples: Vec<Vec<f64>>, shape: [usize; 4]) -> MCPredictionSet {
        let m = samples.len();
        let len = samples[0].len();
        MCPredictionSet {
            shape,
            m,
            sampling_mode: VariationalMode::Mcd,
            samples: samples.concat(),
            mean_logits: vec![0.0; len],
        }
    }

    #[test]
    fn two_sample_variance() {
        let s = set(vec![vec![0.4, 0.6], vec![0.6, 0.4]], [1, 2, 1, 1]);
        let v = epistemic_variance(&s);
        assert!((v[0] - 0.01).abs() < 1e-15 && (v[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn entropy_values() {
        let s = set(vec![vec![0.9, 0.5, 1.0, 0.1, 0.5, 0.0]], [1, 2, 1, 3]);
        let h = predictive_entropy(&s);
        assert!((h[0] - 0.325_082_973_391_448_2).abs() < 1e-12);
        assert!((h[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(h[2], 0.0);
    }

    #[test]
    fn aleatoric_values() {
        let out = HeteroscedasticOutput::new([1, 2, 1, 1], vec![0.0; 2], vec![0.0, 2.0 * 2f64.ln()]).unwrap();
        let a = aleatoric_map(&out).unwrap();
        assert_eq!(a[0], 1.0);
        assert!((a[1] - 2.0).abs() < 1e-15);
        let bad = HeteroscedasticOutput::new([1, 2, 1, 1], vec![0.0; 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(aleatoric_map(&bad).is_err());
    }

    #[test]
    fn decompose_constant_case() {
        let s = set(vec![vec![0.7, 0.3, 0.2, 0.8]; 4], [1, 2, 1, 2]);
        let out = HeteroscedasticOutput::new([1, 2, 1, 2], vec![0.0; 4], vec![0.0; 4]).unwrap();
        let d = decompose(&s, &out, Some(&[0, 1])).unwrap();
        assert_eq!(d.mean_epistemic(), 0.0);
        assert_eq!(d.mean_aleatoric(), 1.0);
        assert_eq!(d.per_class[1].aleatoric, 1.0);
        let gt = d.per_class_gt.as_ref().unwrap();
        assert_eq!(gt[0].unwrap().pixels, 1);
        let bad = HeteroscedasticOutput::new([1, 2, 1, 1], vec![0.0; 2], vec![0.0; 2]).unwrap();
        assert!(decompose(&s, &bad, None).is_err());
    }
}
