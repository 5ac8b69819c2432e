//! The two-headed network output shared by losses, inference and metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class mean logits and log-variances for a batch, laid out
/// `[n, classes, height, width]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroscedasticOutput {
    pub shape: [usize; 4],
    pub mean_logits: Vec<f64>,
    pub log_variance: Vec<f64>,
}

/// Gradient of a scalar loss with respect to both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub d_mean: Vec<f64>,
    pub d_log_variance: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(len: usize) -> Self {
        OutputGrad {
            d_mean: vec![0.0; len],
            d_log_variance: vec![0.0; len],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &OutputGrad, scale: f64) {
        for (a, b) in self.d_mean.iter_mut().zip(&other.d_mean) {
            *a += scale * b;
        }
        for (a, b) in self.d_log_variance.iter_mut().zip(&other.d_log_variance) {
            *a += scale * b;
        }
    }
}

impl HeteroscedasticOutput {
    pub fn new(shape: [usize; 4], mean_logits: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if mean_logits.len() != n || log_variance.len() != n {
            return Err(Error::shape(format!(
                "output shape {shape:?} needs {n} values per head, got {} and {}",
                mean_logits.len(),
                log_variance.len()
            )));
        }
        if shape[1] == 0 {
            return Err(Error::shape("output needs at least one class"));
        }
        Ok(HeteroscedasticOutput {
            shape,
            mean_logits,
            log_variance,
        })
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn classes(&self) -> usize {
        self.shape[1]
    }
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    /// Number of (image, pixel) sites.
    pub fn sites(&self) -> usize {
        self.shape[0] * self.spatial()
    }

    #[inline]
    pub fn idx(&self, image: usize, class: usize, pixel: usize) -> usize {
        (image * self.classes() + class) * self.spatial() + pixel
    }

    /// Softmax of the mean logits over classes, same layout.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax_classes(&self.mean_logits, self.shape, 1.0)
    }

    /// Image `i` as a standalone single-image output.
    pub fn image(&self, i: usize) -> HeteroscedasticOutput {
        let per = self.classes() * self.spatial();
        HeteroscedasticOutput {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            mean_logits: self.mean_logits[i * per..(i + 1) * per].to_vec(),
            log_variance: self.log_variance[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Concatenate outputs along the batch axis.
    pub fn concat(parts: &[HeteroscedasticOutput]) -> Result<HeteroscedasticOutput> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut mean = Vec::new();
        let mut logv = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("outputs differ in class or spatial shape"));
            }
            shape[0] += p.shape[0];
            mean.extend_from_slice(&p.mean_logits);
            logv.extend_from_slice(&p.log_variance);
        }
        HeteroscedasticOutput::new(shape, mean, logv)
    }
}

/// Softmax of `logits / temperature` over the class axis of an
/// `[n, classes, h, w]` array.
pub fn softmax_classes(logits: &[f64], shape: [usize; 4], temperature: f64) -> Vec<f64> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0; logits.len()];
    let mut buf = vec![0.0; c];
    for i in 0..n {
        for px in 0..p {
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                buf[k] = logits[(i * c + k) * p + px] / temperature;
                max = max.max(buf[k]);
            }
            let mut z = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for k in 0..c {
                out[(i * c + k) * p + px] = buf[k] / z;
            }
        }
    }
    out
}

/// Chain a gradient with respect to softmax probabilities back to logits.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0.0; probs.len()];
    for i in 0..n {
        for px in 0..p {
            let mut dot = 0.0;
            for k in 0..c {
                let j = (i * c + k) * p + px;
                dot += probs[j] * d_probs[j];
            }
            for k in 0..c {
                let j = (i * c + k) * p + px;
                out[j] = probs[j] * (d_probs[j] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let shape = [1, 3, 1, 2];
        let logits = vec![0.3, -1.0, 2.0, 0.5, 0.0, -0.7];
        let weights = [0.2, -1.3, 0.7, 2.0, 0.4, -0.1];
        let f = |l: &[f64]| -> f64 {
            softmax_classes(l, shape, 1.0).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let probs = softmax_classes(&logits, shape, 1.0);
        let grad = softmax_backward(&probs, &weights, shape);
        for j in 0..logits.len() {
            let mut a = logits.clone();
            let mut b = logits.clone();
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let num = (f(&a) - f(&b)) / 2e-6;
            assert!((num - grad[j]).abs() < 1e-8);
        }
    }
}
