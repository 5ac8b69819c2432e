//! Classification likelihood with Gaussian logit noise.
//!
//! Each pixel's logits are sampled `t` times as `mean + sigma * eps`; the
//! loss is the negative log of the sample-averaged softmax probability of
//! the true class, computed in log space.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::output::{HeteroscedasticOutput, OutputGrad};

fn validate(out: &HeteroscedasticOutput, labels: &[usize], t_samples: usize) -> Result<()> {
    if t_samples < 1 {
        return Err(Error::invalid("t_samples must be at least 1"));
    }
    if labels.len() != out.sites() {
        return Err(Error::shape(format!(
            "{} labels for {} output sites",
            labels.len(),
            out.sites()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= out.classes()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            out.classes()
        )));
    }
    if out.mean_logits.iter().chain(&out.log_variance).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heteroscedastic output"));
    }
    Ok(())
}

/// Loss and gradient, drawing noise from `noise` in pixel-major,
/// sample-major, class-minor order.
fn nll_core(
    out: &HeteroscedasticOutput,
    labels: &[usize],
    t_samples: usize,
    noise: &mut dyn FnMut() -> f64,
) -> (f64, OutputGrad) {
    let (n, c, p) = (out.batch(), out.classes(), out.spatial());
    let mut grad = OutputGrad::zeros(out.mean_logits.len());
    let mut total = 0.0;
    let mut eps = vec![0.0; t_samples * c];
    let mut q = vec![0.0; t_samples * c];
    let mut ll = vec![0.0; t_samples];
    let mut mu = vec![0.0; c];
    let mut sigma = vec![0.0; c];
    let ln_t = (t_samples as f64).ln();
    let scale = 1.0 / (n * p) as f64;
    for i in 0..n {
        for px in 0..p {
            let label = labels[i * p + px];
            for k in 0..c {
                let j = out.idx(i, k, px);
                mu[k] = out.mean_logits[j];
                sigma[k] = (0.5 * out.log_variance[j]).exp();
            }
            for t in 0..t_samples {
                let row = &mut q[t * c..(t + 1) * c];
                let mut max = f64::NEG_INFINITY;
                for k in 0..c {
                    let e = noise();
                    eps[t * c + k] = e;
                    row[k] = mu[k] + sigma[k] * e;
                    max = max.max(row[k]);
                }
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
                // log softmax at the label: y_label - max - ln z
                ll[t] = row[label].ln();
                if !ll[t].is_finite() {
                    // underflowed probability; recompute from the logits directly
                    let y_label = mu[label] + sigma[label] * eps[t * c + label];
                    ll[t] = y_label - max - z.ln();
                }
            }
            let m = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = ll.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            total -= lse - ln_t;
            // dL/dll_t = -softmax_t(ll); dll_t/dy_tk = [k == label] - q_tk
            for t in 0..t_samples {
                let w = (ll[t] - lse).exp();
                for k in 0..c {
                    let dy = -w * (if k == label { 1.0 } else { 0.0 } - q[t * c + k]);
                    let j = out.idx(i, k, px);
                    grad.d_mean[j] += dy * scale;
                    grad.d_log_variance[j] += dy * eps[t * c + k] * 0.5 * sigma[k] * scale;
                }
            }
        }
    }
    (total * scale, grad)
}

/// Mean heteroscedastic negative log-likelihood over all pixels.
pub fn heteroscedastic_nll(
    out: &HeteroscedasticOutput,
    labels: &[usize],
    t_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    Ok(heteroscedastic_nll_with_grad(out, labels, t_samples, rng)?.0)
}

/// As [`heteroscedastic_nll`], also returning the gradient for the realized
/// noise draws.
pub fn heteroscedastic_nll_with_grad(
    out: &HeteroscedasticOutput,
    labels: &[usize],
    t_samples: usize,
    rng: &mut impl Rng,
) -> Result<(f64, OutputGrad)> {
    validate(out, labels, t_samples)?;
    let mut noise = || rng.sample::<f64, _>(StandardNormal);
    Ok(nll_core(out, labels, t_samples, &mut noise))
}

/// Loss and gradient with caller-supplied noise (common random numbers):
/// `eps` holds `sites * t_samples * classes` standard-normal draws.
pub fn heteroscedastic_nll_fixed_noise(
    out: &HeteroscedasticOutput,
    labels: &[usize],
    t_samples: usize,
    eps: &[f64],
) -> Result<(f64, OutputGrad)> {
    validate(out, labels, t_samples)?;
    let need = out.sites() * t_samples * out.classes();
    if eps.len() != need {
        return Err(Error::shape(format!("need {need} noise values, got {}", eps.len())));
    }
    let mut it = eps.iter().copied();
    let mut noise = || it.next().expect("noise length checked");
    Ok(nll_core(out, labels, t_samples, &mut noise))
}

/// Plain softmax cross-entropy of the mean logits.
pub fn cross_entropy(out: &HeteroscedasticOutput, labels: &[usize]) -> Result<f64> {
    validate(out, labels, 1)?;
    let (n, c, p) = (out.batch(), out.classes(), out.spatial());
    let mut total = 0.0;
    for i in 0..n {
        for px in 0..p {
            let logits: Vec<f64> = (0..c).map(|k| out.mean_logits[out.idx(i, k, px)]).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - logits[labels[i * p + px]];
        }
    }
    Ok(total / (n * p) as f64)
}
