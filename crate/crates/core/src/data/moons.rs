use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_MOONS_NOISE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoonsSample {
    pub x: [f64; 2],
    pub label: usize,
}

/// Upper arc `(cos t, sin t)` labelled 0 and lower arc
/// `(1 - cos t, 0.5 - sin t)` labelled 1, `t ~ U[0, pi]`, plus isotropic
/// Gaussian jitter. Labels are balanced within one; order is shuffled.
pub fn gen_two_moons(n: usize, noise_sd: f64, rng: &mut Rng) -> Result<Vec<MoonsSample>> {
    if n < 2 {
        return Err(Error::invalid("two moons needs at least 2 points"));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::invalid(format!("noise_sd must be nonnegative, got {noise_sd}")));
    }
    let jitter = Normal::new(0.0, noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let n_upper = n / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0.0..=PI);
        let (x, y, label) = if i < n_upper {
            (t.cos(), t.sin(), 0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        let (dx, dy) = if noise_sd > 0.0 {
            (jitter.sample(rng), jitter.sample(rng))
        } else {
            (0.0, 0.0)
        };
        out.push(MoonsSample {
            x: [x + dx, y + dy],
            label,
        });
    }
    out.shuffle(rng);
    Ok(out)
}

/// `[n, 2]` inputs and labels.
pub fn moons_to_batch(samples: &[MoonsSample], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let data = indices
        .iter()
        .flat_map(|&i| samples[i].x.map(|v| v as f32))
        .collect();
    let labels = indices.iter().map(|&i| samples[i].label).collect();
    Ok((Tensor::matrix(indices.len(), 2, data)?, labels))
}
