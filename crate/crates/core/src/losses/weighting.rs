//! Strategies for combining the likelihood, boundary and Jaccard losses.

use serde::{Deserialize, Serialize};

/// Floor applied to a coefficient of variation before normalizing.
pub const COV_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossStrategy {
    #[default]
    BaselineSum,
    SigmoidRamp,
    Cov,
}

impl std::str::FromStr for LossStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline_sum" => Ok(LossStrategy::BaselineSum),
            "sigmoid_ramp" => Ok(LossStrategy::SigmoidRamp),
            "cov" => Ok(LossStrategy::Cov),
            other => Err(format!("unknown loss strategy {other:?}")),
        }
    }
}

impl std::fmt::Display for LossStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossStrategy::BaselineSum => "baseline_sum",
            LossStrategy::SigmoidRamp => "sigmoid_ramp",
            LossStrategy::Cov => "cov",
        })
    }
}

/// `exp(-5 (1 - min(epoch, L) / L)^2)`.
pub fn sigmoid_rampup(epoch: usize, ramp_length: usize) -> f64 {
    let l = ramp_length.max(1) as f64;
    let t = 1.0 - (epoch.min(ramp_length.max(1)) as f64) / l;
    (-5.0 * t * t).exp()
}

/// Single-pass mean and population variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeightState {
    pub strategy: LossStrategy,
    pub epoch: usize,
    pub ramp_length: usize,
    /// Running statistics of each loss's ratio `L_t / mean(L_1..L_{t-1})`.
    pub ratio_stats: [Welford; 3],
    /// Running mean of each loss's raw values.
    pub raw_stats: [Welford; 3],
}

impl LossWeightState {
    pub fn new(strategy: LossStrategy) -> Self {
        LossWeightState {
            strategy,
            epoch: 0,
            ramp_length: 100,
            ratio_stats: Default::default(),
            raw_stats: Default::default(),
        }
    }
}

/// Weighted total and the weights used. Under `cov` the state's statistics
/// advance by one step.
pub fn combine_losses(state: &mut LossWeightState, l_mle: f64, l_abl: f64, l_iou: f64) -> (f64, [f64; 3]) {
    let losses = [l_mle, l_abl, l_iou];
    let weights = match state.strategy {
        LossStrategy::BaselineSum => [1.0; 3],
        LossStrategy::SigmoidRamp => {
            let phi = sigmoid_rampup(state.epoch, state.ramp_length);
            [1.0, phi, phi]
        }
        LossStrategy::Cov => cov_weights(state, losses),
    };
    let total = losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
    (total, weights)
}

fn cov_weights(state: &mut LossWeightState, losses: [f64; 3]) -> [f64; 3] {
    let first = state.raw_stats[0].count == 0;
    let mut c = [0.0; 3];
    for i in 0..3 {
        let prev_mean = state.raw_stats[i].mean;
        let ratio = if first || prev_mean <= 0.0 { 1.0 } else { losses[i] / prev_mean };
        state.ratio_stats[i].push(ratio);
        state.raw_stats[i].push(losses[i]);
        let (m, s) = (state.ratio_stats[i].mean, state.ratio_stats[i].std());
        c[i] = if m > 0.0 && s > 0.0 && (s / m).is_finite() { (s / m).max(COV_FLOOR) } else { COV_FLOOR };
    }
    if first {
        return [1.0 / 3.0; 3];
    }
    let z: f64 = c.iter().sum();
    let a = c[0] / z;
    let b = c[1] / z;
    [a, b, 1.0 - a - b]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_values() {
        assert!((sigmoid_rampup(0, 100) - (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(sigmoid_rampup(100, 100), 1.0);
        assert_eq!(sigmoid_rampup(150, 100), 1.0);
    }

    #[test]
    fn baseline_sum() {
        let mut s = LossWeightState::new(LossStrategy::BaselineSum);
        let (t, w) = combine_losses(&mut s, 0.5, 0.2, 0.3);
        assert!((t - 1.0).abs() < 1e-15);
        assert_eq!(w, [1.0; 3]);
    }

    #[test]
    fn cov_first_step_is_equal() {
        let mut s = LossWeightState::new(LossStrategy::Cov);
        let (_, w) = combine_losses(&mut s, 1.0, 2.0, 4.0);
        assert_eq!(w, [1.0 / 3.0; 3]);
    }
}
