use serde::{Deserialize, Serialize};

use super::Param;

/// SGD with momentum and L2 weight decay (decay folded into the gradient).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl Sgd {
    pub fn step(&self, param: &mut Param, lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let decay = if param.decay { wd } else { 0.0 };
        for ((w, g), v) in param.value.iter_mut().zip(&param.grad).zip(&mut param.velocity) {
            let grad = g + decay * *w;
            *v = mu * *v + grad;
            *w -= lr * *v;
        }
    }
}

/// Learning rate multiplied by `factor` every `interval` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepDecay {
    pub initial: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            initial: 0.01,
            factor: 0.8,
            interval: 50,
        }
    }
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.interval.max(1)) as i32)
    }
}
