use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CrackParams;
use crate::error::{Error, Result};
use crate::losses::LossStrategy;
use crate::models::{SegmenterConfig, TwoMoonsNetConfig};
use crate::nn::{Sgd, StepDecay};
use crate::uncertainty::DEFAULT_MC_SAMPLES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Moons,
    #[default]
    Cracks,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Generated sets only. Train, validation and test come from separate
    /// streams, so changing `n_train` leaves the other two untouched.
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub moons_noise: f64,
    pub cracks: CrackParams,
    /// Folder datasets: root directory and split fractions.
    pub path: Option<PathBuf>,
    pub fractions: (f64, f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Cracks,
            n_train: 200,
            n_val: 20,
            n_test: 50,
            height: 64,
            width: 64,
            moons_noise: crate::data::DEFAULT_MOONS_NOISE,
            cracks: CrackParams::default(),
            path: None,
            fractions: (0.72, 0.10, 0.18),
        }
    }
}

/// Out-of-distribution test sets: crack images with a different texture
/// scale, and the in-distribution test set with added Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodSpec {
    pub texture_scale: Option<f64>,
    pub noise_variance: Option<f64>,
}

impl Default for OodSpec {
    fn default() -> Self {
        OodSpec {
            texture_scale: Some(3.0),
            noise_variance: Some(30.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    pub strategy: LossStrategy,
    /// Logit-noise samples per pixel in the likelihood.
    pub nll_samples: usize,
    pub boundary: bool,
    pub iou: bool,
    pub ramp_length: usize,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            strategy: LossStrategy::BaselineSum,
            nll_samples: 10,
            boundary: true,
            iou: true,
            ramp_length: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStop {
    pub window: usize,
    pub min_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            window: 50,
            min_improvement: 0.001,
        }
    }
}

impl EarlyStop {
    /// True once the mean per-epoch improvement of the validation loss over
    /// the trailing window falls below the threshold.
    pub fn should_stop(&self, history: &[f64]) -> bool {
        let w = self.window;
        if w < 2 || history.len() < w {
            return false;
        }
        let n = history.len();
        let improvement = (history[n - w] - history[n - 1]) / (w - 1) as f64;
        improvement < self.min_improvement
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub ood: Option<OodSpec>,
    pub segmenter: SegmenterConfig,
    pub twomoons: TwoMoonsNetConfig,
    pub loss: LossSpec,
    pub optimizer: Sgd,
    pub schedule: StepDecay,
    pub early_stop: EarlyStop,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            dataset: DatasetSpec::default(),
            ood: None,
            segmenter: SegmenterConfig::default(),
            twomoons: TwoMoonsNetConfig::default(),
            loss: LossSpec::default(),
            optimizer: Sgd::default(),
            schedule: StepDecay::default(),
            early_stop: EarlyStop::default(),
            max_epochs: 200,
            batch_size: 8,
            mc_samples: DEFAULT_MC_SAMPLES,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Folder if d.path.is_none() => return Err(Error::invalid("folder dataset needs a path")),
            DatasetKind::Moons | DatasetKind::Cracks if d.n_train == 0 || d.n_val == 0 || d.n_test == 0 => {
                return Err(Error::invalid("n_train, n_val and n_test must be positive"))
            }
            _ => {}
        }
        if self.batch_size == 0 || self.mc_samples == 0 || self.loss.nll_samples == 0 {
            return Err(Error::invalid("batch_size, mc_samples and nll_samples must be positive"));
        }
        if !(self.schedule.initial > 0.0) {
            return Err(Error::invalid("initial learning rate must be positive"));
        }
        self.segmenter.dropout.validate()?;
        self.twomoons.dropout.validate()?;
        Ok(())
    }

    /// Whether the dataset feeds the two-moons network.
    pub fn is_moons(&self) -> bool {
        self.dataset.kind == DatasetKind::Moons
    }

    /// Configuration of the network actually trained.
    pub fn model_json(&self) -> Result<serde_json::Value> {
        Ok(if self.is_moons() {
            serde_json::to_value(&self.twomoons)?
        } else {
            serde_json::to_value(&self.segmenter)?
        })
    }
}
