//! Training runs, evaluation rows, sweeps, calibration and plot files.

mod config;
mod datasets;
mod evaluate;
mod plots;
mod sweep;
mod train;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{DatasetKind, DatasetSpec, EarlyStop, ExperimentConfig, LossSpec, OodSpec};
pub use datasets::{load_data, ExperimentData, LabeledSet};
pub use evaluate::{
    calibrate, calibrate_logits, evaluate, metrics_from_prediction, predict_set, CalibrationOutcome, Evaluation,
    MetricsRow, SetPrediction,
};
pub use plots::{emit_plots, metric_plot, reliability_diagram, uncertainty_panels, PANEL_ORDER};
pub use sweep::{
    apply_axis, sweep, write_metrics_csv, Aggregate, SweepAxis, SweepResult, SweepRow, METRICS_HEADER,
};
pub use train::{train_model, validation_loss, EpochRecord, LossTerms, TrainHistory};

use crate::calibration::CalibrationReport;
use crate::error::Result;
use crate::models::{
    build_segmenter, build_twomoons_net, config_hash, CheckpointMeta, load_checkpoint, save_checkpoint, Segmenter,
    StochasticModel, Trainable, TwoMoonsNet, VariationalMode,
};
use crate::output::HeteroscedasticOutput;
use crate::rng::{derived, substream, Rng, Stream};
use crate::tensor::Tensor;

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// A trained network of either family.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Segmenter(Segmenter),
    TwoMoons(TwoMoonsNet),
}

impl StochasticModel for TrainedModel {
    fn forward(&self, input: &Tensor, sampling: bool, rng: &mut Rng) -> Result<HeteroscedasticOutput> {
        match self {
            TrainedModel::Segmenter(m) => m.forward(input, sampling, rng),
            TrainedModel::TwoMoons(m) => m.forward(input, sampling, rng),
        }
    }

    fn mode(&self) -> VariationalMode {
        match self {
            TrainedModel::Segmenter(m) => m.mode(),
            TrainedModel::TwoMoons(m) => m.mode(),
        }
    }
}

impl TrainedModel {
    /// Untrained network for `cfg`, initialized from `seed`'s init stream.
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, Stream::Init);
        Ok(if cfg.is_moons() {
            TrainedModel::TwoMoons(build_twomoons_net(&cfg.twomoons, &mut rng)?)
        } else {
            TrainedModel::Segmenter(build_segmenter(&cfg.segmenter, &mut rng)?)
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TrainedModel::Segmenter(_) => "segmenter",
            TrainedModel::TwoMoons(_) => "twomoons",
        }
    }

    pub fn dropout_rates(&self) -> Vec<f64> {
        match self {
            TrainedModel::Segmenter(m) => m.dropout_rates(),
            TrainedModel::TwoMoons(m) => m.dropout_rates(),
        }
    }

    pub fn train(&mut self, cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<TrainHistory> {
        match self {
            TrainedModel::Segmenter(m) => train_model(m, cfg, data, seed),
            TrainedModel::TwoMoons(m) => train_model(m, cfg, data, seed),
        }
    }

    /// Checkpoint keyed by the full experiment config.
    pub fn save(&mut self, dir: &Path, cfg: &ExperimentConfig) -> Result<CheckpointMeta> {
        let kind = self.kind();
        match self {
            TrainedModel::Segmenter(m) => save_checkpoint(dir, m, kind, cfg),
            TrainedModel::TwoMoons(m) => save_checkpoint(dir, m, kind, cfg),
        }
    }

    /// Rebuild from a checkpoint. With `cfg = None` the stored config is used;
    /// otherwise its hash must match.
    pub fn load(dir: &Path, cfg: Option<&ExperimentConfig>) -> Result<(Self, ExperimentConfig)> {
        let meta = CheckpointMeta::read(dir)?;
        let cfg = match cfg {
            Some(c) => c.clone(),
            None => serde_json::from_value(meta.config)?,
        };
        let mut model = TrainedModel::build(&cfg, 0)?;
        match &mut model {
            TrainedModel::Segmenter(m) => load_checkpoint(dir, m, &cfg)?,
            TrainedModel::TwoMoons(m) => load_checkpoint(dir, m, &cfg)?,
        };
        Ok((model, cfg))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub name: String,
    pub metrics: MetricsRow,
    pub reliability: CalibrationReport,
}

/// Everything recorded about one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub axis_value: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub history: TrainHistory,
    pub metrics: MetricsRow,
    pub reliability: CalibrationReport,
    pub ood: Vec<OodResult>,
    pub dropout_rates: Vec<f64>,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub struct Run {
    pub model: TrainedModel,
    pub record: RunRecord,
    pub data: ExperimentData,
}

/// Evaluate on the test set and every OOD set, with evaluation streams of `seed`.
pub fn evaluate_all(
    model: &TrainedModel,
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Evaluation, Vec<OodResult>)> {
    let main = evaluate(model, &data.test, cfg.mc_samples, cfg.batch_size, &mut substream(seed, Stream::Evaluation))?;
    let ood = data
        .ood
        .iter()
        .enumerate()
        .map(|(k, (name, set))| {
            let e = evaluate(model, set, cfg.mc_samples, cfg.batch_size, &mut derived(seed, Stream::Evaluation, k as u64 + 1))?;
            Ok(OodResult {
                name: name.clone(),
                metrics: e.metrics,
                reliability: e.reliability,
            })
        })
        .collect::<Result<_>>()?;
    Ok((main, ood))
}

/// Generate data, train and evaluate one `(config, seed)` pair.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<Run> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_data(cfg, seed)?;
    let mut model = TrainedModel::build(cfg, seed)?;
    let history = model.train(cfg, &data, seed)?;
    let (main, ood) = evaluate_all(&model, &data, cfg, seed)?;
    let record = RunRecord {
        run_id: format!("{}-s{seed}", cfg.name),
        axis_value: None,
        seed,
        config_hash: config_hash(cfg)?,
        config: cfg.clone(),
        history,
        metrics: main.metrics,
        reliability: main.reliability,
        ood,
        dropout_rates: model.dropout_rates(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(Run { model, record, data })
}

/// Write `run.json` and the checkpoint under `dir`.
pub fn save_run(dir: &Path, run: &mut Run) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.record.write(&dir.join(RUN_FILE))?;
    run.model.save(&dir.join(CHECKPOINT_DIR), &run.record.config)?;
    Ok(())
}
