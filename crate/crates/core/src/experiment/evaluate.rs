use serde::{Deserialize, Serialize};

use crate::calibration::{
    apply_temperature, argmax_classes, classwise_scores, confidence_and_correct, ece, fit_temperature,
    CalibrationReport, TemperatureFit, DEFAULT_BINS,
};
use crate::error::{Error, Result};
use crate::models::StochasticModel;
use crate::output::softmax_classes;
use crate::rng::Rng;
use crate::uncertainty::{decompose, mc_predict, mean};

use super::datasets::LabeledSet;

/// One row of the results table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub f1: f64,
    pub epistemic: f64,
    pub entropy: f64,
    pub aleatoric: f64,
    pub ece: f64,
}

impl MetricsRow {
    pub const FIELDS: [&'static str; 5] = ["f1", "epistemic", "entropy", "aleatoric", "ece"];

    pub fn values(&self) -> [f64; 5] {
        [self.f1, self.epistemic, self.entropy, self.aleatoric, self.ece]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        MetricsRow {
            f1: v[0],
            epistemic: v[1],
            entropy: v[2],
            aleatoric: v[3],
            ece: v[4],
        }
    }
}

/// MC predictions and uncertainty maps over a whole set, `[n, classes, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SetPrediction {
    pub shape: [usize; 4],
    /// Mean over passes of the softmax probabilities.
    pub mean_probs: Vec<f64>,
    /// Mean over passes of the mean-logit head.
    pub mean_logits: Vec<f64>,
    pub epistemic: Vec<f64>,
    /// `[n, h, w]`.
    pub entropy: Vec<f64>,
    /// From a pass with mean weights and no dropout.
    pub aleatoric: Vec<f64>,
}

/// `m` stochastic passes over `set` in chunks of `chunk` images.
pub fn predict_set(
    model: &impl StochasticModel,
    set: &LabeledSet,
    m: usize,
    chunk: usize,
    rng: &mut Rng,
) -> Result<SetPrediction> {
    if set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut pred: Option<SetPrediction> = None;
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let (x, _) = set.batch(idx)?;
        let mc = mc_predict(model, &x, m, rng)?;
        let det = model.forward(&x, false, rng)?;
        let dec = decompose(&mc, &det, None)?;
        let p = pred.get_or_insert_with(|| SetPrediction {
            shape: [0, mc.shape[1], mc.shape[2], mc.shape[3]],
            mean_probs: Vec::new(),
            mean_logits: Vec::new(),
            epistemic: Vec::new(),
            entropy: Vec::new(),
            aleatoric: Vec::new(),
        });
        p.shape[0] += idx.len();
        p.mean_probs.extend(mc.mean_probabilities());
        p.mean_logits.extend_from_slice(&mc.mean_logits);
        p.epistemic.extend(dec.epistemic_variance);
        p.entropy.extend(dec.predictive_entropy);
        p.aleatoric.extend(dec.aleatoric);
    }
    pred.ok_or_else(|| Error::invalid("empty test set"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsRow,
    pub reliability: CalibrationReport,
    pub prediction: SetPrediction,
}

/// Macro-F1 of the MC-mean argmax, mean uncertainties and ECE of the MC-mean
/// confidences.
pub fn metrics_from_prediction(pred: &SetPrediction, labels: &[usize]) -> Result<(MetricsRow, CalibrationReport)> {
    if labels.len() != pred.shape[0] * pred.shape[2] * pred.shape[3] {
        return Err(Error::shape("labels do not match the prediction"));
    }
    let f1 = classwise_scores(&argmax_classes(&pred.mean_probs, pred.shape), labels, pred.shape[1])?.macro_f1;
    let (conf, correct) = confidence_and_correct(&pred.mean_probs, pred.shape, labels);
    let report = ece(&conf, &correct, DEFAULT_BINS)?;
    Ok((
        MetricsRow {
            f1,
            epistemic: mean(&pred.epistemic),
            entropy: mean(&pred.entropy),
            aleatoric: mean(&pred.aleatoric),
            ece: report.ece,
        },
        report,
    ))
}

pub fn evaluate(
    model: &impl StochasticModel,
    set: &LabeledSet,
    mc_samples: usize,
    chunk: usize,
    rng: &mut Rng,
) -> Result<Evaluation> {
    let prediction = predict_set(model, set, mc_samples, chunk, rng)?;
    let (metrics, reliability) = metrics_from_prediction(&prediction, &set.labels)?;
    Ok(Evaluation {
        metrics,
        reliability,
        prediction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub fit: TemperatureFit,
    pub before: CalibrationReport,
    pub after: CalibrationReport,
    pub f1_before: f64,
    pub f1_after: f64,
}

/// Fit a temperature on validation logits and report test reliability
/// before and after. Both reports use the MC-mean logits.
pub fn calibrate_logits(
    val_logits: &[f64],
    val_shape: [usize; 4],
    val_labels: &[usize],
    test_logits: &[f64],
    test_shape: [usize; 4],
    test_labels: &[usize],
) -> Result<CalibrationOutcome> {
    if val_labels.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let fit = fit_temperature(val_logits, val_shape, val_labels)?;
    if fit.single_class {
        return Err(Error::invalid("validation labels contain a single class"));
    }
    let report = |t: f64| -> Result<(CalibrationReport, f64)> {
        let probs = if t == 1.0 {
            softmax_classes(test_logits, test_shape, 1.0)
        } else {
            apply_temperature(test_logits, test_shape, t)
        };
        let (conf, correct) = confidence_and_correct(&probs, test_shape, test_labels);
        let mut r = ece(&conf, &correct, DEFAULT_BINS)?;
        r.temperature = Some(t);
        let f1 = classwise_scores(&argmax_classes(&probs, test_shape), test_labels, test_shape[1])?.macro_f1;
        Ok((r, f1))
    };
    let (before, f1_before) = report(1.0)?;
    let (after, f1_after) = report(fit.temperature)?;
    Ok(CalibrationOutcome {
        fit,
        before,
        after,
        f1_before,
        f1_after,
    })
}

pub fn calibrate(
    model: &impl StochasticModel,
    val: &LabeledSet,
    test: &LabeledSet,
    mc_samples: usize,
    chunk: usize,
    rng: &mut Rng,
) -> Result<CalibrationOutcome> {
    let v = predict_set(model, val, mc_samples, chunk, rng)?;
    let t = predict_set(model, test, mc_samples, chunk, rng)?;
    calibrate_logits(&v.mean_logits, v.shape, &val.labels, &t.mean_logits, t.shape, &test.labels)
}
