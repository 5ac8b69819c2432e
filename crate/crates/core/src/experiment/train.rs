use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    active_boundary_loss, combine_losses, heteroscedastic_nll, heteroscedastic_nll_with_grad,
    lovasz_jaccard_loss, lovasz_jaccard_loss_with_grad, BoundaryContext, LossWeightState, OutputGrad,
};
use crate::models::Trainable;
use crate::output::{softmax_backward, HeteroscedasticOutput};
use crate::rng::{derived, substream, Stream};

use super::config::ExperimentConfig;
use super::datasets::{ExperimentData, LabeledSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted training objective over the epoch's batches.
    pub train_loss: f64,
    /// Unweighted sum of the enabled terms on the validation set.
    pub val_loss: f64,
    /// Mean raw likelihood, boundary and Jaccard losses over the batches.
    pub components: [f64; 3],
    /// Weights used on the epoch's last batch.
    pub weights: [f64; 3],
    pub regularizer: f64,
    pub dropout_rates: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Which of the boundary and Jaccard terms are in the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub boundary: bool,
    pub iou: bool,
}

impl LossTerms {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        // Both terms need a spatial label map.
        let spatial = !cfg.is_moons();
        LossTerms {
            boundary: cfg.loss.boundary && spatial,
            iou: cfg.loss.iou && spatial,
        }
    }
}

struct BatchLoss {
    raw: [f64; 3],
    /// Gradient of each term with respect to the softmax probabilities.
    d_probs: [Option<Vec<f64>>; 2],
}

fn auxiliary_losses(
    out: &HeteroscedasticOutput,
    labels: &[usize],
    contexts: &[&BoundaryContext],
    terms: LossTerms,
    with_grad: bool,
) -> Result<BatchLoss> {
    let probs = out.probabilities();
    let (n, c, p) = (out.batch(), out.classes(), out.spatial());
    let mut raw = [0.0; 3];
    let mut d_probs = [None, None];
    if terms.boundary {
        let mut grad = vec![0.0; probs.len()];
        for (i, ctx) in contexts.iter().enumerate() {
            let per = c * p;
            let b = active_boundary_loss(&probs[i * per..(i + 1) * per], c, ctx)?;
            raw[1] += b.loss / n as f64;
            for (g, v) in grad[i * per..(i + 1) * per].iter_mut().zip(&b.grad) {
                *g = v / n as f64;
            }
        }
        d_probs[0] = with_grad.then_some(grad);
    }
    if terms.iou {
        if with_grad {
            let (l, g) = lovasz_jaccard_loss_with_grad(&probs, out.shape, labels)?;
            raw[2] = l;
            d_probs[1] = Some(g);
        } else {
            raw[2] = lovasz_jaccard_loss(&probs, out.shape, labels)?;
        }
    }
    Ok(BatchLoss { raw, d_probs })
}

/// Validation loss: the unweighted sum of the enabled terms, mean weights
/// and no dropout, with a fixed logit-noise stream.
pub fn validation_loss<M: Trainable>(
    model: &M,
    set: &LabeledSet,
    contexts: &[BoundaryContext],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<f64> {
    let terms = LossTerms::from_config(cfg);
    let mut nll_rng = derived(seed, Stream::Evaluation, u64::MAX);
    let mut idle = derived(seed, Stream::Evaluation, u64::MAX - 1);
    let mut total = 0.0;
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(cfg.batch_size) {
        let (x, y) = set.batch(chunk)?;
        let out = model.forward(&x, false, &mut idle)?;
        let nll = heteroscedastic_nll(&out, &y, cfg.loss.nll_samples, &mut nll_rng)?;
        let ctx: Vec<&BoundaryContext> = if terms.boundary {
            chunk.iter().map(|&i| &contexts[i]).collect()
        } else {
            Vec::new()
        };
        let aux = auxiliary_losses(&out, &y, &ctx, terms, false)?;
        total += (nll + aux.raw[1] + aux.raw[2]) * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
        e => e,
    }
}

/// Mini-batch SGD with momentum, step-decayed learning rate and early
/// stopping on the validation loss. Randomness comes from `seed`'s shuffle,
/// dropout and likelihood streams.
pub fn train_model<M: Trainable>(
    model: &mut M,
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
) -> Result<TrainHistory> {
    let terms = LossTerms::from_config(cfg);
    let train = &data.train;
    if train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let (train_ctx, val_ctx) = if terms.boundary {
        (train.boundary_contexts()?, data.val.boundary_contexts()?)
    } else {
        (Vec::new(), Vec::new())
    };
    let n_data = train.sites();
    let mut dropout_rng = substream(seed, Stream::Dropout);
    let mut nll_rng = substream(seed, Stream::NllSampling);
    let mut weights = LossWeightState::new(cfg.loss.strategy);
    weights.ramp_length = cfg.loss.ramp_length;
    let mut history = TrainHistory::default();
    let mut val_history = Vec::new();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.schedule.lr(epoch);
        weights.epoch = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived(seed, Stream::Shuffle, epoch as u64));
        let mut sum_total = 0.0;
        let mut sum_raw = [0.0; 3];
        let mut last_w = [0.0; 3];
        let mut reg = 0.0;
        let batches = order.chunks(cfg.batch_size).count();
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            model.zero_grad();
            let (out, cache) = model.forward_train(&x, true, &mut dropout_rng).map_err(|e| diverged(e, epoch))?;
            let (l_mle, g_mle) =
                heteroscedastic_nll_with_grad(&out, &y, cfg.loss.nll_samples, &mut nll_rng).map_err(|e| diverged(e, epoch))?;
            let ctx: Vec<&BoundaryContext> = if terms.boundary {
                chunk.iter().map(|&i| &train_ctx[i]).collect()
            } else {
                Vec::new()
            };
            let aux = auxiliary_losses(&out, &y, &ctx, terms, true).map_err(|e| diverged(e, epoch))?;
            let (total, w) = combine_losses(&mut weights, l_mle, aux.raw[1], aux.raw[2]);
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, loss: total });
            }
            let mut grad = OutputGrad::zeros(out.mean_logits.len());
            grad.add_scaled(&g_mle, w[0]);
            let mut d_probs = vec![0.0; out.mean_logits.len()];
            let mut any_aux = false;
            for (k, g) in aux.d_probs.iter().enumerate() {
                if let Some(g) = g {
                    any_aux = true;
                    for (d, v) in d_probs.iter_mut().zip(g) {
                        *d += w[k + 1] * v;
                    }
                }
            }
            if any_aux {
                let probs = out.probabilities();
                let d_logits = softmax_backward(&probs, &d_probs, out.shape);
                for (d, v) in grad.d_mean.iter_mut().zip(d_logits) {
                    *d += v;
                }
            }
            model.backward(cache, &grad)?;
            reg += model.regularize(n_data)?;
            step(model, cfg, lr);
            sum_total += total;
            sum_raw[0] += l_mle;
            sum_raw[1] += aux.raw[1];
            sum_raw[2] += aux.raw[2];
            last_w = w;
        }
        let val_loss = validation_loss(model, &data.val, &val_ctx, cfg, seed).map_err(|e| diverged(e, epoch))?;
        let train_loss = sum_total / batches as f64;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: if train_loss.is_finite() { val_loss } else { train_loss },
            });
        }
        log::debug!("epoch {epoch}: lr {lr:.5} train {train_loss:.5} val {val_loss:.5}");
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            components: sum_raw.map(|v| v / batches as f64),
            weights: last_w,
            regularizer: reg / batches as f64,
            dropout_rates: model.dropout_rates(),
        });
        val_history.push(val_loss);
        if cfg.early_stop.should_stop(&val_history) {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

fn step<M: Trainable>(model: &mut M, cfg: &ExperimentConfig, lr: f64) {
    let opt = cfg.optimizer;
    model.visit_params(&mut |p| opt.step(p, lr));
}
