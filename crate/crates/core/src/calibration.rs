//! Segmentation scores, expected calibration error, temperature scaling and
//! F1-versus-uncertainty tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::output::softmax_classes;

pub const DEFAULT_BINS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// False when the class is absent from both masks; such classes are left
    /// out of the macro mean.
    pub included: bool,
}

/// Precision, recall and F1 of `class`. A zero denominator gives 0.
pub fn precision_recall_f1(pred: &[usize], gt: &[usize], class: usize) -> Result<ClassScore> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassScore {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        included: tp + fp + fn_ > 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClasswiseScore {
    pub per_class: Vec<ClassScore>,
    /// Unweighted mean of F1 over included classes; 0 if none.
    pub macro_f1: f64,
}

pub fn classwise_scores(pred: &[usize], gt: &[usize], classes: usize) -> Result<ClasswiseScore> {
    let per_class = (0..classes)
        .map(|k| precision_recall_f1(pred, gt, k))
        .collect::<Result<Vec<_>>>()?;
    let included: Vec<f64> = per_class.iter().filter(|s| s.included).map(|s| s.f1).collect();
    let macro_f1 = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(ClasswiseScore { per_class, macro_f1 })
}

/// Argmax over classes of `[n, classes, h, w]` values, `[n, h, w]`; first
/// maximum wins.
pub fn argmax_classes(values: &[f64], shape: [usize; 4]) -> Vec<usize> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![0; n * p];
    for i in 0..n {
        for px in 0..p {
            let mut best = 0;
            for k in 1..c {
                if values[(i * c + k) * p + px] > values[(i * c + best) * p + px] {
                    best = k;
                }
            }
            out[i * p + px] = best;
        }
    }
    out
}

/// Max-probability confidence and correctness per pixel.
pub fn confidence_and_correct(probs: &[f64], shape: [usize; 4], labels: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let pred = argmax_classes(probs, shape);
    let mut conf = Vec::with_capacity(n * p);
    for i in 0..n {
        for px in 0..p {
            conf.push(probs[(i * c + pred[i * p + px]) * p + px].clamp(0.0, 1.0));
        }
    }
    let correct = pred.iter().zip(labels).map(|(a, b)| a == b).collect();
    (conf, correct)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction correct in the bin (0 when empty).
    pub acc: f64,
    /// Mean confidence in the bin (0 when empty).
    pub conf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub temperature: Option<f64>,
    pub bins: Vec<ReliabilityBin>,
    /// How per-pixel confidence is defined.
    pub confidence: String,
}

/// Index of the right-inclusive uniform bin `(i/n, (i+1)/n]` holding `v`;
/// 0 goes to the first bin.
fn bin_index(v: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut i = ((v * nf).ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
    while i > 0 && v <= i as f64 / nf {
        i -= 1;
    }
    while i + 1 < n && v > (i + 1) as f64 / nf {
        i += 1;
    }
    i
}

pub fn ece(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    if confidences.len() != correct.len() {
        return Err(Error::shape(format!(
            "{} confidences for {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if let Some(bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!("confidence {bad} outside [0, 1]")));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            acc_sum[b] += 1.0;
        }
    }
    let total = confidences.len().max(1) as f64;
    let mut value = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (acc, conf) = if count[b] > 0 {
                (acc_sum[b] / count[b] as f64, conf_sum[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            value += count[b] as f64 / total * (acc - conf).abs();
            ReliabilityBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                acc,
                conf,
            }
        })
        .collect();
    Ok(CalibrationReport {
        ece: value,
        temperature: None,
        bins,
        confidence: "max_probability".into(),
    })
}

impl CalibrationReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Reliability table with header `bin_lo,bin_hi,count,accuracy,confidence`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bin_lo,bin_hi,count,accuracy,confidence")?;
        for b in &self.bins {
            writeln!(f, "{:.6},{:.6},{},{:.6},{:.6}", b.lo, b.hi, b.count, b.acc, b.conf)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Mean cross-entropy of `logits / t` over `[n, classes, h, w]` logits.
pub fn scaled_nll(logits: &[f64], shape: [usize; 4], labels: &[usize], t: f64) -> f64 {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut total = 0.0;
    for i in 0..n {
        for px in 0..p {
            let row = |k: usize| logits[(i * c + k) * p + px] / t;
            let max = (0..c).map(row).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|k| (row(k) - max).exp()).sum::<f64>().ln();
            total += lse - row(labels[i * p + px]);
        }
    }
    total / (n * p) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// The validation labels contain a single class.
    pub single_class: bool,
}

/// Minimize validation NLL of `logits / T` over `log T`: a 61-point grid on
/// `[-3, 3]`, then golden-section search in the best grid cell's neighbourhood.
pub fn fit_temperature(logits: &[f64], shape: [usize; 4], labels: &[usize]) -> Result<TemperatureFit> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    if n * p == 0 || labels.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    if logits.len() != n * c * p || labels.len() != n * p {
        return Err(Error::shape(format!("{} logits and {} labels for {shape:?}", logits.len(), labels.len())));
    }
    if labels.iter().any(|&l| l >= c) {
        return Err(Error::invalid("label out of range"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("validation logits"));
    }
    let single_class = labels.iter().all(|&l| l == labels[0]);
    let f = |log_t: f64| scaled_nll(logits, shape, labels, log_t.exp());
    let grid: Vec<f64> = (0..61).map(|i| (i as f64 - 30.0) / 10.0).collect();
    let values: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let mut best = 0;
    for i in 1..grid.len() {
        if values[i] < values[best] {
            best = i;
        }
    }
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-4 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
    }
    let refined = 0.5 * (a + b);
    let fr = f(refined);
    let (log_t, nll_after) = if fr <= values[best] { (refined, fr) } else { (grid[best], values[best]) };
    Ok(TemperatureFit {
        temperature: log_t.exp(),
        nll_before: values[30],
        nll_after,
        single_class,
    })
}

/// Calibrated probabilities for `[n, classes, h, w]` logits.
pub fn apply_temperature(logits: &[f64], shape: [usize; 4], t: f64) -> Vec<f64> {
    softmax_classes(logits, shape, t)
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when undefined (fewer than two points
/// or a constant variable).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub class: usize,
    pub f1: f64,
    pub uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScatter {
    pub class: usize,
    /// Distinct `(uncertainty, f1)` points in input order.
    pub points: Vec<(f64, f64)>,
    /// Rank correlation of uncertainty with `1 - f1`.
    pub rank_correlation: Option<f64>,
    pub correlation_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterTable {
    pub classes: Vec<ClassScatter>,
    /// Line of equality for the plot, as two end points.
    pub reference_line: [(f64, f64); 2],
}

pub fn classwise_f1_vs_uncertainty(records: &[UncertaintyRecord]) -> Result<ScatterTable> {
    if records.is_empty() {
        return Err(Error::invalid("need at least one record"));
    }
    let max_class = records.iter().map(|r| r.class).max().unwrap_or(0);
    let mut classes = Vec::new();
    for k in 0..=max_class {
        let rs: Vec<&UncertaintyRecord> = records.iter().filter(|r| r.class == k).collect();
        if rs.is_empty() {
            continue;
        }
        let mut points: Vec<(f64, f64)> = Vec::new();
        for r in &rs {
            if !points.contains(&(r.uncertainty, r.f1)) {
                points.push((r.uncertainty, r.f1));
            }
        }
        let u: Vec<f64> = rs.iter().map(|r| r.uncertainty).collect();
        let err: Vec<f64> = rs.iter().map(|r| 1.0 - r.f1).collect();
        let rank_correlation = spearman(&u, &err);
        classes.push(ClassScatter {
            class: k,
            points,
            rank_correlation,
            correlation_undefined: rank_correlation.is_none(),
        });
    }
    Ok(ScatterTable {
        classes,
        reference_line: [(0.0, 0.0), (1.0, 1.0)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        let s = precision_recall_f1(&[1; 5], &[1; 5], 1).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        // tp, fp, fn
        let s = precision_recall_f1(&[1, 1, 0], &[1, 0, 1], 1).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        let all = classwise_scores(&[0, 0], &[0, 0], 2).unwrap();
        assert!(!all.per_class[1].included);
        assert_eq!(all.macro_f1, 1.0);
    }

    #[test]
    fn ece_hand_case() {
        let r = ece(&[0.8, 0.8, 0.2, 0.2], &[true, false, false, false], 30).unwrap();
        assert!((r.ece - 0.25).abs() < 1e-12);
        assert_eq!(r.bins.len(), 30);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(r.bins[23].count, 2);
        assert_eq!(r.bins[5].count, 2);
        assert!(ece(&[1.5], &[true], 30).is_err());
        assert_eq!(ece(&[1.0; 3], &[true; 3], 30).unwrap().ece, 0.0);
    }

    #[test]
    fn bins_are_right_inclusive() {
        assert_eq!(bin_index(0.0, 30), 0);
        assert_eq!(bin_index(1.0 / 30.0, 30), 0);
        assert_eq!(bin_index(1.0 / 30.0 + 1e-12, 30), 1);
        assert_eq!(bin_index(1.0, 30), 29);
    }

    #[test]
    fn temperature_recovers_scale() {
        // logits [s, 0] with label 0 at rate sigmoid(s): calibrated at T = 1
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        let n = 2000;
        for i in 0..n {
            let s = -3.0 + 6.0 * (i as f64 + 0.5) / n as f64;
            let q = 1.0 / (1.0 + (-s).exp());
            for j in 0..10 {
                logits.push((s, 0.0));
                labels.push(usize::from((j as f64 + 0.5) / 10.0 >= q));
            }
        }
        let m = logits.len();
        let flat = |k: f64| {
            let mut v = vec![0.0; 2 * m];
            for (i, (a, b)) in logits.iter().enumerate() {
                v[i] = a * k;
                v[m + i] = b * k;
            }
            v
        };
        let shape = [1, 2, 1, m];
        let fit1 = fit_temperature(&flat(1.0), shape, &labels).unwrap();
        assert!((0.95..=1.05).contains(&fit1.temperature), "{fit1:?}");
        let fit2 = fit_temperature(&flat(2.0), shape, &labels).unwrap();
        assert!((1.9..=2.1).contains(&fit2.temperature), "{fit2:?}");
        assert!(fit2.nll_after <= fit2.nll_before);
    }

    #[test]
    fn spearman_monotone() {
        let recs: Vec<UncertaintyRecord> = (0..6)
            .map(|i| UncertaintyRecord {
                class: 1,
                f1: 1.0 - i as f64 * 0.1,
                uncertainty: i as f64,
            })
            .collect();
        let t = classwise_f1_vs_uncertainty(&recs).unwrap();
        assert_eq!(t.classes.len(), 1);
        assert_eq!(t.classes[0].rank_correlation, Some(1.0));
        let f1: Vec<f64> = recs.iter().map(|r| r.f1).collect();
        let u: Vec<f64> = recs.iter().map(|r| r.uncertainty).collect();
        assert_eq!(spearman(&f1, &u), Some(-1.0));
        let same = vec![recs[0]; 3];
        let t = classwise_f1_vs_uncertainty(&same).unwrap();
        assert_eq!(t.classes[0].points.len(), 1);
        assert!(t.classes[0].correlation_undefined);
    }
}
