//! Lovász extension of the Jaccard loss, averaged over the classes present
//! in the labels.

use crate::error::{Error, Result};

/// Gradient of the Lovász extension of the Jaccard set function at a
/// ground-truth indicator already sorted by decreasing error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut grad = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = 1.0 - inter / union;
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Loss over `[n, classes, h, w]` probabilities and `n * h * w` labels, with
/// the gradient with respect to the probabilities.
pub fn lovasz_jaccard_loss_with_grad(
    probs: &[f64],
    shape: [usize; 4],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let (n, c, p) = (shape[0], shape[1], shape[2] * shape[3]);
    if labels.is_empty() {
        return Err(Error::invalid("empty label set"));
    }
    if probs.len() != n * c * p || labels.len() != n * p {
        return Err(Error::shape(format!(
            "{} probabilities and {} labels for shape {shape:?}",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let site = |s: usize, k: usize| (s / p * c + k) * p + s % p;
    let mut grad = vec![0.0; probs.len()];
    let mut total = 0.0;
    let mut present = 0usize;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for k in 0..c {
        if !labels.contains(&k) {
            continue;
        }
        present += 1;
        let errors: Vec<f64> = (0..labels.len())
            .map(|s| {
                let fg = if labels[s] == k { 1.0 } else { 0.0 };
                (fg - probs[site(s, k)]).abs()
            })
            .collect();
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let gt_sorted: Vec<bool> = order.iter().map(|&s| labels[s] == k).collect();
        let g = lovasz_grad(&gt_sorted);
        for (rank, &s) in order.iter().enumerate() {
            total += errors[s] * g[rank];
            let sign = if labels[s] == k { -1.0 } else { 1.0 };
            grad[site(s, k)] += sign * g[rank];
        }
    }
    let scale = 1.0 / present as f64;
    grad.iter_mut().for_each(|v| *v *= scale);
    Ok((total * scale, grad))
}

pub fn lovasz_jaccard_loss(probs: &[f64], shape: [usize; 4], labels: &[usize]) -> Result<f64> {
    Ok(lovasz_jaccard_loss_with_grad(probs, shape, labels)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_is_zero() {
        let labels = [0, 1, 1, 0];
        let probs = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(lovasz_jaccard_loss(&probs, [1, 2, 2, 2], &labels).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_two_pixels() {
        // background row then foreground row
        let probs = [1.0, 0.0, 0.0, 1.0];
        let l = lovasz_jaccard_loss(&probs, [1, 2, 1, 2], &[1, 0]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_rejected() {
        assert!(lovasz_jaccard_loss(&[], [0, 2, 1, 1], &[]).is_err());
    }
}
