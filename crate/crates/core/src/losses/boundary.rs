//! Ground-truth boundaries, exact Euclidean distance transform, and the
//! active boundary loss.
//!
//! The loss works in five stages:
//! 1. a pixel is on the predicted boundary when the largest KL divergence
//!    from its class distribution to one of its 8 neighbours exceeds
//!    `kl_threshold`;
//! 2. each such pixel off the ground-truth boundary gets a target direction,
//!    the neighbour offset with the smallest distance-to-boundary (first in
//!    [`NEIGHBOURS`] order on ties);
//! 3. the per-pixel loss is the cross-entropy between the softmax of its
//!    8 neighbour KL values and a smoothed one-hot of the target direction;
//! 4. losses are weighted by `min(d, clamp_dist) / clamp_dist` and averaged
//!    over the qualifying pixels;
//! 5. neighbour distributions are constants: gradient reaches only the
//!    centre pixel of each term.
//!
//! Out-of-image neighbours are clamped to the border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// `(dy, dx)` offsets of the 8-neighbourhood, in tie-breaking order.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

const FOUR_NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Probability mass on the target direction; the rest is spread evenly.
pub const TARGET_SMOOTHING: f64 = 0.8;

const PROB_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Pixels with a neighbour of a different label (4-neighbourhood, border
/// clamped).
pub fn extract_boundary(mask: &Grid<usize>) -> Grid<bool> {
    extract_boundary_with(mask, Connectivity::Four)
}

pub fn extract_boundary_with(mask: &Grid<usize>, connectivity: Connectivity) -> Grid<bool> {
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &FOUR_NEIGHBOURS,
        Connectivity::Eight => &NEIGHBOURS,
    };
    let mut out = Grid::filled(mask.height, mask.width, false);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let v = mask.get(y, x);
            let edge = offsets
                .iter()
                .any(|&(dy, dx)| mask.data[mask.clamped(y, x, dy, dx)] != *v);
            out.set(y, x, edge);
        }
    }
    out
}

/// Distances to the nearest marked pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMap {
    pub distances: Grid<f64>,
    /// Set when nothing was marked; all distances are then infinite.
    pub degenerate: bool,
}

/// Exact Euclidean distance transform (separable lower-envelope algorithm
/// on squared distances).
pub fn distance_transform(marked: &Grid<bool>) -> DistanceMap {
    let (h, w) = (marked.height, marked.width);
    if !marked.data.iter().any(|&m| m) {
        return DistanceMap {
            distances: Grid::filled(h, w, f64::INFINITY),
            degenerate: true,
        };
    }
    let inf = ((h * h + w * w) as f64) * 4.0 + 1.0;
    let mut sq: Vec<f64> = marked.data.iter().map(|&m| if m { 0.0 } else { inf }).collect();
    let mut buf_in = vec![0.0; h.max(w)];
    let mut buf_out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf_in[y] = sq[y * w + x];
        }
        lower_envelope(&buf_in[..h], &mut buf_out[..h]);
        for y in 0..h {
            sq[y * w + x] = buf_out[y];
        }
    }
    for y in 0..h {
        buf_in[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        lower_envelope(&buf_in[..w], &mut buf_out[..w]);
        sq[y * w..(y + 1) * w].copy_from_slice(&buf_out[..w]);
    }
    DistanceMap {
        distances: Grid {
            height: h,
            width: w,
            data: sq.into_iter().map(f64::sqrt).collect(),
        },
        degenerate: false,
    }
}

/// `out[q] = min_p (q - p)^2 + f[p]` in linear time.
fn lower_envelope(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |p: usize, q: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = intersect(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Ground-truth geometry the boundary loss needs for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryContext {
    pub gt_boundary: Grid<bool>,
    pub distance: Grid<f64>,
    pub kl_threshold: f64,
    pub clamp_dist: f64,
    pub degenerate: bool,
}

impl BoundaryContext {
    pub const DEFAULT_KL_THRESHOLD: f64 = 0.1;
    pub const DEFAULT_CLAMP_DIST: f64 = 5.0;

    /// Context from a label map. Boundaries use the 8-neighbourhood, the same
    /// neighbourhood predicted boundaries are detected with, so a perfect
    /// prediction has every predicted-boundary pixel on the ground truth.
    pub fn from_labels(labels: &Grid<usize>) -> Self {
        let gt_boundary = extract_boundary_with(labels, Connectivity::Eight);
        let dt = distance_transform(&gt_boundary);
        BoundaryContext {
            gt_boundary,
            distance: dt.distances,
            kl_threshold: Self::DEFAULT_KL_THRESHOLD,
            clamp_dist: Self::DEFAULT_CLAMP_DIST,
            degenerate: dt.degenerate,
        }
    }
}

/// Result of the boundary loss on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryLoss {
    pub loss: f64,
    /// Gradient with respect to the `[classes, h, w]` probabilities.
    pub grad: Vec<f64>,
    /// Pixels detected on the predicted boundary.
    pub pdb_pixels: usize,
    /// Predicted-boundary pixels off the ground-truth boundary (the averaged set).
    pub active_pixels: usize,
    pub degenerate: bool,
}

/// `KL(p_i || p_j)` from class-major probabilities and their logs.
fn kl(probs: &[f64], logs: &[f64], classes: usize, p: usize, i: usize, j: usize) -> f64 {
    (0..classes)
        .map(|c| probs[c * p + i] * (logs[c * p + i] - logs[c * p + j]))
        .sum()
}

/// Active boundary loss for one image; `probs` is `[classes, h, w]`.
pub fn active_boundary_loss(probs: &[f64], classes: usize, ctx: &BoundaryContext) -> Result<BoundaryLoss> {
    let (h, w) = (ctx.distance.height, ctx.distance.width);
    if probs.len() != classes * h * w || !ctx.gt_boundary.same_shape(&ctx.distance) {
        return Err(Error::shape(format!(
            "probabilities of length {} do not match {classes} classes on a {h}x{w} context",
            probs.len()
        )));
    }
    let mut grad = vec![0.0; probs.len()];
    if ctx.degenerate {
        return Ok(BoundaryLoss {
            loss: 0.0,
            grad,
            pdb_pixels: 0,
            active_pixels: 0,
            degenerate: true,
        });
    }
    let p = h * w;
    let logs: Vec<f64> = probs.iter().map(|&v| (v + PROB_EPS).ln()).collect();
    let off_target = (1.0 - TARGET_SMOOTHING) / (NEIGHBOURS.len() - 1) as f64;
    let mut total = 0.0;
    let mut pdb_pixels = 0;
    // (pixel, weight, d ce / d kl_k, neighbour indices)
    let mut terms: Vec<(usize, f64, [f64; 8], [usize; 8])> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut nb = [0usize; 8];
            let mut kls = [0.0f64; 8];
            for (k, &(dy, dx)) in NEIGHBOURS.iter().enumerate() {
                nb[k] = ctx.distance.clamped(y, x, dy, dx);
                kls[k] = kl(probs, &logs, classes, p, i, nb[k]);
            }
            let max_kl = kls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max_kl <= ctx.kl_threshold {
                continue;
            }
            pdb_pixels += 1;
            let d = ctx.distance.data[i];
            if d <= 0.0 {
                continue;
            }
            let mut target = 0;
            for k in 1..8 {
                if ctx.distance.data[nb[k]] < ctx.distance.data[nb[target]] {
                    target = k;
                }
            }
            if ctx.distance.data[nb[target]] >= d {
                continue;
            }
            let m = max_kl;
            let z: f64 = kls.iter().map(|v| (v - m).exp()).sum();
            let mut ce = 0.0;
            let mut dce = [0.0; 8];
            for k in 0..8 {
                let s = (kls[k] - m).exp() / z;
                let q = if k == target { TARGET_SMOOTHING } else { off_target };
                ce -= q * (kls[k] - m - z.ln());
                dce[k] = s - q;
            }
            let weight = d.min(ctx.clamp_dist) / ctx.clamp_dist;
            total += weight * ce;
            terms.push((i, weight, dce, nb));
        }
    }
    let active = terms.len();
    if active == 0 {
        return Ok(BoundaryLoss {
            loss: 0.0,
            grad,
            pdb_pixels,
            active_pixels: 0,
            degenerate: false,
        });
    }
    let norm = 1.0 / active as f64;
    for (i, weight, dce, nb) in terms {
        for c in 0..classes {
            let pc = probs[c * p + i];
            let own = logs[c * p + i] + pc / (pc + PROB_EPS);
            let g: f64 = (0..8)
                .map(|k| dce[k] * (own - logs[c * p + nb[k]]))
                .sum();
            grad[c * p + i] += weight * norm * g;
        }
    }
    Ok(BoundaryLoss {
        loss: total * norm,
        grad,
        pdb_pixels,
        active_pixels: active,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> usize) -> Grid<usize> {
        let mut g = Grid::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                g.set(y, x, f(y, x));
            }
        }
        g
    }

    fn count(b: &Grid<bool>) -> usize {
        b.data.iter().filter(|&&v| v).count()
    }

    #[test]
    fn uniform_mask_has_no_boundary() {
        assert_eq!(count(&extract_boundary(&Grid::filled(6, 4, 1))), 0);
    }

    #[test]
    fn single_pixel_boundary() {
        let m = grid(5, 5, |y, x| usize::from(y == 2 && x == 2));
        let b = extract_boundary(&m);
        assert_eq!(count(&b), 5);
        for (y, x) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(*b.get(y, x));
        }
    }

    #[test]
    fn block_boundary() {
        let m = grid(7, 7, |y, x| usize::from((2..5).contains(&y) && (2..5).contains(&x)));
        let b = extract_boundary(&m);
        assert_eq!(count(&b), 20);
        assert!(!*b.get(3, 3));
        assert!(!*b.get(1, 1));
        assert!(*b.get(1, 2));
    }

    #[test]
    fn distance_examples() {
        let mut marked = Grid::filled(6, 6, false);
        marked.set(0, 0, true);
        let dt = distance_transform(&marked);
        assert!(!dt.degenerate);
        assert_eq!(*dt.distances.get(0, 0), 0.0);
        assert_eq!(*dt.distances.get(3, 4), 5.0);
        let empty = distance_transform(&Grid::filled(3, 3, false));
        assert!(empty.degenerate);
        assert!(empty.distances.data.iter().all(|d| d.is_infinite()));
    }

    fn one_hot(labels: &Grid<usize>, classes: usize) -> Vec<f64> {
        let p = labels.len();
        let mut probs = vec![0.0; classes * p];
        for (i, &l) in labels.data.iter().enumerate() {
            probs[l * p + i] = 1.0;
        }
        probs
    }

    #[test]
    fn perfect_prediction_gives_zero() {
        let labels = grid(9, 9, |y, x| usize::from((2..6).contains(&y) && (3..7).contains(&x)));
        let ctx = BoundaryContext::from_labels(&labels);
        let r = active_boundary_loss(&one_hot(&labels, 2), 2, &ctx).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.pdb_pixels > 0);
        assert_eq!(r.active_pixels, 0);
    }

    #[test]
    fn uniform_prediction_gives_zero_without_pdb() {
        let labels = grid(6, 6, |_, x| usize::from(x < 3));
        let ctx = BoundaryContext::from_labels(&labels);
        let r = active_boundary_loss(&vec![0.5; 72], 2, &ctx).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.pdb_pixels, 0);
    }

    #[test]
    fn degenerate_context() {
        let labels = Grid::filled(4, 4, 1usize);
        let ctx = BoundaryContext::from_labels(&labels);
        assert!(ctx.degenerate);
        let r = active_boundary_loss(&vec![0.5; 32], 2, &ctx).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.loss, 0.0);
        assert!(active_boundary_loss(&[0.5; 3], 2, &ctx).is_err());
    }
}
