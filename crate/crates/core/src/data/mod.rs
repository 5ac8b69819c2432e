//! Two-moons points, synthetic crack images, OOD noise, folder datasets and
//! splitting.

mod cracks;
mod folder;
mod moons;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cracks::{add_gaussian_noise, gen_synthetic_cracks, rasterize_polyline, CrackGeometry, CrackParams};
pub use folder::{export_folder_dataset, load_folder_dataset};
pub use moons::{gen_two_moons, moons_to_batch, MoonsSample, DEFAULT_MOONS_NOISE};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;
use crate::tensor::Tensor;

/// Grayscale image with intensities in `[0, 255]` and a binary mask (1 = crack).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image: Grid<f32>,
    pub mask: Grid<u8>,
    /// Generating geometry, for synthetic samples.
    pub crack: Option<CrackGeometry>,
}

impl ImageSample {
    pub fn crack_fraction(&self) -> f64 {
        self.mask.data.iter().map(|&m| m as f64).sum::<f64>() / self.mask.len().max(1) as f64
    }
}

/// Intensity normalization applied before the network.
pub fn normalize_intensity(v: f32) -> f32 {
    (v - 127.5) / 64.0
}

/// `[n, 1, h, w]` normalized images and `n * h * w` labels for `indices`.
pub fn images_to_batch(samples: &[ImageSample], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let first = indices
        .first()
        .map(|&i| &samples[i])
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(indices.len() * h * w);
    let mut labels = Vec::with_capacity(indices.len() * h * w);
    for &i in indices {
        let s = &samples[i];
        if s.image.height != h || s.image.width != w || !s.image.same_shape(&s.mask) {
            return Err(Error::shape("images in a batch must share one size"));
        }
        data.extend(s.image.data.iter().map(|&v| normalize_intensity(v)));
        labels.extend(s.mask.data.iter().map(|&m| m as usize));
    }
    Ok((Tensor::from_vec([indices.len(), 1, h, w], data)?, labels))
}

/// Seeded shuffle, then contiguous train / val / test slices.
pub fn split<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, rng::Stream::Split));
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = split(&items, (0.72, 0.10, 0.18), 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (72, 10, 18));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(&items, (0.72, 0.10, 0.18), 3).unwrap().0, a);
        assert!(split(&items, (0.5, 0.5, 0.5), 3).is_err());
    }
}
