use crate::data::{
    add_gaussian_noise, gen_synthetic_cracks, gen_two_moons, images_to_batch, load_folder_dataset, moons_to_batch,
    split, ImageSample,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::BoundaryContext;
use crate::rng::{derived, substream, Stream};
use crate::tensor::Tensor;

use super::config::{DatasetKind, ExperimentConfig};

/// Inputs `[n, c, h, w]` with one label per output site. Image sets keep
/// their samples for plotting.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub input: Tensor,
    pub labels: Vec<usize>,
    pub images: Vec<ImageSample>,
}

impl LabeledSet {
    pub fn from_images(images: Vec<ImageSample>) -> Result<Self> {
        let idx: Vec<usize> = (0..images.len()).collect();
        let (input, labels) = images_to_batch(&images, &idx)?;
        Ok(LabeledSet { input, labels, images })
    }

    pub fn from_moons(samples: &[crate::data::MoonsSample]) -> Result<Self> {
        let idx: Vec<usize> = (0..samples.len()).collect();
        let (input, labels) = moons_to_batch(samples, &idx)?;
        Ok(LabeledSet {
            input,
            labels,
            images: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.input.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Likelihood terms: one per labelled site.
    pub fn sites(&self) -> usize {
        self.labels.len()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [_, c, h, w] = self.input.shape();
        let p = h * w;
        let mut x = Vec::with_capacity(indices.len() * c * p);
        let mut y = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of {}", self.len())));
            }
            x.extend_from_slice(self.input.sample(i));
            y.extend_from_slice(&self.labels[i * p..(i + 1) * p]);
        }
        Ok((Tensor::from_vec([indices.len(), c, h, w], x)?, y))
    }

    /// Ground-truth boundary context of every image.
    pub fn boundary_contexts(&self) -> Result<Vec<BoundaryContext>> {
        let [n, _, h, w] = self.input.shape();
        let p = h * w;
        (0..n)
            .map(|i| Ok(BoundaryContext::from_labels(&Grid::from_vec(h, w, self.labels[i * p..(i + 1) * p].to_vec())?)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    /// Named out-of-distribution test sets.
    pub ood: Vec<(String, LabeledSet)>,
}

fn noisy(set: &[ImageSample], variance: f64, seed: u64) -> Result<Vec<ImageSample>> {
    let mut rng = substream(seed, Stream::Noise);
    set.iter()
        .map(|s| {
            Ok(ImageSample {
                image: add_gaussian_noise(&s.image, variance, &mut rng)?,
                ..s.clone()
            })
        })
        .collect()
}

/// Build train / val / test (and OOD) sets for one root seed.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentData> {
    let d = &cfg.dataset;
    let stream = |k: u64| derived(seed, Stream::Data, k);
    if d.kind == DatasetKind::Moons {
        let gen = |n: usize, k: u64| -> Result<LabeledSet> {
            LabeledSet::from_moons(&gen_two_moons(n, d.moons_noise, &mut stream(k))?)
        };
        return Ok(ExperimentData {
            train: gen(d.n_train, 0)?,
            val: gen(d.n_val, 1)?,
            test: gen(d.n_test, 2)?,
            ood: Vec::new(),
        });
    }
    let (train, val, test) = match d.kind {
        DatasetKind::Cracks => {
            let gen = |n: usize, k: u64| gen_synthetic_cracks(n, d.height, d.width, &d.cracks, &mut stream(k));
            (gen(d.n_train, 0)?, gen(d.n_val, 1)?, gen(d.n_test, 2)?)
        }
        _ => {
            let path = d.path.as_ref().ok_or_else(|| Error::invalid("folder dataset needs a path"))?;
            let all = load_folder_dataset(path)?;
            if all.is_empty() {
                return Err(Error::invalid(format!("no samples under {}", path.display())));
            }
            split(&all, d.fractions, seed)?
        }
    };
    let mut ood = Vec::new();
    if let Some(o) = &cfg.ood {
        if let (Some(scale), DatasetKind::Cracks) = (o.texture_scale, d.kind) {
            let params = crate::data::CrackParams {
                texture_scale: scale,
                ..d.cracks.clone()
            };
            let b = gen_synthetic_cracks(d.n_test, d.height, d.width, &params, &mut stream(3))?;
            ood.push(("variant_b".to_string(), LabeledSet::from_images(b)?));
        }
        if let Some(v) = o.noise_variance {
            ood.push((format!("noise_{v}"), LabeledSet::from_images(noisy(&test, v, seed)?)?));
        }
    }
    Ok(ExperimentData {
        train: LabeledSet::from_images(train)?,
        val: LabeledSet::from_images(val)?,
        test: LabeledSet::from_images(test)?,
        ood,
    })
}
