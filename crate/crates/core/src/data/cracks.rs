use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{derived, Rng, Stream};

const MIN_SIDE: usize = 32;
const MAX_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrackParams {
    /// Inclusive range of crack widths in pixels.
    pub crack_width: (usize, usize),
    pub n_segments: usize,
    /// Darkening applied to crack pixels before blurring.
    pub intensity_dip: f32,
    /// Lattice spacing of the value-noise texture, in pixels.
    pub texture_scale: f64,
    pub texture_amplitude: f32,
    pub background: f32,
    /// Per-pixel white grain on top of the texture.
    pub grain_sd: f32,
    pub blur_sd: f64,
    /// Accepted range of crack-pixel fraction; geometry is redrawn outside it.
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for CrackParams {
    fn default() -> Self {
        CrackParams {
            crack_width: (1, 3),
            n_segments: 4,
            intensity_dip: 45.0,
            texture_scale: 8.0,
            texture_amplitude: 30.0,
            background: 150.0,
            grain_sd: 6.0,
            blur_sd: 0.7,
            min_fraction: 0.002,
            max_fraction: 0.08,
        }
    }
}

/// Polyline through `points` (`(row, col)`, pixel centres at integers) of
/// the given width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrackGeometry {
    pub points: Vec<(f64, f64)>,
    pub width: f64,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

/// Pixels whose centre lies strictly closer than `width / 2` to the polyline.
pub fn rasterize_polyline(height: usize, width: usize, points: &[(f64, f64)], line_width: f64) -> Grid<u8> {
    let mut mask = Grid::filled(height, width, 0u8);
    let half = line_width / 2.0;
    for y in 0..height {
        for x in 0..width {
            let p = (y as f64, x as f64);
            let hit = points.windows(2).any(|s| segment_distance(p, s[0], s[1]) < half);
            if hit {
                mask.set(y, x, 1);
            }
        }
    }
    mask
}

impl CrackGeometry {
    pub fn rasterize(&self, height: usize, width: usize) -> Grid<u8> {
        rasterize_polyline(height, width, &self.points, self.width)
    }
}

fn value_noise(height: usize, width: usize, scale: f64, rng: &mut Rng) -> Grid<f32> {
    let scale = scale.max(1.0);
    let lh = (height as f64 / scale).ceil() as usize + 2;
    let lw = (width as f64 / scale).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Grid::filled(height, width, 0.0f32);
    for y in 0..height {
        let fy = y as f64 / scale;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..width {
            let fx = x as f64 / scale;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |r: usize, c: usize| lattice[r * lw + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.set(y, x, (top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

fn gaussian_blur(img: &Grid<f32>, sd: f64) -> Grid<f32> {
    if sd <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sd).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sd * sd)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &Grid<f32>, horizontal: bool| -> Grid<f32> {
        let mut dst = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    let (yy, xx) = if horizontal {
                        (y, (x + o).clamp(0, w - 1))
                    } else {
                        ((y + o).clamp(0, h - 1), x)
                    };
                    acc += kv * *src.get(yy as usize, xx as usize) as f64;
                }
                dst.set(y as usize, x as usize, (acc / norm) as f32);
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

fn random_polyline(height: usize, width: usize, segments: usize, rng: &mut Rng) -> Vec<(f64, f64)> {
    let vertical = rng.random_bool(0.5);
    let (along, across) = if vertical { (height, width) } else { (width, height) };
    let (along, across) = (along as f64, across as f64);
    let step = Normal::new(0.0, 0.12 * across).expect("positive sd");
    let mut c = rng.random_range(0.2 * across..0.8 * across);
    let segments = segments.max(1);
    let mut pts = Vec::with_capacity(segments + 1);
    for i in 0..=segments {
        let a = -1.0 + (along + 1.0) * i as f64 / segments as f64;
        if i > 0 {
            c = (c + step.sample(rng)).clamp(2.0, across - 3.0);
        }
        pts.push(if vertical { (a, c) } else { (c, a) });
    }
    pts
}

fn one_crack(height: usize, width: usize, params: &CrackParams, rng: &mut Rng) -> Result<ImageSample> {
    let texture = value_noise(height, width, params.texture_scale, rng);
    let detail = value_noise(height, width, params.texture_scale / 2.0, rng);
    let mut image = Grid::filled(height, width, 0.0f32);
    for i in 0..image.len() {
        let grain: f64 = rng.sample(StandardNormal);
        image.data[i] = params.background
            + params.texture_amplitude * (texture.data[i] + 0.5 * detail.data[i])
            + params.grain_sd * grain as f32;
    }
    let (wmin, wmax) = (params.crack_width.0.max(1), params.crack_width.1.max(params.crack_width.0.max(1)));
    for _ in 0..MAX_TRIES {
        let geometry = CrackGeometry {
            points: random_polyline(height, width, params.n_segments, rng),
            width: rng.random_range(wmin..=wmax) as f64,
        };
        let mask = geometry.rasterize(height, width);
        let fraction = mask.data.iter().map(|&m| m as f64).sum::<f64>() / mask.len() as f64;
        if fraction < params.min_fraction || fraction > params.max_fraction {
            continue;
        }
        let mut img = image.clone();
        for (v, &m) in img.data.iter_mut().zip(&mask.data) {
            *v -= params.intensity_dip * m as f32;
        }
        let mut img = gaussian_blur(&img, params.blur_sd);
        img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
        return Ok(ImageSample {
            image: img,
            mask,
            crack: Some(geometry),
        });
    }
    Err(Error::invalid(format!(
        "no crack geometry within [{}, {}] of a {height}x{width} image after {MAX_TRIES} draws",
        params.min_fraction, params.max_fraction
    )))
}

/// `n` textured images each crossed by one polyline crack. Sample `i` is
/// drawn from its own substream of a seed taken from `rng`.
pub fn gen_synthetic_cracks(
    n: usize,
    height: usize,
    width: usize,
    params: &CrackParams,
    rng: &mut Rng,
) -> Result<Vec<ImageSample>> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::invalid(format!(
            "crack images must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        )));
    }
    if params.crack_width.0 == 0 || params.crack_width.1 < params.crack_width.0 {
        return Err(Error::invalid(format!("bad crack width range {:?}", params.crack_width)));
    }
    let base: u64 = rng.random();
    (0..n)
        .map(|i| one_crack(height, width, params, &mut derived(base, Stream::Data, i as u64)))
        .collect()
}

/// Add i.i.d. `N(0, variance)` on the 0-255 scale, then clip.
pub fn add_gaussian_noise(image: &Grid<f32>, variance: f64, rng: &mut Rng) -> Result<Grid<f32>> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!("noise variance must be positive, got {variance}")));
    }
    let sd = variance.sqrt();
    Ok(image.map(|&v| {
        let e: f64 = rng.sample(StandardNormal);
        (v as f64 + sd * e).clamp(0.0, 255.0) as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn straight_crack_count() {
        let m = rasterize_polyline(64, 64, &[(32.0, -1.0), (32.0, 64.0)], 1.0);
        assert_eq!(m.data.iter().map(|&v| v as usize).sum::<usize>(), 64);
    }

    #[test]
    fn fractions_in_range_and_masks_exact() {
        let samples = gen_synthetic_cracks(40, 64, 64, &CrackParams::default(), &mut seeded(1)).unwrap();
        for s in &samples {
            let f = s.crack_fraction();
            assert!((0.002..=0.08).contains(&f), "{f}");
            assert_eq!(s.crack.as_ref().unwrap().rasterize(64, 64), s.mask);
            assert!(s.image.data.iter().all(|v| (0.0..=255.0).contains(v)));
        }
    }

    #[test]
    fn zero_dip_image_is_crack_independent() {
        let p = |w| CrackParams {
            intensity_dip: 0.0,
            crack_width: (w, w),
            ..Default::default()
        };
        let a = gen_synthetic_cracks(2, 48, 48, &p(1), &mut seeded(5)).unwrap();
        let b = gen_synthetic_cracks(2, 48, 48, &p(3), &mut seeded(5)).unwrap();
        assert_eq!(a[0].image, b[0].image);
        assert!(a[0].mask.data.contains(&1));
    }

    #[test]
    fn rejects_small_images() {
        assert!(gen_synthetic_cracks(1, 16, 64, &CrackParams::default(), &mut seeded(0)).is_err());
    }

    #[test]
    fn noise_statistics() {
        let img = Grid::filled(200, 200, 128.0f32);
        let noisy = add_gaussian_noise(&img, 25.0, &mut seeded(3)).unwrap();
        let d: Vec<f64> = noisy.data.iter().map(|&v| v as f64 - 128.0).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((4.8..=5.2).contains(&sd), "{sd}");
        let black = add_gaussian_noise(&Grid::filled(50, 50, 0.0f32), 50.0, &mut seeded(4)).unwrap();
        assert!(black.data.iter().map(|&v| v as f64).sum::<f64>() > 0.0);
        assert!(add_gaussian_noise(&img, 0.0, &mut seeded(0)).is_err());
    }
}
