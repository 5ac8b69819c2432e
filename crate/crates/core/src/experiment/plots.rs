use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};

use crate::calibration::{argmax_classes, CalibrationReport};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::map_to_gray;
use crate::rng::Rng;

use super::datasets::LabeledSet;
use super::evaluate::{predict_set, MetricsRow};
use super::RunRecord;
use crate::models::StochasticModel;

/// Column order of the uncertainty panel grid.
pub const PANEL_ORDER: [&str; 5] = ["input", "prediction", "ground_truth", "epistemic", "aleatoric"];

const SIZE: u32 = 320;
const MARGIN: u32 = 24;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([160, 160, 160]);
const BLUE: Rgb<u8> = Rgb([60, 110, 200]);
const RED: Rgb<u8> = Rgb([210, 60, 50]);

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        let mut c = Canvas {
            img: RgbImage::from_pixel(SIZE, SIZE, WHITE),
        };
        let (lo, hi) = (MARGIN as f64, (SIZE - MARGIN) as f64);
        c.line((lo, hi), (hi, hi), BLACK);
        c.line((lo, hi), (lo, lo), BLACK);
        c
    }

    /// Unit square `[0, 1]^2` to pixel coordinates, y up.
    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        let span = (SIZE - 2 * MARGIN) as f64;
        (MARGIN as f64 + x * span, (SIZE - MARGIN) as f64 - y * span)
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < SIZE && (y as u32) < SIZE {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.put(
                (a.0 + t * (b.0 - a.0)).round() as i64,
                (a.1 + t * (b.1 - a.1)).round() as i64,
                c,
            );
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
        let (xa, xb) = (x0.min(x1).round() as i64, x0.max(x1).round() as i64);
        let (ya, yb) = (y0.min(y1).round() as i64, y0.max(y1).round() as i64);
        for y in ya..=yb {
            for x in xa..=xb {
                self.put(x, y, c);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path)?;
        Ok(())
    }
}

/// Bars of per-bin accuracy, red ticks at mean confidence and the identity
/// diagonal; the table goes to `<stem>.csv` next to the PNG.
pub fn reliability_diagram(report: &CalibrationReport, png: &Path) -> Result<PathBuf> {
    let mut c = Canvas::new();
    let (a, b) = (c.at(0.0, 0.0), c.at(1.0, 1.0));
    c.line(a, b, GREY);
    for bin in report.bins.iter().filter(|b| b.count > 0) {
        let (x0, y0) = c.at(bin.lo, 0.0);
        let (x1, y1) = c.at(bin.hi, bin.acc);
        c.rect(x0 + 1.0, y0 - 1.0, x1 - 1.0, y1, BLUE);
        let (_, yc) = c.at(0.0, bin.conf);
        c.rect(x0 + 1.0, yc - 1.0, x1 - 1.0, yc + 1.0, RED);
    }
    c.save(png)?;
    let csv = png.with_extension("csv");
    report.write_csv(&csv)?;
    Ok(csv)
}

/// Seed mean with error bars of one standard deviation against evenly spaced
/// axis positions. Writes `axis_value,mean,std` next to the PNG.
pub fn metric_plot(points: &[(String, f64, f64)], png: &Path) -> Result<PathBuf> {
    if points.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let lo = points.iter().map(|p| p.1 - p.2).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.1 + p.2).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = |v: f64| 0.05 + 0.9 * (v - lo) / span;
    let x = |i: usize| {
        if points.len() == 1 {
            0.5
        } else {
            0.05 + 0.9 * i as f64 / (points.len() - 1) as f64
        }
    };
    let mut c = Canvas::new();
    for (i, (_, m, s)) in points.iter().enumerate() {
        let top = c.at(x(i), y(m + s));
        let bottom = c.at(x(i), y(m - s));
        c.line(top, bottom, GREY);
        c.line((top.0 - 4.0, top.1), (top.0 + 4.0, top.1), GREY);
        c.line((bottom.0 - 4.0, bottom.1), (bottom.0 + 4.0, bottom.1), GREY);
        if i > 0 {
            let prev = c.at(x(i - 1), y(points[i - 1].1));
            c.line(prev, c.at(x(i), y(*m)), BLUE);
        }
        let p = c.at(x(i), y(*m));
        c.rect(p.0 - 2.0, p.1 - 2.0, p.0 + 2.0, p.1 + 2.0, RED);
    }
    c.save(png)?;
    let mut s = String::from("axis_value,mean,std\n");
    for (v, m, sd) in points {
        writeln!(s, "{v},{m},{sd}").expect("string write");
    }
    let csv = png.with_extension("csv");
    std::fs::write(&csv, s)?;
    Ok(csv)
}

/// Reliability diagram per record; with sweep records, one metric-vs-axis
/// plot per metric. Returns the written files.
pub fn emit_plots(records: &[RunRecord], out: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to plot"));
    }
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for r in records {
        let png = out.join(format!("reliability_{}.png", r.run_id));
        files.push(reliability_diagram(&r.reliability, &png)?);
        files.push(png);
    }
    let mut values: Vec<String> = Vec::new();
    for r in records {
        if let Some(v) = &r.axis_value {
            if !values.contains(v) {
                values.push(v.clone());
            }
        }
    }
    if values.is_empty() {
        return Ok(files);
    }
    for (k, name) in MetricsRow::FIELDS.iter().enumerate() {
        let points: Vec<(String, f64, f64)> = values
            .iter()
            .map(|v| {
                let xs: Vec<f64> = records
                    .iter()
                    .filter(|r| r.axis_value.as_ref() == Some(v))
                    .map(|r| r.metrics.values()[k])
                    .collect();
                let n = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / n;
                let sd = if xs.len() > 1 {
                    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                (v.clone(), m, sd)
            })
            .collect();
        let png = out.join(format!("metric_{name}.png"));
        files.push(metric_plot(&points, &png)?);
        files.push(png);
    }
    Ok(files)
}

/// Grid with one row per image and the columns of [`PANEL_ORDER`]; maps of
/// the foreground class. Per-panel ranges go to `<stem>.csv`.
pub fn uncertainty_panels(
    model: &impl StochasticModel,
    set: &LabeledSet,
    indices: &[usize],
    mc_samples: usize,
    rng: &mut Rng,
    png: &Path,
) -> Result<PathBuf> {
    if set.images.is_empty() || indices.is_empty() {
        return Err(Error::invalid("uncertainty panels need image samples"));
    }
    let sub = LabeledSet::from_images(indices.iter().map(|&i| set.images[i].clone()).collect())?;
    let pred = predict_set(model, &sub, mc_samples, indices.len(), rng)?;
    let [n, c, h, w] = pred.shape;
    let p = h * w;
    let fg = c.saturating_sub(1);
    let labels = argmax_classes(&pred.mean_probs, pred.shape);
    let mut grid = GrayImage::new((5 * w) as u32, (n * h) as u32);
    let mut csv = String::from("row,image_index,panel,min,max,mean\n");
    for i in 0..n {
        let plane = |v: &[f64]| Grid {
            height: h,
            width: w,
            data: v[(i * c + fg) * p..(i * c + fg + 1) * p].to_vec(),
        };
        let panels = [
            (sub.images[i].image.map(|&v| v as f64), Some((0.0, 255.0))),
            (
                Grid {
                    height: h,
                    width: w,
                    data: labels[i * p..(i + 1) * p].iter().map(|&l| l as f64).collect(),
                },
                Some((0.0, (c - 1).max(1) as f64)),
            ),
            (sub.images[i].mask.map(|&m| m as f64), Some((0.0, 1.0))),
            (plane(&pred.epistemic), None),
            (plane(&pred.aleatoric), None),
        ];
        for (k, (map, range)) in panels.iter().enumerate() {
            let gray = map_to_gray(map, *range);
            image::imageops::replace(&mut grid, &gray, (k * w) as i64, (i * h) as i64);
            let (lo, hi, sum) = map
                .data
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(a, b, s), &v| (a.min(v), b.max(v), s + v));
            writeln!(csv, "{i},{},{},{lo},{hi},{}", indices[i], PANEL_ORDER[k], sum / p as f64).expect("string write");
        }
    }
    grid.save(png)?;
    let path = png.with_extension("csv");
    std::fs::write(&path, csv)?;
    Ok(path)
}
