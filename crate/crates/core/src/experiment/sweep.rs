use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossStrategy;
use crate::models::{DropoutPlacement, VariationalMode};

use super::config::ExperimentConfig;
use super::evaluate::MetricsRow;
use super::{run_experiment, save_run, RunRecord};

pub const METRICS_HEADER: &str = "run_id,axis_value,seed,f1,epistemic,entropy,aleatoric,ece,status";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainSamples,
    DropoutRatio,
    DropoutLayers,
    LossStrategy,
    UqMethod,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train_samples" => Ok(SweepAxis::TrainSamples),
            "dropout_ratio" => Ok(SweepAxis::DropoutRatio),
            "dropout_layers" => Ok(SweepAxis::DropoutLayers),
            "loss_strategy" => Ok(SweepAxis::LossStrategy),
            "uq_method" => Ok(SweepAxis::UqMethod),
            other => Err(format!("unknown sweep axis {other:?}")),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::TrainSamples => "train_samples",
            SweepAxis::DropoutRatio => "dropout_ratio",
            SweepAxis::DropoutLayers => "dropout_layers",
            SweepAxis::LossStrategy => "loss_strategy",
            SweepAxis::UqMethod => "uq_method",
        })
    }
}

fn parse<T: std::str::FromStr>(axis: SweepAxis, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for axis {axis}")))
}

/// `cfg` with one axis set to `value`. The `loss_strategy` axis also accepts
/// `nll_only`, which drops the boundary and Jaccard terms.
pub fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::TrainSamples => c.dataset.n_train = parse(axis, value)?,
        SweepAxis::DropoutRatio => {
            let rate: f64 = parse(axis, value)?;
            c.segmenter.dropout.rate = rate;
            c.twomoons.dropout.rate = rate;
        }
        SweepAxis::DropoutLayers => {
            c.segmenter.dropout_placement = value.trim().parse::<DropoutPlacement>().map_err(Error::InvalidArgument)?
        }
        SweepAxis::LossStrategy => {
            if value.trim() == "nll_only" {
                c.loss.boundary = false;
                c.loss.iou = false;
            } else {
                c.loss.strategy = value.trim().parse::<LossStrategy>().map_err(Error::InvalidArgument)?;
                c.loss.boundary = true;
                c.loss.iou = true;
            }
        }
        SweepAxis::UqMethod => {
            let mode = value.trim().parse::<VariationalMode>().map_err(Error::InvalidArgument)?;
            c.segmenter.variational_mode = mode;
            c.twomoons.variational_mode = mode;
        }
    }
    c.name = format!("{}-{axis}-{}", cfg.name, value.trim());
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub axis_value: String,
    pub seed: u64,
    pub metrics: Option<MetricsRow>,
    pub ood: Vec<(String, MetricsRow)>,
    pub status: String,
}

/// Seed mean and sample standard deviation of the successful runs at one
/// axis value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub axis_value: String,
    pub n_ok: usize,
    pub mean: Option<MetricsRow>,
    pub std: Option<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<Aggregate>,
    pub records: Vec<RunRecord>,
}

fn aggregate(axis_value: &str, rows: &[&SweepRow]) -> Aggregate {
    let ok: Vec<[f64; 5]> = rows.iter().filter_map(|r| r.metrics.map(|m| m.values())).collect();
    if ok.is_empty() {
        return Aggregate {
            axis_value: axis_value.to_string(),
            n_ok: 0,
            mean: None,
            std: None,
        };
    }
    let n = ok.len() as f64;
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for k in 0..5 {
        mean[k] = ok.iter().map(|v| v[k]).sum::<f64>() / n;
        if ok.len() > 1 {
            std[k] = (ok.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    Aggregate {
        axis_value: axis_value.to_string(),
        n_ok: ok.len(),
        mean: Some(MetricsRow::from_values(mean)),
        std: Some(MetricsRow::from_values(std)),
    }
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn metric_fields(m: Option<MetricsRow>) -> String {
    match m {
        Some(m) => m.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        None => ",,,,".to_string(),
    }
}

/// `metrics.csv`: one row per run, then one seed-mean row per axis value.
pub fn write_metrics_csv(path: &Path, rows: &[SweepRow], aggregates: &[Aggregate]) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{METRICS_HEADER}").expect("string write");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.run_id,
            csv_field(&r.axis_value),
            r.seed,
            metric_fields(r.metrics),
            csv_field(&r.status)
        )
        .expect("string write");
    }
    for a in aggregates {
        writeln!(
            s,
            "mean,{},all,{},aggregate_n{}",
            csv_field(&a.axis_value),
            metric_fields(a.mean),
            a.n_ok
        )
        .expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_aggregate_csv(path: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let mut s = String::from("axis_value,n_ok");
    for f in MetricsRow::FIELDS {
        write!(s, ",{f}_mean,{f}_std").expect("string write");
    }
    s.push('\n');
    for a in aggregates {
        write!(s, "{},{}", csv_field(&a.axis_value), a.n_ok).expect("string write");
        for k in 0..5 {
            match (a.mean, a.std) {
                (Some(m), Some(sd)) => write!(s, ",{},{}", m.values()[k], sd.values()[k]),
                _ => write!(s, ",,"),
            }
            .expect("string write");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_ood_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut s = String::from("run_id,axis_value,seed,test_set,f1,epistemic,entropy,aleatoric,ece\n");
    for r in rows {
        for (name, m) in &r.ood {
            writeln!(s, "{},{},{},{},{}", r.run_id, csv_field(&r.axis_value), r.seed, name, metric_fields(Some(*m)))
                .expect("string write");
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Train `|values| x |seeds|` runs. A failed run becomes a row with its error
/// status; the sweep carries on. With `out`, writes `metrics.csv`,
/// `aggregate.csv`, `metrics_ood.csv` and `runs/<run_id>/`.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<SweepResult> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one value and one seed"));
    }
    let configs = values
        .iter()
        .map(|v| apply_axis(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("runs"))?;
    }
    let jobs: Vec<(usize, usize, u64)> = (0..values.len())
        .flat_map(|vi| seeds.iter().map(move |&s| (vi, s)))
        .enumerate()
        .map(|(i, (vi, s))| (i, vi, s))
        .collect();
    let results: Vec<(SweepRow, Option<RunRecord>)> = jobs
        .par_iter()
        .map(|&(i, vi, seed)| {
            let run_id = format!("r{i:03}");
            let axis_value = values[vi].trim().to_string();
            let outcome = run_experiment(&configs[vi], seed).and_then(|mut run| {
                run.record.run_id = run_id.clone();
                run.record.axis_value = Some(axis_value.clone());
                if let Some(dir) = out {
                    save_run(&dir.join("runs").join(&run_id), &mut run)?;
                }
                Ok(run.record)
            });
            match outcome {
                Ok(rec) => (
                    SweepRow {
                        run_id,
                        axis_value,
                        seed,
                        metrics: Some(rec.metrics),
                        ood: rec.ood.iter().map(|o| (o.name.clone(), o.metrics)).collect(),
                        status: "ok".into(),
                    },
                    Some(rec),
                ),
                Err(e) => {
                    log::warn!("run {run_id} ({axis}={axis_value}, seed {seed}) failed: {e}");
                    (
                        SweepRow {
                            run_id,
                            axis_value,
                            seed,
                            metrics: None,
                            ood: Vec::new(),
                            status: format!("failed: {}: {e}", e.kind()),
                        },
                        None,
                    )
                }
            }
        })
        .collect();
    let (rows, records): (Vec<SweepRow>, Vec<Option<RunRecord>>) = results.into_iter().unzip();
    let aggregates = values
        .iter()
        .map(|v| {
            let v = v.trim();
            aggregate(v, &rows.iter().filter(|r| r.axis_value == v).collect::<Vec<_>>())
        })
        .collect::<Vec<_>>();
    if let Some(dir) = out {
        write_metrics_csv(&dir.join("metrics.csv"), &rows, &aggregates)?;
        write_aggregate_csv(&dir.join("aggregate.csv"), &aggregates)?;
        write_ood_csv(&dir.join("metrics_ood.csv"), &rows)?;
    }
    Ok(SweepResult {
        axis,
        rows,
        aggregates,
        records: records.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_application() {
        let c = ExperimentConfig::default();
        assert_eq!(apply_axis(&c, SweepAxis::TrainSamples, "50").unwrap().dataset.n_train, 50);
        assert_eq!(apply_axis(&c, SweepAxis::DropoutRatio, "0.3").unwrap().segmenter.dropout.rate, 0.3);
        assert!(apply_axis(&c, SweepAxis::DropoutRatio, "1.0").is_err());
        let l = apply_axis(&c, SweepAxis::DropoutLayers, "last_two").unwrap();
        assert_eq!(l.segmenter.dropout_placement, DropoutPlacement::LastTwo);
        let n = apply_axis(&c, SweepAxis::LossStrategy, "nll_only").unwrap();
        assert!(!n.loss.boundary && !n.loss.iou);
        assert_eq!(
            apply_axis(&c, SweepAxis::UqMethod, "bbb").unwrap().segmenter.variational_mode,
            VariationalMode::Bbb
        );
        assert!(apply_axis(&c, SweepAxis::UqMethod, "ensemble").is_err());
    }

    #[test]
    fn aggregate_statistics() {
        let row = |f1: f64| SweepRow {
            run_id: String::new(),
            axis_value: "a".into(),
            seed: 0,
            metrics: Some(MetricsRow {
                f1,
                ..Default::default()
            }),
            ood: Vec::new(),
            status: "ok".into(),
        };
        let failed = SweepRow {
            metrics: None,
            status: "failed".into(),
            ..row(0.0)
        };
        let (a, b) = (row(0.5), row(0.7));
        let agg = aggregate("a", &[&a, &b, &failed]);
        assert_eq!(agg.n_ok, 2);
        assert!((agg.mean.unwrap().f1 - 0.6).abs() < 1e-12);
        assert!((agg.std.unwrap().f1 - 0.02f64.sqrt()).abs() < 1e-12);
    }
}
