use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crackuq::data::export_folder_dataset;
use crackuq::experiment::{
    calibrate, emit_plots, evaluate_all, load_data, run_experiment, save_run, sweep, uncertainty_panels,
    write_metrics_csv, DatasetKind, ExperimentConfig, ExperimentData, LabeledSet, RunRecord, SweepAxis, SweepRow,
    TrainedModel, CHECKPOINT_DIR, RUN_FILE,
};
use crackuq::rng::{substream, Stream};
use crackuq::Error;

#[derive(Parser)]
#[command(name = "crackuq", version, about = "Uncertainty-aware crack segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Image/mask folder dataset to use instead of the configured one.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and export it as folders.
    GenData(Common),
    /// Train one model and evaluate it on the test and OOD sets.
    Train(Common),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train over one axis of values and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Fit a temperature on the validation set and report test reliability.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Plot every run.json found under a directory.
    Plot {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Lib(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn resolve(common: &Common) -> CliResult<(ExperimentConfig, u64)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset.kind = DatasetKind::Folder;
        cfg.dataset.path = Some(d.clone());
    }
    cfg.validate()?;
    let seed = common.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
    Ok((cfg, seed))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value).map_err(Error::from)?)?;
    Ok(())
}

fn export_moons(path: &Path, set: &LabeledSet) -> CliResult<()> {
    let mut s = String::from("x0,x1,label\n");
    for (i, &label) in set.labels.iter().enumerate() {
        let x = set.input.sample(i);
        s.push_str(&format!("{},{},{label}\n", x[0], x[1]));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn export_set(dir: &Path, set: &LabeledSet) -> CliResult<()> {
    if set.images.is_empty() {
        std::fs::create_dir_all(dir.parent().unwrap_or(dir))?;
        export_moons(&dir.with_extension("csv"), set)
    } else {
        export_folder_dataset(dir, &set.images)?;
        Ok(())
    }
}

fn gen_data(common: &Common) -> CliResult<()> {
    let (cfg, seed) = resolve(common)?;
    let data = load_data(&cfg, seed)?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    export_set(&out.join("train"), &data.train)?;
    export_set(&out.join("val"), &data.val)?;
    export_set(&out.join("test"), &data.test)?;
    for (name, set) in &data.ood {
        export_set(&out.join(format!("ood_{name}")), set)?;
    }
    std::fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    log::info!("wrote dataset for seed {seed} to {}", out.display());
    Ok(())
}

fn single_row(record: &RunRecord) -> SweepRow {
    SweepRow {
        run_id: record.run_id.clone(),
        axis_value: record.axis_value.clone().unwrap_or_default(),
        seed: record.seed,
        metrics: Some(record.metrics),
        ood: record.ood.iter().map(|o| (o.name.clone(), o.metrics)).collect(),
        status: "ok".into(),
    }
}

fn first_images(set: &LabeledSet, n: usize) -> Vec<usize> {
    (0..set.images.len().min(n)).collect()
}

fn train(common: &Common) -> CliResult<()> {
    let (cfg, seed) = resolve(common)?;
    let mut run = run_experiment(&cfg, seed)?;
    let out = &common.out;
    save_run(out, &mut run)?;
    write_metrics_csv(&out.join("metrics.csv"), &[single_row(&run.record)], &[])?;
    emit_plots(std::slice::from_ref(&run.record), out)?;
    write_panels(&run.model, &run.data, &cfg, seed, out)?;
    println!("{}", serde_json::to_string(&run.record.metrics).map_err(Error::from)?);
    Ok(())
}

fn write_panels(
    model: &TrainedModel,
    data: &ExperimentData,
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    if data.test.images.is_empty() {
        return Ok(());
    }
    let idx = first_images(&data.test, 4);
    let mut rng = substream(seed, Stream::Evaluation);
    uncertainty_panels(model, &data.test, &idx, cfg.mc_samples, &mut rng, &out.join("panels.png"))?;
    Ok(())
}

fn load_model(common: &Common, checkpoint: &Path) -> CliResult<(TrainedModel, ExperimentConfig, u64)> {
    let given = match &common.config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => None,
    };
    let (model, mut cfg) = TrainedModel::load(checkpoint, given.as_ref())?;
    if let Some(d) = &common.dataset {
        cfg.dataset.kind = DatasetKind::Folder;
        cfg.dataset.path = Some(d.clone());
    }
    let seed = common.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
    Ok((model, cfg, seed))
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join(CHECKPOINT_DIR).is_dir() {
        path.join(CHECKPOINT_DIR)
    } else {
        path.to_path_buf()
    }
}

fn eval(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let (model, cfg, seed) = load_model(common, &checkpoint_dir(checkpoint))?;
    let data = load_data(&cfg, seed)?;
    let (main, ood) = evaluate_all(&model, &data, &cfg, seed)?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let row = SweepRow {
        run_id: "eval".into(),
        axis_value: String::new(),
        seed,
        metrics: Some(main.metrics),
        ood: ood.iter().map(|o| (o.name.clone(), o.metrics)).collect(),
        status: "ok".into(),
    };
    write_metrics_csv(&out.join("metrics.csv"), &[row], &[])?;
    write_json(&out.join("eval.json"), &serde_json::json!({ "metrics": main.metrics, "ood": ood }))?;
    main.reliability.write_json(&out.join("reliability.json"))?;
    main.reliability.write_csv(&out.join("reliability.csv"))?;
    write_panels(&model, &data, &cfg, seed, out)?;
    println!("{}", serde_json::to_string(&main.metrics).map_err(Error::from)?);
    Ok(())
}

fn run_sweep(common: &Common, axis: SweepAxis, values: &[String], seeds: &[u64]) -> CliResult<()> {
    let (cfg, _) = resolve(common)?;
    let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds.to_vec() };
    let result = sweep(&cfg, axis, values, &seeds, Some(&common.out))?;
    if !result.records.is_empty() {
        emit_plots(&result.records, &common.out.join("plots"))?;
    }
    let failed = result.rows.iter().filter(|r| r.metrics.is_none()).count();
    println!(
        "{}",
        serde_json::json!({ "runs": result.rows.len(), "failed": failed, "metrics": common.out.join("metrics.csv") })
    );
    Ok(())
}

fn run_calibrate(common: &Common, checkpoint: &Path) -> CliResult<()> {
    let (model, cfg, seed) = load_model(common, &checkpoint_dir(checkpoint))?;
    let data = load_data(&cfg, seed)?;
    let mut rng = substream(seed, Stream::Evaluation);
    let outcome = calibrate(&model, &data.val, &data.test, cfg.mc_samples, cfg.batch_size, &mut rng)?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    outcome.before.write_json(&out.join("calibration_before.json"))?;
    outcome.before.write_csv(&out.join("calibration_before.csv"))?;
    outcome.after.write_json(&out.join("calibration_after.json"))?;
    outcome.after.write_csv(&out.join("calibration_after.csv"))?;
    write_json(&out.join("calibration.json"), &outcome)?;
    println!(
        "{}",
        serde_json::json!({
            "temperature": outcome.fit.temperature,
            "ece_before": outcome.before.ece,
            "ece_after": outcome.after.ece,
            "f1_before": outcome.f1_before,
            "f1_after": outcome.f1_after,
        })
    );
    Ok(())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_runs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RUN_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn plot(runs: &Path, out: &Path) -> CliResult<()> {
    let mut paths = Vec::new();
    find_runs(runs, &mut paths)?;
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no {RUN_FILE} under {}", runs.display())));
    }
    let records = paths.iter().map(|p| RunRecord::read(p)).collect::<Result<Vec<_>, _>>()?;
    let files = emit_plots(&records, out)?;
    println!("{}", serde_json::json!({ "files": files.len() }));
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Train(c) => train(&c),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::Sweep {
            common,
            axis,
            values,
            seeds,
        } => run_sweep(&common, axis, &values, &seeds),
        Command::Calibrate { common, checkpoint } => run_calibrate(&common, &checkpoint),
        Command::Plot { runs, out } => plot(&runs, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, message) = match e {
                CliError::Lib(e) => (e.kind(), e.to_string()),
                CliError::Usage(m) => ("usage", m),
            };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}
