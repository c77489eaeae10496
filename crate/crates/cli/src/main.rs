//! Command-line front end: phantom generation, training, cross-validation,
//! evaluation, gradient checks and report rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lunetkit::grid::io::{read_json, write_json};
use lunetkit::harness::{
    cross_validate, evaluate, gradient_checks, read_predictions, report_render, resolve_bounds, samples_from_records,
    split_folds, train_with, write_predictions, EpochRecord, EvalOptions, LuNetPredictor, RunConfig, RunReport,
};
use lunetkit::metrics::OutlierBounds;
use lunetkit::nets::LuNet;
use lunetkit::phantom::{generate_dataset, read_dataset, stratified_folds, PatientRecord, PhantomParams};
use lunetkit::Error;

const THREADS_VAR: &str = "LUNETKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "lunetkit", version, about = "LU-Net localization and segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with stratified folds.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of cross-validation folds recorded in the manifest.
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Phantom parameters as JSON; defaults to the 128x128 desk setting.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train one model, holding out fold K.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Run configuration as JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file; the configuration and history are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every fold of the dataset.
    CrossValidate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Outlier bounds as JSON; calibrated from the reference masks when absent.
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Restrict evaluation to one fold of the manifest.
        #[arg(long)]
        fold: Option<usize>,
        /// Replace predicted boxes with the reference boxes.
        #[arg(long)]
        teacher_forced: bool,
    },
    /// Compare reverse-mode gradients with finite differences.
    GradCheck {
        /// Run only this check; see the printed list for names.
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-render a report directory written by `evaluate` or `cross-validate`.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Where an evaluation's predictions came from, for later re-rendering.
#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    data: PathBuf,
    margin: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::DivergedLoss { .. })));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_VAR} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate {
            n,
            seed,
            out,
            folds,
            params,
        } => generate(n, seed, &out, folds, params.as_deref()),
        Command::Train {
            data,
            fold,
            config,
            out,
        } => train_fold(&data, fold, config.as_deref(), &out),
        Command::CrossValidate { data, config, out } => cross_validate_cmd(&data, config.as_deref(), &out),
        Command::Evaluate {
            model,
            data,
            bounds,
            out,
            fold,
            teacher_forced,
        } => evaluate_cmd(&model, &data, bounds.as_deref(), &out, fold, teacher_forced),
        Command::GradCheck { op, configs, seed } => grad_check(op.as_deref(), configs, seed),
        Command::Report { input, out } => report_cmd(&input, &out),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let config = match path {
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

/// Configuration stored next to a model file.
fn sidecar(model: &Path, suffix: &str) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn progress(fold: usize) -> impl Fn(usize, &EpochRecord) + Sync {
    move |f, e| {
        let train = e.train_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "fold {} epoch {:>3}  train {train}  val {:.4} (loc {:.4}, seg {:.4})",
            if f == usize::MAX { fold } else { f },
            e.epoch,
            e.validation.total,
            e.validation.localization,
            e.validation.segmentation
        );
    }
}

fn generate(n: usize, seed: u64, out: &Path, k: usize, params: Option<&Path>) -> anyhow::Result<()> {
    let params: PhantomParams = match params {
        Some(p) => read_json(p).with_context(|| format!("reading phantom parameters {}", p.display()))?,
        None => PhantomParams::desk(),
    };
    params.validate()?;
    let records = generate_dataset(&params, n, seed)?;
    let folds = stratified_folds(&records, k, seed)?;
    lunetkit::phantom::write_dataset(out, &records, &folds, &params, seed)?;
    println!("wrote {n} patients in {k} folds to {}", out.display());
    Ok(())
}

fn train_fold(data: &Path, fold: usize, config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let dataset = read_dataset(data)?;
    if fold >= dataset.folds.k {
        bail!("fold {fold} out of range for {} folds", dataset.folds.k);
    }
    let split = split_folds(&dataset.records, &dataset.folds, config.train.validation_fraction)?
        .into_iter()
        .nth(fold)
        .expect("one split per fold");
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.records[i].clone()).collect::<Vec<_>>();
    let margin = config.model.margin;
    let train_set = samples_from_records(&pick(&split.train), margin);
    let val_set = samples_from_records(&pick(&split.validation), margin);
    let mut net = LuNet::new(config.model.clone(), config.train.seed.wrapping_add(fold as u64))?;
    let dump = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dump).with_context(|| format!("creating {}", dump.display()))?;
    let report = progress(fold);
    let history = train_with(&mut net, &train_set, &val_set, &config.train, Some(dump), &mut |e| {
        report(usize::MAX, e)
    })?;
    net.save(out)?;
    write_json(&config, &sidecar(out, ".config.json"))?;
    write_json(&history, &sidecar(out, ".history.json"))?;
    println!(
        "fold {fold}: best epoch {} (validation {:.4}), stopped at {} ({:?}); model written to {}",
        history.best_epoch,
        history.best_validation().total,
        history.stopped_epoch,
        history.stop_reason,
        out.display()
    );
    Ok(())
}

fn render_with_predictions(
    report: &RunReport,
    out: &Path,
    records: &[PatientRecord],
    predictions: &[lunetkit::harness::PatientPrediction],
    margin: f64,
) -> anyhow::Result<usize> {
    let pairs: Vec<_> = records
        .iter()
        .zip(predictions)
        .filter(|(_, p)| !p.frames.is_empty())
        .collect();
    Ok(report_render(report, out, &pairs, margin)?)
}

fn cross_validate_cmd(data: &Path, config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let config = load_config(config)?;
    let dataset = read_dataset(data)?;
    let cv = cross_validate(&dataset.records, &dataset.folds, &config, &progress(0))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let bytes = cv.report.to_json_bytes()?;
    std::fs::write(out.join("cross_validation.json"), bytes).context("writing cross_validation.json")?;
    let models = out.join("models");
    std::fs::create_dir_all(&models)?;
    for (f, net) in cv.models.iter().enumerate() {
        let path = models.join(format!("fold{f}.lunk"));
        net.save(&path)?;
        write_json(&config, &sidecar(&path, ".config.json"))?;
        if let Some(h) = &cv.report.folds[f].report.history {
            write_json(h, &sidecar(&path, ".history.json"))?;
        }
    }
    write_json(&cv.report.bounds, &out.join("bounds.json"))?;
    write_predictions(&out.join("predictions"), &dataset.records, &cv.predictions)?;
    write_meta(out, data, config.model.margin)?;
    let n = render_with_predictions(
        &cv.report.pooled,
        out,
        &dataset.records,
        &cv.predictions,
        config.model.margin,
    )?;
    print_summary(&cv.report.pooled);
    println!("{} folds, {n} overlays; results in {}", cv.models.len(), out.display());
    Ok(())
}

fn write_meta(out: &Path, data: &Path, margin: f64) -> anyhow::Result<()> {
    let data = std::fs::canonicalize(data).unwrap_or_else(|_| data.to_path_buf());
    write_json(&RunMeta { data, margin }, &out.join("meta.json"))?;
    Ok(())
}

fn evaluate_cmd(
    model: &Path,
    data: &Path,
    bounds: Option<&Path>,
    out: &Path,
    fold: Option<usize>,
    teacher_forced: bool,
) -> anyhow::Result<()> {
    let config_path = sidecar(model, ".config.json");
    let config: RunConfig =
        read_json(&config_path).with_context(|| format!("reading model configuration {}", config_path.display()))?;
    config.validate()?;
    let net = LuNet::load(config.model.clone(), model)?;
    let dataset = read_dataset(data)?;
    let records: Vec<PatientRecord> = match fold {
        Some(f) if f >= dataset.folds.k => bail!("fold {f} out of range for {} folds", dataset.folds.k),
        Some(f) => dataset
            .folds
            .members(f)
            .into_iter()
            .map(|i| dataset.records[i].clone())
            .collect(),
        None => dataset.records.clone(),
    };
    let bounds: OutlierBounds = match bounds {
        Some(p) => read_json(p).with_context(|| format!("reading bounds {}", p.display()))?,
        None => resolve_bounds(&dataset.records, &config)?,
    };
    bounds.validate()?;
    let opts = EvalOptions {
        bounds,
        margin: config.model.margin,
        n_discs: config.n_discs,
    };
    let predictor = if teacher_forced {
        LuNetPredictor::teacher_forced(&net)
    } else {
        LuNetPredictor::new(&net)
    };
    let evaluation = evaluate(&predictor, &records, &opts)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_predictions(&out.join("predictions"), &records, &evaluation.predictions)?;
    write_meta(out, data, config.model.margin)?;
    let n = render_with_predictions(
        &evaluation.report,
        out,
        &records,
        &evaluation.predictions,
        config.model.margin,
    )?;
    print_summary(&evaluation.report);
    println!("{} patients, {n} overlays; results in {}", records.len(), out.display());
    Ok(())
}

fn grad_check(op: Option<&str>, configs: usize, seed: u64) -> anyhow::Result<()> {
    let checks = gradient_checks();
    let selected: Vec<_> = match op {
        Some(name) => checks.into_iter().filter(|c| c.name == name).collect(),
        None => checks,
    };
    if selected.is_empty() {
        let names: Vec<&str> = gradient_checks().iter().map(|c| c.name).collect();
        bail!(
            "unknown op {:?}; available: {}",
            op.unwrap_or_default(),
            names.join(", ")
        );
    }
    let mut failed = Vec::new();
    for check in &selected {
        let r = check.run(configs, seed)?;
        println!(
            "{:<24} {:>3} configs  worst {:.2e}  tol {:.0e}  {}",
            r.name,
            r.configs,
            r.worst,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn report_cmd(input: &Path, out: &Path) -> anyhow::Result<()> {
    let path = input.join("report.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report = RunReport::from_json(&text)?;
    let meta_path = input.join("meta.json");
    let n = if meta_path.exists() {
        let meta: RunMeta = read_json(&meta_path)?;
        let dataset = read_dataset(&meta.data).with_context(|| format!("reading dataset {}", meta.data.display()))?;
        let in_report: std::collections::BTreeSet<&str> = report.cases.iter().map(|c| c.patient_id.as_str()).collect();
        let records: Vec<PatientRecord> = dataset
            .records
            .into_iter()
            .filter(|r| in_report.contains(r.patient_id.as_str()))
            .collect();
        let predictions = read_predictions(&input.join("predictions"), &records)?;
        render_with_predictions(&report, out, &records, &predictions, meta.margin)?
    } else {
        report_render(&report, out, &[], 0.0)?
    };
    print_summary(&report);
    println!("{n} overlays; report written to {}", out.display());
    Ok(())
}

fn print_summary(report: &RunReport) {
    let loc = &report.localization;
    if let Some(iou) = loc.iou {
        println!(
            "localization: IoU {:.3} +- {:.3}, BB out {} ({:.1}%)",
            iou.mean, iou.sd, loc.bb_out_count, loc.bb_out_percent
        );
    }
    for row in &report.segmentation {
        if let (Some(d), Some(m), Some(h)) = (row.dice, row.d_m, row.d_h) {
            println!(
                "{:<4} Dice {:.3} +- {:.3}  d_m {:.2} mm  d_H {:.2} mm",
                row.structure.name(),
                d.mean,
                d.sd,
                m.mean,
                h.mean
            );
        }
    }
    let o = &report.outliers;
    println!(
        "outliers: geometric {} ({:.1}%), anatomical {} ({:.1}%), failed {}",
        o.geometric_count, o.geometric_percent, o.anatomical_count, o.anatomical_percent, o.failed_count
    );
    for row in &report.clinical {
        if let Some(s) = row.stats {
            println!(
                "{:<4} corr {:.3}  bias {:+.2}  loa {:.2}  mae {:.2}",
                row.index, s.corr, s.bias, s.loa, s.mae
            );
        }
    }
}
