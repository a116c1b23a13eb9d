//! `polypseg` command line: `train`, `predict`, `evaluate` and `report`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use crate::config::{ConfigError, Overrides, RunConfig};
use crate::data::{
    list_image_files, load_dataset, read_rgb_file, split_dataset, write_mask_png, DataError, NormalizationStats,
};
use crate::metrics::{evaluate_dataset, predict_mask, Aggregation, MetricsError, PredictionSource};
use crate::model::checkpoint::{load_checkpoint, write_atomic, CheckpointError};
use crate::model::{build_model, ModelError};
use crate::report::write_report;
use crate::train::{fit, FitOptions, TrainError};

#[derive(Debug, Parser)]
#[command(name = "polypseg", version, about = "U-Net/ResNet50 polyp segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration (dotted keys); unset keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, shuffling, augmentation and the split.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (run parent for `train`, mask directory for
    /// `predict`, report directory for `evaluate`).
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset and write a timestamped run directory.
    Train {
        /// Dataset root with `images/` and `masks/` (overrides `data.root`).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Write one 0/255 mask per input image.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory of input images.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Score predicted masks (or a checkpoint) against ground truth.
    Evaluate {
        /// Directory of predicted masks named by sample id.
        #[arg(
            long,
            value_name = "DIR",
            required_unless_present = "checkpoint",
            conflicts_with = "checkpoint"
        )]
        predictions: Option<PathBuf>,
        /// Predict with this checkpoint instead of reading mask files.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Ground truth: a dataset root (`images/`, `masks/`) or a mask directory.
        #[arg(long = "ground-truth", value_name = "DIR")]
        ground_truth: PathBuf,
        #[arg(long, value_name = "MODE")]
        aggregation: Option<Aggregation>,
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Plots and summary for a run directory.
    Report {
        #[arg(value_name = "RUN_DIR")]
        run_dir: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        const USAGE: i32 = 1;
        const DATA: i32 = 2;
        const NUMERIC: i32 = 3;
        match self {
            CliError::Config(_) | CliError::Usage(_) => USAGE,
            CliError::Data(_) => DATA,
            CliError::Model(e) => model_code(e),
            CliError::Checkpoint(CheckpointError::Model(e)) => model_code(e),
            CliError::Checkpoint(CheckpointError::ArchMismatch { .. } | CheckpointError::Version { .. }) => USAGE,
            CliError::Checkpoint(_) => DATA,
            CliError::Metrics(MetricsError::Model(e)) => model_code(e),
            CliError::Metrics(_) => DATA,
            CliError::Train(e) => match e {
                TrainError::Config(_) => USAGE,
                TrainError::NonFinite { .. } => NUMERIC,
                TrainError::Model(e) => model_code(e),
                TrainError::Checkpoint(CheckpointError::Model(e)) => model_code(e),
                TrainError::Metrics(MetricsError::Model(e)) => model_code(e),
                TrainError::Io { .. } | TrainError::Data(_) | TrainError::Checkpoint(_) | TrainError::Metrics(_) => {
                    DATA
                }
            },
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::NonFinite { .. } => 3,
        ModelError::PretrainedUnavailable(_) | ModelError::PretrainedMismatch(_) => 2,
        _ => 1,
    }
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { data } => cmd_train(&cli.common, data.as_deref()).map(|dir| {
            println!("{}", dir.display());
        }),
        Command::Predict {
            checkpoint,
            input,
            threshold,
        } => cmd_predict(&cli.common, checkpoint, input, *threshold).map(|n| {
            info!("wrote {n} masks");
        }),
        Command::Evaluate {
            predictions,
            checkpoint,
            ground_truth,
            aggregation,
            threshold,
        } => cmd_evaluate(
            &cli.common,
            predictions.as_deref(),
            checkpoint.as_deref(),
            ground_truth,
            *aggregation,
            *threshold,
        ),
        Command::Report { run_dir } => {
            let files = write_report(run_dir)?;
            print!("{}", std::fs::read_to_string(&files.summary).unwrap_or_default());
            Ok(())
        }
    }
}

fn resolve(common: &CommonArgs, output_is_run_parent: bool) -> Result<RunConfig, CliError> {
    let overrides = Overrides {
        seed: common.seed,
        output_dir: if output_is_run_parent {
            common.output.clone()
        } else {
            None
        },
        set: common.set.clone(),
    };
    Ok(RunConfig::resolve(common.config.as_deref(), &overrides)?)
}

fn create_run_dir(parent: &Path) -> Result<PathBuf, CliError> {
    let unwritable = |path: &Path, e: std::io::Error| {
        CliError::Data(DataError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    };
    std::fs::create_dir_all(parent).map_err(|e| unwritable(parent, e))?;
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = parent.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(unwritable(&dir, e)),
        }
    }
    unreachable!("unbounded search for a free run directory name")
}

/// Run `fit` and return the created run directory.
pub fn cmd_train(common: &CommonArgs, data: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut config = resolve(common, true)?;
    if let Some(root) = data {
        config.data.root = root.to_path_buf();
    }
    let pairs = load_dataset(&config.data.root)?;
    let (train, validation, manifest) = split_dataset(pairs, config.data.train_fraction, config.data.split_seed)?;
    info!("{} training and {} validation samples", train.len(), validation.len());

    let run_dir = create_run_dir(&config.output_dir)?;
    let snapshot = config.snapshot();
    let snapshot_path = run_dir.join("config.toml");
    write_atomic(&snapshot_path, snapshot.as_bytes()).map_err(|e| DataError::Unwritable {
        path: snapshot_path.clone(),
        reason: e.to_string(),
    })?;
    manifest.save(&run_dir.join("split.json"))?;

    let mut model = build_model(&config.model, config.train.seed)?;
    let mut options = FitOptions::new(&run_dir, config.augment.clone());
    options.stats = config.data.normalization;
    options.threshold = config.eval.threshold;
    options.metrics = config.eval.metric_options();
    options.checkpoint_extra = BTreeMap::from([
        ("split_manifest".to_string(), "split.json".to_string()),
        ("run_config".to_string(), snapshot),
    ]);
    let summary = fit(&mut model, &train, &validation, &config.train, &options)?;
    info!(
        "finished {} steps; final train loss {:.5}; best validation dice {}",
        summary.state.step,
        summary.final_train_loss,
        summary
            .state
            .best_validation_dice
            .map_or("n/a".to_string(), |d| format!("{d:.4}"))
    );
    Ok(run_dir)
}

fn checkpoint_stats(extra: &BTreeMap<String, String>, fallback: NormalizationStats) -> NormalizationStats {
    extra
        .get("normalization")
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or(fallback)
}

fn explicit_arch(common: &CommonArgs) -> bool {
    common.config.is_some() || common.set.iter().any(|s| s.trim_start().starts_with("model."))
}

/// Predict masks for every image in `input`; returns the number written.
pub fn cmd_predict(
    common: &CommonArgs,
    checkpoint: &Path,
    input: &Path,
    threshold: Option<f32>,
) -> Result<usize, CliError> {
    let config = resolve(common, false)?;
    let expected = explicit_arch(common).then_some(&config.model);
    let (model, info) = load_checkpoint(checkpoint, expected)?;
    let stats = checkpoint_stats(&info.extra, config.data.normalization);
    let threshold = threshold.unwrap_or(config.eval.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Usage(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let files = list_image_files(input)?;
    if files.is_empty() {
        return Err(DataError::Empty(input.to_path_buf()).into());
    }
    let out = common
        .output
        .clone()
        .unwrap_or_else(|| config.output_dir.join("predictions"));
    std::fs::create_dir_all(&out).map_err(|e| DataError::Unwritable {
        path: out.clone(),
        reason: e.to_string(),
    })?;
    for (stem, path) in &files {
        let image = read_rgb_file(path)?;
        let mask = predict_mask(&model, &image, &stats, threshold)?;
        write_mask_png(&out.join(format!("{stem}.png")), &mask)?;
    }
    Ok(files.len())
}

pub fn cmd_evaluate(
    common: &CommonArgs,
    predictions: Option<&Path>,
    checkpoint: Option<&Path>,
    ground_truth: &Path,
    aggregation: Option<Aggregation>,
    threshold: Option<f32>,
) -> Result<(), CliError> {
    let config = resolve(common, false)?;
    let mut options = config.eval.metric_options();
    if let Some(a) = aggregation {
        options.aggregation = a;
    }
    let report = match (predictions, checkpoint) {
        (Some(dir), _) => {
            let gt = crate::data::load_mask_dir(ground_truth)?;
            let preds = crate::data::load_mask_dir(dir)?;
            crate::metrics::evaluate_masks(&preds, &gt, &options)?
        }
        (None, Some(ckpt)) => {
            let expected = explicit_arch(common).then_some(&config.model);
            let (model, info) = load_checkpoint(ckpt, expected)?;
            let dataset = load_dataset(ground_truth)?;
            let source = PredictionSource::Model {
                model: &model,
                stats: checkpoint_stats(&info.extra, config.data.normalization),
                threshold: threshold.unwrap_or(config.eval.threshold),
            };
            evaluate_dataset(source, &dataset, &options)?
        }
        (None, None) => {
            return Err(CliError::Usage(
                "either --predictions or --checkpoint is required".into(),
            ))
        }
    };
    let out = common
        .output
        .clone()
        .unwrap_or_else(|| config.output_dir.join("evaluation"));
    report.save(&out)?;
    println!("{}", crate::metrics::Metrics::COLUMNS.join(" "));
    println!("{}", report.aggregate_row());
    Ok(())
}
