//! One-cycle Adam training with binary cross-entropy, validation,
//! checkpointing and a JSON-lines history log.

mod adam;
mod history;
mod loss;
mod schedule;

pub use adam::Adam;
pub use history::{read_history, HistoryRecord, HistoryWriter};
pub use loss::{bce_with_logits, bce_with_logits_grad};
pub use schedule::{one_cycle_schedule, warmup_boundary, SchedulePoint};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    augment, derive_seed, make_batches, resize_pair, AugmentationConfig, Batch, DataError, NormalizationStats,
    SamplePair,
};
use crate::metrics::{confusion, ConfusionCounts, MetricOptions, Metrics, MetricsError, MetricsReport};
use crate::model::checkpoint::{save_checkpoint, CheckpointError};
use crate::model::{binarize, ModelError, SegmentationModel};
use crate::nn::{Module, TensorRef};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("numerical failure{}{}: {detail}{}",
        step.map(|s| format!(" at step {s}")).unwrap_or_default(),
        lr.map(|l| format!(" (lr {l:e})")).unwrap_or_default(),
        if batch_ids.is_empty() { String::new() } else { format!(" [batch: {}]", batch_ids.join(", ")) })]
    NonFinite {
        step: Option<usize>,
        lr: Option<f64>,
        batch_ids: Vec<String>,
        detail: String,
    },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// How the configured learning rate is placed in the one-cycle policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrAnchor {
    /// `lr` is the peak of the cycle; training starts at `lr / div_start`.
    #[default]
    Peak,
    /// `lr` is the rate at step 0; the peak is `lr * div_start`.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_anchor: LrAnchor,
    pub epochs: usize,
    pub batch_size: usize,
    pub pct_warmup: f64,
    pub div_start: f64,
    pub div_final: f64,
    /// `(high, low)` Adam `beta1` range.
    pub momentum_range: (f64, f64),
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            lr_anchor: LrAnchor::Peak,
            epochs: 50,
            batch_size: 8,
            pct_warmup: 0.25,
            div_start: 25.0,
            div_final: 1e4,
            momentum_range: (0.95, 0.85),
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Peak learning rate of the cycle.
    pub fn peak_lr(&self) -> f64 {
        match self.lr_anchor {
            LrAnchor::Peak => self.lr,
            LrAnchor::Initial => self.lr * self.div_start,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.pct_warmup > 0.0 && self.pct_warmup < 1.0) {
            return fail(format!("pct_warmup must lie in (0, 1), got {}", self.pct_warmup));
        }
        if !(self.div_start > 1.0 && self.div_final > 1.0) {
            return fail(format!(
                "div_start and div_final must exceed 1, got {} and {}",
                self.div_start, self.div_final
            ));
        }
        let (high, low) = self.momentum_range;
        if !(0.0 <= low && low < high && high < 1.0) {
            return fail(format!(
                "momentum_range must satisfy 0 <= low < high < 1, got ({high}, {low})"
            ));
        }
        if !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return fail("beta2 must lie in [0, 1), eps must be positive, weight_decay non-negative".into());
        }
        Ok(())
    }
}

fn first_non_finite_grad(model: &SegmentationModel) -> Option<String> {
    let mut bad = None;
    model.visit("", &mut |name, t| {
        if bad.is_none() {
            if let TensorRef::Param(p) = t {
                if p.grad.iter().any(|g| !g.is_finite()) {
                    bad = Some(name.to_string());
                }
            }
        }
    });
    bad
}

/// Forward, loss, backward and one Adam update. Returns the batch loss.
///
/// Nothing is updated when the loss or any gradient is non-finite.
pub fn train_step(
    model: &mut SegmentationModel,
    optimizer: &mut Adam,
    batch: &Batch,
    point: SchedulePoint,
    step: usize,
) -> Result<f64, TrainError> {
    let diagnose = |detail: String| TrainError::NonFinite {
        step: Some(step),
        lr: Some(point.lr),
        batch_ids: batch.ids.clone(),
        detail,
    };
    model.zero_grad();
    let logits = model.forward_train(batch.images.clone()).map_err(|e| match e {
        ModelError::NonFinite { batch_index } => diagnose(format!("non-finite logits for sample {batch_index}")),
        other => other.into(),
    })?;
    let (loss, grad) = bce_with_logits_grad(&logits, &batch.masks).map_err(|e| match e {
        TrainError::NonFinite { detail, .. } => diagnose(detail),
        other => other,
    })?;
    model.backward(&grad);
    if let Some(name) = first_non_finite_grad(model) {
        return Err(diagnose(format!("non-finite gradient in `{name}`")));
    }
    optimizer.step(model, point.lr, point.momentum);
    Ok(loss)
}

/// Progress counters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_validation_dice: Option<f64>,
}

/// Where and how [`fit`] persists its artifacts.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub output_dir: PathBuf,
    pub augmentation: AugmentationConfig,
    pub stats: NormalizationStats,
    pub threshold: f32,
    pub metrics: MetricOptions,
    /// Extra metadata copied into every checkpoint.
    pub checkpoint_extra: BTreeMap<String, String>,
}

impl FitOptions {
    pub fn new(output_dir: impl Into<PathBuf>, augmentation: AugmentationConfig) -> Self {
        Self {
            output_dir: output_dir.into(),
            augmentation,
            stats: NormalizationStats::IMAGENET,
            threshold: crate::model::DEFAULT_THRESHOLD,
            metrics: MetricOptions::default(),
            checkpoint_extra: BTreeMap::new(),
        }
    }

    pub fn history_path(&self) -> PathBuf {
        self.output_dir.join("history.jsonl")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.output_dir.join("checkpoints").join("last.safetensors")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.output_dir.join("checkpoints").join("best.safetensors")
    }
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub state: TrainState,
    pub total_steps: usize,
    pub final_train_loss: f64,
    pub best_epoch: Option<usize>,
    pub last_validation: Option<Metrics>,
}

/// Validation loss and metrics with the model in inference mode.
pub fn validate(
    model: &SegmentationModel,
    pairs: &[SamplePair],
    batch_size: usize,
    stats: &NormalizationStats,
    threshold: f32,
    options: &MetricOptions,
) -> Result<(f64, MetricsReport), TrainError> {
    let mut loss_sum = 0.0;
    let mut counts: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    for batch in make_batches(pairs, batch_size, false, 0, 0, stats)? {
        let pred = model.forward(&batch.images)?;
        loss_sum += bce_with_logits(&pred.logits, &batch.masks)? * batch.len() as f64;
        let masks = binarize(&pred.probabilities, threshold);
        for (b, id) in batch.ids.iter().enumerate() {
            let gt = batch.masks.slice(s![b, 0, .., ..]).mapv(|v| v as u8);
            counts.insert(id.clone(), confusion(&masks.slice(s![b, 0, .., ..]), &gt)?);
        }
    }
    let report = MetricsReport::from_counts(counts, options)?;
    Ok((loss_sum / pairs.len() as f64, report))
}

fn augmented_epoch(train: &[SamplePair], config: &AugmentationConfig, epoch: usize) -> Vec<SamplePair> {
    train
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64, i as u64]));
            augment(pair, config, &mut rng)
        })
        .collect()
}

/// Train `model` for `config.epochs` epochs under the one-cycle policy.
///
/// Training pairs are freshly augmented every epoch; validation pairs are
/// only resized. After each epoch the history log gains an epoch record,
/// `last.safetensors` is rewritten and `best.safetensors` is rewritten when
/// validation Dice strictly improves. With an empty validation set no
/// validation is run and no best checkpoint is written.
pub fn fit(
    model: &mut SegmentationModel,
    train: &[SamplePair],
    validation: &[SamplePair],
    config: &TrainConfig,
    options: &FitOptions,
) -> Result<FitSummary, TrainError> {
    config.validate()?;
    options.augmentation.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if options.augmentation.target_size != model.config().input_size {
        return Err(TrainError::Config(format!(
            "augmentation target size {:?} differs from model input size {:?}",
            options.augmentation.target_size,
            model.config().input_size
        )));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    if total_steps < 2 {
        return Err(TrainError::Config(format!(
            "the run has {total_steps} optimiser step(s); one-cycle training needs at least 2"
        )));
    }
    let checkpoint_dir = options.output_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoint_dir).map_err(|e| TrainError::io(&checkpoint_dir, e))?;
    let mut history = HistoryWriter::create(&options.history_path())?;
    let validation: Vec<SamplePair> = validation
        .iter()
        .map(|p| resize_pair(p, options.augmentation.target_size))
        .collect();

    let mut extra = options.checkpoint_extra.clone();
    extra.insert(
        "train_config".into(),
        serde_json::to_string(config).expect("serialisable"),
    );
    extra.insert(
        "augmentation_config".into(),
        serde_json::to_string(&options.augmentation).expect("serialisable"),
    );
    extra.insert(
        "normalization".into(),
        serde_json::to_string(&options.stats).expect("serialisable"),
    );

    let mut optimizer = Adam::new(config.beta2, config.eps, config.weight_decay);
    let mut state = TrainState {
        step: 0,
        epoch: 0,
        best_validation_dice: None,
    };
    let mut best_epoch = None;
    let mut last_validation = None;
    let mut final_train_loss = f64::NAN;

    for epoch in 0..config.epochs {
        let epoch_pairs = augmented_epoch(train, &options.augmentation, epoch);
        let mut loss_sum = 0.0;
        for batch in make_batches(
            &epoch_pairs,
            config.batch_size,
            true,
            config.seed,
            epoch as u64,
            &options.stats,
        )? {
            let point = one_cycle_schedule(state.step, total_steps, config)?;
            let loss = train_step(model, &mut optimizer, &batch, point, state.step)?;
            history.append(&HistoryRecord::Step {
                step: state.step,
                epoch,
                lr: point.lr,
                momentum: point.momentum,
                loss,
            })?;
            loss_sum += loss * batch.len() as f64;
            state.step += 1;
        }
        final_train_loss = loss_sum / train.len() as f64;
        state.epoch = epoch + 1;

        let (val_loss, val_metrics) = if validation.is_empty() {
            (None, None)
        } else {
            let (loss, report) = validate(
                model,
                &validation,
                config.batch_size,
                &options.stats,
                options.threshold,
                &options.metrics,
            )?;
            (Some(loss), Some(report.aggregate))
        };
        history.append(&HistoryRecord::Epoch {
            epoch,
            step: state.step,
            train_loss: final_train_loss,
            val_loss,
            val_metrics,
        })?;

        let mut meta = extra.clone();
        meta.insert("epoch".into(), state.epoch.to_string());
        meta.insert("step".into(), state.step.to_string());
        if let Some(m) = &val_metrics {
            meta.insert("val_dice".into(), m.dsc.to_string());
        }
        save_checkpoint(model, &options.last_checkpoint(), &meta)?;
        if let Some(m) = &val_metrics {
            if state.best_validation_dice.is_none_or(|best| m.dsc > best) {
                state.best_validation_dice = Some(m.dsc);
                best_epoch = Some(epoch);
                save_checkpoint(model, &options.best_checkpoint(), &meta)?;
            }
        }
        info!(
            "epoch {}/{}: train loss {:.5}{}",
            epoch + 1,
            config.epochs,
            final_train_loss,
            match (val_loss, &val_metrics) {
                (Some(l), Some(m)) => format!(", val loss {l:.5}, val dice {:.4}", m.dsc),
                _ => String::new(),
            }
        );
        last_validation = val_metrics;
    }

    Ok(FitSummary {
        state,
        total_steps,
        final_train_loss,
        best_epoch,
        last_validation,
    })
}

/// Inference-mode Dice of `model` on `pairs` (already at model resolution),
/// from the summed confusion counts.
pub fn dice_on(
    model: &SegmentationModel,
    pairs: &[SamplePair],
    stats: &NormalizationStats,
    threshold: f32,
) -> Result<f64, TrainError> {
    let mut total = ConfusionCounts::default();
    for batch in make_batches(pairs, 4, false, 0, 0, stats)? {
        let pred = model.forward(&batch.images)?;
        let masks = binarize(&pred.probabilities, threshold);
        let gt: Array4<u8> = batch.masks.mapv(|v| v as u8);
        total = total + confusion(&masks, &gt)?;
    }
    Ok(crate::metrics::compute_metrics(total, 0.0).dsc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::model::ArchConfig;

    fn tiny_config() -> ArchConfig {
        ArchConfig::default().with_input_size(32, 32)
    }

    fn params_bits(model: &SegmentationModel) -> Vec<u32> {
        let mut out = Vec::new();
        model.visit("", &mut |_, t| {
            if t.is_param() {
                out.extend(t.value().iter().map(|v| v.to_bits()));
            }
        });
        out
    }

    fn batch(n: usize, seed: u64) -> Batch {
        let pairs = synthetic::generate(n, (32, 32), seed);
        make_batches(&pairs, n, false, 0, 0, &NormalizationStats::IMAGENET)
            .unwrap()
            .next()
            .unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig {
            pct_warmup: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            div_start: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_lr_step_leaves_parameters_bit_identical() {
        let mut model = SegmentationModel::random(&tiny_config(), 1).unwrap();
        let before = params_bits(&model);
        let mut opt = Adam::new(0.999, 1e-8, 0.0);
        let b = batch(2, 3);
        let point = SchedulePoint { lr: 0.0, momentum: 0.9 };
        train_step(&mut model, &mut opt, &b, point, 0).unwrap();
        assert_eq!(params_bits(&model), before);
    }

    #[test]
    fn positive_lr_step_changes_the_loss() {
        let mut model = SegmentationModel::random(&tiny_config(), 1).unwrap();
        let mut opt = Adam::new(0.999, 1e-8, 0.0);
        let b = batch(2, 3);
        let point = SchedulePoint {
            lr: 1e-3,
            momentum: 0.9,
        };
        let first = train_step(&mut model, &mut opt, &b, point, 0).unwrap();
        let second = train_step(&mut model, &mut opt, &b, point, 1).unwrap();
        assert_ne!(first, second);
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostics() {
        let mut model = SegmentationModel::random(&tiny_config(), 1).unwrap();
        let before = params_bits(&model);
        let mut opt = Adam::new(0.999, 1e-8, 0.0);
        let mut b = batch(2, 3);
        b.images[[1, 0, 0, 0]] = f32::NAN;
        let err = train_step(
            &mut model,
            &mut opt,
            &b,
            SchedulePoint {
                lr: 1e-3,
                momentum: 0.9,
            },
            7,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, TrainError::NonFinite { .. }));
        assert!(msg.contains("step 7") && msg.contains("sample_000"), "{msg}");
        assert_eq!(params_bits(&model), before);
    }

    #[test]
    fn one_epoch_bookkeeping_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic::generate(10, (40, 36), 2);
        let (train, val) = pairs.split_at(8);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            ..Default::default()
        };
        let aug = AugmentationConfig {
            target_size: (32, 32),
            ..Default::default()
        };
        let options = FitOptions::new(dir.path(), aug);
        let mut model = SegmentationModel::random(&tiny_config(), 5).unwrap();
        let summary = fit(&mut model, train, val, &config, &options).unwrap();
        assert_eq!(summary.total_steps, 2);
        assert_eq!(summary.state.step, 2);
        assert_eq!(summary.state.epoch, 1);

        let history = read_history(&options.history_path()).unwrap();
        let steps: Vec<(usize, f64, f64)> = history
            .iter()
            .filter_map(|r| match r {
                HistoryRecord::Step { step, lr, momentum, .. } => Some((*step, *lr, *momentum)),
                _ => None,
            })
            .collect();
        assert_eq!(steps.len(), 2);
        for (step, lr, momentum) in steps {
            let p = one_cycle_schedule(step, 2, &config).unwrap();
            assert_eq!((lr, momentum), (p.lr, p.momentum));
        }
        assert!(matches!(
            history.last(),
            Some(HistoryRecord::Epoch {
                val_metrics: Some(_),
                ..
            })
        ));
        assert!(options.last_checkpoint().is_file());
        assert!(options.best_checkpoint().is_file());
        let info = crate::model::checkpoint::read_checkpoint_info(&options.best_checkpoint()).unwrap();
        let stored: TrainConfig = serde_json::from_str(&info.extra["train_config"]).unwrap();
        assert_eq!(stored, config);
    }

    #[test]
    fn too_few_steps_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic::generate(2, (32, 32), 2);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let options = FitOptions::new(dir.path(), AugmentationConfig::resize_only((32, 32)));
        let mut model = SegmentationModel::random(&tiny_config(), 5).unwrap();
        assert!(matches!(
            fit(&mut model, &pairs, &[], &config, &options),
            Err(TrainError::Config(_))
        ));
    }
}
