//! Confusion counts and the six overlap/accuracy metrics: Jaccard, DSC,
//! recall, precision, accuracy and F2.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_mask_dir, normalize, resize_image, resize_mask, DataError, NormalizationStats, SamplePair};
use crate::model::{binarize, ModelError, SegmentationModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch{}: prediction is {pred:?}, ground truth is {gt:?}", id.as_deref().map(|i| format!(" for `{i}`")).unwrap_or_default())]
    Shape {
        id: Option<String>,
        pred: Vec<usize>,
        gt: Vec<usize>,
    },
    #[error("{0} mask contains values other than 0 and 1")]
    NonBinary(&'static str),
    #[error("masks have no pixels")]
    EmptyMask,
    #[error("no prediction for ground-truth ids: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("nothing to evaluate: the ground-truth set is empty")]
    NoSamples,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Pixel tallies of a binary prediction against binary ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Tally `pred` against `gt`. Both must have the same shape and hold only 0/1.
pub fn confusion<S1, S2, D>(pred: &ArrayBase<S1, D>, gt: &ArrayBase<S2, D>) -> Result<ConfusionCounts, MetricsError>
where
    S1: Data<Elem = u8>,
    S2: Data<Elem = u8>,
    D: Dimension,
{
    if pred.shape() != gt.shape() {
        return Err(MetricsError::Shape {
            id: None,
            pred: pred.shape().to_vec(),
            gt: gt.shape().to_vec(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    if pred.iter().any(|&v| v > 1) {
        return Err(MetricsError::NonBinary("prediction"));
    }
    if gt.iter().any(|&v| v > 1) {
        return Err(MetricsError::NonBinary("ground-truth"));
    }
    let mut c = ConfusionCounts::default();
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p, g) {
        (1, 1) => c.tp += 1,
        (1, _) => c.fp += 1,
        (_, 1) => c.fn_ += 1,
        _ => c.tn += 1,
    });
    Ok(c)
}

/// The six reported metrics, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub jaccard: f64,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub f2: f64,
}

impl Metrics {
    pub const COLUMNS: [&'static str; 6] = ["Jaccard", "DSC", "Recall", "Prec.", "Acc.", "F2"];

    /// Values in column order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.jaccard,
            self.dsc,
            self.recall,
            self.precision,
            self.accuracy,
            self.f2,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            jaccard: v[0],
            dsc: v[1],
            recall: v[2],
            precision: v[3],
            accuracy: v[4],
            f2: v[5],
        }
    }
}

/// Metrics with the default both-empty score of 1.0.
pub fn compute_metrics(counts: ConfusionCounts, smoothing: f64) -> Metrics {
    compute_metrics_with(counts, smoothing, 1.0)
}

/// Metrics from counts with additive `smoothing` in numerator and denominator
/// of every overlap ratio.
///
/// When prediction and ground truth are both empty and `smoothing` is zero,
/// Jaccard, DSC, recall, precision and F2 take `both_empty_score`. Any other
/// `0 / 0` ratio is 0.
pub fn compute_metrics_with(counts: ConfusionCounts, smoothing: f64, both_empty_score: f64) -> Metrics {
    let ConfusionCounts { tp, fp, fn_, tn } = counts;
    let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    let s = smoothing;
    let both_empty = tp + fp + fn_ == 0.0;
    let ratio = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else if both_empty {
            both_empty_score
        } else {
            0.0
        }
    };
    let total = tp + fp + fn_ + tn;
    Metrics {
        jaccard: ratio(tp + s, tp + fp + fn_ + s),
        dsc: ratio(2.0 * tp + s, 2.0 * tp + fp + fn_ + s),
        recall: ratio(tp + s, tp + fn_ + s),
        precision: ratio(tp + s, tp + fp + s),
        accuracy: if total > 0.0 {
            (tp + tn) / total
        } else {
            both_empty_score
        },
        f2: ratio(5.0 * tp + s, 5.0 * tp + 4.0 * fn_ + fp + s),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Arithmetic mean of the per-image metric values.
    #[default]
    PerImageMean,
    /// Metrics of the summed confusion counts.
    GlobalCounts,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::PerImageMean => "per-image-mean",
            Aggregation::GlobalCounts => "global-counts",
        })
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per-image-mean" => Ok(Self::PerImageMean),
            "global-counts" => Ok(Self::GlobalCounts),
            other => Err(format!(
                "unknown aggregation mode `{other}` (expected per-image-mean or global-counts)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub aggregation: Aggregation,
    pub smoothing: f64,
    pub both_empty_score: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::PerImageMean,
            smoothing: 0.0,
            both_empty_score: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation_mode: Aggregation,
    pub smoothing: f64,
    pub both_empty_score: f64,
    /// Sorted by id.
    pub per_image: Vec<ImageRecord>,
    pub aggregate: Metrics,
}

impl MetricsReport {
    /// Build a report from per-image counts (any order; stored sorted by id).
    pub fn from_counts(
        counts: BTreeMap<String, ConfusionCounts>,
        options: &MetricOptions,
    ) -> Result<Self, MetricsError> {
        if counts.is_empty() {
            return Err(MetricsError::NoSamples);
        }
        let metrics = |c: ConfusionCounts| compute_metrics_with(c, options.smoothing, options.both_empty_score);
        let per_image: Vec<ImageRecord> = counts
            .into_iter()
            .map(|(id, c)| ImageRecord {
                id,
                counts: c,
                metrics: metrics(c),
            })
            .collect();
        let aggregate = match options.aggregation {
            Aggregation::PerImageMean => {
                let mut sums = [0.0f64; 6];
                for r in &per_image {
                    for (s, v) in sums.iter_mut().zip(r.metrics.values()) {
                        *s += v;
                    }
                }
                Metrics::from_values(sums.map(|s| s / per_image.len() as f64))
            }
            Aggregation::GlobalCounts => metrics(per_image.iter().map(|r| r.counts).sum()),
        };
        Ok(Self {
            aggregation_mode: options.aggregation,
            smoothing: options.smoothing,
            both_empty_score: options.both_empty_score,
            per_image,
            aggregate,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// The aggregate row as six space-separated 4-decimal numbers.
    pub fn aggregate_row(&self) -> String {
        format_row(&self.aggregate)
    }

    /// Fixed-width table: one row per image and a final aggregate row.
    pub fn table(&self) -> String {
        let id_width = self
            .per_image
            .iter()
            .map(|r| r.id.len())
            .max()
            .unwrap_or(0)
            .max("aggregate".len());
        let mut out = String::new();
        let _ = write!(out, "{:<id_width$}", "id");
        for c in Metrics::COLUMNS {
            let _ = write!(out, " {c:>8}");
        }
        out.push('\n');
        let mut row = |label: &str, m: &Metrics| {
            let _ = write!(out, "{label:<id_width$}");
            for v in m.values() {
                let _ = write!(out, " {v:>8.4}");
            }
            out.push('\n');
        };
        for r in &self.per_image {
            row(&r.id, &r.metrics);
        }
        row("aggregate", &self.aggregate);
        out
    }

    /// Write `metrics.json` and `metrics.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let unwritable = |path: &Path, e: std::io::Error| DataError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| unwritable(dir, e))?;
        for (name, text) in [("metrics.json", self.to_json()), ("metrics.txt", self.table())] {
            let path = dir.join(name);
            crate::model::checkpoint::write_atomic(&path, text.as_bytes()).map_err(|e| unwritable(&path, e))?;
        }
        Ok(())
    }
}

fn format_row(m: &Metrics) -> String {
    m.values()
        .iter()
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Where predicted masks come from.
pub enum PredictionSource<'a> {
    Model {
        model: &'a SegmentationModel,
        stats: NormalizationStats,
        threshold: f32,
    },
    /// A directory of mask files (0/255 or 0/1 images) named by sample id.
    MaskDir(&'a Path),
}

/// Binary prediction for one image at its original resolution: resized to
/// the model's input size, segmented, then resized back (nearest).
pub fn predict_mask(
    model: &SegmentationModel,
    image: &ndarray::Array3<u8>,
    stats: &NormalizationStats,
    threshold: f32,
) -> Result<Array2<u8>, ModelError> {
    let (h, w, _) = image.dim();
    let input_hw = model.config().input_size;
    let resized = if (h, w) == input_hw {
        image.clone()
    } else {
        resize_image(image, input_hw)
    };
    let x = normalize(resized.view(), stats).insert_axis(ndarray::Axis(0));
    let pred = model.forward(&x)?;
    let mask = binarize(&pred.probabilities.slice(s![0, 0, .., ..]), threshold);
    Ok(if (h, w) == input_hw {
        mask
    } else {
        resize_mask(&mask, (h, w))
    })
}

/// Compare predictions with ground truth. Predictions whose size differs
/// from the ground truth are resized to it with nearest neighbour; extra
/// predictions without ground truth are ignored.
pub fn evaluate_masks(
    predictions: &BTreeMap<String, Array2<u8>>,
    ground_truth: &BTreeMap<String, Array2<u8>>,
    options: &MetricOptions,
) -> Result<MetricsReport, MetricsError> {
    if ground_truth.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let missing: Vec<String> = ground_truth
        .keys()
        .filter(|id| !predictions.contains_key(*id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingPredictions(missing));
    }
    let mut counts = BTreeMap::new();
    for (id, gt) in ground_truth {
        let pred = &predictions[id];
        let c = if pred.dim() == gt.dim() {
            confusion(pred, gt)
        } else {
            confusion(&resize_mask(pred, gt.dim()), gt)
        };
        let c = c.map_err(|e| match e {
            MetricsError::Shape { pred, gt, .. } => MetricsError::Shape {
                id: Some(id.clone()),
                pred,
                gt,
            },
            other => other,
        })?;
        counts.insert(id.clone(), c);
    }
    MetricsReport::from_counts(counts, options)
}

/// Evaluate a dataset against predictions from a model or a mask directory.
pub fn evaluate_dataset(
    source: PredictionSource<'_>,
    dataset: &[SamplePair],
    options: &MetricOptions,
) -> Result<MetricsReport, MetricsError> {
    let gt: BTreeMap<String, Array2<u8>> = dataset.iter().map(|p| (p.id.clone(), p.mask.clone())).collect();
    let predictions = match source {
        PredictionSource::MaskDir(dir) => load_mask_dir(dir)?,
        PredictionSource::Model {
            model,
            stats,
            threshold,
        } => dataset
            .iter()
            .map(|p| Ok((p.id.clone(), predict_mask(model, &p.image, &stats, threshold)?)))
            .collect::<Result<_, MetricsError>>()?,
    };
    evaluate_masks(&predictions, &gt, options)
}
