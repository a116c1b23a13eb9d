//! U-Net with a ResNet50 encoder.
//!
//! The encoder exposes five feature maps (stem plus four residual stages).
//! The deepest one is the bottleneck; the other four are forwarded as skip
//! connections into the first four of five decoder blocks. The final block
//! upsamples back to full resolution without a skip, and a 1x1 convolution
//! produces one logit per pixel.
//!
//! ```text
//! image 3xHxW
//!   stem      64  @ /2  ----------------------------.
//!   stage1   256  @ /4  -----------------------.    |
//!   stage2   512  @ /8  ------------------.    |    |
//!   stage3  1024  @ /16 -------------.    |    |    |
//!   stage4  2048  @ /32 -> block1 -> block2 -> block3 -> block4 -> block5 -> head
//!                          512 /16   256 /8   128 /4    64 /2     32 /1    1 /1
//! ```

pub mod checkpoint;
mod decoder;
mod encoder;
pub mod pretrained;

pub use decoder::DecoderBlock;
pub use encoder::{Bottleneck, ResNet50, STAGE_CHANNELS, STAGE_STRIDES};

use std::fmt;
use std::path::PathBuf;

use ndarray::{Array, Array3, Array4, ArrayBase, ArrayView3, Axis, Data, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{join, Conv2d, Module, TensorMut, TensorRef};

pub const ENCODER_RESNET50: &str = "resnet50";
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch for {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },
    #[error("non-finite values in model output for batch index {batch_index}")]
    NonFinite { batch_index: usize },
    #[error("pretrained encoder weights unavailable: {0}")]
    PretrainedUnavailable(String),
    #[error("pretrained weights do not fit the encoder: {0}")]
    PretrainedMismatch(String),
}

impl ModelError {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        ModelError::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

/// Encoder feature maps that can be tapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderStage {
    Stem,
    Stage1,
    Stage2,
    Stage3,
    Stage4,
}

impl EncoderStage {
    pub const ALL: [EncoderStage; 5] = [
        EncoderStage::Stem,
        EncoderStage::Stage1,
        EncoderStage::Stage2,
        EncoderStage::Stage3,
        EncoderStage::Stage4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn channels(self) -> usize {
        STAGE_CHANNELS[self.index()]
    }

    pub fn stride(self) -> usize {
        STAGE_STRIDES[self.index()]
    }
}

impl fmt::Display for EncoderStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            EncoderStage::Stem => "stem",
            EncoderStage::Stage1 => "stage1",
            EncoderStage::Stage2 => "stage2",
            EncoderStage::Stage3 => "stage3",
            EncoderStage::Stage4 => "stage4",
        };
        f.write_str(name)
    }
}

/// Everything that determines the network graph, plus where to find
/// pretrained encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    pub encoder_name: String,
    /// Skip taps ordered from the finest (stride 2) to the coarsest (stride 16).
    pub tap_stages: Vec<EncoderStage>,
    /// Output channels of the five decoder blocks, deepest first.
    pub decoder_channels: Vec<usize>,
    pub head_channels: usize,
    pub pretrained: bool,
    /// safetensors file holding ImageNet ResNet50 weights under torchvision
    /// parameter names. Required when `pretrained` is set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: (256, 256),
            encoder_name: ENCODER_RESNET50.to_string(),
            tap_stages: vec![
                EncoderStage::Stem,
                EncoderStage::Stage1,
                EncoderStage::Stage2,
                EncoderStage::Stage3,
            ],
            decoder_channels: vec![512, 256, 128, 64, 32],
            head_channels: 1,
            pretrained: false,
            pretrained_weights: None,
        }
    }
}

impl ArchConfig {
    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_size = (height, width);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::Config(format!(
                "input size {h}x{w} must be a non-zero multiple of 32 in both dimensions"
            )));
        }
        if self.encoder_name != ENCODER_RESNET50 {
            return Err(ModelError::Config(format!(
                "unsupported encoder `{}` (only `{ENCODER_RESNET50}`)",
                self.encoder_name
            )));
        }
        if self.input_channels == 0 {
            return Err(ModelError::Config("input_channels must be at least 1".into()));
        }
        if self.pretrained && self.input_channels != 3 {
            return Err(ModelError::Config(
                "pretrained ImageNet weights require 3 input channels".into(),
            ));
        }
        if self.tap_stages.len() != 4 {
            return Err(ModelError::Config(format!(
                "exactly 4 tap stages required, got {}",
                self.tap_stages.len()
            )));
        }
        // The decoder doubles resolution per block, so the taps must sit at
        // strides 2, 4, 8, 16 in that order.
        for (i, stage) in self.tap_stages.iter().enumerate() {
            let expected = 2usize << i;
            if stage.stride() != expected {
                return Err(ModelError::Config(format!(
                    "tap {i} is `{stage}` at stride {}, expected stride {expected} \
                     (taps must be ordered from highest to lowest resolution)",
                    stage.stride()
                )));
            }
        }
        if self.decoder_channels.len() != 5 {
            return Err(ModelError::Config(format!(
                "exactly 5 decoder blocks required, got {}",
                self.decoder_channels.len()
            )));
        }
        if self.decoder_channels.contains(&0) {
            return Err(ModelError::Config("decoder channel counts must be positive".into()));
        }
        if self.head_channels != 1 {
            return Err(ModelError::Config(format!(
                "head must have exactly 1 (sigmoid mask) channel, got {}",
                self.head_channels
            )));
        }
        Ok(())
    }

    /// True when both configs describe the same network graph. Weight
    /// provenance (`pretrained`, `pretrained_weights`) is ignored.
    pub fn same_graph(&self, other: &ArchConfig) -> bool {
        self.input_channels == other.input_channels
            && self.input_size == other.input_size
            && self.encoder_name == other.encoder_name
            && self.tap_stages == other.tap_stages
            && self.decoder_channels == other.decoder_channels
            && self.head_channels == other.head_channels
    }
}

/// Skip and bottleneck feature maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTaps {
    /// Deepest encoder map (stride 32).
    pub bottleneck: Array3<f32>,
    /// Skip maps in decoder order: strides 16, 8, 4, 2.
    pub skips: Vec<Array3<f32>>,
}

/// Network output for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Pre-sigmoid scores, `B x 1 x H x W`.
    pub logits: Array4<f32>,
    /// Sigmoid of the logits, clamped to the open interval (0, 1).
    pub probabilities: Array4<f32>,
}

#[derive(Debug, Clone)]
pub struct SegmentationModel {
    config: ArchConfig,
    encoder: ResNet50,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

/// Build the network described by `config`.
///
/// Decoder and head weights are Kaiming-initialised from `seed`. The encoder
/// is initialised the same way, then overwritten with the ImageNet
/// checkpoint when `config.pretrained` is set; a missing or incompatible
/// checkpoint is an error.
pub fn build_model(config: &ArchConfig, seed: u64) -> Result<SegmentationModel, ModelError> {
    let mut model = SegmentationModel::random(config, seed)?;
    if config.pretrained {
        let path = config.pretrained_weights.as_ref().ok_or_else(|| {
            ModelError::PretrainedUnavailable(
                "`pretrained` is set but no `pretrained_weights` file is configured".into(),
            )
        })?;
        pretrained::load_encoder_weights(&mut model.encoder, path)?;
    }
    Ok(model)
}

impl SegmentationModel {
    /// Randomly initialised network, ignoring `config.pretrained`.
    pub fn random(config: &ArchConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ResNet50::new(config.input_channels, &mut rng);
        let mut decoder = Vec::with_capacity(5);
        let mut in_channels = EncoderStage::Stage4.channels();
        for (i, &out) in config.decoder_channels.iter().enumerate() {
            // block i consumes the tap at stride 16 / 2^i; the last block has none
            let skip = config.tap_stages.len().checked_sub(i + 1).map(|t| config.tap_stages[t]);
            let skip_channels = skip.map_or(0, |s| s.channels());
            decoder.push(DecoderBlock::new(in_channels, skip_channels, out, &mut rng));
            in_channels = out;
        }
        let head = Conv2d::new(in_channels, config.head_channels, 1, 1, 0, true, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn decoder_blocks(&self) -> &[DecoderBlock] {
        &self.decoder
    }

    fn check_batch(&self, x: &Array4<f32>) -> Result<(), ModelError> {
        let (n, c, h, w) = x.dim();
        let (eh, ew) = self.config.input_size;
        if n == 0 || c != self.config.input_channels || h != eh || w != ew {
            return Err(ModelError::shape(
                "model input",
                format!("Bx{}x{eh}x{ew} with B >= 1", self.config.input_channels),
                format!("{n}x{c}x{h}x{w}"),
            ));
        }
        Ok(())
    }

    fn skip_for<'a>(&self, block: usize, outputs: &'a [Array4<f32>; 5]) -> Option<&'a Array4<f32>> {
        let taps = &self.config.tap_stages;
        taps.len().checked_sub(block + 1).map(|t| &outputs[taps[t].index()])
    }

    /// Encoder taps for a single normalised `C x H x W` image.
    pub fn encode(&self, image: ArrayView3<'_, f32>) -> Result<EncoderTaps, ModelError> {
        let batch = image.insert_axis(Axis(0)).to_owned();
        self.check_batch(&batch)?;
        let outputs = self.encoder.infer(&batch);
        let first = |a: &Array4<f32>| a.index_axis(Axis(0), 0).to_owned();
        let skips = self
            .config
            .tap_stages
            .iter()
            .rev()
            .map(|s| first(&outputs[s.index()]))
            .collect();
        Ok(EncoderTaps {
            bottleneck: first(&outputs[EncoderStage::Stage4.index()]),
            skips,
        })
    }

    fn logits(&self, x: &Array4<f32>) -> Result<Array4<f32>, ModelError> {
        self.check_batch(x)?;
        let outputs = self.encoder.infer(x);
        let mut h = outputs[EncoderStage::Stage4.index()].clone();
        for (i, block) in self.decoder.iter().enumerate() {
            h = block.infer(&h, self.skip_for(i, &outputs))?;
        }
        Ok(self.head.infer(&h))
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, x: &Array4<f32>) -> Result<Prediction, ModelError> {
        let logits = self.logits(x)?;
        check_finite(&logits)?;
        let probabilities = logits.mapv(sigmoid);
        Ok(Prediction { logits, probabilities })
    }

    /// Training-mode forward pass. Caches activations for [`Self::backward`]
    /// and updates batch-norm running statistics.
    pub fn forward_train(&mut self, x: Array4<f32>) -> Result<Array4<f32>, ModelError> {
        self.check_batch(&x)?;
        let outputs = self.encoder.forward(x);
        let mut h = outputs[EncoderStage::Stage4.index()].clone();
        for i in 0..self.decoder.len() {
            let skip = self.skip_for(i, &outputs).cloned();
            h = self.decoder[i].forward(h, skip.as_ref())?;
        }
        let logits = self.head.forward(h);
        check_finite(&logits)?;
        Ok(logits)
    }

    /// Accumulate parameter gradients for `d_logits` (same shape as the
    /// logits returned by the preceding [`Self::forward_train`]).
    pub fn backward(&mut self, d_logits: &Array4<f32>) {
        let mut g = self.head.backward(d_logits);
        let mut tap_grads: [Option<Array4<f32>>; 5] = Default::default();
        let taps = self.config.tap_stages.clone();
        for (i, block) in self.decoder.iter_mut().enumerate().rev() {
            let (gx, gskip) = block.backward(&g);
            if let (Some(gs), Some(t)) = (gskip, taps.len().checked_sub(i + 1)) {
                tap_grads[taps[t].index()] = Some(gs);
            }
            g = gx;
        }
        tap_grads[EncoderStage::Stage4.index()] = Some(g);
        self.encoder.backward(tap_grads);
    }

    /// SHA-256 over the encoder tensors, see [`pretrained::encoder_checksum`].
    pub fn encoder_checksum(&self) -> String {
        pretrained::encoder_checksum(&self.encoder)
    }
}

impl Module for SegmentationModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, block) in self.decoder.iter().enumerate() {
            block.visit(&join(prefix, &format!("decoder.block{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, block) in self.decoder.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("decoder.block{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

fn check_finite(logits: &Array4<f32>) -> Result<(), ModelError> {
    for (b, sample) in logits.outer_iter().enumerate() {
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { batch_index: b });
        }
    }
    Ok(())
}

const MIN_PROB: f32 = f32::MIN_POSITIVE;
const MAX_PROB: f32 = 1.0 - f32::EPSILON / 2.0;

/// Logistic sigmoid, clamped so the result stays strictly inside (0, 1)
/// after rounding to `f32`.
pub fn sigmoid(x: f32) -> f32 {
    let x = x as f64;
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (p as f32).clamp(MIN_PROB, MAX_PROB)
}

/// Pixel is foreground iff its probability is strictly greater than
/// `threshold`.
///
/// # Panics
///
/// If `threshold` is not inside (0, 1).
pub fn binarize<S, D>(probabilities: &ArrayBase<S, D>, threshold: f32) -> Array<u8, D>
where
    S: Data<Elem = f32>,
    D: Dimension,
{
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "binarization threshold must lie in (0, 1), got {threshold}"
    );
    probabilities.mapv(|p| u8::from(p > threshold))
}
