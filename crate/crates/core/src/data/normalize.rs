use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Per-channel mean and standard deviation on `[0, 1]`-scaled RGB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizationStats {
    /// The statistics every ImageNet-pretrained ResNet expects.
    pub const IMAGENET: NormalizationStats = NormalizationStats {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn new(mean: [f32; 3], std: [f32; 3]) -> Result<Self, DataError> {
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.std.iter().all(|s| *s > 0.0 && s.is_finite()) && self.mean.iter().all(|m| m.is_finite()) {
            Ok(())
        } else {
            Err(DataError::Config(format!(
                "normalisation std must be positive and finite, got {:?}",
                self.std
            )))
        }
    }
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// `H x W x 3` 8-bit RGB to channel-first `3 x H x W`,
/// `(pixel / 255 - mean_c) / std_c`.
pub fn normalize(image: ArrayView3<'_, u8>, stats: &NormalizationStats) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        let src = image.index_axis(Axis(2), c);
        plane.zip_mut_with(&src, |o, &p| *o = (p as f32 / 255.0 - m) / s);
    }
    out
}

/// Inverse of [`normalize`] back to `[0, 1]`-scaled, channel-first values.
pub fn denormalize(x: ArrayView3<'_, f32>, stats: &NormalizationStats) -> Array3<f32> {
    let mut out = x.to_owned();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        plane.mapv_inplace(|v| v * s + m);
    }
    out
}
