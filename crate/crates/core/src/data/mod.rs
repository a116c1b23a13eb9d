//! Image/mask ingestion, paired augmentation, normalisation and batching.

mod augment;
mod batch;
mod dataset;
mod io;
mod normalize;
pub mod synthetic;

pub use augment::{
    apply_augmentation, augment, resize_image, resize_mask, resize_pair, AugmentParams, AugmentationConfig,
    SourceMapping,
};
pub use batch::{make_batches, Batch, Batches};
pub use dataset::{load_dataset, load_mask_dir, split_dataset, SplitManifest};
pub use io::{list_image_files, read_mask_file, read_rgb_file, write_mask_png, write_rgb_png};
pub use normalize::{denormalize, normalize, NormalizationStats};

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use thiserror::Error;

/// 8-bit grayscale threshold separating background from foreground in
/// ground-truth mask files.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset root {0} must contain `images/` and `masks/` directories")]
    Layout(PathBuf),
    #[error("no image/mask pairs found under {0}")]
    Empty(PathBuf),
    #[error("unmatched files: images without masks [{images}], masks without images [{masks}]")]
    Orphans { images: String, masks: String },
    #[error("duplicate sample id `{0}` (several files share the same stem)")]
    DuplicateId(String),
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },
    #[error("sample `{id}`: image is {image_hw:?} but mask is {mask_hw:?}")]
    SizeMismatch {
        id: String,
        image_hw: (usize, usize),
        mask_hw: (usize, usize),
    },
    #[error("sample `{0}`: mask contains values other than 0 and 1")]
    NonBinaryMask(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// One RGB image and its aligned binary ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    /// `H x W x 3`, 8-bit RGB.
    pub image: Array3<u8>,
    /// `H x W`, values in {0, 1}.
    pub mask: Array2<u8>,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: Array3<u8>, mask: Array2<u8>) -> Result<Self, DataError> {
        let id = id.into();
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(DataError::Config(format!(
                "sample `{id}`: image has {c} channels, expected 3"
            )));
        }
        if mask.dim() != (h, w) {
            return Err(DataError::SizeMismatch {
                id,
                image_hw: (h, w),
                mask_hw: mask.dim(),
            });
        }
        if mask.iter().any(|&v| v > 1) {
            return Err(DataError::NonBinaryMask(id));
        }
        Ok(Self { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }
}

/// Mix a base seed with extra coordinates (epoch, sample index, ...) into an
/// independent 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
