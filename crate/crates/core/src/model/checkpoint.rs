//! Single-file model checkpoints.
//!
//! A checkpoint is a safetensors archive: every parameter and batch-norm
//! running statistic under its hierarchical name (`encoder.stage1.block0.conv1.weight`,
//! `decoder.block3.bn2.running_mean`, `head.bias`, ...) plus header metadata
//! holding the format version, the JSON-encoded [`ArchConfig`] and any extra
//! string entries supplied by the caller (training config, split manifest
//! reference, ...). Files are written to a temporary sibling and renamed
//! into place, so a checkpoint path never holds a partial write.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use thiserror::Error;

use super::{ArchConfig, ModelError, SegmentationModel};
use crate::nn::Module;

pub const FORMAT_VERSION: u32 = 1;
const KEY_VERSION: &str = "format_version";
const KEY_ARCH: &str = "arch_config";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint architecture conflicts with the requested one: requested {expected}, checkpoint has {found}")]
    ArchMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Header information stored alongside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub extra: BTreeMap<String, String>,
}

pub(crate) fn f32_to_le_bytes(v: &ArrayD<f32>) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Write `bytes` to `path` atomically (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save_checkpoint(
    model: &SegmentationModel,
    path: &Path,
    extra: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let format_err = |reason: String| CheckpointError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.visit("", &mut |name, t| {
        let v = t.value();
        tensors.push((name.to_string(), v.shape().to_vec(), f32_to_le_bytes(v)));
    });
    let mut views = Vec::with_capacity(tensors.len());
    for (name, shape, data) in &tensors {
        let view = TensorView::new(Dtype::F32, shape.clone(), data)
            .map_err(|e| format_err(format!("tensor `{name}`: {e}")))?;
        views.push((name.as_str(), view));
    }
    let mut meta: HashMap<String, String> = extra.clone().into_iter().collect();
    for reserved in [KEY_VERSION, KEY_ARCH] {
        if meta.contains_key(reserved) {
            return Err(format_err(format!("metadata key `{reserved}` is reserved")));
        }
    }
    meta.insert(KEY_VERSION.into(), FORMAT_VERSION.to_string());
    meta.insert(
        KEY_ARCH.into(),
        serde_json::to_string(model.config()).expect("ArchConfig serialises"),
    );
    let bytes =
        safetensors::serialize(views, Some(meta)).map_err(|e| format_err(format!("serialisation failed: {e}")))?;
    write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read only the checkpoint header.
pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo, CheckpointError> {
    let bytes = read(path)?;
    parse_info(&bytes, path)
}

fn read(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_info(bytes: &[u8], path: &Path) -> Result<CheckpointInfo, CheckpointError> {
    let format_err = |reason: String| CheckpointError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(|e| format_err(format!("bad header: {e}")))?;
    let mut meta: BTreeMap<String, String> = metadata.metadata().clone().unwrap_or_default().into_iter().collect();
    let version = meta
        .remove(KEY_VERSION)
        .ok_or_else(|| format_err("missing format version".into()))?;
    let format_version: u32 = version
        .parse()
        .map_err(|_| format_err(format!("bad format version `{version}`")))?;
    if format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: format_version });
    }
    let arch_json = meta
        .remove(KEY_ARCH)
        .ok_or_else(|| format_err("missing architecture config".into()))?;
    let arch: ArchConfig =
        serde_json::from_str(&arch_json).map_err(|e| format_err(format!("bad architecture config: {e}")))?;
    Ok(CheckpointInfo {
        format_version,
        arch,
        extra: meta,
    })
}

/// Load a checkpoint. When `expected` is given, its graph must match the
/// stored architecture exactly.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ArchConfig>,
) -> Result<(SegmentationModel, CheckpointInfo), CheckpointError> {
    let bytes = read(path)?;
    let info = parse_info(&bytes, path)?;
    if let Some(expected) = expected {
        if !expected.same_graph(&info.arch) {
            return Err(CheckpointError::ArchMismatch {
                expected: serde_json::to_string(expected).expect("serialisable"),
                found: serde_json::to_string(&info.arch).expect("serialisable"),
            });
        }
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| CheckpointError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut model = SegmentationModel::random(&info.arch, 0)?;
    let mut failure: Option<String> = None;
    model.visit_mut("", &mut |name, mut slot| {
        if failure.is_some() {
            return;
        }
        match st.tensor(name) {
            Ok(view) if view.dtype() == Dtype::F32 && view.shape() == slot.value_mut().shape() => {
                *slot.value_mut() =
                    ArrayD::from_shape_vec(IxDyn(view.shape()), f32_from_le_bytes(view.data())).expect("shape checked");
            }
            Ok(view) => {
                failure = Some(format!(
                    "tensor `{name}` is {:?} {:?}, expected F32 {:?}",
                    view.dtype(),
                    view.shape(),
                    slot.value_mut().shape()
                ))
            }
            Err(_) => failure = Some(format!("missing tensor `{name}`")),
        }
    });
    if let Some(reason) = failure {
        return Err(CheckpointError::Format {
            path: path.to_path_buf(),
            reason,
        });
    }
    Ok((model, info))
}
