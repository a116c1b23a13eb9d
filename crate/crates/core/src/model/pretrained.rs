//! Import of ImageNet ResNet50 weights published under torchvision names
//! (`conv1.weight`, `layer3.4.bn2.running_var`, `layer2.0.downsample.0.weight`, ...),
//! e.g. the `model.safetensors` of the torchvision/timm `resnet50` checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use super::checkpoint::{f32_from_le_bytes, f32_to_le_bytes};
use super::{ModelError, ResNet50};
use crate::nn::Module;

/// Map an encoder tensor name (relative to the encoder, e.g.
/// `stage2.block0.downsample.conv.weight`) to its torchvision name
/// (`layer2.0.downsample.0.weight`).
pub fn torchvision_name(name: &str) -> Option<String> {
    if let Some(rest) = name.strip_prefix("stem.conv.") {
        return Some(format!("conv1.{rest}"));
    }
    if let Some(rest) = name.strip_prefix("stem.bn.") {
        return Some(format!("bn1.{rest}"));
    }
    let rest = name.strip_prefix("stage")?;
    let (stage, rest) = rest.split_once('.')?;
    let rest = rest.strip_prefix("block")?;
    let (block, rest) = rest.split_once('.')?;
    let rest = rest
        .replacen("downsample.conv.", "downsample.0.", 1)
        .replacen("downsample.bn.", "downsample.1.", 1);
    Some(format!("layer{stage}.{block}.{rest}"))
}

/// Tensors that belong to the feature extractor in a torchvision ResNet50
/// checkpoint: everything except the classifier and BN step counters.
fn is_encoder_tensor(name: &str) -> bool {
    (name.starts_with("conv1.") || name.starts_with("bn1.") || name.starts_with("layer"))
        && !name.ends_with("num_batches_tracked")
}

fn read_file(path: &Path) -> Result<Vec<u8>, ModelError> {
    std::fs::read(path).map_err(|e| ModelError::PretrainedUnavailable(format!("cannot read {}: {e}", path.display())))
}

fn parse<'a>(bytes: &'a [u8], path: &Path) -> Result<SafeTensors<'a>, ModelError> {
    SafeTensors::deserialize(bytes)
        .map_err(|e| ModelError::PretrainedUnavailable(format!("{} is not a safetensors file: {e}", path.display())))
}

/// Overwrite every encoder parameter and running statistic with the
/// corresponding tensor from `path`. Every encoder tensor must be present
/// with matching shape and `f32` dtype.
pub fn load_encoder_weights(encoder: &mut ResNet50, path: &Path) -> Result<(), ModelError> {
    let bytes = read_file(path)?;
    let st = parse(&bytes, path)?;
    let mut failure = None;
    encoder.visit_mut("", &mut |name, mut slot| {
        if failure.is_some() {
            return;
        }
        let tv_name = torchvision_name(name).expect("every encoder tensor has a torchvision name");
        let result = st
            .tensor(&tv_name)
            .map_err(|_| ModelError::PretrainedMismatch(format!("missing tensor `{tv_name}`")))
            .and_then(|view| {
                if view.dtype() != Dtype::F32 {
                    return Err(ModelError::PretrainedMismatch(format!(
                        "`{tv_name}` has dtype {:?}, expected F32",
                        view.dtype()
                    )));
                }
                let target = slot.value_mut();
                if view.shape() != target.shape() {
                    return Err(ModelError::PretrainedMismatch(format!(
                        "`{tv_name}` has shape {:?}, expected {:?}",
                        view.shape(),
                        target.shape()
                    )));
                }
                let data = f32_from_le_bytes(view.data());
                *target = ArrayD::from_shape_vec(IxDyn(view.shape()), data).expect("shape checked above");
                Ok(())
            });
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    failure.map_or(Ok(()), Err)
}

fn digest(tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)>) -> String {
    let mut hasher = Sha256::new();
    for (name, (shape, data)) in tensors {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((shape.len() as u64).to_le_bytes());
        for d in shape {
            hasher.update((d as u64).to_le_bytes());
        }
        hasher.update(&data);
    }
    hex::encode(hasher.finalize())
}

/// SHA-256 over the encoder's parameters and running statistics, keyed by
/// torchvision names in lexicographic order (name, shape, little-endian data).
pub fn encoder_checksum(encoder: &ResNet50) -> String {
    let mut tensors = BTreeMap::new();
    encoder.visit("", &mut |name, t| {
        let tv_name = torchvision_name(name).expect("every encoder tensor has a torchvision name");
        let v = t.value();
        tensors.insert(tv_name, (v.shape().to_vec(), f32_to_le_bytes(v)));
    });
    digest(tensors)
}

/// Same digest as [`encoder_checksum`], computed straight from a checkpoint
/// file's feature-extractor tensors.
pub fn file_checksum(path: &Path) -> Result<String, ModelError> {
    let bytes = read_file(path)?;
    let st = parse(&bytes, path)?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    for (name, view) in st.tensors() {
        if is_encoder_tensor(&name) {
            tensors.insert(name, (view.shape().to_vec(), view.data().to_vec()));
        }
    }
    Ok(digest(tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_encoder_names_to_torchvision() {
        assert_eq!(torchvision_name("stem.conv.weight").unwrap(), "conv1.weight");
        assert_eq!(torchvision_name("stem.bn.running_mean").unwrap(), "bn1.running_mean");
        assert_eq!(
            torchvision_name("stage3.block4.bn2.running_var").unwrap(),
            "layer3.4.bn2.running_var"
        );
        assert_eq!(
            torchvision_name("stage2.block0.downsample.conv.weight").unwrap(),
            "layer2.0.downsample.0.weight"
        );
        assert_eq!(
            torchvision_name("stage4.block0.downsample.bn.bias").unwrap(),
            "layer4.0.downsample.1.bias"
        );
        assert!(torchvision_name("head.weight").is_none());
    }

    #[test]
    fn classifier_and_counters_are_not_encoder_tensors() {
        assert!(is_encoder_tensor("layer1.0.conv1.weight"));
        assert!(!is_encoder_tensor("fc.weight"));
        assert!(!is_encoder_tensor("bn1.num_batches_tracked"));
    }
}
