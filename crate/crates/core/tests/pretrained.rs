use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::Dtype;

use polypseg::model::pretrained::{file_checksum, torchvision_name};
use polypseg::model::{build_model, ArchConfig, ModelError, ResNet50};
use polypseg::nn::Module;

/// Write a torchvision-style ResNet50 file, including tensors the loader
/// must ignore (classifier and BN step counters).
fn write_torchvision_file(path: &Path, seed: u64) {
    let encoder = ResNet50::new(3, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    encoder.visit("", &mut |name, t| {
        let v = t.value();
        let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        tensors.push((torchvision_name(name).unwrap(), v.shape().to_vec(), bytes));
    });
    tensors.push(("fc.weight".into(), vec![2, 2048], vec![0; 2 * 2048 * 4]));
    tensors.push(("bn1.num_batches_tracked".into(), vec![], vec![0; 8]));
    let views: HashMap<String, TensorView<'_>> = tensors
        .iter()
        .map(|(name, shape, data)| {
            let dtype = if name.ends_with("num_batches_tracked") {
                Dtype::I64
            } else {
                Dtype::F32
            };
            (name.clone(), TensorView::new(dtype, shape.clone(), data).unwrap())
        })
        .collect();
    safetensors::serialize_to_file(views, None, path).unwrap();
}

fn pretrained_config(path: &Path) -> ArchConfig {
    ArchConfig {
        pretrained: true,
        pretrained_weights: Some(path.to_path_buf()),
        ..ArchConfig::default().with_input_size(64, 64)
    }
}

#[test]
fn loaded_encoder_matches_file_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resnet50.safetensors");
    write_torchvision_file(&path, 17);
    let model = build_model(&pretrained_config(&path), 0).unwrap();
    let expected = file_checksum(&path).unwrap();
    assert_eq!(model.encoder_checksum(), expected);

    // decoder seed does not touch the loaded encoder
    let other = build_model(&pretrained_config(&path), 99).unwrap();
    assert_eq!(other.encoder_checksum(), expected);

    let random = build_model(&ArchConfig::default().with_input_size(64, 64), 0).unwrap();
    assert_ne!(random.encoder_checksum(), expected);
}

#[test]
fn missing_weights_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = build_model(&pretrained_config(&dir.path().join("absent.safetensors")), 0).unwrap_err();
    assert!(matches!(err, ModelError::PretrainedUnavailable(_)), "{err}");

    let no_path = ArchConfig {
        pretrained: true,
        ..ArchConfig::default()
    };
    assert!(matches!(
        build_model(&no_path, 0),
        Err(ModelError::PretrainedUnavailable(_))
    ));
}

#[test]
fn incomplete_weights_file_is_a_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.safetensors");
    let data = vec![0u8; 4 * 64];
    let views = HashMap::from([(
        "bn1.weight".to_string(),
        TensorView::new(Dtype::F32, vec![64], &data).unwrap(),
    )]);
    safetensors::serialize_to_file(views, None, &path).unwrap();
    let err = build_model(&pretrained_config(&path), 0).unwrap_err();
    assert!(matches!(err, ModelError::PretrainedMismatch(_)), "{err}");
}
