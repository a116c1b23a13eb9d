use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{list_image_files, read_mask_file, read_rgb_file};
use super::{DataError, SamplePair};

fn index_by_stem(files: Vec<(String, PathBuf)>) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut map = BTreeMap::new();
    for (stem, path) in files {
        if map.insert(stem.clone(), path).is_some() {
            return Err(DataError::DuplicateId(stem));
        }
    }
    Ok(map)
}

/// Load every `images/<id>.*` / `masks/<id>.*` pair under `root`, sorted by id.
///
/// Mask files are binarised with the `>= 128` rule. Any image without a
/// mask (or mask without an image) is an error that lists every orphan.
pub fn load_dataset(root: &Path) -> Result<Vec<SamplePair>, DataError> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !images_dir.is_dir() || !masks_dir.is_dir() {
        return Err(DataError::Layout(root.to_path_buf()));
    }
    let images = index_by_stem(list_image_files(&images_dir)?)?;
    let masks = index_by_stem(list_image_files(&masks_dir)?)?;

    let orphan_images: Vec<&str> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(String::as_str)
        .collect();
    let orphan_masks: Vec<&str> = masks
        .keys()
        .filter(|k| !images.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !orphan_images.is_empty() || !orphan_masks.is_empty() {
        return Err(DataError::Orphans {
            images: orphan_images.join(", "),
            masks: orphan_masks.join(", "),
        });
    }
    if images.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }

    images
        .into_iter()
        .map(|(id, image_path)| {
            let image = read_rgb_file(&image_path)?;
            let mask = read_mask_file(&masks[&id])?;
            SamplePair::new(id, image, mask)
        })
        .collect()
}

/// Binarised masks from a flat directory of mask files, keyed by stem. If
/// `dir` holds a `masks/` subdirectory (dataset layout), that is used.
pub fn load_mask_dir(dir: &Path) -> Result<BTreeMap<String, Array2<u8>>, DataError> {
    let dir = if dir.join("masks").is_dir() {
        dir.join("masks")
    } else {
        dir.to_path_buf()
    };
    if !dir.is_dir() {
        return Err(DataError::Unreadable {
            path: dir,
            reason: "not a directory".into(),
        });
    }
    index_by_stem(list_image_files(&dir)?)?
        .into_iter()
        .map(|(id, path)| Ok((id, read_mask_file(&path)?)))
        .collect()
}

/// Persisted record of a train/validation partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_fraction: f64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises");
        crate::model::checkpoint::write_atomic(path, json.as_bytes()).map_err(|e| DataError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let unreadable = |reason: String| DataError::Unreadable {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| unreadable(e.to_string()))
    }
}

/// Seeded random partition into `(train, validation)`.
///
/// The train side gets `round(n * train_fraction)` samples, clamped so both
/// sides are non-empty. Each side keeps the input (id) order.
pub fn split_dataset(
    pairs: Vec<SamplePair>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SamplePair>, Vec<SamplePair>, SplitManifest), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = pairs.len();
    if n < 2 {
        return Err(DataError::Config(format!("need at least 2 samples to split, got {n}")));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, validation): (Vec<_>, Vec<_>) = pairs.into_iter().zip(is_train).partition(|(_, t)| *t);
    let train: Vec<SamplePair> = train.into_iter().map(|(p, _)| p).collect();
    let validation: Vec<SamplePair> = validation.into_iter().map(|(p, _)| p).collect();
    let manifest = SplitManifest {
        seed,
        train_fraction,
        train: train.iter().map(|p| p.id.clone()).collect(),
        validation: validation.iter().map(|p| p.id.clone()).collect(),
    };
    Ok((train, validation, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::write_rgb_png;
    use crate::data::synthetic;
    use image::GrayImage;
    use ndarray::Array3;
    use std::collections::BTreeSet;

    fn pairs(n: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| SamplePair::new(format!("s{i:02}"), Array3::zeros((2, 2, 3)), Array2::zeros((2, 2))).unwrap())
            .collect()
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let (train, val, manifest) = split_dataset(pairs(10), 0.8, 17).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let t: BTreeSet<_> = manifest.train.iter().collect();
        let v: BTreeSet<_> = manifest.validation.iter().collect();
        assert!(t.is_disjoint(&v));
        assert_eq!(t.len() + v.len(), 10);
        let (_, _, again) = split_dataset(pairs(10), 0.8, 17).unwrap();
        assert_eq!(manifest, again);
        let (_, _, other) = split_dataset(pairs(10), 0.8, 18).unwrap();
        assert_ne!(manifest.validation, other.validation);
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_datasets() {
        assert!(split_dataset(pairs(10), 1.0, 0).is_err());
        assert!(split_dataset(pairs(10), 0.0, 0).is_err());
        assert!(split_dataset(pairs(1), 0.5, 0).is_err());
        let (t, v, _) = split_dataset(pairs(2), 0.99, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
    }

    #[test]
    fn loads_sorted_pairs_and_binarises_masks() {
        let dir = tempfile::tempdir().unwrap();
        synthetic::write_dataset(dir.path(), 4, (32, 32), 3).unwrap();
        // overwrite one mask with the boundary grey levels
        let grey = GrayImage::from_raw(2, 2, vec![0, 127, 128, 255]).unwrap();
        let img = Array3::<u8>::from_elem((2, 2, 3), 9);
        write_rgb_png(&dir.path().join("images/zz.png"), &img).unwrap();
        grey.save(dir.path().join("masks/zz.png")).unwrap();

        let loaded = load_dataset(dir.path()).unwrap();
        let ids: Vec<_> = loaded.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["sample_000", "sample_001", "sample_002", "sample_003", "zz"]);
        assert_eq!(loaded[4].mask.iter().copied().collect::<Vec<_>>(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn orphans_are_all_reported() {
        let dir = tempfile::tempdir().unwrap();
        synthetic::write_dataset(dir.path(), 2, (32, 32), 3).unwrap();
        let img = Array3::<u8>::zeros((2, 2, 3));
        write_rgb_png(&dir.path().join("images/a.png"), &img).unwrap();
        write_rgb_png(&dir.path().join("masks/b.png"), &img).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        match &err {
            DataError::Orphans { images, masks } => {
                assert_eq!(images, "a");
                assert_eq!(masks, "b");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_directories_and_empty_dataset_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Layout(_))));
        std::fs::create_dir(dir.path().join("images")).unwrap();
        std::fs::create_dir(dir.path().join("masks")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Empty(_))));
    }

    #[test]
    fn corrupt_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        synthetic::write_dataset(dir.path(), 1, (32, 32), 3).unwrap();
        std::fs::write(dir.path().join("images/sample_000.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("sample_000.png"), "{err}");
    }
}
