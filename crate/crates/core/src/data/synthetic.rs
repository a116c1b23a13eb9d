//! Procedural polyp-like image/mask pairs for demos and tests: a textured
//! pink mucosa background with one darker elliptical lesion.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{derive_seed, write_mask_png, write_rgb_png, DataError, SamplePair};

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:03}")
}

/// Pair number `index` of the stream identified by `seed`.
pub fn generate_pair(index: usize, size: (usize, usize), seed: u64) -> SamplePair {
    let (h, w) = size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[index as u64]));
    let (hf, wf) = (h as f64, w as f64);
    let cy = hf * rng.random_range(0.3..0.7);
    let cx = wf * rng.random_range(0.3..0.7);
    let ry = hf * rng.random_range(0.12..0.28);
    let rx = wf * rng.random_range(0.12..0.28);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());

    let base = [
        rng.random_range(200.0..235.0),
        rng.random_range(120.0..150.0),
        rng.random_range(110.0..140.0),
    ];
    let lesion = [
        rng.random_range(140.0..175.0),
        rng.random_range(40.0..70.0),
        rng.random_range(45.0..75.0),
    ];
    let freq = [rng.random_range(1.0..4.0), rng.random_range(1.0..4.0)];
    let phase = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let noise = Normal::new(0.0, 6.0).expect("valid normal");

    let mut mask = Array2::<u8>::zeros((h, w));
    let mut image = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let (u, v) = ((ct * dx + st * dy) / rx, (-st * dx + ct * dy) / ry);
            let r2 = u * u + v * v;
            let inside = r2 <= 1.0;
            mask[[y, x]] = u8::from(inside);
            let texture = 12.0
                * ((freq[0] * x as f64 / wf * std::f64::consts::TAU + phase[0]).sin()
                    + (freq[1] * y as f64 / hf * std::f64::consts::TAU + phase[1]).cos());
            for c in 0..3 {
                let v = if inside {
                    lesion[c] + 25.0 * (1.0 - r2) - 10.0
                } else {
                    base[c] + texture
                };
                image[[y, x, c]] = (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    SamplePair::new(sample_id(index), image, mask).expect("generated pair is consistent")
}

pub fn generate(n: usize, size: (usize, usize), seed: u64) -> Vec<SamplePair> {
    (0..n).map(|i| generate_pair(i, size, seed)).collect()
}

/// Write `n` generated pairs as `root/images/<id>.png` and `root/masks/<id>.png`.
pub fn write_dataset(root: &Path, n: usize, size: (usize, usize), seed: u64) -> Result<Vec<SamplePair>, DataError> {
    let pairs = generate(n, size, seed);
    for dir in ["images", "masks"] {
        let path = root.join(dir);
        std::fs::create_dir_all(&path).map_err(|e| DataError::Unwritable {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    }
    for p in &pairs {
        write_rgb_png(&root.join("images").join(format!("{}.png", p.id)), &p.image)?;
        write_mask_png(&root.join("masks").join(format!("{}.png", p.id)), &p.mask)?;
    }
    Ok(pairs)
}
