//! Save a checkpoint, load it back and predict masks for images on disk.
//!
//! `cargo run --release --example predict_masks -- out_dir`

use std::collections::BTreeMap;

use polypseg::data::{list_image_files, read_rgb_file, synthetic, write_mask_png, NormalizationStats};
use polypseg::metrics::predict_mask;
use polypseg::model::checkpoint::{load_checkpoint, save_checkpoint};
use polypseg::model::{ArchConfig, SegmentationModel, DEFAULT_THRESHOLD};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "predictions".into()));
    let data = out.join("data");
    synthetic::write_dataset(&data, 3, (90, 120), 4)?;

    let model = SegmentationModel::random(&ArchConfig::default().with_input_size(64, 64), 0)?;
    let ckpt = out.join("model.safetensors");
    save_checkpoint(&model, &ckpt, &BTreeMap::new())?;
    let (model, info) = load_checkpoint(&ckpt, None)?;
    println!(
        "checkpoint format {} for input {:?}",
        info.format_version, info.arch.input_size
    );

    let masks = out.join("masks");
    std::fs::create_dir_all(&masks)?;
    for (stem, path) in list_image_files(&data.join("images"))? {
        let image = read_rgb_file(&path)?;
        let mask = predict_mask(&model, &image, &NormalizationStats::IMAGENET, DEFAULT_THRESHOLD)?;
        write_mask_png(&masks.join(format!("{stem}.png")), &mask)?;
        println!("{stem}: {:?} -> {:?}", image.dim(), mask.dim());
    }
    Ok(())
}
