use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use super::{DataError, MASK_THRESHOLD};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Image files (jpg/jpeg/png, case-insensitive) directly inside `dir`,
/// as `(stem, path)` sorted by stem.
pub fn list_image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::Unreadable {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| DataError::Unreadable {
                path: dir.to_path_buf(),
                reason: e.to_string(),
            })?
            .path();
        if !path.is_file() {
            continue;
        }
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned);
        if let (true, Some(stem)) = (is_image, stem) {
            files.push((stem, path));
        }
    }
    files.sort();
    Ok(files)
}

fn open(path: &Path) -> Result<image::DynamicImage, DataError> {
    image::open(path).map_err(|e| DataError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decode an image file as `H x W x 3` RGB.
pub fn read_rgb_file(path: &Path) -> Result<Array3<u8>, DataError> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw()).expect("rgb buffer"))
}

/// Decode a mask file as grayscale and binarise it (`>= 128` is foreground).
pub fn read_mask_file(path: &Path) -> Result<Array2<u8>, DataError> {
    let gray = open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray
        .into_raw()
        .into_iter()
        .map(|v| u8::from(v >= MASK_THRESHOLD))
        .collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("gray buffer"))
}

/// Write a binary mask as an 8-bit single-channel PNG with values 0/255.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let data: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

pub fn write_rgb_png(path: &Path, image: &Array3<u8>) -> Result<(), DataError> {
    let (h, w, _) = image.dim();
    let data = image.as_standard_layout().iter().copied().collect();
    let img = RgbImage::from_raw(w as u32, h as u32, data).expect("buffer matches dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Unwritable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
