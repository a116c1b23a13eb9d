//! Load ImageNet ResNet50 weights (torchvision names, safetensors) into the
//! encoder and confirm the loaded tensors hash to the same digest as the file.
//!
//! `cargo run --release --example pretrained_checksum -- resnet50.safetensors`

use polypseg::model::pretrained::file_checksum;
use polypseg::model::{build_model, ArchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: pretrained_checksum <resnet50.safetensors>");
        std::process::exit(1);
    };
    let config = ArchConfig {
        pretrained: true,
        pretrained_weights: Some(path.clone().into()),
        ..ArchConfig::default()
    };
    let model = build_model(&config, 0)?;
    let loaded = model.encoder_checksum();
    let file = file_checksum(path.as_ref())?;
    println!("file    {file}\nencoder {loaded}");
    if loaded != file {
        return Err("encoder weights differ from the file".into());
    }
    println!("match");
    Ok(())
}
