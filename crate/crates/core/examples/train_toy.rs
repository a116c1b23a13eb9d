//! Train on a small synthetic dataset with the full `fit` loop, then write
//! the report plots.
//!
//! `cargo run --release --example train_toy -- out_dir`

use polypseg::data::{split_dataset, synthetic, AugmentationConfig};
use polypseg::model::{build_model, ArchConfig};
use polypseg::report::write_report;
use polypseg::train::{fit, FitOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy_run".into()));
    let size = (64, 64);
    let pairs = synthetic::generate(12, size, 1);
    let (train, val, _) = split_dataset(pairs, 0.75, 0)?;

    let mut model = build_model(&ArchConfig::default().with_input_size(size.0, size.1), 0)?;
    let config = TrainConfig {
        epochs: 8,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let options = FitOptions::new(
        &out,
        AugmentationConfig {
            target_size: size,
            ..Default::default()
        },
    );
    let summary = fit(&mut model, &train, &val, &config, &options)?;
    println!(
        "{} steps, final train loss {:.4}, best validation Dice {:?} (epoch {:?})",
        summary.total_steps, summary.final_train_loss, summary.state.best_validation_dice, summary.best_epoch
    );
    let files = write_report(&out)?;
    println!("{}", std::fs::read_to_string(files.summary)?);
    Ok(())
}
