//! Augment one synthetic image/mask pair a few times and write the results
//! as PNGs for inspection.
//!
//! `cargo run --release --example augment_pair -- out_dir`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use polypseg::data::{augment, synthetic, write_mask_png, write_rgb_png, AugmentationConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "augmented".into()));
    std::fs::create_dir_all(&out)?;
    let pair = synthetic::generate_pair(0, (200, 240), 7);
    let config = AugmentationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    write_rgb_png(&out.join("source.png"), &pair.image)?;
    write_mask_png(&out.join("source_mask.png"), &pair.mask)?;
    for i in 0..6 {
        let a = augment(&pair, &config, &mut rng);
        let fg = a.mask.iter().filter(|&&v| v == 1).count();
        println!("draw {i}: {:?}, {fg} foreground pixels", a.mask.dim());
        write_rgb_png(&out.join(format!("aug{i}.png")), &a.image)?;
        write_mask_png(&out.join(format!("aug{i}_mask.png")), &a.mask)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
