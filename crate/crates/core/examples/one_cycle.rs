//! Print the one-cycle learning-rate and momentum schedule.
//!
//! `cargo run --example one_cycle -- 1000`

use polypseg::train::{one_cycle_schedule, warmup_boundary, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let total: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(1000);
    let config = TrainConfig::default();
    println!("peak at step {} of {total}", warmup_boundary(total, config.pct_warmup));
    println!("{:>6} {:>12} {:>9}", "step", "lr", "momentum");
    for step in (0..=total).step_by((total / 20).max(1)) {
        let p = one_cycle_schedule(step, total, &config)?;
        println!("{step:>6} {:>12.4e} {:>9.4}", p.lr, p.momentum);
    }
    Ok(())
}
