//! Score a handful of hand-made masks and print the per-image table.

use std::collections::BTreeMap;

use ndarray::{array, Array2};
use polypseg::metrics::{evaluate_masks, Aggregation, MetricOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gt: BTreeMap<String, Array2<u8>> = BTreeMap::from([
        ("exact".into(), array![[1, 1], [0, 0]]),
        ("half".into(), array![[1, 0], [0, 0]]),
        ("missed".into(), array![[0, 0], [0, 1]]),
        ("empty".into(), array![[0, 0], [0, 0]]),
    ]);
    let pred = BTreeMap::from([
        ("exact".into(), array![[1, 1], [0, 0]]),
        ("half".into(), array![[1, 1], [0, 0]]),
        ("missed".into(), array![[0, 0], [0, 0]]),
        ("empty".into(), array![[0, 0], [0, 0]]),
    ]);
    for aggregation in [Aggregation::PerImageMean, Aggregation::GlobalCounts] {
        let options = MetricOptions {
            aggregation,
            ..MetricOptions::default()
        };
        let report = evaluate_masks(&pred, &gt, &options)?;
        println!("aggregation: {aggregation}");
        print!("{}", report.table());
        println!();
    }
    Ok(())
}
