//! Build the network and print its feature-map shapes and parameter count.
//!
//! `cargo run --release --example build_model -- 256 320`

use ndarray::Array4;
use polypseg::model::{ArchConfig, SegmentationModel};
use polypseg::nn::Module;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let (h, w) = match dims.as_slice() {
        [h, w] => (*h, *w),
        _ => (256, 256),
    };
    let model = SegmentationModel::random(&ArchConfig::default().with_input_size(h, w), 0)?;

    let mut params = 0;
    model.visit("", &mut |_, t| {
        if t.is_param() {
            params += t.value().len();
        }
    });
    println!("input 3x{h}x{w}, {params} trainable parameters");

    let x = Array4::<f32>::zeros((1, 3, h, w));
    let taps = model.encode(x.index_axis(ndarray::Axis(0), 0))?;
    for (i, skip) in taps.skips.iter().enumerate() {
        println!("skip {i}: {:?}", skip.dim());
    }
    println!("bottleneck: {:?}", taps.bottleneck.dim());
    println!("output: {:?}", model.forward(&x)?.probabilities.dim());
    Ok(())
}
