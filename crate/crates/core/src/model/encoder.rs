//! ResNet50 (v1.5: stride on the 3x3 convolution) feature extractor.

use ndarray::Array4;
use rand::Rng;

use crate::nn::{join, BatchNorm2d, Conv2d, MaxPool2d, Module, Relu, TensorMut, TensorRef};

/// Blocks per residual stage and bottleneck widths of ResNet50.
pub const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;

/// Output channels of the stem and the four residual stages.
pub const STAGE_CHANNELS: [usize; 5] = [64, 256, 512, 1024, 2048];
/// Output stride, relative to the input image, of the same five maps.
pub const STAGE_STRIDES: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Debug, Clone)]
struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// 1x1 reduce, 3x3 (strided), 1x1 expand, plus identity or projection shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<Downsample>,
    relu_out: Relu,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let out = width * EXPANSION;
        let downsample = (stride != 1 || in_channels != out).then(|| Downsample {
            conv: Conv2d::new(in_channels, out, 1, stride, 0, false, rng),
            bn: BatchNorm2d::new(out),
        });
        Self {
            conv1: Conv2d::new(in_channels, width, 1, 1, 0, false, rng),
            bn1: BatchNorm2d::new(width),
            relu1: Relu::new(),
            conv2: Conv2d::new(width, width, 3, stride, 1, false, rng),
            bn2: BatchNorm2d::new(width),
            relu2: Relu::new(),
            conv3: Conv2d::new(width, out, 1, 1, 0, false, rng),
            bn3: BatchNorm2d::new(out),
            downsample,
            relu_out: Relu::new(),
        }
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let h = Relu::infer(self.bn1.infer(&self.conv1.infer(x)));
        let h = Relu::infer(self.bn2.infer(&self.conv2.infer(&h)));
        let mut h = self.bn3.infer(&self.conv3.infer(&h));
        match &self.downsample {
            Some(d) => h += &d.bn.infer(&d.conv.infer(x)),
            None => h += x,
        }
        Relu::infer(h)
    }

    pub fn forward(&mut self, x: Array4<f32>) -> Array4<f32> {
        let shortcut = match &mut self.downsample {
            Some(d) => d.bn.forward(d.conv.forward(x.clone())),
            None => x.clone(),
        };
        let h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)));
        let h = self.relu2.forward(self.bn2.forward(self.conv2.forward(h)));
        let mut h = self.bn3.forward(self.conv3.forward(h));
        h += &shortcut;
        self.relu_out.forward(h)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let d_sum = self.relu_out.backward(dy);
        let g = self.bn3.backward(&d_sum);
        let g = self.conv3.backward(&g);
        let g = self.relu2.backward(&g);
        let g = self.bn2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        match &mut self.downsample {
            Some(d) => {
                let gs = d.bn.backward(&d_sum);
                dx += &d.conv.backward(&gs);
            }
            None => dx += &d_sum,
        }
        dx
    }
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some(d) = &self.downsample {
            d.conv.visit(&join(prefix, "downsample.conv"), f);
            d.bn.visit(&join(prefix, "downsample.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        if let Some(d) = &mut self.downsample {
            d.conv.visit_mut(&join(prefix, "downsample.conv"), f);
            d.bn.visit_mut(&join(prefix, "downsample.bn"), f);
        }
    }
}

/// Stem (7x7/2 conv, BN, ReLU) followed by a 3x3/2 max pool and four
/// bottleneck stages. Produces the stem activation and every stage output.
#[derive(Debug, Clone)]
pub struct ResNet50 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_relu: Relu,
    pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck>>,
}

/// Stem activation followed by the four stage outputs, finest first.
pub type StageOutputs = [Array4<f32>; 5];

impl ResNet50 {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut channels = 64;
        for (i, (&blocks, &width)) in STAGE_BLOCKS.iter().zip(STAGE_WIDTHS.iter()).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let mut stage = Vec::with_capacity(blocks);
            for b in 0..blocks {
                stage.push(Bottleneck::new(channels, width, if b == 0 { stride } else { 1 }, rng));
                channels = width * EXPANSION;
            }
            stages.push(stage);
        }
        Self {
            stem_conv: Conv2d::new(in_channels, 64, 7, 2, 3, false, rng),
            stem_bn: BatchNorm2d::new(64),
            stem_relu: Relu::new(),
            pool: MaxPool2d::new(3, 2, 1),
            stages,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.stem_conv.in_channels()
    }

    pub fn infer(&self, x: &Array4<f32>) -> StageOutputs {
        let stem = Relu::infer(self.stem_bn.infer(&self.stem_conv.infer(x)));
        let mut h = self.pool.infer(&stem);
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.infer(&h);
            }
            outs.push(h.clone());
        }
        let [s1, s2, s3, s4]: [Array4<f32>; 4] = outs.try_into().expect("four stages");
        [stem, s1, s2, s3, s4]
    }

    pub fn forward(&mut self, x: Array4<f32>) -> StageOutputs {
        let stem = self.stem_relu.forward(self.stem_bn.forward(self.stem_conv.forward(x)));
        let mut h = self.pool.forward(stem.clone());
        let mut outs = Vec::with_capacity(4);
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                h = block.forward(h);
            }
            outs.push(h.clone());
        }
        let [s1, s2, s3, s4]: [Array4<f32>; 4] = outs.try_into().expect("four stages");
        [stem, s1, s2, s3, s4]
    }

    /// Backpropagate gradients arriving at each of the five outputs. A
    /// `None` entry means that output received no gradient.
    pub fn backward(&mut self, grads: [Option<Array4<f32>>; 5]) -> Array4<f32> {
        let [g_stem, g1, g2, g3, g4] = grads;
        let stage_grads = [g1, g2, g3, g4];
        let mut carry: Option<Array4<f32>> = None;
        for (stage, g_out) in self.stages.iter_mut().zip(stage_grads).rev() {
            let mut g = add_opt(carry.take(), g_out).expect("bottleneck output needs a gradient");
            for block in stage.iter_mut().rev() {
                g = block.backward(&g);
            }
            carry = Some(g);
        }
        let g = self.pool.backward(&carry.expect("four stages"));
        let g = add_opt(Some(g), g_stem).expect("present");
        let g = self.stem_relu.backward(&g);
        let g = self.stem_bn.backward(&g);
        self.stem_conv.backward(&g)
    }
}

fn add_opt(a: Option<Array4<f32>>, b: Option<Array4<f32>>) -> Option<Array4<f32>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a += &b;
            Some(a)
        }
        (a, b) => a.or(b),
    }
}

impl Module for ResNet50 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.stem_conv.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.block{b}", s + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.stem_conv.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.block{b}", s + 1)), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{dot, random4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bottleneck_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for stride in [1, 2] {
            let block = Bottleneck::new(8, 4, stride, &mut rng);
            let x = random4((2, 8, 6, 6), 21);
            let mut probe = block.clone();
            let y = probe.forward(x.clone());
            let g = random4(y.dim(), 22);
            let dx = probe.backward(&g);
            let objective = |x: &Array4<f32>| dot(&block.clone().forward(x.clone()), &g);
            let eps = 1e-2;
            for idx in [(0, 0, 0, 0), (1, 5, 3, 4), (0, 7, 5, 5)] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let fd = (objective(&xp) - objective(&xm)) / (2.0 * eps as f64);
                let tol = 2e-2 * (1.0 + fd.abs());
                assert!(
                    (fd - dx[idx] as f64).abs() < tol,
                    "stride {stride} {idx:?}: {fd} vs {}",
                    dx[idx]
                );
            }
        }
    }

    #[test]
    fn parameter_count_matches_resnet50_without_classifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ResNet50::new(3, &mut rng);
        // 25,557,032 total minus the 2048x1000 + 1000 classifier
        assert_eq!(enc.num_params(), 25_557_032 - 2_049_000);
    }
}
