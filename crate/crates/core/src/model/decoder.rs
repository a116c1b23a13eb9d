use ndarray::Array4;
use rand::Rng;

use super::ModelError;
use crate::nn::{
    concat_channels, join, split_channels, BatchNorm2d, Conv2d, ConvTranspose2d, Module, Relu, TensorMut, TensorRef,
};

/// One U-Net decoder stage:
/// transpose-conv (2x) -> concat(skip) -> conv3x3+BN+ReLU -> conv3x3+BN+ReLU.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    upsample: ConvTranspose2d,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    skip_channels: usize,
}

impl DecoderBlock {
    /// `skip_channels == 0` builds a block without a skip connection.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, skip_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            upsample: ConvTranspose2d::new(in_channels, out_channels, 2, rng),
            conv1: Conv2d::new(out_channels + skip_channels, out_channels, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(out_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_channels),
            relu2: Relu::new(),
            skip_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.upsample.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.upsample.out_channels()
    }

    pub fn skip_channels(&self) -> usize {
        self.skip_channels
    }

    fn check(&self, x: &Array4<f32>, skip: Option<&Array4<f32>>) -> Result<(), ModelError> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(ModelError::shape(
                "decoder block input",
                format!("{} channels", self.in_channels()),
                format!("{c} channels"),
            ));
        }
        match (skip, self.skip_channels) {
            (None, 0) => Ok(()),
            (None, sc) => Err(ModelError::shape(
                "decoder skip",
                format!("{sc}-channel skip"),
                "no skip",
            )),
            (Some(s), _) => {
                let expected = (n, self.skip_channels, 2 * h, 2 * w);
                if s.dim() != expected {
                    Err(ModelError::shape(
                        "decoder skip",
                        format!("{expected:?}"),
                        format!("{:?}", s.dim()),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn infer(&self, x: &Array4<f32>, skip: Option<&Array4<f32>>) -> Result<Array4<f32>, ModelError> {
        self.check(x, skip)?;
        let up = self.upsample.infer(x);
        let h = match skip {
            Some(s) => concat_channels(&up, s),
            None => up,
        };
        let h = Relu::infer(self.bn1.infer(&self.conv1.infer(&h)));
        Ok(Relu::infer(self.bn2.infer(&self.conv2.infer(&h))))
    }

    pub fn forward(&mut self, x: Array4<f32>, skip: Option<&Array4<f32>>) -> Result<Array4<f32>, ModelError> {
        self.check(&x, skip)?;
        let up = self.upsample.forward(x);
        let h = match skip {
            Some(s) => concat_channels(&up, s),
            None => up,
        };
        let h = self.relu1.forward(self.bn1.forward(self.conv1.forward(h)));
        Ok(self.relu2.forward(self.bn2.forward(self.conv2.forward(h))))
    }

    /// Returns gradients for the block input and, if present, the skip.
    pub fn backward(&mut self, dy: &Array4<f32>) -> (Array4<f32>, Option<Array4<f32>>) {
        let g = self.relu2.backward(dy);
        let g = self.bn2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.relu1.backward(&g);
        let g = self.bn1.backward(&g);
        let g = self.conv1.backward(&g);
        let (g_up, g_skip) = if self.skip_channels > 0 {
            let (a, b) = split_channels(&g, self.out_channels());
            (a, Some(b))
        } else {
            (g, None)
        };
        (self.upsample.backward(&g_up), g_skip)
    }
}

impl Module for DecoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        self.upsample.visit(&join(prefix, "upsample"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        self.upsample.visit_mut(&join(prefix, "upsample"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}
