use ndarray::{Array4, ArrayD, IxDyn};

use super::{join, standard, Module, Param, TensorMut, TensorRef};

/// Per-channel batch normalisation over `(N, H, W)`.
///
/// Running statistics use exponential averaging with `momentum` (weight of
/// the new batch) and the unbiased batch variance, as in PyTorch.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Array4<f32>, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::filled(&[channels], 1.0),
            bias: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.value.len()
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut y = x.as_standard_layout().into_owned();
        let (_, c, h, w) = y.dim();
        assert_eq!(c, self.channels(), "batch norm channels");
        let plane = h * w;
        let scale: Vec<f32> = (0..c)
            .map(|ch| self.weight.value[ch] / (self.running_var[ch] + self.eps).sqrt())
            .collect();
        let ys = y.as_slice_mut().expect("standard layout");
        for (i, chunk) in ys.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s, b) = (self.running_mean[ch], scale[ch], self.bias.value[ch]);
            for v in chunk {
                *v = (*v - m) * s + b;
            }
        }
        y
    }

    pub fn forward(&mut self, x: Array4<f32>) -> Array4<f32> {
        let mut x = standard(x);
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channels");
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let xs = x.as_slice().expect("standard layout");
        for (i, chunk) in xs.chunks_exact(plane).enumerate() {
            sum[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for (i, chunk) in xs.chunks_exact(plane).enumerate() {
            let m = mean[i % c];
            sq[i % c] += chunk.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
        let inv_std: Vec<f32> = var
            .iter()
            .map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32)
            .collect();

        let xs = x.as_slice_mut().expect("standard layout");
        for (i, chunk) in xs.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (mean[ch] as f32, inv_std[ch]);
            for v in chunk {
                *v = (*v - m) * s;
            }
        }
        let x_hat = x.clone();
        let xs = x.as_slice_mut().expect("standard layout");
        for (i, chunk) in xs.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (g, b) = (self.weight.value[ch], self.bias.value[ch]);
            for v in chunk {
                *v = *v * g + b;
            }
        }

        let mom = self.momentum as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = self.running_mean[ch] as f64;
            let rv = self.running_var[ch] as f64;
            self.running_mean[ch] = ((1.0 - mom) * rm + mom * mean[ch]) as f32;
            self.running_var[ch] = ((1.0 - mom) * rv + mom * var[ch] * unbias) as f32;
        }
        self.cache = Some((x_hat, inv_std));
        x
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (x_hat, inv_std) = self.cache.take().expect("BatchNorm2d::backward without forward");
        let (n, c, h, w) = x_hat.dim();
        let plane = h * w;
        let count = (n * plane) as f64;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xs = x_hat.as_slice().expect("standard layout");

        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (i, (gchunk, xchunk)) in dys.chunks_exact(plane).zip(xs.chunks_exact(plane)).enumerate() {
            let ch = i % c;
            let mut a = 0.0f64;
            let mut b = 0.0f64;
            for (&g, &xh) in gchunk.iter().zip(xchunk) {
                a += g as f64;
                b += g as f64 * xh as f64;
            }
            sum_dy[ch] += a;
            sum_dy_xhat[ch] += b;
        }
        for ch in 0..c {
            self.bias.grad[ch] += sum_dy[ch] as f32;
            self.weight.grad[ch] += sum_dy_xhat[ch] as f32;
        }

        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("standard layout");
        for (i, ((out, gchunk), xchunk)) in dxs
            .chunks_exact_mut(plane)
            .zip(dys.chunks_exact(plane))
            .zip(xs.chunks_exact(plane))
            .enumerate()
        {
            let ch = i % c;
            let k = self.weight.value[ch] as f64 * inv_std[ch] as f64 / count;
            let s_dy = sum_dy[ch];
            let s_dy_xhat = sum_dy_xhat[ch];
            for ((o, &g), &xh) in out.iter_mut().zip(gchunk).zip(xchunk) {
                *o = (k * (count * g as f64 - s_dy - xh as f64 * s_dy_xhat)) as f32;
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        f(&join(prefix, "weight"), TensorRef::Param(&self.weight));
        f(&join(prefix, "bias"), TensorRef::Param(&self.bias));
        f(&join(prefix, "running_mean"), TensorRef::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), TensorRef::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        f(&join(prefix, "weight"), TensorMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), TensorMut::Param(&mut self.bias));
        f(&join(prefix, "running_mean"), TensorMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), TensorMut::Buffer(&mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{dot, random4};

    #[test]
    fn training_output_is_standardised_per_channel() {
        let mut bn = BatchNorm2d::new(3);
        let x = random4((4, 3, 5, 5), 1).mapv(|v| 3.0 * v + 2.0);
        let y = bn.forward(x);
        for ch in 0..3 {
            let vals: Vec<f64> = y.index_axis(ndarray::Axis(1), ch).iter().map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running mean moved 10% of the way towards the batch mean (about 2)
        assert!(bn.running_mean.iter().all(|&m| (m - 0.2).abs() < 0.05));
    }

    #[test]
    fn inference_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(2);
        bn.running_mean[0] = 1.0;
        bn.running_var[0] = 4.0;
        bn.weight.value[0] = 2.0;
        bn.bias.value[0] = 0.5;
        let x = Array4::from_elem((1, 2, 1, 1), 3.0f32);
        let y = bn.infer(&x);
        let expected = (3.0 - 1.0) / (4.0f32 + 1e-5).sqrt() * 2.0 + 0.5;
        assert!((y[[0, 0, 0, 0]] - expected).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.weight.value[0] = 1.5;
        bn.bias.value[1] = -0.3;
        let x = random4((3, 2, 3, 2), 11);
        let g = random4((3, 2, 3, 2), 12);
        let mut probe = bn.clone();
        let _ = probe.forward(x.clone());
        let dx = probe.backward(&g);
        let objective = |x: &Array4<f32>| {
            let mut b = bn.clone();
            dot(&b.forward(x.clone()), &g)
        };
        let eps = 1e-2f32;
        for idx in [(0, 0, 0, 0), (2, 1, 2, 1), (1, 0, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * eps as f64);
            assert!((fd - dx[idx] as f64).abs() < 2e-3, "{idx:?}: {fd} vs {}", dx[idx]);
        }
        let beta_expected: f64 = g.index_axis(ndarray::Axis(1), 1).iter().map(|&v| v as f64).sum();
        assert!((probe.bias.grad[1] as f64 - beta_expected).abs() < 1e-4);
    }
}
