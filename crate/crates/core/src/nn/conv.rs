use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, ArrayViewMut3, Axis};
use rand::Rng;

use super::{join, standard, Module, Param, TensorMut, TensorRef};

/// 2-D convolution with square kernel, symmetric zero padding and no dilation.
///
/// Weight layout is `(out_channels, in_channels, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<Array4<f32>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("weight is contiguous")
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let x = x.as_standard_layout();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let wmat = self.weight_matrix();
        let mut y = Array4::<f32>::zeros((n, self.out_channels, oh, ow));
        for (xb, mut yb) in x.outer_iter().zip(y.outer_iter_mut()) {
            let mut ymat = as_matrix_mut(&mut yb);
            if self.is_pointwise() {
                let xmat = xb.into_shape_with_order((c, h * w)).expect("contiguous input");
                general_mat_mul(1.0, &wmat, &xmat, 0.0, &mut ymat);
            } else {
                let cols = im2col(xb, self.kernel, self.stride, self.padding, oh, ow);
                general_mat_mul(1.0, &wmat, &cols, 0.0, &mut ymat);
            }
        }
        if let Some(b) = &self.bias {
            for mut yb in y.outer_iter_mut() {
                for (mut plane, &bv) in yb.outer_iter_mut().zip(b.value.iter()) {
                    plane += bv;
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: Array4<f32>) -> Array4<f32> {
        let x = standard(x);
        let y = self.infer(&x);
        self.cache = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cache.take().expect("Conv2d::backward without forward");
        let (n, c, h, w) = x.dim();
        let (_, co, oh, ow) = dy.dim();
        let k = c * self.kernel * self.kernel;
        let (kernel, stride, padding) = (self.kernel, self.stride, self.padding);
        let pointwise = self.is_pointwise();
        let dy = dy.as_standard_layout();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((co, k))
            .expect("contiguous weight")
            .to_owned();
        {
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((co, k))
                .expect("contiguous grad");
            for b in 0..n {
                let dyb = dy
                    .index_axis(Axis(0), b)
                    .into_shape_with_order((co, oh * ow))
                    .expect("contiguous");
                let xb = x.index_axis(Axis(0), b);
                let mut dxb = dx.index_axis_mut(Axis(0), b);
                if pointwise {
                    let xmat = xb.into_shape_with_order((c, h * w)).expect("contiguous");
                    general_mat_mul(1.0, &dyb, &xmat.t(), 1.0, &mut dw);
                    let mut dxmat = as_matrix_mut(&mut dxb);
                    general_mat_mul(1.0, &wmat.t(), &dyb, 0.0, &mut dxmat);
                } else {
                    let cols = im2col(xb, kernel, stride, padding, oh, ow);
                    general_mat_mul(1.0, &dyb, &cols.t(), 1.0, &mut dw);
                    let mut dcols = Array2::<f32>::zeros((k, oh * ow));
                    general_mat_mul(1.0, &wmat.t(), &dyb, 0.0, &mut dcols);
                    col2im(&dcols, &mut dxb, kernel, stride, padding, oh, ow);
                }
            }
        }
        if let Some(bias) = &mut self.bias {
            for yb in dy.outer_iter() {
                for (plane, g) in yb.outer_iter().zip(bias.grad.iter_mut()) {
                    *g += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        f(&join(prefix, "weight"), TensorRef::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), TensorRef::Param(b));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        f(&join(prefix, "weight"), TensorMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), TensorMut::Param(b));
        }
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// upsampling, no padding). Output is `stride` times larger in each
/// spatial dimension.
///
/// Weight layout is `(in_channels, out_channels, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache: Option<Array4<f32>>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        // Each output pixel receives exactly one tap from every input channel.
        Self {
            weight: Param::kaiming(&[in_channels, out_channels, kernel, kernel], in_channels, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn scale(&self) -> usize {
        self.kernel
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_channels, self.out_channels * self.kernel * self.kernel))
            .expect("weight is contiguous")
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        let x = x.as_standard_layout();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "transpose conv input channels");
        let k = self.kernel;
        let co = self.out_channels;
        let wmat = self.weight_matrix();
        let mut y = Array4::<f32>::zeros((n, co, h * k, w * k));
        let mut z = Array2::<f32>::zeros((co * k * k, h * w));
        for (xb, mut yb) in x.outer_iter().zip(y.outer_iter_mut()) {
            let xmat = xb.into_shape_with_order((c, h * w)).expect("contiguous input");
            general_mat_mul(1.0, &wmat.t(), &xmat, 0.0, &mut z);
            let ys = yb.as_slice_mut().expect("contiguous output");
            let zs = z.as_slice().expect("contiguous");
            let ow = w * k;
            for o in 0..co {
                let bias = self.bias.value[o];
                for ky in 0..k {
                    for kx in 0..k {
                        let zrow = &zs[((o * k + ky) * k + kx) * h * w..][..h * w];
                        for iy in 0..h {
                            let dst = o * h * k * ow + (iy * k + ky) * ow + kx;
                            for ix in 0..w {
                                ys[dst + ix * k] = zrow[iy * w + ix] + bias;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward(&mut self, x: Array4<f32>) -> Array4<f32> {
        let x = standard(x);
        let y = self.infer(&x);
        self.cache = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cache.take().expect("ConvTranspose2d::backward without forward");
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let co = self.out_channels;
        let dy = dy.as_standard_layout();
        let wmat = self.weight_matrix().to_owned();
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let mut dz = Array2::<f32>::zeros((co * k * k, h * w));
        let ow = w * k;
        for b in 0..n {
            let dyb = dy.index_axis(Axis(0), b);
            let ys = dyb.as_slice().expect("contiguous");
            {
                let zs = dz.as_slice_mut().expect("contiguous");
                for o in 0..co {
                    let mut bias_acc = 0.0f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let zrow = &mut zs[((o * k + ky) * k + kx) * h * w..][..h * w];
                            for iy in 0..h {
                                let src = o * h * k * ow + (iy * k + ky) * ow + kx;
                                for ix in 0..w {
                                    let v = ys[src + ix * k];
                                    zrow[iy * w + ix] = v;
                                    bias_acc += v as f64;
                                }
                            }
                        }
                    }
                    self.bias.grad[o] += bias_acc as f32;
                }
            }
            let xmat = x
                .index_axis(Axis(0), b)
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((c, co * k * k))
                .expect("contiguous grad");
            general_mat_mul(1.0, &xmat, &dz.t(), 1.0, &mut dw);
            let mut dxb = dx.index_axis_mut(Axis(0), b);
            let mut dxmat = as_matrix_mut(&mut dxb);
            general_mat_mul(1.0, &wmat, &dz, 0.0, &mut dxmat);
        }
        dx
    }
}

impl Module for ConvTranspose2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
        f(&join(prefix, "weight"), TensorRef::Param(&self.weight));
        f(&join(prefix, "bias"), TensorRef::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
        f(&join(prefix, "weight"), TensorMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), TensorMut::Param(&mut self.bias));
    }
}

fn as_matrix_mut<'a>(x: &'a mut ArrayViewMut3<'_, f32>) -> ArrayViewMut2<'a, f32> {
    let (c, h, w) = x.dim();
    x.view_mut().into_shape_with_order((c, h * w)).expect("contiguous")
}

/// Output columns `ox` for which `ox * stride + kx - pad` lands inside `[0, w)`.
fn valid_range(w: usize, ow: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kx {
        (w + pad - kx).div_ceil(stride).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold `(c, h, w)` into a `(c * k * k, oh * ow)` patch matrix.
fn im2col(x: ArrayView3<'_, f32>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("contiguous input");
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    let out = cols.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        let plane = &xs[ci * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                let (lo, hi) = valid_range(w, ow, kx, stride, pad);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * ow..][..ow];
                    if stride == 1 {
                        let start = lo + kx - pad;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
fn col2im(
    cols: &Array2<f32>,
    dx: &mut ArrayViewMut3<'_, f32>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = dx.dim();
    let cs = cols.as_slice().expect("contiguous");
    let out = dx.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        let plane = &mut out[ci * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cs[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                let (lo, hi) = valid_range(w, ow, kx, stride, pad);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * ow..][..ow];
                    for ox in lo..hi {
                        dst[ox * stride + kx - pad] += src[ox];
                    }
                }
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

    /// Direct six-loop convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = conv.output_hw(h, w);
        let k = conv.kernel;
        let wt = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = Array4::<f32>::zeros((n, conv.out_channels, oh, ow));
        for b in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o] as f64);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[o, ci, ky, kx]] as f64 * x[[b, ci, iy as usize, ix as usize]] as f64;
                                    }
                                }
                            }
                        }
                        y[[b, o, oy, ox]] = acc as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0)] {
            let conv = Conv2d::new(3, 5, k, s, p, true, &mut rng);
            let x = random4((2, 3, 9, 8), 7);
            let y = conv.infer(&x);
            let r = naive_conv(&conv, &x);
            assert_eq!(y.dim(), r.dim());
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-4, "k{k} s{s} p{p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, true, &mut rng);
            let x = random4((2, 2, 6, 5), 3);
            let y = conv.forward(x.clone());
            let g = random4(y.dim(), 4);
            let dx = conv.backward(&g);
            // The objective is linear in x and in the weights, so a unit
            // central difference is exact up to rounding.
            let objective = |c: &Conv2d, x: &Array4<f32>| dot(&c.infer(x), &g);
            for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 4), (1, 0, 2, 1)] {
                let mut xp = x.clone();
                xp[idx] += 1.0;
                let mut xm = x.clone();
                xm[idx] -= 1.0;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / 2.0;
                assert!((fd - dx[idx] as f64).abs() < 1e-3, "dx {idx:?}: {fd} vs {}", dx[idx]);
            }
            for flat in [0usize, conv.weight.value.len() / 2, conv.weight.value.len() - 1] {
                let mut cp = conv.clone();
                cp.weight.value.as_slice_mut().unwrap()[flat] += 1.0;
                let mut cm = conv.clone();
                cm.weight.value.as_slice_mut().unwrap()[flat] -= 1.0;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / 2.0;
                let an = conv.weight.grad.as_slice().unwrap()[flat] as f64;
                assert!((fd - an).abs() < 1e-3, "dw[{flat}]: {fd} vs {an}");
            }
            let bias_fd: f64 = g.index_axis(Axis(1), 1).iter().map(|&v| v as f64).sum();
            assert!((bias_fd - conv.bias.as_ref().unwrap().grad[1] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn transpose_conv_doubles_resolution_and_matches_scatter_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut up = ConvTranspose2d::new(4, 3, 2, &mut rng);
        up.bias.value[1] = 0.5;
        let x = random4((2, 4, 3, 5), 9);
        let y = up.infer(&x);
        assert_eq!(y.dim(), (2, 3, 6, 10));
        let wt = up.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for b in 0..2 {
            for o in 0..3 {
                for yy in 0..6 {
                    for xx in 0..10 {
                        let mut acc = up.bias.value[o] as f64;
                        for ci in 0..4 {
                            acc += wt[[ci, o, yy % 2, xx % 2]] as f64 * x[[b, ci, yy / 2, xx / 2]] as f64;
                        }
                        assert!((acc as f32 - y[[b, o, yy, xx]]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut up = ConvTranspose2d::new(3, 2, 2, &mut rng);
        let x = random4((2, 3, 4, 3), 6);
        let y = up.forward(x.clone());
        let g = random4(y.dim(), 8);
        let dx = up.backward(&g);
        let objective = |u: &ConvTranspose2d, x: &Array4<f32>| dot(&u.infer(x), &g);
        for idx in [(0, 0, 0, 0), (1, 2, 3, 2), (0, 1, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += 1.0;
            let mut xm = x.clone();
            xm[idx] -= 1.0;
            let fd = (objective(&up, &xp) - objective(&up, &xm)) / 2.0;
            assert!((fd - dx[idx] as f64).abs() < 1e-3);
        }
        for flat in [0usize, 5, up.weight.value.len() - 1] {
            let mut p = up.clone();
            p.weight.value.as_slice_mut().unwrap()[flat] += 1.0;
            let mut m = up.clone();
            m.weight.value.as_slice_mut().unwrap()[flat] -= 1.0;
            let fd = (objective(&p, &x) - objective(&m, &x)) / 2.0;
            assert!((fd - up.weight.grad.as_slice().unwrap()[flat] as f64).abs() < 1e-3);
        }
        let bias_fd: f64 = g.index_axis(Axis(1), 0).iter().map(|&v| v as f64).sum();
        assert!((bias_fd - up.bias.grad[0] as f64).abs() < 1e-3);
    }
}
