use ndarray::Array4;

/// Input shape and the flat input index of each output's maximum.
type ArgmaxCache = ((usize, usize, usize, usize), Vec<u32>);

/// Max pooling with a square window; padded positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ArgmaxCache>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    fn pool(&self, x: &Array4<f32>, mut record: Option<&mut Vec<u32>>) -> Array4<f32> {
        let x = x.as_standard_layout();
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<f32>::zeros((n, c, oh, ow));
        let ys = y.as_slice_mut().expect("standard layout");
        for p in 0..n * c {
            let plane = &xs[p * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0usize;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                arg = idx;
                            }
                        }
                    }
                    ys[(p * oh + oy) * ow + ox] = best;
                    if let Some(r) = record.as_deref_mut() {
                        r.push(arg as u32);
                    }
                }
            }
        }
        y
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array4<f32> {
        self.pool(x, None)
    }

    pub fn forward(&mut self, x: Array4<f32>) -> Array4<f32> {
        let mut arg = Vec::new();
        let y = self.pool(&x, Some(&mut arg));
        self.cache = Some((x.dim(), arg));
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (dim, arg) = self.cache.take().expect("MaxPool2d::backward without forward");
        let (_, _, h, w) = dim;
        let (_, _, oh, ow) = dy.dim();
        let dy = dy.as_standard_layout();
        let gs = dy.as_slice().expect("standard layout");
        let mut dx = Array4::<f32>::zeros(dim);
        let dxs = dx.as_slice_mut().expect("standard layout");
        for (i, (&g, &a)) in gs.iter().zip(arg.iter()).enumerate() {
            let p = i / (oh * ow);
            dxs[p * h * w + a as usize] += g;
        }
        dx
    }
}
