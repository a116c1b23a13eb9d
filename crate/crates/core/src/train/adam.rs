use ndarray::{ArrayD, Zip};

use crate::nn::{Module, TensorMut};

/// Adam with a per-step `beta1` (the scheduled momentum) and L2 weight decay
/// folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    /// `(first moment, second moment)` per parameter, in visit order.
    moments: Vec<(ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta2,
            eps,
            weight_decay,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter of `model` from its accumulated
    /// gradients. Buffers (batch-norm running statistics) are not touched.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64, beta1: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2_sqrt = (1.0 - self.beta2.powi(t)).sqrt();
        let step_size = (lr / bias1) as f32;
        let (b1, b2) = (beta1 as f32, self.beta2 as f32);
        let (eps, wd) = (self.eps as f32, self.weight_decay as f32);
        let bias2_sqrt = bias2_sqrt as f32;
        let first_step = self.moments.is_empty();
        let mut index = 0;
        let moments = &mut self.moments;
        model.visit_mut("", &mut |_, t| {
            let TensorMut::Param(p) = t else { return };
            if first_step {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[index];
            index += 1;
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    let g = if wd != 0.0 { g + wd * *w } else { g };
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    if step_size != 0.0 {
                        *w -= step_size * (*m / (v.sqrt() / bias2_sqrt + eps));
                    }
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, TensorRef};

    struct Quadratic {
        w: Param,
    }

    impl Module for Quadratic {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorRef<'_>)) {
            f(prefix, TensorRef::Param(&self.w));
        }

        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorMut<'_>)) {
            f(prefix, TensorMut::Param(&mut self.w));
        }
    }

    /// Scalar reference implementation of the same update rule.
    fn reference(w0: f64, grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t));
            let v_hat = v / (1.0 - beta2.powi(t));
            w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        w
    }

    #[test]
    fn matches_scalar_reference() {
        let mut q = Quadratic {
            w: Param::new(ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.5)),
        };
        let mut opt = Adam::new(0.999, 1e-8, 0.0);
        let grads = [0.3, -0.1, 0.25, 0.05];
        for g in grads {
            q.w.grad.fill(g as f32);
            opt.step(&mut q, 1e-2, 0.9);
        }
        let expected = reference(0.5, &grads, 1e-2, 0.9, 0.999, 1e-8);
        assert!((q.w.value[[0]] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut q = Quadratic {
            w: Param::new(ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.0)),
        };
        q.w.grad.fill(123.0);
        Adam::new(0.999, 1e-8, 0.0).step(&mut q, 0.01, 0.95);
        for v in q.w.value.iter() {
            assert!((v - 0.99).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_bitwise_fixpoint() {
        let values = ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), vec![0.0f32, -0.0, 1e-30, -3.5]).unwrap();
        let mut q = Quadratic {
            w: Param::new(values.clone()),
        };
        q.w.grad = ArrayD::from_shape_vec(ndarray::IxDyn(&[4]), vec![1.0f32, -2.0, 1e20, 0.0]).unwrap();
        let mut opt = Adam::new(0.999, 1e-8, 1e-4);
        opt.step(&mut q, 0.0, 0.9);
        opt.step(&mut q, 0.0, 0.9);
        let bits = |a: &ArrayD<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&q.w.value), bits(&values));
    }
}
