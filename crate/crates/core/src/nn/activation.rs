use ndarray::Array4;

use super::standard;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Array4<f32>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(x: Array4<f32>) -> Array4<f32> {
        x.mapv_into(|v| v.max(0.0))
    }

    pub fn forward(&mut self, x: Array4<f32>) -> Array4<f32> {
        let y = Self::infer(standard(x));
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let y = self.cache.take().expect("Relu::backward without forward");
        let mut dx = dy.as_standard_layout().into_owned();
        dx.zip_mut_with(&y, |g, &out| {
            if out <= 0.0 {
                *g = 0.0;
            }
        });
        dx
    }
}
