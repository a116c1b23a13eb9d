use ndarray::{Array4, Zip};

use super::TrainError;

fn check_shapes(logits: &Array4<f32>, targets: &Array4<f32>) -> Result<(), TrainError> {
    if logits.dim() != targets.dim() {
        return Err(TrainError::Config(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dim(),
            targets.dim()
        )));
    }
    if logits.is_empty() {
        return Err(TrainError::Config("loss over an empty batch".into()));
    }
    Ok(())
}

/// `max(x, 0) - x t + ln(1 + exp(-|x|))`, which never overflows.
fn pixel_bce(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of sigmoid(`logits`) against `targets`,
/// accumulated in `f64`.
pub fn bce_with_logits(logits: &Array4<f32>, targets: &Array4<f32>) -> Result<f64, TrainError> {
    check_shapes(logits, targets)?;
    let mut sum = 0.0f64;
    Zip::from(logits)
        .and(targets)
        .for_each(|&x, &t| sum += pixel_bce(x as f64, t as f64));
    let loss = sum / logits.len() as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step: None,
            lr: None,
            batch_ids: Vec::new(),
            detail: format!("loss evaluated to {loss}"),
        });
    }
    Ok(loss)
}

/// Loss and its gradient with respect to the logits, `(sigmoid(x) - t) / N`.
pub fn bce_with_logits_grad(logits: &Array4<f32>, targets: &Array4<f32>) -> Result<(f64, Array4<f32>), TrainError> {
    let loss = bce_with_logits(logits, targets)?;
    let n = logits.len() as f64;
    let grad = Zip::from(logits)
        .and(targets)
        .map_collect(|&x, &t| ((sigmoid64(x as f64) - t as f64) / n) as f32);
    Ok((loss, grad))
}
