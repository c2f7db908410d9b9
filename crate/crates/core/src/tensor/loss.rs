use super::Tensor4;
use crate::error::Result;

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    pred.expect_shape("mse_loss", target.shape())?;
    let n = pred.len() as f64;
    let loss = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.zip_map(target, |p, t| 2.0 * (p - t) / n)?;
    Ok((loss, grad))
}
