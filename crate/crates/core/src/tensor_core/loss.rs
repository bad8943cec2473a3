use super::tensor::Tensor4;
use crate::error::Result;

/// Mean squared error over all elements and its gradient `2 (output - label) / N`.
pub fn mse_loss(output: &Tensor4, label: &Tensor4) -> Result<(f64, Tensor4)> {
    output.ensure_same_dims(label, "mse_loss")?;
    let n = output.data().len().max(1) as f64;
    let mut grad = Tensor4::zeros(output.dims());
    let mut sum = 0.0f64;
    for ((g, &o), &l) in grad
        .data_mut()
        .iter_mut()
        .zip(output.data())
        .zip(label.data())
    {
        let e = o as f64 - l as f64;
        sum += e * e;
        *g = (2.0 * e / n) as f32;
    }
    Ok((sum / n, grad))
}
