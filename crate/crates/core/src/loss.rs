//! Focal Dice loss: `alpha * (1 - Dice)^beta` over soft predictions.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalDiceParams {
    pub alpha: f32,
    pub beta: f32,
    pub smooth: f32,
}

impl Default for FocalDiceParams {
    fn default() -> Self {
        FocalDiceParams {
            alpha: 10.0,
            beta: 2.0,
            smooth: 1.0,
        }
    }
}

impl FocalDiceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 1.0) || !(self.smooth > 0.0) {
            return Err(Error::Config(format!(
                "focal dice needs alpha > 0, beta >= 1, smooth > 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Loss value for a given Dice coefficient.
    pub fn loss_from_dice(&self, dice: f64) -> f64 {
        self.alpha as f64 * (1.0 - dice).max(0.0).powf(self.beta as f64)
    }
}

/// Soft Dice `(2 * sum(p*g) + s) / (sum(p) + sum(g) + s)` and its partial
/// derivative with respect to each prediction.
fn dice_with_grad(pred: &[f32], target: &[f32], smooth: f64) -> (f64, Vec<f64>) {
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(target) {
        inter += p as f64 * g as f64;
        sp += p as f64;
        sg += g as f64;
    }
    let num = 2.0 * inter + smooth;
    let den = sp + sg + smooth;
    let dice = num / den;
    let grad = target
        .iter()
        .map(|&g| (2.0 * g as f64 * den - num) / (den * den))
        .collect();
    (dice, grad)
}

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return dim_err(format!(
            "prediction shape {:?} != target shape {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(())
}

/// Focal Dice over every element of `pred`, treated as one set. Returns the
/// loss and its gradient with respect to `pred`.
pub fn focal_dice_loss(pred: &Tensor, target: &Tensor, params: &FocalDiceParams) -> Result<(f32, Tensor)> {
    check_shapes(pred, target)?;
    let (loss, grad) = focal_dice_slice(pred.data(), target.data(), params, 1.0);
    Ok((loss as f32, Tensor::new(pred.shape().to_vec(), grad)?))
}

fn focal_dice_slice(pred: &[f32], target: &[f32], params: &FocalDiceParams, scale: f64) -> (f64, Vec<f32>) {
    let (dice, ddice) = dice_with_grad(pred, target, params.smooth as f64);
    let deficit = (1.0 - dice).max(0.0);
    let (alpha, beta) = (params.alpha as f64, params.beta as f64);
    let loss = alpha * deficit.powf(beta);
    // dL/dD = -alpha * beta * (1 - D)^(beta - 1)
    let dl_dd = -alpha * beta * deficit.powf(beta - 1.0);
    let grad = ddice.iter().map(|&d| (scale * dl_dd * d) as f32).collect();
    (loss, grad)
}

/// Mean over the leading (batch) axis of per-sample Focal Dice losses.
///
/// Because the batch loss is a plain mean of per-chip terms, the gradient of
/// a batch equals the average of the gradients of equal-sized sub-batches,
/// which is what data-parallel sharding relies on.
pub fn mean_focal_dice_loss(pred: &Tensor, target: &Tensor, params: &FocalDiceParams) -> Result<(f32, Tensor)> {
    check_shapes(pred, target)?;
    let n = *pred.shape().first().unwrap_or(&0);
    if n == 0 {
        return dim_err("empty batch");
    }
    let per = pred.numel() / n;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.numel());
    for i in 0..n {
        let r = i * per..(i + 1) * per;
        let (l, g) = focal_dice_slice(&pred.data()[r.clone()], &target.data()[r], params, 1.0 / n as f64);
        total += l;
        grad.extend(g);
    }
    Ok(((total / n as f64) as f32, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Soft Dice coefficient of the whole tensor (no gradient).
pub fn dice(pred: &Tensor, target: &Tensor, smooth: f32) -> Result<f64> {
    check_shapes(pred, target)?;
    let (inter, sp, sg) = pred.data().iter().zip(target.data()).fold((0.0, 0.0, 0.0), |(i, p, g), (&a, &b)| {
        (i + a as f64 * b as f64, p + a as f64, g + b as f64)
    });
    Ok((2.0 * inter + smooth as f64) / (sp + sg + smooth as f64))
}
