//! Validation pass: loss, pooled and per-chip IoU, confusion summary.

use shipnet_core::loss::{mean_focal_dice_loss, FocalDiceParams};
use shipnet_core::metrics::{ConfusionCounts, ConfusionSummary};
use shipnet_core::unet::ModelState;

use crate::dataset::{fetch_batch, ChipSource};
use crate::error::{Result, TrainError};

pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub chips: usize,
    /// Mean per-chip Focal Dice loss.
    pub loss: f64,
    /// IoU over all validation pixels pooled.
    pub iou: f64,
    pub mean_chip_iou: f64,
    pub summary: ConfusionSummary,
}

/// Scores `model` on `keys` without touching its parameters.
pub fn evaluate(
    model: &ModelState,
    source: &mut dyn ChipSource,
    keys: &[String],
    threshold: f32,
    loss: &FocalDiceParams,
) -> Result<EvalReport> {
    if keys.is_empty() {
        return Err(TrainError::Eval("no validation keys".into()));
    }
    let mut missing = Vec::new();
    for k in keys {
        if source.chip(k)?.is_none() {
            missing.push(k.as_str());
        }
    }
    if !missing.is_empty() {
        return Err(TrainError::Eval(format!("missing validation chips: {}", missing.join(", "))));
    }
    let mut pooled = ConfusionCounts::default();
    let (mut loss_sum, mut chip_iou_sum) = (0.0f64, 0.0f64);
    for chunk in keys.chunks(EVAL_BATCH) {
        let (images, masks) = fetch_batch(source, chunk, None)?;
        let pred = model.predict(&images)?;
        let (l, _) = mean_focal_dice_loss(&pred, &masks, loss)?;
        loss_sum += l as f64 * chunk.len() as f64;
        for i in 0..chunk.len() {
            let p = pred.slice_batch(i, i + 1)?;
            let m = masks.slice_batch(i, i + 1)?;
            let c = ConfusionCounts::from_masks(&p, &m, threshold)?;
            chip_iou_sum += c.iou();
            pooled.merge(&c);
        }
    }
    let n = keys.len() as f64;
    Ok(EvalReport {
        chips: keys.len(),
        loss: loss_sum / n,
        iou: pooled.iou(),
        mean_chip_iou: chip_iou_sum / n,
        summary: pooled.summary(),
    })
}
