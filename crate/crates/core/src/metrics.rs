//! Thresholded segmentation metrics: IoU and confusion-matrix class rates.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

fn binarized<'a>(pred: &'a Tensor, target: &'a Tensor, threshold: f32) -> Result<impl Iterator<Item = (bool, bool)> + 'a> {
    if pred.shape() != target.shape() {
        return dim_err(format!(
            "prediction shape {:?} != target shape {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(move |(&p, &g)| (p >= threshold, g >= 0.5)))
}

/// `|P ∩ G| / |P ∪ G|` after thresholding; 1.0 when both sets are empty.
pub fn iou(pred: &Tensor, target: &Tensor, threshold: f32) -> Result<f64> {
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in binarized(pred, target, threshold)? {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Raw pixel counts with ship as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Tensor, target: &Tensor, threshold: f32) -> Result<Self> {
        let mut c = ConfusionCounts::default();
        for (p, g) in binarized(pred, target, threshold)? {
            match (p, g) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Pooled IoU of the counted pixels.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn summary(&self) -> ConfusionSummary {
        // An absent class contributes a vacuous rate of 1.
        let rate = |hit: u64, miss: u64| {
            if hit + miss == 0 {
                1.0
            } else {
                hit as f64 / (hit + miss) as f64
            }
        };
        let tpr = rate(self.tp, self.fn_);
        let tnr = rate(self.tn, self.fp);
        ConfusionSummary {
            counts: *self,
            tpr,
            tnr,
            fnr: 1.0 - tpr,
            fpr: 1.0 - tnr,
            balanced_accuracy: (tpr + tnr) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfusionSummary {
    pub counts: ConfusionCounts,
    pub tpr: f64,
    pub tnr: f64,
    pub fnr: f64,
    pub fpr: f64,
    /// Mean of the per-class accuracies (TPR and TNR).
    pub balanced_accuracy: f64,
}

pub fn confusion(pred: &Tensor, target: &Tensor, threshold: f32) -> Result<ConfusionSummary> {
    Ok(ConfusionCounts::from_masks(pred, target, threshold)?.summary())
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (NaN when not tracked).
    pub train_loss: f64,
    /// Validation loss.
    pub loss: f64,
    /// Pooled validation IoU.
    pub iou: f64,
    pub mean_chip_iou: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub balanced_accuracy: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "run_id,epoch,train_loss,loss,iou,mean_chip_iou,tpr,tnr,balanced_accuracy";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.run_id,
            self.epoch,
            self.train_loss,
            self.loss,
            self.iou,
            self.mean_chip_iou,
            self.tpr,
            self.tnr,
            self.balanced_accuracy
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Decode(format!("metrics row has {} fields, expected 9", f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| Error::Decode(format!("metrics field {i} '{}': {e}", f[i])))
        };
        Ok(MetricRow {
            run_id: f[0].to_string(),
            epoch: f[1].parse().map_err(|e| Error::Decode(format!("metrics epoch '{}': {e}", f[1])))?,
            train_loss: num(2)?,
            loss: num(3)?,
            iou: num(4)?,
            mean_chip_iou: num(5)?,
            tpr: num(6)?,
            tnr: num(7)?,
            balanced_accuracy: num(8)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(v: &[u8]) -> Tensor {
        Tensor::new(vec![v.len()], v.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn iou_cases() {
        let g = bits(&[1, 1, 0, 0]);
        assert_eq!(iou(&g, &g, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&bits(&[0, 0, 1, 1]), &g, 0.5).unwrap(), 0.0);
        assert_eq!(iou(&bits(&[0, 0]), &bits(&[0, 0]), 0.5).unwrap(), 1.0);
        // 10 px each, 5 shared: 5 / 15
        let mut p = vec![0u8; 30];
        let mut t = vec![0u8; 30];
        p[..10].fill(1);
        t[5..15].fill(1);
        assert_eq!(iou(&bits(&p), &bits(&t), 0.5).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn perfect_confusion() {
        let g = bits(&[1, 0, 0, 1, 0]);
        let s = confusion(&g, &g, 0.5).unwrap();
        assert_eq!((s.tpr, s.tnr, s.balanced_accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn balanced_accuracy_arithmetic() {
        // 100 ship pixels of which 36 found, no false alarms on 900 water px.
        let mut t = vec![0u8; 1000];
        t[..100].fill(1);
        let mut p = vec![0u8; 1000];
        p[..36].fill(1);
        let s = confusion(&bits(&p), &bits(&t), 0.5).unwrap();
        assert!((s.balanced_accuracy - 0.68).abs() < 1e-12);
        assert!((s.tpr + s.fnr - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invariants(p in proptest::collection::vec(0.0f32..1.0, 1..200), seed in any::<u64>()) {
            let t: Vec<f32> = (0..p.len()).map(|i| ((seed >> (i % 64)) & 1) as f32).collect();
            let pt = Tensor::new(vec![p.len()], p.clone()).unwrap();
            let tt = Tensor::new(vec![p.len()], t).unwrap();
            let s = confusion(&pt, &tt, 0.5).unwrap();
            prop_assert_eq!(s.counts.total() as usize, p.len());
            prop_assert!((s.balanced_accuracy - (s.tpr + s.tnr) / 2.0).abs() < 1e-12);
            for r in [s.tpr, s.tnr, s.fpr, s.fnr] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            // symmetric once both sides are binarized
            let pb = Tensor::new(vec![p.len()], p.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect()).unwrap();
            prop_assert_eq!(iou(&pb, &tt, 0.5).unwrap(), iou(&tt, &pb, 0.5).unwrap());
        }
    }
}
