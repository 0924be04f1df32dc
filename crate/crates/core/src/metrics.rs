//! Pixel-level crack segmentation metrics over a globally accumulated
//! confusion matrix.

use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Counts for the crack class (id 1) against background (id 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub iou_crack: f64,
    pub iou_background: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// IoU with the absent-class convention: a class that appears in neither
/// prediction nor label scores 1.
fn iou(hit: u64, fp: u64, fn_: u64) -> f64 {
    if hit + fp + fn_ == 0 {
        1.0
    } else {
        ratio(hit, hit + fp + fn_)
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Accumulates one prediction/label pair of class ids.
    pub fn update(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(shape_err!("prediction has {} pixels, label has {}", pred.len(), label.len()));
        }
        let mut cm = ConfusionMatrix::default();
        for (&p, &l) in pred.iter().zip(label) {
            match (p, l) {
                (1, 1) => cm.tp += 1,
                (1, 0) => cm.fp += 1,
                (0, 1) => cm.fn_ += 1,
                (0, 0) => cm.tn += 1,
                _ => return Err(Error::Data(format!("class id pair ({p}, {l}) outside {{0, 1}}"))),
            }
        }
        self.merge(&cm);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn compute(&self) -> Result<Metrics> {
        if self.total() == 0 {
            return Err(Error::Data("cannot compute metrics from an empty confusion matrix".into()));
        }
        let iou_crack = iou(self.tp, self.fp, self.fn_);
        let iou_background = iou(self.tn, self.fn_, self.fp);
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Metrics {
            iou_crack,
            iou_background,
            miou: (iou_crack + iou_background) / 2.0,
            precision,
            recall,
            f1,
        })
    }
}

impl Metrics {
    pub fn csv_header() -> &'static str {
        "miou,precision,recall,f1"
    }

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{:.6}", self.miou, self.precision, self.recall, self.f1)
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mIoU       {:.4}", self.miou)?;
        writeln!(f, "IoU crack  {:.4}", self.iou_crack)?;
        writeln!(f, "IoU bg     {:.4}", self.iou_background)?;
        writeln!(f, "precision  {:.4}", self.precision)?;
        writeln!(f, "recall     {:.4}", self.recall)?;
        write!(f, "f1         {:.4}", self.f1)
    }
}
