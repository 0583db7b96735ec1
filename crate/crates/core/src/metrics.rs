//! Segmentation metrics: pixel accuracy, per-class precision/recall/F1,
//! mIoU, and the confusion matrix they all derive from.

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// K x K pixel confusion matrix; rows are ground truth, columns are
/// prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one predicted map against its ground truth.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::Shape(format!(
                "label maps {}x{} vs {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        for (p, t) in pred.data.iter().zip(&truth.data) {
            let (p, t) = (*p as usize, *t as usize);
            if p >= self.n_classes || t >= self.n_classes {
                return Err(Error::Data(format!(
                    "label out of range for {} classes: pred {p}, truth {t}",
                    self.n_classes
                )));
            }
            self.counts[t * self.n_classes + p] += 1;
        }
        Ok(())
    }

    /// Merge another matrix into this one (associative reduction).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.n_classes, other.n_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Derive the full metric suite. Classes absent from both truth and
    /// prediction are excluded from the macro averages and from mIoU.
    pub fn metrics(&self) -> SegmentationMetrics {
        let k = self.n_classes;
        let total = self.total();
        let mut correct = 0u64;
        let mut tp = vec![0u64; k];
        let mut fp = vec![0u64; k];
        let mut fnn = vec![0u64; k];
        for t in 0..k {
            for p in 0..k {
                let c = self.count(t, p);
                if t == p {
                    tp[t] += c;
                    correct += c;
                } else {
                    fp[p] += c;
                    fnn[t] += c;
                }
            }
        }
        let present: Vec<bool> = (0..k)
            .map(|c| tp[c] + fp[c] + fnn[c] > 0)
            .collect();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision: Vec<f64> = (0..k).map(|c| ratio(tp[c], tp[c] + fp[c])).collect();
        let recall: Vec<f64> = (0..k).map(|c| ratio(tp[c], tp[c] + fnn[c])).collect();
        let f1: Vec<f64> = (0..k)
            .map(|c| {
                let (p, r) = (precision[c], recall[c]);
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .collect();
        let iou: Vec<f64> = (0..k)
            .map(|c| ratio(tp[c], tp[c] + fp[c] + fnn[c]))
            .collect();
        let macro_over = |xs: &[f64]| {
            let vals: Vec<f64> = xs
                .iter()
                .zip(&present)
                .filter(|(_, &p)| p)
                .map(|(v, _)| *v)
                .collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        SegmentationMetrics {
            accuracy: ratio(correct, total),
            macro_precision: macro_over(&precision),
            macro_recall: macro_over(&recall),
            macro_f1: macro_over(&f1),
            miou: macro_over(&iou),
            per_class_precision: precision,
            per_class_recall: recall,
            per_class_f1: f1,
            per_class_iou: iou,
            class_present: present,
            confusion: self.clone(),
        }
    }
}

/// The evaluated metric suite for one prediction set.
#[derive(Debug, Clone)]
pub struct SegmentationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub miou: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    /// True for classes that appear in truth or prediction.
    pub class_present: Vec<bool>,
    pub confusion: ConfusionMatrix,
}

/// Metrics of a single prediction/truth pair over `n_classes`.
pub fn compute_metrics(pred: &LabelMap, truth: &LabelMap, n_classes: usize) -> Result<SegmentationMetrics> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.add(pred, truth)?;
    Ok(cm.metrics())
}
