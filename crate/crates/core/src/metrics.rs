//! Evaluation metrics: per-class accuracy, F1, and intersection-over-union,
//! all derived from one confusion-count type so the definitions cannot
//! drift apart.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction/truth length mismatch: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("class {class} absent from the ground truth; its accuracy is undefined")]
    ClassAbsent { class: usize },
}

type Result<V> = std::result::Result<V, MetricsError>;

/// Dense confusion matrix; `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: usize,
    counts: Vec<usize>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_pairs(pred: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        let mut c = ConfusionCounts::new(classes);
        c.extend(pred, truth)?;
        Ok(c)
    }

    pub fn extend(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(MetricsError::LengthMismatch { pred: pred.len(), truth: truth.len() });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= self.classes {
                return Err(MetricsError::LabelRange { label: p, classes: self.classes });
            }
            if t >= self.classes {
                return Err(MetricsError::LabelRange { label: t, classes: self.classes });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn true_positive(&self, cls: usize) -> usize {
        self.count(cls, cls)
    }

    pub fn false_positive(&self, cls: usize) -> usize {
        (0..self.classes).filter(|&t| t != cls).map(|t| self.count(t, cls)).sum()
    }

    pub fn false_negative(&self, cls: usize) -> usize {
        (0..self.classes).filter(|&p| p != cls).map(|p| self.count(cls, p)).sum()
    }

    pub fn true_negative(&self, cls: usize) -> usize {
        self.total() - self.true_positive(cls) - self.false_positive(cls) - self.false_negative(cls)
    }

    pub fn truth_total(&self, cls: usize) -> usize {
        (0..self.classes).map(|p| self.count(cls, p)).sum()
    }
}

/// Percentage of class-`cls` samples predicted correctly. Errors when the
/// truth contains no such samples.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], cls: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    let total = truth.iter().filter(|&&t| t == cls).count();
    if total == 0 {
        return Err(MetricsError::ClassAbsent { class: cls });
    }
    let correct = pred.iter().zip(truth).filter(|&(&p, &t)| t == cls && p == cls).count();
    Ok(100.0 * correct as f64 / total as f64)
}

/// `F1 = 2TP / (2TP + FP + FN)` for the given positive class. An empty
/// positive world (TP = FP = FN = 0) counts as vacuously perfect.
pub fn f1(conf: &ConfusionCounts, positive: usize) -> f64 {
    let tp = conf.true_positive(positive);
    let fp = conf.false_positive(positive);
    let fne = conf.false_negative(positive);
    if tp == 0 {
        return if fp + fne == 0 { 1.0 } else { 0.0 };
    }
    2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fne as f64)
}

/// Percentage IoU of class `cls` point sets; an empty union is vacuously
/// 100.
pub fn iou(pred: &[usize], truth: &[usize], cls: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let in_pred = p == cls;
        let in_truth = t == cls;
        if in_pred && in_truth {
            inter += 1;
        }
        if in_pred || in_truth {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// One evaluation run's results. Classification fills the accuracy/F1
/// fields; segmentation fills the IoU fields (plus point-level accuracies)
/// and reports both dataset-level and mean-per-cloud IoU.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    pub samples: usize,
    pub healthy_accuracy: f64,
    pub aneurysm_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_aneurysm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub healthy_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aneurysm_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_cloud_healthy_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_cloud_aneurysm_iou: Option<f64>,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "task: {}  samples: {}  seed: {}", self.task, self.samples, self.seed)?;
        writeln!(f, "  V. accuracy  {:7.2} %", self.healthy_accuracy)?;
        writeln!(f, "  A. accuracy  {:7.2} %", self.aneurysm_accuracy)?;
        if let Some(v) = self.f1_aneurysm {
            writeln!(f, "  F1 (aneurysm) {:6.4}", v)?;
        }
        if let (Some(v), Some(a)) = (self.healthy_iou, self.aneurysm_iou) {
            writeln!(f, "  V. IoU       {:7.2} %", v)?;
            writeln!(f, "  A. IoU       {:7.2} %", a)?;
        }
        if let (Some(v), Some(a)) = (self.mean_cloud_healthy_iou, self.mean_cloud_aneurysm_iou) {
            writeln!(f, "  V. IoU (mean per cloud) {:7.2} %", v)?;
            writeln!(f, "  A. IoU (mean per cloud) {:7.2} %", a)?;
        }
        write!(f, "  config: {}", self.config_hash)
    }
}
