//! Supervised heads trained on frozen representations: a classifier over
//! the concatenated global vectors and a per-point segmenter over the
//! concatenated per-point tensors.

use thiserror::Error;

use crate::diff::{DiffError, Tensor};
use crate::nn::{MlpBlock, Mode, NnError, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("head input width {got} does not match expected {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelRange { label: usize, classes: usize, row: usize },
    #[error("{got} labels for {rows} logit rows")]
    LabelCount { rows: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<V> = std::result::Result<V, DownstreamError>;

pub const CLS_HIDDEN: [usize; 3] = [512, 256, 128];
pub const SEG_HIDDEN: [usize; 3] = [1024, 512, 256];

fn head_widths(hidden: &[usize], classes: usize) -> Vec<usize> {
    let mut w = hidden.to_vec();
    w.push(classes);
    w
}

/// Linear stack over concatenated global representations; all stages except
/// the logit layer carry normalization and ELU. Parameters live under
/// `head.cls.*`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    mlp: MlpBlock,
    pub in_dim: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        in_dim: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let mlp = MlpBlock::init(store, seed, "head.cls", in_dim, &head_widths(hidden, classes), false)?;
        Ok(ClassifierHead { mlp, in_dim, classes })
    }

    pub fn attach(in_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mlp = MlpBlock::attach("head.cls", in_dim, &head_widths(hidden, classes), false);
        ClassifierHead { mlp, in_dim, classes }
    }

    /// `B×in_dim` representations to `B×classes` logits.
    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        h: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        match h.shape() {
            [_, c] if *c == self.in_dim => {}
            s => {
                return Err(DownstreamError::InputWidth {
                    expected: self.in_dim,
                    got: s.get(1).copied().unwrap_or(0),
                })
            }
        }
        Ok(self.mlp.forward(store, h, mode)?)
    }
}

/// Pointwise convolution stack over concatenated per-point tensors; row
/// order in, row order out. Parameters live under `head.seg.*`.
#[derive(Debug, Clone)]
pub struct SegmenterHead {
    mlp: MlpBlock,
    pub in_dim: usize,
    pub classes: usize,
}

impl SegmenterHead {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        in_dim: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let mlp = MlpBlock::init(store, seed, "head.seg", in_dim, &head_widths(hidden, classes), false)?;
        Ok(SegmenterHead { mlp, in_dim, classes })
    }

    pub fn attach(in_dim: usize, hidden: &[usize], classes: usize) -> Self {
        let mlp = MlpBlock::attach("head.seg", in_dim, &head_widths(hidden, classes), false);
        SegmenterHead { mlp, in_dim, classes }
    }

    /// `n×in_dim` per-point features to `n×classes` logits.
    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        per_point: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        match per_point.shape() {
            [_, c] if *c == self.in_dim => {}
            s => {
                return Err(DownstreamError::InputWidth {
                    expected: self.in_dim,
                    got: s.get(1).copied().unwrap_or(0),
                })
            }
        }
        Ok(self.mlp.forward(store, per_point, mode)?)
    }
}

/// Mean softmax cross-entropy over rows: `mean_r [lse(logits_r) −
/// logits_r[label_r]]`. Uniform logits give exactly `ln(classes)`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (rows, classes) = match logits.shape() {
        [r, c] => (*r, *c),
        _ => return Err(DownstreamError::InputWidth { expected: 2, got: logits.shape().len() }),
    };
    if labels.len() != rows {
        return Err(DownstreamError::LabelCount { rows, got: labels.len() });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(DownstreamError::LabelRange { label, classes, row });
    }
    let lse = logits.row_lse()?;
    let picked_idx: Vec<usize> =
        labels.iter().enumerate().map(|(r, &l)| r * classes + l).collect();
    let picked = logits.gather_values(&picked_idx)?;
    Ok(lse.sub(&picked)?.mean_all())
}

/// Row-wise argmax over logit values; ties resolve to the lower class index.
pub fn predict_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let (rows, classes) = match logits.shape() {
        [r, c] => (*r, *c),
        _ => return Vec::new(),
    };
    (0..rows)
        .map(|r| {
            let row = &logits.values()[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Softmax probabilities for one logit row (diagnostic; max-subtracted).
pub fn softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let vals: Vec<f64> = row.iter().map(|&v| v.to_f64()).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
