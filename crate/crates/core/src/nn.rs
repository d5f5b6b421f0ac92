//! Parameter storage and the layer vocabulary shared by every network here:
//! dense maps (used both as fully connected layers and as pointwise
//! convolutions over per-point rows), batch normalization, and small
//! dense+norm+ELU stacks.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::diff::{batchnorm_eval, batchnorm_train, DiffError, Tensor};
use crate::rng::RngStream;
use crate::scalar::Real;

/// Normalization behaviour switch. `Eval` never mutates running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Default epsilon inside the batchnorm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the fresh batch statistic folded into the running value.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter {name:?} already registered")]
    DuplicateParam { name: String },
    #[error("parameter {name:?}: expected {expected} values, got {got}")]
    BadLength { name: String, expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<V> = std::result::Result<V, NnError>;

struct Entry<T: Real> {
    tensor: Tensor<T>,
    trainable: bool,
}

/// Named parameter and buffer store. Names are dotted paths such as
/// `branch1.sa1.0.weight`; iteration order is lexicographic, which keeps
/// optimizer updates and checkpoints deterministic.
pub struct ParamStore<T: Real> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    /// Register a trainable parameter as a tracked leaf tensor.
    pub fn insert_param(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<()> {
        self.insert(name, shape, values, true)
    }

    /// Register a non-trainable buffer (running statistics and the like).
    pub fn insert_buffer(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<()> {
        self.insert(name, shape, values, false)
    }

    fn insert(&mut self, name: &str, shape: &[usize], values: Vec<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam { name: name.into() });
        }
        let tensor =
            if trainable { Tensor::leaf(shape, values)? } else { Tensor::constant(shape, values)? };
        self.entries.insert(name.into(), Entry { tensor, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| NnError::UnknownParam(name.into()))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.trainable)
            .ok_or_else(|| NnError::UnknownParam(name.into()))
    }

    /// Replace the stored values, keeping shape and trainability. The old
    /// tensor (and any accumulated gradient on it) is dropped.
    pub fn set_values(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| NnError::UnknownParam(name.to_owned()))?;
        let shape = entry.tensor.shape().to_vec();
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(NnError::BadLength { name: name.into(), expected, got: values.len() });
        }
        entry.tensor =
            if entry.trainable { Tensor::leaf(&shape, values)? } else { Tensor::constant(&shape, values)? };
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<Vec<T>> {
        Ok(self.get(name)?.grad())
    }

    pub fn zero_grads(&self) {
        for e in self.entries.values() {
            e.tensor.zero_grad();
        }
    }

    /// All names in lexicographic order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Trainable parameter names in lexicographic order, optionally
    /// restricted to a dotted prefix.
    pub fn trainable_names(&self, prefix: Option<&str>) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(name, e)| {
                e.trainable
                    && prefix.map_or(true, |p| {
                        name.as_str() == p || name.starts_with(&format!("{p}."))
                    })
            })
            .map(|(name, _)| name.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Digest of every entry (name, shape, exact values). Two stores with
    /// identical contents hash identically; any drift in a value changes
    /// the digest.
    pub fn fingerprint(&self) -> [u8; 32] {
        let names = self.names();
        self.fingerprint_subset(&names)
    }

    /// Digest restricted to the given entry names (sorted first, so the
    /// caller's ordering is irrelevant). Unknown names are skipped.
    pub fn fingerprint_subset(&self, names: &[String]) -> [u8; 32] {
        let mut sorted: Vec<&String> = names.iter().collect();
        sorted.sort();
        sorted.dedup();
        let mut h = Sha256::new();
        for name in sorted {
            let Some(e) = self.entries.get(name.as_str()) else { continue };
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for &v in e.tensor.values() {
                h.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Uniform init in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`, drawn from a stream
/// keyed by the parameter name so layout changes elsewhere cannot shift it.
pub fn init_uniform<T: Real>(seed: u64, name: &str, fan_in: usize, count: usize) -> Vec<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut rng = RngStream::new(seed, &format!("init/{name}"), 0, 0);
    (0..count).map(|_| T::from_f64(rng.range(-bound, bound))).collect()
}

/// A dense affine map `y = x Wᵀ + b` applied to each row. Serves as both a
/// fully connected layer (rows are batch items) and a 1x1 pointwise
/// convolution (rows are points).
#[derive(Debug, Clone)]
pub struct Dense {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Registers `{name}.weight` (`out×in`) and `{name}.bias` (`out`).
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let w = init_uniform::<T>(seed, &format!("{name}.weight"), in_dim, out_dim * in_dim);
        let b = init_uniform::<T>(seed, &format!("{name}.bias"), in_dim, out_dim);
        store.insert_param(&format!("{name}.weight"), &[out_dim, in_dim], w)?;
        store.insert_param(&format!("{name}.bias"), &[out_dim], b)?;
        Ok(Dense { name: name.into(), in_dim, out_dim })
    }

    /// Handle to an already registered layer (after checkpoint load).
    pub fn attach(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Dense { name: name.into(), in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = store.get(&format!("{}.weight", self.name))?;
        let b = store.get(&format!("{}.bias", self.name))?;
        Ok(x.matmul_nt(w)?.add_row_bias(b)?)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
}

impl BatchNorm {
    /// Registers `{name}.gamma`, `{name}.beta` (trainable) and
    /// `{name}.running_mean`, `{name}.running_var` (buffers).
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        store.insert_param(&format!("{name}.gamma"), &[dim], vec![T::one(); dim])?;
        store.insert_param(&format!("{name}.beta"), &[dim], vec![T::zero(); dim])?;
        store.insert_buffer(&format!("{name}.running_mean"), &[dim], vec![T::zero(); dim])?;
        store.insert_buffer(&format!("{name}.running_var"), &[dim], vec![T::one(); dim])?;
        Ok(BatchNorm { name: name.into(), dim })
    }

    pub fn attach(name: &str, dim: usize) -> Self {
        BatchNorm { name: name.into(), dim }
    }

    /// Train mode normalizes with the statistics of this batch and folds them
    /// into the running buffers (`running = (1-m)·running + m·batch`, with
    /// the unbiased variance and a guard for single-row batches). Eval mode
    /// is a fixed affine map from the running buffers.
    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.forward_eval(store, x),
            Mode::Train => {
                let eps = T::from_f64(BN_EPS);
                let gamma = store.get(&format!("{}.gamma", self.name))?.clone();
                let beta = store.get(&format!("{}.beta", self.name))?.clone();
                let (y, stats) = batchnorm_train(x, &gamma, &beta, eps)?;
                let n = x.shape()[0];
                let m = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - m;
                let rm_name = format!("{}.running_mean", self.name);
                let rv_name = format!("{}.running_var", self.name);
                let mut rm = store.get(&rm_name)?.values().to_vec();
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                store.set_values(&rm_name, rm)?;
                if n > 1 {
                    let nf = T::from_f64(n as f64);
                    let unbias = nf / (nf - T::one());
                    let mut rv = store.get(&rv_name)?.values().to_vec();
                    for (r, &b) in rv.iter_mut().zip(&stats.var_biased) {
                        *r = keep * *r + m * (b * unbias);
                    }
                    store.set_values(&rv_name, rv)?;
                }
                Ok(y)
            }
        }
    }

    /// Eval-mode normalization without touching the store.
    pub fn forward_eval<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let eps = T::from_f64(BN_EPS);
        let gamma = store.get(&format!("{}.gamma", self.name))?;
        let beta = store.get(&format!("{}.beta", self.name))?;
        let rm = store.get(&format!("{}.running_mean", self.name))?.values().to_vec();
        let rv = store.get(&format!("{}.running_var", self.name))?.values().to_vec();
        Ok(batchnorm_eval(x, gamma, beta, &rm, &rv, eps)?)
    }
}

/// A stack of dense+batchnorm+ELU stages. Layer `i` of `prefix` registers
/// parameters under `{prefix}.{i}.*`. When `activate_last` is false the final
/// stage is a bare affine map (classifier and segmenter outputs).
#[derive(Debug, Clone)]
pub struct MlpBlock {
    stages: Vec<(Dense, Option<BatchNorm>)>,
}

impl MlpBlock {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
        activate_last: bool,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let dense = Dense::init(store, seed, &name, d, w)?;
            let last = i + 1 == widths.len();
            let bn = if last && !activate_last {
                None
            } else {
                Some(BatchNorm::init(store, &name, w)?)
            };
            stages.push((dense, bn));
            d = w;
        }
        Ok(MlpBlock { stages })
    }

    pub fn attach(prefix: &str, in_dim: usize, widths: &[usize], activate_last: bool) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let last = i + 1 == widths.len();
            let bn = if last && !activate_last { None } else { Some(BatchNorm::attach(&name, w)) };
            stages.push((Dense::attach(&name, d, w), bn));
            d = w;
        }
        MlpBlock { stages }
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().expect("stack has at least one stage").0.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.stages[0].0.in_dim
    }

    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (dense, bn) in &self.stages {
            h = dense.forward(store, &h)?;
            if let Some(bn) = bn {
                h = bn.forward(store, &h, mode)?;
                h = h.elu();
            }
        }
        Ok(h)
    }
}

/// Worst relative disagreement between analytic and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare the analytic gradient of `f` against central differences for the
/// named parameters. `f` must rebuild the loss from the store on every call.
/// Relative error per coordinate is `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<T, F>(
    store: &mut ParamStore<T>,
    names: &[String],
    mut f: F,
    step: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: FnMut(&mut ParamStore<T>) -> Result<Tensor<T>>,
{
    store.zero_grads();
    let loss = f(store)?;
    let base = loss.item()?.to_f64();
    if !base.is_finite() {
        return Err(NnError::Diff(DiffError::NonFinite { what: "loss under gradient check".into() }));
    }
    crate::diff::backward(&loss)?;
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in names {
        analytic.insert(name.clone(), store.grad(name)?.iter().map(|&g| g.to_f64()).collect());
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for name in names {
        let original = store.get(name)?.values().to_vec();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus[i] += T::from_f64(step);
            store.set_values(name, plus)?;
            let lp = f(store)?.item()?.to_f64();
            let mut minus = original.clone();
            minus[i] -= T::from_f64(step);
            store.set_values(name, minus)?;
            let lm = f(store)?.item()?.to_f64();
            store.set_values(name, original.clone())?;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(NnError::Diff(DiffError::NonFinite {
                    what: format!("loss while perturbing {name}[{i}]"),
                }));
            }
            let fd = (lp - lm) / (2.0 * step);
            let rel = (analytic[name][i] - fd).abs() / fd.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
