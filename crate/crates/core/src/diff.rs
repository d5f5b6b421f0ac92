//! Dense tensors with reverse-mode gradient accumulation.
//!
//! The engine is deliberately small: immutable row-major tensors, a recorded
//! computation graph, and a fixed set of primitive operations, each carrying
//! a hand-derived backward rule. Gradients for intermediate nodes live in
//! per-call scratch storage; gradients for leaves (parameters and tracked
//! inputs) accumulate in the tensor itself, so repeated [`backward`] calls
//! without a reset add up.
//!
//! Scalars are tensors of shape `[1]`, vectors are rank 1, matrices rank 2.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Real;

/// ELU saturation constant.
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: dimension mismatch for {operand}: expected {expected}, got {got}")]
    Shape { op: &'static str, operand: &'static str, expected: String, got: String },
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: empty input ({detail})")]
    Empty { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

type Result<V> = std::result::Result<V, DiffError>;

/// Gradient contributions per parent: `(parent index, contribution)`.
type BackFn<T> = Box<dyn Fn(&[T]) -> Vec<(usize, Vec<T>)>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    values: Vec<T>,
    grad: RefCell<Option<Vec<T>>>,
    tracked: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackFn<T>>,
}

/// A dense multi-dimensional value, optionally recorded in a gradient graph.
pub struct Tensor<T: Real>(Rc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("tracked", &self.0.tracked)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize], values_len: usize) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(DiffError::Invalid { op, detail: format!("zero extent in shape {shape:?}") });
    }
    let numel: usize = shape.iter().product();
    if numel != values_len {
        return Err(DiffError::Shape {
            op,
            operand: "values",
            expected: format!("{numel} elements for shape {shape:?}"),
            got: format!("{values_len}"),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        values: Vec<T>,
        tracked: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackFn<T>>,
    ) -> Self {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values,
            grad: RefCell::new(None),
            tracked,
            parents,
            backward,
        }))
    }

    /// Untracked constant.
    pub fn constant(shape: &[usize], values: Vec<T>) -> Result<Self> {
        check_shape("constant", shape, values.len())?;
        Ok(Self::build(shape.to_vec(), values, false, vec![], None))
    }

    /// Tracked leaf: participates in the gradient graph and owns a persistent
    /// gradient slot.
    pub fn leaf(shape: &[usize], values: Vec<T>) -> Result<Self> {
        check_shape("leaf", shape, values.len())?;
        Ok(Self::build(shape.to_vec(), values, true, vec![], None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![1], vec![v], false, vec![], None)
    }

    fn from_op(
        shape: Vec<usize>,
        values: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackFn<T>,
    ) -> Self {
        let tracked = parents.iter().any(|p| p.0.tracked);
        if tracked {
            Self::build(shape, values, true, parents, Some(backward))
        } else {
            Self::build(shape, values, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[T] {
        &self.0.values
    }

    pub fn len(&self) -> usize {
        self.0.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.values.is_empty()
    }

    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    pub fn is_leaf(&self) -> bool {
        self.0.tracked && self.0.backward.is_none() && self.0.parents.is_empty()
    }

    /// Scalar extraction; shape must be `[1]`.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(DiffError::NonScalarLoss { shape: self.0.shape.clone() });
        }
        Ok(self.0.values[0])
    }

    /// Accumulated gradient, zeros if none was ever written.
    pub fn grad(&self) -> Vec<T> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.len()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn rank2(&self, op: &'static str, operand: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(DiffError::Shape {
                op,
                operand,
                expected: "rank-2 tensor".into(),
                got: format!("shape {other:?}"),
            }),
        }
    }

    fn rank1(&self, op: &'static str, operand: &'static str, want: usize) -> Result<()> {
        match self.0.shape.as_slice() {
            [c] if *c == want => Ok(()),
            other => Err(DiffError::Shape {
                op,
                operand,
                expected: format!("vector of length {want}"),
                got: format!("shape {other:?}"),
            }),
        }
    }
}

// ── Backward pass ───────────────────────────────────────────────────────────

fn topo_order<T: Real>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    // iterative post-order DFS over tracked nodes
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.0.id);
    while let Some((node, child)) = stack.pop() {
        let parents = &node.0.parents;
        if child < parents.len() {
            stack.push((node.clone(), child + 1));
            let p = &parents[child];
            if p.0.tracked && !seen.contains(&p.0.id) {
                seen.insert(p.0.id);
                stack.push((p.clone(), 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

/// Reverse-mode sweep from a scalar loss. Gradients of intermediate nodes are
/// confined to this call; gradients of leaves accumulate additively across
/// calls until [`Tensor::zero_grad`] resets them.
pub fn backward<T: Real>(loss: &Tensor<T>) -> Result<()> {
    if loss.len() != 1 {
        return Err(DiffError::NonScalarLoss { shape: loss.0.shape.clone() });
    }
    if !loss.0.tracked {
        return Ok(());
    }
    let order = topo_order(loss);
    let mut scratch: HashMap<u64, Vec<T>> = HashMap::new();
    scratch.insert(loss.0.id, vec![T::one()]);
    for node in order.iter().rev() {
        let g = match scratch.remove(&node.0.id) {
            Some(g) => g,
            None => continue,
        };
        if node.is_leaf() {
            node.accumulate_grad(&g);
            continue;
        }
        let back = node.0.backward.as_ref().expect("tracked non-leaf node must carry a backward rule");
        for (pi, contrib) in back(&g) {
            let parent = &node.0.parents[pi];
            if !parent.0.tracked {
                continue;
            }
            match scratch.get_mut(&parent.0.id) {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += *c;
                    }
                }
                None => {
                    scratch.insert(parent.0.id, contrib);
                }
            }
        }
    }
    Ok(())
}

// ── Elementwise helpers ─────────────────────────────────────────────────────

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DiffError::Shape {
            op,
            operand: "rhs",
            expected: format!("shape {:?}", a.shape()),
            got: format!("shape {:?}", b.shape()),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, rhs)?;
        let values = self.values().iter().zip(rhs.values()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| vec![(0, g.to_vec()), (1, g.to_vec())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, rhs)?;
        let values = self.values().iter().zip(rhs.values()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![(0, g.to_vec()), (1, g.iter().map(|&x| -x).collect())]
            }),
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, rhs)?;
        let values = self.values().iter().zip(rhs.values()).map(|(&a, &b)| a * b).collect();
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = g.iter().zip(b.values()).map(|(&gi, &bi)| gi * bi).collect();
                let db = g.iter().zip(a.values()).map(|(&gi, &ai)| gi * ai).collect();
                vec![(0, da), (1, db)]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let values = self.values().iter().map(|&a| a * s).collect();
        Tensor::from_op(
            self.0.shape.clone(),
            values,
            vec![self.clone()],
            Box::new(move |g| vec![(0, g.iter().map(|&x| x * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let values = self.values().iter().map(|&a| a + s).collect();
        Tensor::from_op(
            self.0.shape.clone(),
            values,
            vec![self.clone()],
            Box::new(move |g| vec![(0, g.to_vec())]),
        )
    }

    pub fn recip(&self) -> Tensor<T> {
        let out: Vec<T> = self.values().iter().map(|&a| T::one() / a).collect();
        let saved = out.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                // d(1/x)/dx = -1/x^2
                vec![(0, g.iter().zip(&saved).map(|(&gi, &yi)| -gi * yi * yi).collect())]
            }),
        )
    }

    pub fn sqrt_elem(&self) -> Tensor<T> {
        let out: Vec<T> = self.values().iter().map(|&a| a.sqrt()).collect();
        let saved = out.clone();
        let half = T::from_f64(0.5);
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![(0, g.iter().zip(&saved).map(|(&gi, &yi)| gi * half / yi).collect())]
            }),
        )
    }

    pub fn exp_elem(&self) -> Tensor<T> {
        let out: Vec<T> = self.values().iter().map(|&a| a.exp()).collect();
        let saved = out.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![(0, g.iter().zip(&saved).map(|(&gi, &yi)| gi * yi).collect())]
            }),
        )
    }

    pub fn ln_elem(&self) -> Tensor<T> {
        let out: Vec<T> = self.values().iter().map(|&a| a.ln()).collect();
        let x = self.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![(0, g.iter().zip(x.values()).map(|(&gi, &xi)| gi / xi).collect())]
            }),
        )
    }

    /// Exponential linear unit, `alpha = 1`.
    pub fn elu(&self) -> Tensor<T> {
        let alpha = T::from_f64(ELU_ALPHA);
        let out: Vec<T> = self
            .values()
            .iter()
            .map(|&a| if a > T::zero() { a } else { alpha * (a.exp() - T::one()) })
            .collect();
        let saved = out.clone();
        Tensor::from_op(
            self.0.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                // f'(x) = 1 for x > 0, alpha*exp(x) = f(x) + alpha otherwise
                let d = g
                    .iter()
                    .zip(&saved)
                    .map(|(&gi, &yi)| if yi > T::zero() { gi } else { gi * (yi + alpha) })
                    .collect();
                vec![(0, d)]
            }),
        )
    }
}

// ── Matrix and reduction operations ─────────────────────────────────────────

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
fn matmul_nt_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `aᵀ · b` for `a: m×k`, `b: m×n` -> `k×n`.
fn matmul_tn_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let apt = arow[p];
            if apt == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += apt * brow[j];
            }
        }
    }
    out
}

impl<T: Real> Tensor<T> {
    /// `self · rhs` for `self: m×k`, `rhs: k×n`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.rank2("matmul", "lhs")?;
        let (k2, n) = rhs.rank2("matmul", "rhs")?;
        if k != k2 {
            return Err(DiffError::Shape {
                op: "matmul",
                operand: "rhs",
                expected: format!("{k} rows"),
                got: format!("{k2} rows"),
            });
        }
        let values = matmul_raw(self.values(), rhs.values(), m, k, n);
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let da = matmul_nt_raw(g, b.values(), m, n, k);
                let db = matmul_tn_raw(a.values(), g, m, k, n);
                vec![(0, da), (1, db)]
            }),
        ))
    }

    /// `self · rhsᵀ` for `self: m×k`, `rhs: n×k`.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.rank2("matmul_nt", "lhs")?;
        let (n, k2) = rhs.rank2("matmul_nt", "rhs")?;
        if k != k2 {
            return Err(DiffError::Shape {
                op: "matmul_nt",
                operand: "rhs",
                expected: format!("{k} columns"),
                got: format!("{k2} columns"),
            });
        }
        let values = matmul_nt_raw(self.values(), rhs.values(), m, k, n);
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                // out = A·Bᵀ: dA = G·B ; dB = Gᵀ·A
                let da = matmul_raw(g, b.values(), m, n, k);
                let db = matmul_tn_raw(g, a.values(), m, n, k);
                vec![(0, da), (1, db)]
            }),
        ))
    }

    /// Broadcast-add a length-`c` bias to every row of an `n×c` tensor.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = self.rank2("add_row_bias", "x")?;
        bias.rank1("add_row_bias", "bias", c)?;
        let mut values = self.values().to_vec();
        for i in 0..n {
            for j in 0..c {
                values[i * c + j] += bias.values()[j];
            }
        }
        Ok(Tensor::from_op(
            vec![n, c],
            values,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut db = vec![T::zero(); c];
                for i in 0..n {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
                vec![(0, g.to_vec()), (1, db)]
            }),
        ))
    }

    /// Scale row `i` of an `n×c` tensor by `v[i]` (`v: n×1`).
    pub fn mul_col_vec(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = self.rank2("mul_col_vec", "x")?;
        let (vn, vc) = v.rank2("mul_col_vec", "v")?;
        if vn != n || vc != 1 {
            return Err(DiffError::Shape {
                op: "mul_col_vec",
                operand: "v",
                expected: format!("{n}x1"),
                got: format!("{vn}x{vc}"),
            });
        }
        let mut values = self.values().to_vec();
        for i in 0..n {
            for j in 0..c {
                values[i * c + j] *= v.values()[i];
            }
        }
        let x = self.clone();
        let vv = v.clone();
        Ok(Tensor::from_op(
            vec![n, c],
            values,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c];
                let mut dv = vec![T::zero(); n];
                for i in 0..n {
                    let vi = vv.values()[i];
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] * vi;
                        dv[i] += g[i * c + j] * x.values()[i * c + j];
                    }
                }
                vec![(0, dx), (1, dv)]
            }),
        ))
    }

    /// Row sums of an `n×c` tensor, result `n×1`.
    pub fn row_sum(&self) -> Result<Tensor<T>> {
        let (n, c) = self.rank2("row_sum", "x")?;
        let values: Vec<T> =
            (0..n).map(|i| self.values()[i * c..(i + 1) * c].iter().copied().sum()).collect();
        Ok(Tensor::from_op(
            vec![n, 1],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c];
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] = g[i];
                    }
                }
                vec![(0, dx)]
            }),
        ))
    }

    /// Sum of all entries, scalar result.
    pub fn sum_all(&self) -> Tensor<T> {
        let total: T = self.values().iter().copied().sum();
        let len = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| vec![(0, vec![g[0]; len])]),
        )
    }

    /// Mean of all entries, scalar result.
    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.len() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Per-row log-sum-exp with max subtraction, result `n×1`.
    pub fn row_lse(&self) -> Result<Tensor<T>> {
        let (n, c) = self.rank2("row_lse", "x")?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.values()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&x| (x - m).exp()).sum();
            out.push(m + s.ln());
        }
        let saved = out.clone();
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c];
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] = g[i] * (x.values()[i * c + j] - saved[i]).exp();
                    }
                }
                vec![(0, dx)]
            }),
        ))
    }

    /// Per-row log-sum-exp over off-diagonal entries of a square matrix,
    /// with max subtraction. Row `i` reduces over all `j != i`.
    pub fn row_lse_excl_diag(&self) -> Result<Tensor<T>> {
        let (n, c) = self.rank2("row_lse_excl_diag", "x")?;
        if n != c {
            return Err(DiffError::Shape {
                op: "row_lse_excl_diag",
                operand: "x",
                expected: "square matrix".into(),
                got: format!("{n}x{c}"),
            });
        }
        if n < 2 {
            return Err(DiffError::Empty {
                op: "row_lse_excl_diag",
                detail: "need at least 2 rows so every row has an off-diagonal entry".into(),
            });
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.values()[i * n..(i + 1) * n];
            let mut m = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if j != i {
                    m = m.max(v);
                }
            }
            let mut s = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if j != i {
                    s += (v - m).exp();
                }
            }
            out.push(m + s.ln());
        }
        let saved = out.clone();
        let x = self.clone();
        Ok(Tensor::from_op(
            vec![n, 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * n];
                for i in 0..n {
                    for j in 0..n {
                        if j != i {
                            dx[i * n + j] = g[i] * (x.values()[i * n + j] - saved[i]).exp();
                        }
                    }
                }
                vec![(0, dx)]
            }),
        ))
    }

    /// Gather entries by flat index, result `k×1`. Duplicate indices
    /// accumulate in the backward pass.
    pub fn gather_values(&self, idx: &[usize]) -> Result<Tensor<T>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(DiffError::Invalid {
                op: "gather_values",
                detail: format!("index {bad} out of bounds for {} elements", self.len()),
            });
        }
        let values: Vec<T> = idx.iter().map(|&i| self.values()[i]).collect();
        let idx = idx.to_vec();
        let total = self.len();
        let k = idx.len();
        Ok(Tensor::from_op(
            vec![k, 1],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); total];
                for (t, &i) in idx.iter().enumerate() {
                    dx[i] += g[t];
                }
                vec![(0, dx)]
            }),
        ))
    }

    /// Gather rows of an `n×c` tensor, result `m×c`. Duplicates accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (n, c) = self.rank2("gather_rows", "x")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DiffError::Invalid {
                op: "gather_rows",
                detail: format!("row index {bad} out of bounds for {n} rows"),
            });
        }
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            values.extend_from_slice(&self.values()[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        let m = idx.len();
        Ok(Tensor::from_op(
            vec![m, c],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c];
                for (t, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[t * c + j];
                    }
                }
                vec![(0, dx)]
            }),
        ))
    }

    /// Repeat a `1×c` row `n` times, result `n×c`.
    pub fn repeat_row(&self, n: usize) -> Result<Tensor<T>> {
        let (r, c) = self.rank2("repeat_row", "x")?;
        if r != 1 {
            return Err(DiffError::Shape {
                op: "repeat_row",
                operand: "x",
                expected: "1 row".into(),
                got: format!("{r} rows"),
            });
        }
        if n == 0 {
            return Err(DiffError::Empty { op: "repeat_row", detail: "n = 0".into() });
        }
        let mut values = Vec::with_capacity(n * c);
        for _ in 0..n {
            values.extend_from_slice(self.values());
        }
        Ok(Tensor::from_op(
            vec![n, c],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); c];
                for i in 0..n {
                    for j in 0..c {
                        dx[j] += g[i * c + j];
                    }
                }
                vec![(0, dx)]
            }),
        ))
    }

    /// Max over consecutive row groups of size `group`: `(g·k)×c -> g×c`.
    /// Ties route the gradient to the lowest row index in the group.
    pub fn max_over_groups(&self, group: usize) -> Result<Tensor<T>> {
        let (rows, c) = self.rank2("max_over_groups", "x")?;
        if group == 0 || rows % group != 0 {
            return Err(DiffError::Shape {
                op: "max_over_groups",
                operand: "x",
                expected: format!("row count divisible by group size {group}"),
                got: format!("{rows} rows"),
            });
        }
        let groups = rows / group;
        let mut values = Vec::with_capacity(groups * c);
        let mut argmax = Vec::with_capacity(groups * c);
        for gidx in 0..groups {
            let base = gidx * group;
            for j in 0..c {
                let mut best = self.values()[base * c + j];
                let mut best_row = base;
                for r in base + 1..base + group {
                    let v = self.values()[r * c + j];
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                values.push(best);
                argmax.push(best_row);
            }
        }
        Ok(Tensor::from_op(
            vec![groups, c],
            values,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); rows * c];
                for (t, &row) in argmax.iter().enumerate() {
                    let j = t % c;
                    dx[row * c + j] += g[t];
                }
                vec![(0, dx)]
            }),
        ))
    }

    /// Max over all rows: `n×c -> 1×c`. Returns the pooled tensor and the
    /// winning row index per column (ties to the lowest index).
    pub fn max_pool_rows(&self) -> Result<(Tensor<T>, Vec<usize>)> {
        let (n, c) = self.rank2("max_pool_rows", "x")?;
        if n == 0 {
            return Err(DiffError::Empty { op: "max_pool_rows", detail: "no rows".into() });
        }
        let mut arg = vec![0usize; c];
        for j in 0..c {
            let mut best = self.values()[j];
            for i in 1..n {
                let v = self.values()[i * c + j];
                if v > best {
                    best = v;
                    arg[j] = i;
                }
            }
        }
        let pooled = self.max_over_groups(n)?;
        Ok((pooled, arg))
    }
}

/// Concatenate along columns: `[n×c1, n×c2, ...] -> n×(c1+c2+...)`.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(DiffError::Empty { op: "concat_cols", detail: "no operands".into() });
    }
    let (n, _) = parts[0].rank2("concat_cols", "operand 0")?;
    let mut widths = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        let (pn, pc) = p.rank2("concat_cols", "operand")?;
        if pn != n {
            return Err(DiffError::Shape {
                op: "concat_cols",
                operand: "operand",
                expected: format!("{n} rows (operand {i})"),
                got: format!("{pn} rows"),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut values = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            values.extend_from_slice(&p.values()[i * w..(i + 1) * w]);
        }
    }
    let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    let widths_b = widths.clone();
    Ok(Tensor::from_op(
        vec![n, total],
        values,
        parents,
        Box::new(move |g| {
            let mut outs: Vec<(usize, Vec<T>)> = widths_b
                .iter()
                .enumerate()
                .map(|(pi, &w)| (pi, vec![T::zero(); n * w]))
                .collect();
            for i in 0..n {
                let mut off = 0;
                for (pi, &w) in widths_b.iter().enumerate() {
                    let src = &g[i * total + off..i * total + off + w];
                    outs[pi].1[i * w..(i + 1) * w].copy_from_slice(src);
                    off += w;
                }
            }
            outs
        }),
    ))
}

/// Stack along rows: `[r1×c, r2×c, ...] -> (r1+r2+...)×c`.
pub fn stack_rows<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(DiffError::Empty { op: "stack_rows", detail: "no operands".into() });
    }
    let (_, c) = parts[0].rank2("stack_rows", "operand 0")?;
    let mut heights = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        let (pr, pc) = p.rank2("stack_rows", "operand")?;
        if pc != c {
            return Err(DiffError::Shape {
                op: "stack_rows",
                operand: "operand",
                expected: format!("{c} columns (operand {i})"),
                got: format!("{pc} columns"),
            });
        }
        heights.push(pr);
    }
    let total: usize = heights.iter().sum();
    let mut values = Vec::with_capacity(total * c);
    for p in parts {
        values.extend_from_slice(p.values());
    }
    let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
    let heights_b = heights.clone();
    Ok(Tensor::from_op(
        vec![total, c],
        values,
        parents,
        Box::new(move |g| {
            let mut outs = Vec::with_capacity(heights_b.len());
            let mut off = 0;
            for (pi, &h) in heights_b.iter().enumerate() {
                outs.push((pi, g[off * c..(off + h) * c].to_vec()));
                off += h;
            }
            outs
        }),
    ))
}

// ── Batch normalization ─────────────────────────────────────────────────────

/// Per-channel statistics of one normalization call.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide by n) variance used for normalization.
    pub var_biased: Vec<T>,
}

/// Training-mode batch normalization over rows of `x: n×c`.
///
/// Normalizes with batch statistics computed from `x` itself and returns them
/// so the caller can fold them into running statistics. Gradient flows to
/// `x`, `gamma`, and `beta`, accounting for the dependence of the batch
/// statistics on `x`.
pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c) = x.rank2("batchnorm_train", "x")?;
    gamma.rank1("batchnorm_train", "gamma", c)?;
    beta.rank1("batchnorm_train", "beta", c)?;
    let nf = T::from_f64(n as f64);
    let mut mean = vec![T::zero(); c];
    for i in 0..n {
        for j in 0..c {
            mean[j] += x.values()[i * c + j];
        }
    }
    for m in &mut mean {
        *m /= nf;
    }
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for j in 0..c {
            let d = x.values()[i * c + j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= nf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        for j in 0..c {
            let h = (x.values()[i * c + j] - mean[j]) * inv_std[j];
            xhat[i * c + j] = h;
            out[i * c + j] = gamma.values()[j] * h + beta.values()[j];
        }
    }
    let gamma_b = gamma.clone();
    let inv_std_b = inv_std.clone();
    let xhat_b = xhat;
    let stats = BatchStats { mean, var_biased: var };
    let y = Tensor::from_op(
        vec![n, c],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for i in 0..n {
                for j in 0..c {
                    let gij = g[i * c + j];
                    let hij = xhat_b[i * c + j];
                    dgamma[j] += gij * hij;
                    dbeta[j] += gij;
                    sum_g[j] += gij;
                    sum_gh[j] += gij * hij;
                }
            }
            let nf = T::from_f64(n as f64);
            let mut dx = vec![T::zero(); n * c];
            for i in 0..n {
                for j in 0..c {
                    let gij = g[i * c + j];
                    let hij = xhat_b[i * c + j];
                    dx[i * c + j] = gamma_b.values()[j] * inv_std_b[j]
                        * (gij - sum_g[j] / nf - hij * sum_gh[j] / nf);
                }
            }
            vec![(0, dx), (1, dgamma), (2, dbeta)]
        }),
    );
    Ok((y, stats))
}

/// Eval-mode batch normalization: a fixed per-channel affine map using the
/// supplied running statistics. Never mutates anything.
pub fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c) = x.rank2("batchnorm_eval", "x")?;
    gamma.rank1("batchnorm_eval", "gamma", c)?;
    beta.rank1("batchnorm_eval", "beta", c)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(DiffError::Shape {
            op: "batchnorm_eval",
            operand: "running statistics",
            expected: format!("{c} channels"),
            got: format!("{} / {}", running_mean.len(), running_var.len()),
        });
    }
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        for j in 0..c {
            let h = (x.values()[i * c + j] - running_mean[j]) * inv_std[j];
            xhat[i * c + j] = h;
            out[i * c + j] = gamma.values()[j] * h + beta.values()[j];
        }
    }
    let gamma_b = gamma.clone();
    let inv_std_b = inv_std;
    Ok(Tensor::from_op(
        vec![n, c],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let mut dx = vec![T::zero(); n * c];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for i in 0..n {
                for j in 0..c {
                    let gij = g[i * c + j];
                    dx[i * c + j] = gij * gamma_b.values()[j] * inv_std_b[j];
                    dgamma[j] += gij * xhat[i * c + j];
                    dbeta[j] += gij;
                }
            }
            vec![(0, dx), (1, dgamma), (2, dbeta)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn randn(shape: &[usize], seed: u64) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let mut rng = RngStream::new(seed, "diff/test", 0, 0);
        (0..n).map(|_| rng.normal()).collect()
    }

    /// Central-difference check: rebuild the graph from perturbed leaf values
    /// and compare against the analytic gradients of one backward sweep.
    /// Returns the max relative error over every leaf coordinate.
    fn fd_check<F>(shapes: &[&[usize]], seed: u64, f: F) -> f64
    where
        F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    {
        let base: Vec<Vec<f64>> =
            shapes.iter().enumerate().map(|(i, s)| randn(s, seed + i as u64)).collect();
        let leaves: Vec<Tensor<f64>> = shapes
            .iter()
            .zip(&base)
            .map(|(s, v)| Tensor::leaf(s, v.clone()).unwrap())
            .collect();
        let loss = f(&leaves);
        assert_eq!(loss.len(), 1, "fd_check needs a scalar loss");
        backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad()).collect();
        let step = 1e-6;
        let mut max_rel = 0.0f64;
        for ti in 0..shapes.len() {
            for i in 0..base[ti].len() {
                let eval = |delta: f64| {
                    let tensors: Vec<Tensor<f64>> = base
                        .iter()
                        .enumerate()
                        .map(|(tj, vals)| {
                            let mut v = vals.clone();
                            if tj == ti {
                                v[i] += delta;
                            }
                            Tensor::leaf(shapes[tj], v).unwrap()
                        })
                        .collect();
                    f(&tensors).item().unwrap()
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let rel = (analytic[ti][i] - fd).abs() / fd.abs().max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        max_rel
    }

    const FD_TOL: f64 = 1e-7;

    #[test]
    fn add_sub_mul_values() {
        let a = Tensor::constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::constant(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().values(), &[11.0, 22.0, 33.0, 44.0]);
        assert_eq!(b.sub(&a).unwrap().values(), &[9.0, 18.0, 27.0, 36.0]);
        assert_eq!(a.mul(&b).unwrap().values(), &[10.0, 40.0, 90.0, 160.0]);
        assert!(a.add(&Tensor::constant(&[4], vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn elementwise_gradients() {
        let sh: &[&[usize]] = &[&[3, 4], &[3, 4]];
        assert!(fd_check(sh, 1, |t| t[0].add(&t[1]).unwrap().sum_all()) < FD_TOL);
        assert!(fd_check(sh, 2, |t| t[0].sub(&t[1]).unwrap().sum_all()) < FD_TOL);
        assert!(fd_check(sh, 3, |t| t[0].mul(&t[1]).unwrap().mean_all()) < FD_TOL);
        assert!(fd_check(&[&[5]], 4, |t| t[0].scale(-2.5).sum_all()) < FD_TOL);
        assert!(fd_check(&[&[5]], 5, |t| t[0].add_scalar(3.0).mul(&t[0].add_scalar(3.0)).unwrap().sum_all()) < FD_TOL);
        assert!(fd_check(&[&[6]], 6, |t| t[0].exp_elem().sum_all()) < FD_TOL);
        assert!(fd_check(&[&[6]], 7, |t| t[0].elu().sum_all()) < FD_TOL);
        // positive-domain ops: shift the random draws away from zero
        assert!(fd_check(&[&[6]], 8, |t| {
            let x = t[0].mul(&t[0]).unwrap().add_scalar(0.5);
            x.sqrt_elem().sum_all()
        }) < FD_TOL);
        assert!(fd_check(&[&[6]], 9, |t| {
            let x = t[0].mul(&t[0]).unwrap().add_scalar(0.5);
            x.ln_elem().sum_all()
        }) < FD_TOL);
        assert!(fd_check(&[&[6]], 10, |t| {
            let x = t[0].mul(&t[0]).unwrap().add_scalar(0.5);
            x.recip().sum_all()
        }) < FD_TOL);
    }

    #[test]
    fn elu_matches_definition() {
        let x = Tensor::constant(&[3], vec![-2.0, 0.0, 1.5]).unwrap();
        let y = x.elu();
        assert!((y.values()[0] - ((-2.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(y.values()[1], 0.0);
        assert_eq!(y.values()[2], 1.5);
    }

    #[test]
    fn matmul_known_product() {
        let a = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::constant(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.values(), &[58.0, 64.0, 139.0, 154.0]);
        // a·bᵀ with b stored row-major as n×k
        let bt = Tensor::constant(&[2, 3], vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap().values(), c.values());
    }

    #[test]
    fn matmul_gradients() {
        assert!(fd_check(&[&[2, 3], &[3, 4]], 11, |t| {
            t[0].matmul(&t[1]).unwrap().mean_all()
        }) < FD_TOL);
        assert!(fd_check(&[&[2, 3], &[4, 3]], 12, |t| {
            t[0].matmul_nt(&t[1]).unwrap().mean_all()
        }) < FD_TOL);
    }

    #[test]
    fn bias_and_column_scale_gradients() {
        assert!(fd_check(&[&[3, 4], &[4]], 13, |t| {
            t[0].add_row_bias(&t[1]).unwrap().mul(&t[0].add_row_bias(&t[1]).unwrap()).unwrap().sum_all()
        }) < FD_TOL);
        assert!(fd_check(&[&[3, 4], &[3, 1]], 14, |t| {
            t[0].mul_col_vec(&t[1]).unwrap().sum_all()
        }) < FD_TOL);
    }

    #[test]
    fn reductions_match_hand_values() {
        let x = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(x.row_sum().unwrap().values(), &[6.0, 15.0]);
        assert_eq!(x.sum_all().item().unwrap(), 21.0);
        assert_eq!(x.mean_all().item().unwrap(), 3.5);
    }

    #[test]
    fn reduction_gradients() {
        assert!(fd_check(&[&[3, 4]], 15, |t| {
            t[0].row_sum().unwrap().mul(&t[0].row_sum().unwrap()).unwrap().sum_all()
        }) < FD_TOL);
        assert!(fd_check(&[&[3, 4]], 16, |t| t[0].mean_all()) < FD_TOL);
    }

    #[test]
    fn row_lse_matches_manual_logsumexp() {
        let x = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let lse = x.row_lse().unwrap();
        for (r, row) in [[1.0f64, 2.0, 3.0], [-1.0, 0.0, 1.0]].iter().enumerate() {
            let expect: f64 = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!((lse.values()[r] - expect).abs() < 1e-14);
        }
        assert!(fd_check(&[&[3, 5]], 17, |t| t[0].row_lse().unwrap().sum_all()) < FD_TOL);
    }

    #[test]
    fn row_lse_excl_diag_skips_the_diagonal() {
        let x = Tensor::constant(&[3, 3], vec![
            100.0, 1.0, 2.0,
            3.0, 100.0, 4.0,
            5.0, 6.0, 100.0,
        ]).unwrap();
        let lse = x.row_lse_excl_diag().unwrap();
        for (r, pair) in [(1.0f64, 2.0f64), (3.0, 4.0), (5.0, 6.0)].iter().enumerate() {
            let expect = (pair.0.exp() + pair.1.exp()).ln();
            assert!((lse.values()[r] - expect).abs() < 1e-12, "diagonal leaked into row {r}");
        }
        assert!(fd_check(&[&[4, 4]], 18, |t| t[0].row_lse_excl_diag().unwrap().sum_all()) < FD_TOL);
        // a 1x1 matrix has no off-diagonal entries
        assert!(Tensor::constant(&[1, 1], vec![0.0]).unwrap().row_lse_excl_diag().is_err());
    }

    #[test]
    fn gather_values_accumulates_duplicates() {
        let x = Tensor::leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = x.gather_values(&[3, 0, 3]).unwrap();
        assert_eq!(g.values(), &[4.0, 1.0, 4.0]);
        backward(&g.sum_all()).unwrap();
        assert_eq!(x.grad(), vec![1.0, 0.0, 0.0, 2.0]);
        assert!(x.gather_values(&[4]).is_err());
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let x = Tensor::leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = x.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.values(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        backward(&g.sum_all()).unwrap();
        assert_eq!(x.grad(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(fd_check(&[&[4, 3]], 19, |t| {
            let g = t[0].gather_rows(&[1, 1, 3, 0]).unwrap();
            g.mul(&g).unwrap().sum_all()
        }) < FD_TOL);
    }

    #[test]
    fn repeat_row_broadcasts_and_sums_gradient() {
        let x = Tensor::leaf(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = x.repeat_row(4).unwrap();
        assert_eq!(r.shape(), &[4, 3]);
        assert_eq!(&r.values()[9..], &[1.0, 2.0, 3.0]);
        backward(&r.sum_all()).unwrap();
        assert_eq!(x.grad(), vec![4.0, 4.0, 4.0]);
        assert!(Tensor::constant(&[2, 3], vec![0.0; 6]).unwrap().repeat_row(2).is_err());
    }

    #[test]
    fn max_over_groups_routes_gradient_to_winners() {
        // two groups of two rows; column winners marked
        let x = Tensor::leaf(&[4, 2], vec![
            1.0, 9.0,
            5.0, 2.0,
            7.0, 7.0,
            7.0, 8.0,
        ]).unwrap();
        let m = x.max_over_groups(2).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.values(), &[5.0, 9.0, 7.0, 8.0]);
        backward(&m.sum_all()).unwrap();
        // ties (the second group's first column) go to the lower row
        assert_eq!(x.grad(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(x.max_over_groups(3).is_err());
    }

    #[test]
    fn max_over_groups_gradient_matches_fd() {
        // squaring makes the loss sensitive to the max value itself
        assert!(fd_check(&[&[6, 3]], 20, |t| {
            let m = t[0].max_over_groups(3).unwrap();
            m.mul(&m).unwrap().sum_all()
        }) < FD_TOL);
    }

    #[test]
    fn max_pool_rows_reports_argmax() {
        let x = Tensor::constant(&[3, 2], vec![1.0, 5.0, 4.0, 5.0, 2.0, 3.0]).unwrap();
        let (pooled, arg) = x.max_pool_rows().unwrap();
        assert_eq!(pooled.values(), &[4.0, 5.0]);
        assert_eq!(arg, vec![1, 0]); // tie in column 1 resolves to row 0
    }

    #[test]
    fn concat_cols_and_stack_rows_round_trip() {
        let a = Tensor::leaf(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::leaf(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.values(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = stack_rows(&[&c, &c]).unwrap();
        assert_eq!(s.shape(), &[4, 3]);
        assert_eq!(&s.values()[..6], &s.values()[6..]);
        assert!(concat_cols(&[&a, &Tensor::constant(&[3, 1], vec![0.0; 3]).unwrap()]).is_err());
        assert!(stack_rows(&[&a, &b]).is_err());
    }

    #[test]
    fn concat_and_stack_gradients() {
        assert!(fd_check(&[&[3, 2], &[3, 4]], 21, |t| {
            let c = concat_cols(&[&t[0], &t[1]]).unwrap();
            c.mul(&c).unwrap().sum_all()
        }) < FD_TOL);
        assert!(fd_check(&[&[2, 3], &[4, 3]], 22, |t| {
            let s = stack_rows(&[&t[0], &t[1]]).unwrap();
            s.mul(&s).unwrap().sum_all()
        }) < FD_TOL);
    }

    #[test]
    fn batchnorm_train_normalizes_each_column() {
        let x = Tensor::constant(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let gamma = Tensor::constant(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::constant(&[2], vec![0.0, 0.0]).unwrap();
        let (y, stats) = batchnorm_train(&x, &gamma, &beta, 0.0).unwrap();
        assert_eq!(stats.mean, vec![2.5, 25.0]);
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| y.values()[i * 2 + j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_gradients_match_fd() {
        assert!(fd_check(&[&[5, 3], &[3], &[3]], 23, |t| {
            let (y, _) = batchnorm_train(&t[0], &t[1], &t[2], 1e-5).unwrap();
            y.mul(&y).unwrap().sum_all()
        }) < 1e-6);
        assert!(fd_check(&[&[4, 2], &[2], &[2]], 24, |t| {
            let y = batchnorm_eval(&t[0], &t[1], &t[2], &[0.3, -0.2], &[1.5, 0.8], 1e-5).unwrap();
            y.mul(&y).unwrap().sum_all()
        }) < FD_TOL);
    }

    #[test]
    fn backward_accumulates_into_leaves_until_reset() {
        let x = Tensor::leaf(&[2], vec![3.0, 4.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad(), vec![6.0, 8.0]);
        backward(&loss).unwrap();
        assert_eq!(x.grad(), vec![12.0, 16.0]);
        x.zero_grad();
        assert_eq!(x.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_gradient_counts_both_paths() {
        // diamond: u = x + x, loss = sum(u ∘ u) -> d/dx = 8x
        let x = Tensor::leaf(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let u = x.add(&x).unwrap();
        backward(&u.mul(&u).unwrap().sum_all()).unwrap();
        assert_eq!(x.grad(), vec![8.0, -16.0, 4.0]);
    }

    #[test]
    fn untracked_graphs_fold_to_constants() {
        let a = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.scale(2.0).add(&a).unwrap();
        assert!(!b.is_tracked());
        // backward on a constant scalar is a no-op, not an error
        backward(&b.sum_all()).unwrap();
        let leaf = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(leaf.add(&a).unwrap().is_tracked());
    }

    #[test]
    fn backward_rejects_non_scalar_roots() {
        let x = Tensor::leaf(&[2, 2], vec![1.0; 4]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(backward(&y), Err(DiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_constructors_reject_bad_input() {
        assert!(Tensor::<f64>::constant(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::constant(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::leaf(&[3], vec![0.0; 4]).is_err());
        assert!(Tensor::scalar(5.0f64).item().unwrap() == 5.0);
    }
}
