//! Normalized temperature-scaled cross-entropy over a batch of 2N projected
//! embeddings. Rows are ordered so that pair k occupies rows 2k and 2k+1
//! (0-based); each row's positive is its block partner and every other row
//! is a negative.

use thiserror::Error;

use crate::diff::{DiffError, Tensor};
use crate::scalar::Real;

pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("embedding batch needs an even row count ≥ 2, got {rows}")]
    BadRowCount { rows: usize },
    #[error("temperature must be > 0, got {tau}")]
    BadTemperature { tau: f64 },
    #[error("embedding row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("row index {index} out of bounds for {rows} rows")]
    RowOutOfBounds { index: usize, rows: usize },
    #[error("diagonal pair ({0}, {0}) has no defined similarity rank")]
    DiagonalPair(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<V> = std::result::Result<V, ContrastiveError>;

/// 2N×d embedding matrix plus temperature. Construction validates the
/// pairing preconditions once so the loss can assume them.
pub struct EmbeddingBatch<T: Real> {
    pub z: Tensor<T>,
    pub tau: T,
    rows: usize,
}

impl<T: Real> EmbeddingBatch<T> {
    pub fn new(z: Tensor<T>, tau: T) -> Result<Self> {
        let (rows, cols) = match z.shape() {
            [r, c] => (*r, *c),
            _ => return Err(ContrastiveError::BadRowCount { rows: 0 }),
        };
        if rows < 2 || rows % 2 != 0 {
            return Err(ContrastiveError::BadRowCount { rows });
        }
        if !(tau.to_f64() > 0.0) {
            return Err(ContrastiveError::BadTemperature { tau: tau.to_f64() });
        }
        for i in 0..rows {
            let norm2: T =
                z.values()[i * cols..(i + 1) * cols].iter().map(|&v| v * v).sum();
            if norm2 == T::zero() {
                return Err(ContrastiveError::ZeroNorm { row: i });
            }
        }
        Ok(EmbeddingBatch { z, tau, rows })
    }

    pub fn num_pairs(&self) -> usize {
        self.rows / 2
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Positive partner of a row: the other half of its pair block.
    pub fn partner(&self, i: usize) -> usize {
        i ^ 1
    }

    /// Row-normalized embeddings (`ẑ_i = z_i/‖z_i‖`), differentiable.
    fn normalized(&self) -> Result<Tensor<T>> {
        let norms = self.z.mul(&self.z)?.row_sum()?.sqrt_elem();
        Ok(self.z.mul_col_vec(&norms.recip())?)
    }

    /// Full cosine-similarity matrix `s_{ij} = ẑ_i·ẑ_j`, differentiable.
    pub fn similarity_matrix(&self) -> Result<Tensor<T>> {
        let zn = self.normalized()?;
        Ok(zn.matmul_nt(&zn)?)
    }
}

/// Cosine similarity of two nonzero vectors given as `1×d` tensors;
/// differentiable with respect to both.
pub fn cosine_similarity<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    for (row, t) in [(0usize, a), (1usize, b)] {
        let norm2: T = t.values().iter().map(|&v| v * v).sum();
        if norm2 == T::zero() {
            return Err(ContrastiveError::ZeroNorm { row });
        }
    }
    let dot = a.mul(b)?.sum_all();
    let na = a.mul(a)?.sum_all().sqrt_elem();
    let nb = b.mul(b)?.sum_all().sqrt_elem();
    Ok(dot.mul(&na.mul(&nb)?.recip())?)
}

/// Diagnostic softmax probability that row `i` matches row `j` among all
/// other rows, without temperature:
/// `S(i,j) = exp(s_ij) / Σ_{k≠i} exp(s_ik)`. Plain value, no gradient.
pub fn pair_probability<T: Real>(batch: &EmbeddingBatch<T>, i: usize, j: usize) -> Result<f64> {
    let rows = batch.rows();
    for idx in [i, j] {
        if idx >= rows {
            return Err(ContrastiveError::RowOutOfBounds { index: idx, rows });
        }
    }
    if i == j {
        return Err(ContrastiveError::DiagonalPair(i));
    }
    let sim = batch.similarity_matrix()?;
    let row: Vec<f64> = sim.values()[i * rows..(i + 1) * rows].iter().map(|&v| v.to_f64()).collect();
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    Ok((row[j] - max).exp() / denom)
}

/// NT-Xent loss:
/// `l(i,j) = −log[exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ)]`, averaged over both
/// orientations of every pair. Log-sum-exp uses row-max subtraction; the
/// gradient reaches every embedding row.
pub fn ntxent_loss<T: Real>(batch: &EmbeddingBatch<T>) -> Result<Tensor<T>> {
    let rows = batch.rows();
    let scaled = batch.similarity_matrix()?.scale(T::one() / batch.tau);
    let denom = scaled.row_lse_excl_diag()?;
    let pos_idx: Vec<usize> = (0..rows).map(|i| i * rows + batch.partner(i)).collect();
    let pos = scaled.gather_values(&pos_idx)?;
    let per_anchor = denom.sub(&pos)?;
    Ok(per_anchor.sum_all().scale(T::one() / T::from_f64(rows as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::backward;
    use crate::rng::RngStream;

    fn batch(rows: Vec<Vec<f64>>, tau: f64) -> EmbeddingBatch<f64> {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let z = Tensor::leaf(&[rows.len(), d], flat).unwrap();
        EmbeddingBatch::new(z, tau).unwrap()
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        // with one pair each anchor's denominator is its positive alone
        let b = batch(vec![vec![1.0, 2.0], vec![-3.0, 0.5]], 0.7);
        assert_eq!(ntxent_loss(&b).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn all_equal_two_pair_batch_gives_ln_3() {
        let row = vec![0.3, -1.2, 0.8];
        let b = batch(vec![row.clone(), row.clone(), row.clone(), row], 0.5);
        let loss = ntxent_loss(&b).unwrap().item().unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn orthogonal_pairs_match_the_closed_form() {
        // pairs aligned within, orthogonal across; tau = 0.5
        let b = batch(
            vec![
                vec![1.0, 0.0],
                vec![2.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 3.0],
            ],
            0.5,
        );
        let loss = ntxent_loss(&b).unwrap().item().unwrap();
        let expect = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "loss {loss} expect {expect}");
    }

    #[test]
    fn loss_ignores_positive_rescaling_of_rows() {
        let mut rng = RngStream::new(3, "contrastive/test", 0, 0);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let base = ntxent_loss(&batch(rows.clone(), 0.5)).unwrap().item().unwrap();
        let mut scaled = rows;
        for (i, r) in scaled.iter_mut().enumerate() {
            let c = 0.1 + i as f64;
            for v in r.iter_mut() {
                *v *= c;
            }
        }
        let after = ntxent_loss(&batch(scaled, 0.5)).unwrap().item().unwrap();
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_pair_block_permutation() {
        let mut rng = RngStream::new(4, "contrastive/test", 0, 0);
        let rows: Vec<Vec<f64>> =
            (0..8).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let base = ntxent_loss(&batch(rows.clone(), 0.3)).unwrap().item().unwrap();
        // swap pair blocks (0,1) <-> (2,3) and (4,5) <-> (6,7)
        let permuted: Vec<Vec<f64>> = [2, 3, 0, 1, 6, 7, 4, 5]
            .iter()
            .map(|&i| rows[i].clone())
            .collect();
        let after = ntxent_loss(&batch(permuted, 0.3)).unwrap().item().unwrap();
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn partner_map_pairs_adjacent_rows() {
        let b = batch(vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]], 0.5);
        assert_eq!(b.num_pairs(), 2);
        assert_eq!(b.partner(0), 1);
        assert_eq!(b.partner(1), 0);
        assert_eq!(b.partner(2), 3);
        assert_eq!(b.partner(3), 2);
    }

    #[test]
    fn batch_construction_validates_inputs() {
        let z = Tensor::constant(&[3, 2], vec![1.0; 6]).unwrap();
        assert!(matches!(
            EmbeddingBatch::new(z, 0.5),
            Err(ContrastiveError::BadRowCount { rows: 3 })
        ));
        let z = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(EmbeddingBatch::new(z, 0.5), Err(ContrastiveError::ZeroNorm { row: 1 })));
        let z = Tensor::constant(&[2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(
            EmbeddingBatch::new(z, 0.0),
            Err(ContrastiveError::BadTemperature { .. })
        ));
    }

    #[test]
    fn similarity_matrix_is_symmetric_with_unit_diagonal() {
        let mut rng = RngStream::new(5, "contrastive/test", 0, 0);
        let rows: Vec<Vec<f64>> =
            (0..4).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let b = batch(rows, 0.5);
        let s = b.similarity_matrix().unwrap();
        for i in 0..4 {
            assert!((s.values()[i * 4 + i] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!((s.values()[i * 4 + j] - s.values()[j * 4 + i]).abs() < 1e-12);
                assert!(s.values()[i * 4 + j].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn cosine_similarity_closed_forms() {
        let a: Tensor<f64> = Tensor::constant(&[1, 2], vec![2.0, 0.0]).unwrap();
        let b = Tensor::constant(&[1, 2], vec![0.0, 5.0]).unwrap();
        let c = Tensor::constant(&[1, 2], vec![-1.0, 0.0]).unwrap();
        assert!((cosine_similarity(&a, &b).unwrap().item().unwrap()).abs() < 1e-15);
        assert!((cosine_similarity(&a, &c).unwrap().item().unwrap() + 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &a).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        let zero = Tensor::constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(cosine_similarity(&a, &zero).is_err());
    }

    #[test]
    fn pair_probabilities_form_a_distribution_per_anchor() {
        let mut rng = RngStream::new(6, "contrastive/test", 0, 0);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let b = batch(rows, 0.5);
        for i in 0..6 {
            let total: f64 = (0..6).filter(|&j| j != i).map(|j| pair_probability(&b, i, j).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!(pair_probability(&b, 2, 2).is_err());
        assert!(pair_probability(&b, 0, 6).is_err());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut rng = RngStream::new(7, "contrastive/test", 0, 0);
        let base: Vec<f64> = (0..4 * 3).map(|_| rng.normal()).collect();
        let z = Tensor::leaf(&[4, 3], base.clone()).unwrap();
        let loss = ntxent_loss(&EmbeddingBatch::new(z.clone(), 0.5).unwrap()).unwrap();
        backward(&loss).unwrap();
        let g = z.grad();
        let eval = |idx: usize, delta: f64| {
            let mut v = base.clone();
            v[idx] += delta;
            let z = Tensor::constant(&[4, 3], v).unwrap();
            ntxent_loss(&EmbeddingBatch::new(z, 0.5).unwrap()).unwrap().item().unwrap()
        };
        for idx in 0..12 {
            let fd = (eval(idx, 1e-6) - eval(idx, -1e-6)) / 2e-6;
            assert!((g[idx] - fd).abs() / fd.abs().max(1.0) < 1e-7, "coordinate {idx}");
        }
    }
}
