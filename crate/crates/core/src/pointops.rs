//! Geometric kernels for the hierarchical branch: farthest-point sampling,
//! k-nearest-neighbor grouping, and inverse-square-distance interpolation.
//!
//! Everything here is brute force on purpose; clouds top out at 2048 points
//! and the O(n·m) scans are already cheap next to the dense layers.

use thiserror::Error;

use crate::cloud::squared_distance;
use crate::diff::{concat_cols, DiffError, Tensor};
use crate::scalar::Real;

/// Inverse-square weight regularizer.
pub const INTERP_EPS: f64 = 1e-8;
/// Below this distance a destination is treated as coincident with a source.
pub const COINCIDE_EPS: f64 = 1e-10;
/// Interpolation pulls from this many nearest sources (fewer if the source
/// set is smaller).
pub const INTERP_NEIGHBORS: usize = 3;

#[derive(Debug, Error)]
pub enum PointOpsError {
    #[error("farthest_point_sample: requested {requested} centroids from {available} points")]
    TooManyCentroids { requested: usize, available: usize },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: index {index} out of bounds for {len} points")]
    IndexOutOfBounds { op: &'static str, index: usize, len: usize },
    #[error("{op}: non-finite coordinate at point {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<V> = std::result::Result<V, PointOpsError>;

/// Greedy max-min farthest-point sampling. The first pick is `start_index`;
/// each later pick maximizes its minimum squared distance to everything
/// already chosen, breaking ties toward the lowest index. Fully
/// deterministic.
pub fn farthest_point_sample(
    coords: &[[f64; 3]],
    n1: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = coords.len();
    if n == 0 {
        return Err(PointOpsError::EmptyInput { op: "farthest_point_sample" });
    }
    if n1 == 0 || n1 > n {
        return Err(PointOpsError::TooManyCentroids { requested: n1, available: n });
    }
    if start_index >= n {
        return Err(PointOpsError::IndexOutOfBounds {
            op: "farthest_point_sample",
            index: start_index,
            len: n,
        });
    }
    let mut selected = Vec::with_capacity(n1);
    selected.push(start_index);
    // min squared distance from each point to the selected set
    let mut dist: Vec<f64> = coords
        .iter()
        .map(|p| squared_distance(p, &coords[start_index]))
        .collect();
    while selected.len() < n1 {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = squared_distance(&coords[i], &coords[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// One abstraction level's neighborhoods.
pub struct GroupedSet {
    /// Centroid coordinates, `n1×3`.
    pub centroids: Vec<[f64; 3]>,
    /// `n1` groups of `k` point indices into the level's cloud, nearest
    /// first.
    pub group_indices: Vec<Vec<usize>>,
    /// Flattened `(n1·k)×6` rows of `[coords − centroid ‖ normal]`.
    pub local_features: Vec<f64>,
}

impl GroupedSet {
    pub fn group_size(&self) -> usize {
        self.group_indices.first().map_or(0, |g| g.len())
    }

    /// Neighbor indices flattened in group order, length `n1·k`.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.group_indices.iter().flatten().copied().collect()
    }
}

/// k-nearest-neighbor grouping around the given centroids. Distance is over
/// coordinates only; ties break to the lower index. Local coordinates are
/// translated so the centroid sits at the origin; normals are copied as-is.
/// When `k` exceeds the cloud size, the nearest point fills the remainder.
/// `k = None` groups every point into each centroid's group, untranslated
/// (the terminal "group all" level, which collapses to a single global
/// group).
pub fn knn_group(
    coords: &[[f64; 3]],
    normals: &[[f64; 3]],
    centroid_indices: &[usize],
    k: Option<usize>,
) -> Result<GroupedSet> {
    let n = coords.len();
    if n == 0 {
        return Err(PointOpsError::EmptyInput { op: "knn_group" });
    }
    for &ci in centroid_indices {
        if ci >= n {
            return Err(PointOpsError::IndexOutOfBounds { op: "knn_group", index: ci, len: n });
        }
    }
    let mut group_indices = Vec::with_capacity(centroid_indices.len().max(1));
    let mut centroids = Vec::new();
    match k {
        None => {
            // Terminal level: a single group holding every point with raw
            // (untranslated) coordinates, so the global feature keeps
            // absolute position information.
            group_indices.push((0..n).collect::<Vec<_>>());
            centroids.push([0.0, 0.0, 0.0]);
        }
        Some(k) => {
            if k == 0 {
                return Err(PointOpsError::EmptyInput { op: "knn_group (k = 0)" });
            }
            for &ci in centroid_indices {
                let c = coords[ci];
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    squared_distance(&coords[a], &c)
                        .partial_cmp(&squared_distance(&coords[b], &c))
                        .expect("finite distances")
                        .then(a.cmp(&b))
                });
                order.truncate(k);
                while order.len() < k {
                    order.push(order[0]);
                }
                group_indices.push(order);
                centroids.push(c);
            }
        }
    }
    let kk = group_indices[0].len();
    let mut local_features = Vec::with_capacity(group_indices.len() * kk * 6);
    for (g, group) in group_indices.iter().enumerate() {
        let c = if k.is_some() { centroids[g] } else { [0.0, 0.0, 0.0] };
        for &pi in group {
            local_features.push(coords[pi][0] - c[0]);
            local_features.push(coords[pi][1] - c[1]);
            local_features.push(coords[pi][2] - c[2]);
            local_features.extend_from_slice(&normals[pi]);
        }
    }
    Ok(GroupedSet { centroids, group_indices, local_features })
}

/// Precomputed interpolation stencil: for each destination point, up to
/// three source indices and their normalized weights.
pub struct InterpPlan {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

/// Build the inverse-square-distance stencil from source to destination
/// coordinates. Weights are `1/(d² + ε)` over the three nearest sources
/// (all of them when fewer than three exist), normalized to sum to one.
/// A destination closer than the coincidence threshold to its nearest
/// source copies that source exactly.
pub fn interpolation_plan(
    src_coords: &[[f64; 3]],
    dst_coords: &[[f64; 3]],
) -> Result<InterpPlan> {
    if src_coords.is_empty() {
        return Err(PointOpsError::EmptyInput { op: "interpolation_plan" });
    }
    for (i, p) in src_coords.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(PointOpsError::NonFinite { op: "interpolation_plan (source)", index: i });
        }
    }
    for (i, p) in dst_coords.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(PointOpsError::NonFinite { op: "interpolation_plan (destination)", index: i });
        }
    }
    let m = INTERP_NEIGHBORS.min(src_coords.len());
    let mut indices = Vec::with_capacity(dst_coords.len());
    let mut weights = Vec::with_capacity(dst_coords.len());
    for d in dst_coords {
        let mut order: Vec<usize> = (0..src_coords.len()).collect();
        order.sort_by(|&a, &b| {
            squared_distance(&src_coords[a], d)
                .partial_cmp(&squared_distance(&src_coords[b], d))
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        order.truncate(m);
        let d0 = squared_distance(&src_coords[order[0]], d).sqrt();
        if d0 < COINCIDE_EPS {
            indices.push(vec![order[0]]);
            weights.push(vec![1.0]);
            continue;
        }
        let raw: Vec<f64> = order
            .iter()
            .map(|&s| 1.0 / (squared_distance(&src_coords[s], d) + INTERP_EPS))
            .collect();
        let total: f64 = raw.iter().sum();
        weights.push(raw.into_iter().map(|w| w / total).collect());
        indices.push(order);
    }
    Ok(InterpPlan { indices, weights })
}

/// Interpolate per-source features (`n1×c`) onto the destination points
/// (`n×c`), differentiable through the feature tensor. The stencil itself is
/// a function of coordinates only and carries no gradient.
pub fn interpolate_features<T: Real>(
    src_coords: &[[f64; 3]],
    src_feats: &Tensor<T>,
    dst_coords: &[[f64; 3]],
) -> Result<Tensor<T>> {
    let plan = interpolation_plan(src_coords, dst_coords)?;
    apply_interpolation(&plan, src_feats, dst_coords.len())
}

/// Apply a prebuilt stencil. Expressed with gather and column-scale
/// primitives so the backward pass comes for free.
pub fn apply_interpolation<T: Real>(
    plan: &InterpPlan,
    src_feats: &Tensor<T>,
    n_dst: usize,
) -> Result<Tensor<T>> {
    assert_eq!(plan.indices.len(), n_dst, "plan built for a different destination count");
    let max_nb = plan.indices.iter().map(|v| v.len()).max().unwrap_or(0);
    let mut acc: Option<Tensor<T>> = None;
    for j in 0..max_nb {
        // stencil column j: weight 0 where a destination has fewer neighbors
        let idx: Vec<usize> =
            plan.indices.iter().map(|nb| *nb.get(j).unwrap_or(&nb[0])).collect();
        let w: Vec<T> = plan
            .weights
            .iter()
            .map(|ws| T::from_f64(ws.get(j).copied().unwrap_or(0.0)))
            .collect();
        let w_col = Tensor::constant(&[n_dst, 1], w)?;
        let term = src_feats.gather_rows(&idx)?.mul_col_vec(&w_col)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("at least one neighbor per destination"))
}

/// Assemble per-group MLP input rows: `[local coords ‖ normals ‖ gathered
/// previous features]`, flattened to `(n1·k)×(6+c_prev)`. Pass `None` for
/// the first level, whose rows are the raw 6D features.
pub fn group_feature_rows<T: Real>(
    set: &GroupedSet,
    prev_feats: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let rows = set.group_indices.len() * set.group_size();
    let geo: Vec<T> = set.local_features.iter().map(|&v| T::from_f64(v)).collect();
    let geo = Tensor::constant(&[rows, 6], geo)?;
    match prev_feats {
        None => Ok(geo),
        Some(f) => {
            let gathered = f.gather_rows(&set.flat_indices())?;
            Ok(concat_cols(&[&geo, &gathered])?)
        }
    }
}
