//! Point cloud container: per-point coordinates and unit-ish normals, with
//! optional per-point integer labels for segmentation targets.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("point cloud must contain at least one point")]
    Empty,
    #[error("coords/normals/labels length mismatch: {coords} coords, {normals} normals{labels}")]
    LengthMismatch { coords: usize, normals: usize, labels: String },
    #[error("non-finite value in {field} at point {index}")]
    NonFinite { field: &'static str, index: usize },
    #[error("label {label} at point {index} out of range (num_classes = {num_classes})")]
    LabelRange { label: u32, index: usize, num_classes: u32 },
}

/// A cloud of `n` points. Geometry is kept in 64-bit; training casts to the
/// working precision at the encoder boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    /// Per-point labels (segmentation targets). `None` for unlabeled clouds
    /// and classification data, where the label lives on the dataset entry.
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(
        coords: Vec<[f64; 3]>,
        normals: Vec<[f64; 3]>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self, CloudError> {
        if coords.is_empty() {
            return Err(CloudError::Empty);
        }
        let label_len = labels.as_ref().map(|l| l.len());
        if normals.len() != coords.len() || label_len.map_or(false, |l| l != coords.len()) {
            return Err(CloudError::LengthMismatch {
                coords: coords.len(),
                normals: normals.len(),
                labels: label_len.map_or(String::new(), |l| format!(", {l} labels")),
            });
        }
        for (i, p) in coords.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CloudError::NonFinite { field: "coords", index: i });
            }
        }
        for (i, p) in normals.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CloudError::NonFinite { field: "normals", index: i });
            }
        }
        Ok(PointCloud { coords, normals, labels })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// All per-point labels must lie in `[0, num_classes)`.
    pub fn check_labels(&self, num_classes: u32) -> Result<(), CloudError> {
        if let Some(labels) = &self.labels {
            for (i, &l) in labels.iter().enumerate() {
                if l >= num_classes {
                    return Err(CloudError::LabelRange { label: l, index: i, num_classes });
                }
            }
        }
        Ok(())
    }

    /// Row-major `n×6` feature matrix `[x y z nx ny nz]`.
    pub fn feature_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 6);
        for (p, nrm) in self.coords.iter().zip(&self.normals) {
            out.extend_from_slice(p);
            out.extend_from_slice(nrm);
        }
        out
    }

    /// Cloud restricted to the given point indices (duplicates allowed).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}

pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
