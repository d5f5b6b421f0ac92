//! The two view encoders and their projection heads.
//!
//! Branch 1 is a global encoder: a shared per-point MLP followed by a max
//! pool over all points. Branch 2 is hierarchical: set-abstraction levels
//! (farthest-point sampling, kNN grouping, shared MLP, per-group max pool)
//! ending in a group-all level, plus feature-propagation levels for the
//! per-point segmentation variant. Both tasks share the parameter naming
//! contract `branch{1|2}.<layer>.<leaf>` that checkpoints rely on.

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::config::Task;
use crate::diff::{concat_cols, DiffError, Tensor};
use crate::nn::{Mode, MlpBlock, NnError, ParamStore};
use crate::pointops::{
    farthest_point_sample, group_feature_rows, interpolate_features, knn_group, PointOpsError,
};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cloud has {have} points but the hierarchy needs at least {need}")]
    InsufficientPoints { have: usize, need: usize },
    #[error("encoder config invalid: {0}")]
    BadConfig(String),
    #[error("projection input width {got} does not match head input {expected}")]
    ProjectionWidth { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    PointOps(#[from] PointOpsError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<V> = std::result::Result<V, EncoderError>;

/// One set-abstraction level. `centroids`/`neighbors` are `None` only on the
/// terminal group-all level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaLevel {
    pub centroids: Option<usize>,
    pub neighbors: Option<usize>,
    pub mlp: Vec<usize>,
}

/// Widths of every block in both branches. The representation width `h` is
/// the last width of branch 1 and must agree across branch 2 and the unit
/// pointnet so the two branches are interchangeable under the shared
/// projection head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub branch1_widths: Vec<usize>,
    pub sa_levels: Vec<SaLevel>,
    /// Feature-propagation MLPs, listed coarsest-first (the first entry
    /// consumes the group-all level).
    pub fp_mlps: Vec<Vec<usize>>,
    pub unit_pointnet: Vec<usize>,
    pub proj_cls: Vec<usize>,
    pub proj_seg: Vec<usize>,
}

impl EncoderConfig {
    /// Full-scale configuration for a given sampling budget. Centroid counts
    /// halve when the budget drops to 512 points.
    pub fn standard(point_count: usize) -> Self {
        let (n1, n2) = if point_count <= 512 { (256, 64) } else { (512, 128) };
        EncoderConfig {
            branch1_widths: vec![64, 128, 1024],
            sa_levels: vec![
                SaLevel { centroids: Some(n1), neighbors: Some(32), mlp: vec![64, 64, 128] },
                SaLevel { centroids: Some(n2), neighbors: Some(64), mlp: vec![128, 128, 256] },
                SaLevel { centroids: None, neighbors: None, mlp: vec![256, 512, 1024] },
            ],
            fp_mlps: vec![vec![256, 256], vec![256, 128], vec![128, 128]],
            unit_pointnet: vec![512, 1024],
            proj_cls: vec![512, 256, 128],
            proj_seg: vec![1024, 512],
        }
    }

    /// Miniature widths for gradient checks and fast tests; same topology.
    pub fn tiny() -> Self {
        EncoderConfig {
            branch1_widths: vec![8, 8, 16],
            sa_levels: vec![
                SaLevel { centroids: Some(4), neighbors: Some(3), mlp: vec![8, 8] },
                SaLevel { centroids: Some(2), neighbors: Some(2), mlp: vec![8, 8] },
                SaLevel { centroids: None, neighbors: None, mlp: vec![8, 16] },
            ],
            fp_mlps: vec![vec![8, 8], vec![8, 8], vec![8, 8]],
            unit_pointnet: vec![8, 16],
            proj_cls: vec![8, 4],
            proj_seg: vec![8, 4],
        }
    }

    /// Shared representation width `h`.
    pub fn h_dim(&self) -> usize {
        *self.branch1_widths.last().expect("validated nonempty")
    }

    /// Contrastive embedding width for a task.
    pub fn z_dim(&self, task: Task) -> usize {
        match task {
            Task::Cls => *self.proj_cls.last().expect("validated nonempty"),
            Task::Seg => *self.proj_seg.last().expect("validated nonempty"),
        }
    }

    /// Smallest cloud the hierarchy accepts.
    pub fn min_points(&self) -> usize {
        self.sa_levels
            .first()
            .and_then(|l| l.centroids)
            .unwrap_or(1)
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(EncoderError::BadConfig(msg));
        if self.branch1_widths.is_empty() {
            return fail("branch 1 needs at least one stage".into());
        }
        if self.sa_levels.len() < 2 {
            return fail("need at least one sampled level plus the group-all level".into());
        }
        for block in
            [&self.fp_mlps[..], &[self.unit_pointnet.clone()][..], &[self.proj_cls.clone()][..], &[self.proj_seg.clone()][..]]
                .concat()
        {
            if block.is_empty() {
                return fail("every MLP block needs at least one stage".into());
            }
        }
        let (last, earlier) = self.sa_levels.split_last().expect("len ≥ 2");
        if last.centroids.is_some() || last.neighbors.is_some() {
            return fail("the final abstraction level must group all points (None/None)".into());
        }
        for (i, level) in earlier.iter().enumerate() {
            if level.centroids.is_none() || level.neighbors.is_none() {
                return fail(format!("abstraction level {i} must set centroid and neighbor counts"));
            }
            if level.mlp.is_empty() {
                return fail(format!("abstraction level {i} has an empty MLP"));
            }
            if let Some(next) = earlier.get(i + 1) {
                if next.centroids > level.centroids {
                    return fail(format!("centroid counts must not grow (level {i} → {})", i + 1));
                }
            }
        }
        let h = self.h_dim();
        let sa_out = *last.mlp.last().expect("nonempty");
        if sa_out != h {
            return fail(format!("branch widths disagree: branch1 ends at {h}, branch2 at {sa_out}"));
        }
        if self.fp_mlps.len() != self.sa_levels.len() {
            return fail(format!(
                "need one propagation block per abstraction level ({} vs {})",
                self.fp_mlps.len(),
                self.sa_levels.len()
            ));
        }
        let unit_out = *self.unit_pointnet.last().expect("nonempty");
        if unit_out != h {
            return fail(format!(
                "unit pointnet ends at {unit_out}, but the broadcast half is {h} wide"
            ));
        }
        Ok(())
    }
}

/// Both branches plus the task's projection head, resolved against a
/// [`ParamStore`]. Holds no tensors itself; cheap to clone.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub task: Task,
    conv1: MlpBlock,
    sa: Vec<MlpBlock>,
    fp: Vec<MlpBlock>,
    unit: Option<MlpBlock>,
    proj: MlpBlock,
}

impl DualEncoder {
    /// Register freshly initialized parameters for every block the task
    /// needs and return the wired encoder.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        config: &EncoderConfig,
        task: Task,
    ) -> Result<Self> {
        config.validate()?;
        Self::wire(config, task, Some((store, seed)))
    }

    /// Wire an encoder against parameters that already exist in a store
    /// (checkpoint restore path).
    pub fn attach(config: &EncoderConfig, task: Task) -> Result<Self> {
        config.validate()?;
        Self::wire::<f64>(config, task, None)
    }

    fn wire<T: Real>(
        config: &EncoderConfig,
        task: Task,
        mut init: Option<(&mut ParamStore<T>, u64)>,
    ) -> Result<Self> {
        let block = |prefix: &str,
                         in_dim: usize,
                         widths: &[usize],
                         init: &mut Option<(&mut ParamStore<T>, u64)>|
         -> Result<MlpBlock> {
            Ok(match init {
                Some((store, seed)) => {
                    MlpBlock::init(store, *seed, prefix, in_dim, widths, true)?
                }
                None => MlpBlock::attach(prefix, in_dim, widths, true),
            })
        };
        let conv1 = block("branch1.conv", 6, &config.branch1_widths, &mut init)?;
        let mut sa = Vec::new();
        let mut prev_w = 0usize;
        for (i, level) in config.sa_levels.iter().enumerate() {
            let in_dim = 6 + prev_w;
            sa.push(block(&format!("branch2.sa{i}"), in_dim, &level.mlp, &mut init)?);
            prev_w = *level.mlp.last().expect("validated nonempty");
        }
        let (mut fp, mut unit) = (Vec::new(), None);
        if task == Task::Seg {
            // Skip widths walk back down the hierarchy; the last propagation
            // level concatenates the raw 6D input.
            let mut cur_w = prev_w;
            let n_levels = config.sa_levels.len();
            for (j, widths) in config.fp_mlps.iter().enumerate() {
                let skip_w = if j + 1 < n_levels {
                    *config.sa_levels[n_levels - 2 - j].mlp.last().expect("nonempty")
                } else {
                    6
                };
                fp.push(block(&format!("branch2.fp{j}"), cur_w + skip_w, widths, &mut init)?);
                cur_w = *widths.last().expect("validated nonempty");
            }
            unit = Some(block("branch2.unit", cur_w, &config.unit_pointnet, &mut init)?);
        }
        let h = config.h_dim();
        let proj = match task {
            Task::Cls => block("proj.cls", h, &config.proj_cls, &mut init)?,
            Task::Seg => block("proj.seg", 2 * h, &config.proj_seg, &mut init)?,
        };
        Ok(DualEncoder { config: config.clone(), task, conv1, sa, fp, unit, proj })
    }

    fn features_tensor<T: Real>(cloud: &PointCloud) -> Result<Tensor<T>> {
        let rows: Vec<T> = cloud.feature_rows().iter().map(|&v| T::from_f64(v)).collect();
        Ok(Tensor::constant(&[cloud.len(), 6], rows)?)
    }

    /// Branch 1, global representation: per-point MLP then max pool,
    /// `1×h`.
    pub fn encode_cls_branch1<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cloud: &PointCloud,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let x = Self::features_tensor(cloud)?;
        let feats = self.conv1.forward(store, &x, mode)?;
        Ok(feats.max_over_groups(cloud.len())?)
    }

    /// Shared abstraction pipeline. Returns per-level point coordinates and
    /// features, index 0 being the raw input level and the last entry the
    /// single group-all "point".
    fn run_abstraction<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cloud: &PointCloud,
        mode: Mode,
    ) -> Result<Vec<(Vec<[f64; 3]>, Tensor<T>)>> {
        let need = self.config.min_points();
        if cloud.len() < need {
            return Err(EncoderError::InsufficientPoints { have: cloud.len(), need });
        }
        let mut levels: Vec<(Vec<[f64; 3]>, Tensor<T>)> =
            vec![(cloud.coords.clone(), Self::features_tensor(cloud)?)];
        let mut coords = cloud.coords.clone();
        let mut normals = cloud.normals.clone();
        let mut feats: Option<Tensor<T>> = None;
        for (li, level) in self.config.sa_levels.iter().enumerate() {
            match (level.centroids, level.neighbors) {
                (Some(n1), Some(k)) => {
                    if coords.len() < n1 {
                        return Err(EncoderError::InsufficientPoints {
                            have: coords.len(),
                            need: n1,
                        });
                    }
                    let cent = farthest_point_sample(&coords, n1, 0)?;
                    let set = knn_group(&coords, &normals, &cent, Some(k))?;
                    let rows = group_feature_rows(&set, feats.as_ref())?;
                    let hidden = self.sa[li].forward(store, &rows, mode)?;
                    let pooled = hidden.max_over_groups(set.group_size())?;
                    coords = cent.iter().map(|&i| coords[i]).collect();
                    normals = cent.iter().map(|&i| normals[i]).collect();
                    levels.push((coords.clone(), pooled.clone()));
                    feats = Some(pooled);
                }
                _ => {
                    // terminal group-all level: one group over every
                    // remaining point, raw coordinates
                    let set = knn_group(&coords, &normals, &[], None)?;
                    let rows = group_feature_rows(&set, feats.as_ref())?;
                    let hidden = self.sa[li].forward(store, &rows, mode)?;
                    let pooled = hidden.max_over_groups(coords.len())?;
                    levels.push((vec![[0.0, 0.0, 0.0]], pooled.clone()));
                    feats = Some(pooled);
                }
            }
        }
        Ok(levels)
    }

    /// Branch 2, global representation from the hierarchy, `1×h`.
    pub fn encode_cls_branch2<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cloud: &PointCloud,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let levels = self.run_abstraction(store, cloud, mode)?;
        Ok(levels.last().expect("at least the input level").1.clone())
    }

    /// Branch 1, segmentation: per-point `n×2h` (conv features beside the
    /// broadcast global vector) plus the pooled `1×2h`.
    pub fn encode_seg_branch1<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cloud: &PointCloud,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = cloud.len();
        let x = Self::features_tensor(cloud)?;
        let feats = self.conv1.forward(store, &x, mode)?;
        let global = feats.max_over_groups(n)?;
        let per_point = concat_cols(&[&feats, &global.repeat_row(n)?])?;
        let pooled = per_point.max_over_groups(n)?;
        Ok((per_point, pooled))
    }

    /// Branch 2, segmentation: propagate the hierarchy back to all `n`
    /// points, append the broadcast global vector (`n×2h`), and pool.
    pub fn encode_seg_branch2<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        cloud: &PointCloud,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let unit = self
            .unit
            .as_ref()
            .ok_or_else(|| EncoderError::BadConfig("encoder was built for classification; propagation blocks are absent".into()))?;
        let n = cloud.len();
        let levels = self.run_abstraction(store, cloud, mode)?;
        let global = levels.last().expect("nonempty").1.clone();
        let mut cur_coords = levels.last().expect("nonempty").0.clone();
        let mut cur = global.clone();
        for (j, fp) in self.fp.iter().enumerate() {
            let (target_coords, skip) = &levels[levels.len() - 2 - j];
            let interp = interpolate_features(&cur_coords, &cur, target_coords)?;
            let cat = concat_cols(&[&interp, skip])?;
            cur = fp.forward(store, &cat, mode)?;
            cur_coords = target_coords.clone();
        }
        let propagated = unit.forward(store, &cur, mode)?;
        let per_point = concat_cols(&[&propagated, &global.repeat_row(n)?])?;
        let pooled = per_point.max_over_groups(n)?;
        Ok((per_point, pooled))
    }

    /// Projection head over stacked representation rows (the whole 2N batch
    /// at once, so its normalization sees the full batch). Input width must
    /// be `h` for classification, `2h` for segmentation.
    pub fn project<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        h_rows: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let expected = self.proj.in_dim();
        let got = match h_rows.shape() {
            [_, c] => *c,
            _ => 0,
        };
        if got != expected {
            return Err(EncoderError::ProjectionWidth { expected, got });
        }
        Ok(self.proj.forward(store, h_rows, mode)?)
    }
}
