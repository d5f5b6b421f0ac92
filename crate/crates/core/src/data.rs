//! Dataset I/O, point sampling, split management, and a synthetic vessel
//! generator for desk-scale experiments.
//!
//! On-disk formats are plain text: point files carry one point per line
//! (`x y z nx ny nz [label]`, `#` comments allowed), manifests carry one
//! `relative_path label` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cloud::{CloudError, PointCloud};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: file contains no points")]
    EmptyFile { path: PathBuf },
    #[error("class {class} has no samples in the {part} part; split is impossible")]
    EmptyClass { class: u32, part: &'static str },
    #[error("{name} must lie in (0, 1], got {value}")]
    BadFraction { name: &'static str, value: f64 },
    #[error("cannot sample from an empty cloud")]
    EmptySample,
    #[error("fold count {folds} must be ≥ 2 and ≤ the smallest class size {smallest}")]
    BadFolds { folds: usize, smallest: usize },
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

type Result<V> = std::result::Result<V, DataError>;

/// One dataset entry: a cloud plus its sample-level class label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: u32,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self, classes: u32) -> Vec<usize> {
        let mut counts = vec![0usize; classes as usize];
        for s in &self.samples {
            if (s.label as usize) < counts.len() {
                counts[s.label as usize] += 1;
            }
        }
        counts
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Parse a point file: 6 columns per line (`x y z nx ny nz`) or 7 with a
/// trailing integer per-point label, consistently across the file. Blank
/// lines and `#` comments are skipped.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_cloud(&text, path)
}

fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let mut coords = Vec::new();
    let mut normals = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut labeled: Option<bool> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 && fields.len() != 7 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 6 or 7 columns, found {}", fields.len()),
            });
        }
        let has_label = fields.len() == 7;
        match labeled {
            None => labeled = Some(has_label),
            Some(expected) if expected != has_label => {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: "mixed 6- and 7-column lines in one file".into(),
                });
            }
            _ => {}
        }
        let mut nums = [0.0f64; 6];
        for (i, f) in fields[..6].iter().enumerate() {
            nums[i] = f.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("column {}: {f:?} is not a real number", i + 1),
            })?;
        }
        if has_label {
            let label = fields[6].parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("column 7: {:?} is not an integer label", fields[6]),
            })?;
            labels.push(label);
        }
        coords.push([nums[0], nums[1], nums[2]]);
        normals.push([nums[3], nums[4], nums[5]]);
    }
    if coords.is_empty() {
        return Err(DataError::EmptyFile { path: path.to_path_buf() });
    }
    Ok(PointCloud::new(coords, normals, labeled.unwrap_or(false).then_some(labels))?)
}

/// Serialize with 9 significant digits, enough for the round-trip tolerance.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 96);
    for i in 0..cloud.len() {
        let p = cloud.coords[i];
        let nrm = cloud.normals[i];
        write!(
            out,
            "{:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e}",
            p[0], p[1], p[2], nrm[0], nrm[1], nrm[2]
        )
        .expect("string write");
        if let Some(labels) = &cloud.labels {
            write!(out, " {}", labels[i]).expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Load `relative_path label` manifest lines and every cloud they name.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (rel, label) = line.rsplit_once(char::is_whitespace).ok_or_else(|| DataError::Parse {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            msg: "expected `relative_path label`".into(),
        })?;
        let label: u32 = label.parse().map_err(|_| DataError::Parse {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            msg: format!("{label:?} is not an integer class label"),
        })?;
        let rel = rel.trim();
        let cloud = load_cloud(&base.join(rel))?;
        samples.push(Sample { cloud, label, id: rel.to_string() });
    }
    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset { samples, name })
}

/// Write a dataset as one file per sample plus `manifest.txt`; returns the
/// manifest path.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("{}_{i:04}.txt", ds.name);
        write_cloud(&dir.join(&file), &s.cloud)?;
        writeln!(manifest, "{file} {}", s.label).expect("string write");
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    Ok(mpath)
}

/// Draw `count` points: uniformly without replacement when the budget fits,
/// otherwise every point once plus uniform with-replacement fill. Labels
/// travel with their points.
pub fn sample_points(cloud: &PointCloud, count: usize, rng: &mut RngStream) -> Result<PointCloud> {
    let n = cloud.len();
    if n == 0 || count == 0 {
        return Err(DataError::EmptySample);
    }
    let indices: Vec<usize> = if count <= n {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        order.truncate(count);
        order
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.extend((0..count - n).map(|_| rng.below(n)));
        all
    };
    Ok(cloud.select(&indices))
}

/// Split parameters. `labeled_fraction` controls the limited-label study:
/// the non-test remainder divides into an unlabeled pool A and a labeled
/// part B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_fraction: 0.2, labeled_fraction: 1.0, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("test_fraction", self.test_fraction),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(DataError::BadFraction { name, value });
            }
        }
        Ok(())
    }
}

/// Index sets of one split; disjoint and jointly covering the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    /// Unlabeled pretraining pool (A). Pretraining uses A ∪ B.
    pub pool_a: Vec<usize>,
    /// Labeled downstream training part (B).
    pub labeled_b: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified pick: `target` total across classes, floor of the per-class
/// share first, remainder to the majority class. `order` maps class → its
/// shuffled index list; picked items are drained from the front.
fn stratified_take(order: &mut [Vec<usize>], fraction: f64, target: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(target);
    let mut take: Vec<usize> =
        order.iter().map(|o| ((o.len() as f64) * fraction).floor() as usize).collect();
    let assigned: usize = take.iter().sum();
    if assigned < target {
        let majority = (0..order.len())
            .max_by_key(|&c| order[c].len())
            .expect("at least one class");
        take[majority] += target - assigned;
    }
    for (c, o) in order.iter_mut().enumerate() {
        let k = take[c].min(o.len());
        picked.extend(o.drain(..k));
    }
    picked
}

/// Deterministic stratified split: the test part leaves first at
/// `test_fraction`, then the remainder divides into A and B at
/// `labeled_fraction` (B keeps the labels). Every class must be represented
/// in B and in the test part.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let classes: u32 = ds.samples.iter().map(|s| s.label + 1).max().unwrap_or(1);
    let mut order: Vec<Vec<usize>> = vec![Vec::new(); classes as usize];
    for (i, s) in ds.samples.iter().enumerate() {
        order[s.label as usize].push(i);
    }
    for (c, o) in order.iter_mut().enumerate() {
        if o.is_empty() {
            return Err(DataError::EmptyClass { class: c as u32, part: "dataset" });
        }
        let mut rng = RngStream::new(spec.seed, &format!("split/class{c}"), 0, 0);
        rng.shuffle(o);
    }
    let total = ds.len();
    let test_target = ((total as f64) * spec.test_fraction).round() as usize;
    let mut test = stratified_take(&mut order, spec.test_fraction, test_target);
    let remaining: usize = order.iter().map(|o| o.len()).sum();
    let b_target = ((remaining as f64) * spec.labeled_fraction).round() as usize;
    let mut labeled_b = stratified_take(&mut order, spec.labeled_fraction, b_target);
    let mut pool_a: Vec<usize> = order.into_iter().flatten().collect();
    test.sort_unstable();
    labeled_b.sort_unstable();
    pool_a.sort_unstable();
    for (part, name) in [(&test, "test"), (&labeled_b, "labeled")] {
        let mut seen = vec![false; classes as usize];
        for &i in part.iter() {
            seen[ds.samples[i].label as usize] = true;
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(DataError::EmptyClass { class: c as u32, part: name });
        }
    }
    Ok(Splits { pool_a, labeled_b, test })
}

/// Stratified labeled subset of an index pool (the fold path's stand-in for
/// the A/B division inside [`split_dataset`]): per-class shuffle keyed by the
/// seed, floor share per class, remainder to the majority class. Every class
/// present in the pool must survive into the subset.
pub fn labeled_subset(
    ds: &Dataset,
    pool: &[usize],
    labeled_fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(DataError::BadFraction { name: "labeled_fraction", value: labeled_fraction });
    }
    let classes: u32 = pool.iter().map(|&i| ds.samples[i].label + 1).max().unwrap_or(1);
    let mut order: Vec<Vec<usize>> = vec![Vec::new(); classes as usize];
    for &i in pool {
        order[ds.samples[i].label as usize].push(i);
    }
    for (c, o) in order.iter_mut().enumerate() {
        if o.is_empty() {
            return Err(DataError::EmptyClass { class: c as u32, part: "pool" });
        }
        let mut rng = RngStream::new(seed, &format!("label/class{c}"), 0, 0);
        rng.shuffle(o);
    }
    let target = ((pool.len() as f64) * labeled_fraction).round() as usize;
    let mut picked = stratified_take(&mut order, labeled_fraction, target);
    picked.sort_unstable();
    let mut seen = vec![false; classes as usize];
    for &i in &picked {
        seen[ds.samples[i].label as usize] = true;
    }
    if let Some(c) = seen.iter().position(|&s| !s) {
        return Err(DataError::EmptyClass { class: c as u32, part: "labeled" });
    }
    Ok(picked)
}

/// Stratified k-fold assignment for full reproduction runs: per-class
/// shuffle, then round-robin into folds. Returns per-fold (train, test)
/// index lists.
pub fn kfold_split(ds: &Dataset, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let classes: u32 = ds.samples.iter().map(|s| s.label + 1).max().unwrap_or(1);
    let mut order: Vec<Vec<usize>> = vec![Vec::new(); classes as usize];
    for (i, s) in ds.samples.iter().enumerate() {
        order[s.label as usize].push(i);
    }
    let smallest = order.iter().map(|o| o.len()).min().unwrap_or(0);
    if folds < 2 || folds > smallest {
        return Err(DataError::BadFolds { folds, smallest });
    }
    for (c, o) in order.iter_mut().enumerate() {
        let mut rng = RngStream::new(seed, &format!("kfold/class{c}"), 0, 0);
        rng.shuffle(o);
    }
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for o in &order {
        for (j, &idx) in o.iter().enumerate() {
            fold_members[j % folds].push(idx);
        }
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut test = fold_members[f].clone();
        let mut train: Vec<usize> =
            (0..folds).filter(|&g| g != f).flat_map(|g| fold_members[g].clone()).collect();
        test.sort_unstable();
        train.sort_unstable();
        out.push((train, test));
    }
    Ok(out)
}

/// Synthetic vessel generator settings.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub per_class: usize,
    pub points: usize,
    /// Probability that a point of an aneurysm cloud lands on the bump.
    pub bump_fraction: f64,
    /// Radial surface noise amplitude.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { per_class: 8, points: 256, bump_fraction: 0.3, noise: 0.02 }
    }
}

const VESSEL_RADIUS: f64 = 0.5;
const VESSEL_HALF_HEIGHT: f64 = 1.0;
const BUMP_RADIUS: f64 = 0.3;

/// Generate a two-class dataset: class 0 clouds sample a noisy open cylinder
/// (a vessel segment stand-in, axis along Y), class 1 clouds grow a
/// hemispherical bump whose points carry per-point label 1. Normals are
/// exactly unit length: noise displaces points radially, which leaves the
/// analytic surface normals intact.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(spec.per_class * 2);
    for class in 0..2u32 {
        for i in 0..spec.per_class {
            let mut rng =
                RngStream::new(seed, "synth", class as u64, i as u64);
            let cloud = gen_cloud(spec, class == 1, &mut rng);
            samples.push(Sample { cloud, label: class, id: format!("synth_{class}_{i:04}") });
        }
    }
    Dataset { samples, name: "synthetic".into() }
}

fn gen_cloud(spec: &SynthSpec, with_bump: bool, rng: &mut RngStream) -> PointCloud {
    let mut coords = Vec::with_capacity(spec.points);
    let mut normals = Vec::with_capacity(spec.points);
    let mut labels = Vec::with_capacity(spec.points);
    // bump pose: a spot on the cylinder wall, clear of the rims
    let bump_theta = rng.range(0.0, std::f64::consts::TAU);
    let bump_y = rng.range(-0.5, 0.5);
    let bump_center = [
        VESSEL_RADIUS * bump_theta.cos(),
        bump_y,
        VESSEL_RADIUS * bump_theta.sin(),
    ];
    let bump_out = [bump_theta.cos(), 0.0, bump_theta.sin()];
    // local tangent frame at the bump center
    let t1 = [-bump_theta.sin(), 0.0, bump_theta.cos()];
    let t2 = [0.0, 1.0, 0.0];
    for _ in 0..spec.points {
        if with_bump && rng.range(0.0, 1.0) < spec.bump_fraction {
            // hemisphere point: uniform direction with nonnegative outward
            // component in the bump frame
            let dir = loop {
                let v = [rng.normal(), rng.normal(), rng.normal()];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > 1e-9 {
                    break [v[0] / len, v[1] / len, v[2].abs() / len];
                }
            };
            let radius = BUMP_RADIUS * (1.0 + rng.normal() * spec.noise);
            let world = |j: usize| dir[0] * t1[j] + dir[1] * t2[j] + dir[2] * bump_out[j];
            coords.push([
                bump_center[0] + radius * world(0),
                bump_center[1] + radius * world(1),
                bump_center[2] + radius * world(2),
            ]);
            normals.push([world(0), world(1), world(2)]);
            labels.push(1);
        } else {
            let theta = rng.range(0.0, std::f64::consts::TAU);
            let y = rng.range(-VESSEL_HALF_HEIGHT, VESSEL_HALF_HEIGHT);
            let radius = VESSEL_RADIUS * (1.0 + rng.normal() * spec.noise);
            coords.push([radius * theta.cos(), y, radius * theta.sin()]);
            normals.push([theta.cos(), 0.0, theta.sin()]);
            labels.push(0);
        }
    }
    PointCloud::new(coords, normals, Some(labels)).expect("generator emits valid clouds")
}
