//! The two training loops behind the CLI: contrastive pretraining over
//! augmented pairs, then supervised head training on frozen representations,
//! plus evaluation and the ablation drivers.
//!
//! Every random decision draws from a stream keyed by (seed, purpose, epoch,
//! sample), so a run is a pure function of (config, dataset, seed) and a
//! resumed run walks the exact trajectory of an uninterrupted one.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentKind;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::cloud::PointCloud;
use crate::config::{ConfigError, RunConfig, Task};
use crate::contrastive::{ntxent_loss, ContrastiveError, EmbeddingBatch};
use crate::data::{
    kfold_split, labeled_subset, sample_points, split_dataset, DataError, Dataset, Splits,
};
use crate::diff::{backward, stack_rows, concat_cols, DiffError, Tensor};
use crate::downstream::{
    cross_entropy, predict_rows, ClassifierHead, DownstreamError, SegmenterHead,
};
use crate::encoders::{DualEncoder, EncoderConfig, EncoderError};
use crate::metrics::{
    f1, iou, per_class_accuracy, ConfusionCounts, MetricsError, MetricsReport,
};
use crate::nn::{grad_check, GradCheckReport, Mode, NnError, ParamStore};
use crate::optim::{lr_at, Adam, AdamConfig, OptimError};
use crate::rng::RngStream;
use crate::scalar::Real;

/// Both downstream tasks are binary: healthy vessel = 0, aneurysm = 1.
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("pretraining needs at least two clouds, got {got}")]
    PoolTooSmall { got: usize },
    #[error("downstream training needs a non-empty labeled set")]
    EmptyLabeled,
    #[error("evaluation needs a non-empty test set")]
    EmptyEval,
    #[error("epoch {epoch} produced no usable batch (every batch had fewer than two pairs)")]
    NoUsableBatch { epoch: usize },
    #[error("{what} was written under a different configuration (hash mismatch)")]
    ConfigHashMismatch { what: &'static str },
    #[error("encoder parameters changed during downstream training; the encoders must stay frozen")]
    EncoderDrift,
    #[error("cloud {id} carries no per-point labels; segmentation needs them")]
    MissingPointLabels { id: String },
    #[error("cannot infer head layout from checkpoint: {detail}")]
    HeadShape { detail: String },
    #[error("fold index {index} out of range for {folds} folds")]
    BadFold { index: usize, folds: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<V> = std::result::Result<V, TrainError>;

/// One machine-readable line per epoch. `wall_ms` is the only field allowed
/// to differ between identically seeded runs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    pub wall_ms: u64,
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

fn append_record(path: &Path, record: &EpochRecord) -> Result<()> {
    let line = serde_json::to_string(record).expect("epoch record always serializes");
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_at(path))?;
    writeln!(file, "{line}").map_err(io_at(path))
}

/// Full parameter-and-optimizer snapshot, `epoch` = completed epochs.
fn snapshot<T: Real>(store: &ParamStore<T>, adam: &Adam<T>, hash: [u8; 32], epoch: u32) -> Checkpoint {
    let mut ckpt = Checkpoint::from_store(store, hash, epoch);
    for (name, values) in adam.export_state() {
        let row: Vec<f32> = values.iter().map(|v| v.to_f32_lossy()).collect();
        ckpt.push(&name, vec![row.len()], row);
    }
    ckpt
}

/// The downstream classification representation: both branches' global
/// vectors side by side, `1×2h`.
fn cls_representation<T: Real>(
    encoder: &DualEncoder,
    store: &mut ParamStore<T>,
    cloud: &PointCloud,
    mode: Mode,
) -> Result<Tensor<T>> {
    let a = encoder.encode_cls_branch1(store, cloud, mode)?;
    let b = encoder.encode_cls_branch2(store, cloud, mode)?;
    Ok(concat_cols(&[&a, &b])?)
}

/// The downstream segmentation representation: both branches' per-point
/// tensors side by side, `n×4h`.
fn seg_representation<T: Real>(
    encoder: &DualEncoder,
    store: &mut ParamStore<T>,
    cloud: &PointCloud,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (a, _) = encoder.encode_seg_branch1(store, cloud, mode)?;
    let (b, _) = encoder.encode_seg_branch2(store, cloud, mode)?;
    Ok(concat_cols(&[&a, &b])?)
}

/// Detach a representation from the graph that built it, so backward passes
/// through the head stop at the cache.
fn detach<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::constant(t.shape(), t.values().to_vec())?)
}

pub struct PretrainSpec<'a> {
    pub config: &'a RunConfig,
    pub encoder: &'a EncoderConfig,
    /// Where per-epoch records and the rolling checkpoint land; `None` keeps
    /// everything in memory.
    pub out_dir: Option<&'a Path>,
    /// Checkpoint to continue from; its config hash must match.
    pub resume: Option<&'a Checkpoint>,
    /// Stop after this many completed epochs even if the config asks for
    /// more (models an interrupted run; resume picks up from here).
    pub stop_after_epoch: Option<usize>,
}

pub struct PretrainOutcome<T: Real> {
    pub store: ParamStore<T>,
    /// Records for the epochs this invocation ran.
    pub records: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

/// Contrastive pretraining over the unlabeled pool. Each batch builds one
/// augmented pair per cloud, encodes view A through branch 1 and view B
/// through branch 2, projects the stacked `2N` rows in (a1, b1, a2, b2, …)
/// order, and steps every encoder and projection parameter on the NT-Xent
/// loss. The last incomplete batch of an epoch is dropped.
pub fn pretrain<T: Real>(
    ds: &Dataset,
    pool: &[usize],
    spec: &PretrainSpec<'_>,
) -> Result<PretrainOutcome<T>> {
    let cfg = spec.config;
    cfg.validate()?;
    if pool.len() < 2 {
        return Err(TrainError::PoolTooSmall { got: pool.len() });
    }
    let hash = cfg.hash();
    let mut store = ParamStore::<T>::new();
    let encoder = DualEncoder::init(&mut store, cfg.seed, spec.encoder, cfg.task)?;
    let mut adam = Adam::new(AdamConfig::with_decay(cfg.weight_decay_pretrain, false));
    let mut start_epoch = 0usize;
    if let Some(ckpt) = spec.resume {
        if ckpt.config_hash != hash {
            return Err(TrainError::ConfigHashMismatch { what: "resume checkpoint" });
        }
        ckpt.apply_to_store(&mut store)?;
        adam.import_state(&ckpt.entries_with_prefix("optim"));
        start_epoch = ckpt.epoch as usize;
    }
    let trainable = store.trainable_names(None);
    let end_epoch = spec.stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let records_path = spec.out_dir.map(|d| d.join("pretrain_records.jsonl"));
    let ckpt_path = spec.out_dir.map(|d| d.join("pretrain.ckpt"));
    let mut records = Vec::new();
    let mut checkpoint = snapshot(&store, &adam, hash, start_epoch as u32);
    for epoch in start_epoch..end_epoch {
        let started = Instant::now();
        let lr = lr_at(cfg.base_lr, epoch);
        let mut order = pool.to_vec();
        RngStream::new(cfg.seed, "pretrain/shuffle", epoch as u64, 0).shuffle(&mut order);
        let full: Vec<&[usize]> = order.chunks_exact(cfg.batch_size).collect();
        // A pool smaller than one batch still trains on what it has.
        let batches: Vec<&[usize]> =
            if full.is_empty() { vec![order.as_slice()] } else { full };
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for batch in batches {
            if batch.len() < 2 {
                eprintln!(
                    "warning: skipping a batch of {} pair(s); the contrastive loss needs at least two",
                    batch.len()
                );
                continue;
            }
            let mut rows: Vec<Tensor<T>> = Vec::with_capacity(2 * batch.len());
            for &idx in batch {
                let cloud = &ds.samples[idx].cloud;
                let mut sample_rng =
                    RngStream::new(cfg.seed, "pretrain/sample", epoch as u64, idx as u64);
                let sampled = sample_points(cloud, cfg.point_count, &mut sample_rng)?;
                let mut rng_a =
                    RngStream::new(cfg.seed, "pretrain/aug_a", epoch as u64, idx as u64);
                let mut rng_b =
                    RngStream::new(cfg.seed, "pretrain/aug_b", epoch as u64, idx as u64);
                let pair = crate::augment::make_pair(&sampled, &cfg.augment, &mut rng_a, &mut rng_b, idx);
                let (ha, hb) = match cfg.task {
                    Task::Cls => (
                        encoder.encode_cls_branch1(&mut store, &pair.view_a, Mode::Train)?,
                        encoder.encode_cls_branch2(&mut store, &pair.view_b, Mode::Train)?,
                    ),
                    Task::Seg => (
                        encoder.encode_seg_branch1(&mut store, &pair.view_a, Mode::Train)?.1,
                        encoder.encode_seg_branch2(&mut store, &pair.view_b, Mode::Train)?.1,
                    ),
                };
                rows.push(ha);
                rows.push(hb);
            }
            let refs: Vec<&Tensor<T>> = rows.iter().collect();
            let h = stack_rows(&refs)?;
            // One projection pass over all 2N rows, so its normalization
            // sees the whole batch.
            let z = encoder.project(&mut store, &h, Mode::Train)?;
            let batch_emb = EmbeddingBatch::new(z, T::from_f64(cfg.tau))?;
            let loss = ntxent_loss(&batch_emb)?;
            backward(&loss)?;
            adam.step(&mut store, &trainable, lr)?;
            loss_sum += loss.item()?.to_f64();
            used += 1;
        }
        if used == 0 {
            return Err(TrainError::NoUsableBatch { epoch });
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / used as f64,
            train_accuracy: None,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(path) = &records_path {
            append_record(path, &record)?;
        }
        records.push(record);
        checkpoint = snapshot(&store, &adam, hash, (epoch + 1) as u32);
        if let Some(path) = &ckpt_path {
            checkpoint.save(path)?;
        }
    }
    Ok(PretrainOutcome { store, records, checkpoint })
}

pub struct DownstreamSpec<'a> {
    pub config: &'a RunConfig,
    pub encoder: &'a EncoderConfig,
    /// Hidden widths of the head; the class output layer is appended.
    pub head_hidden: &'a [usize],
    pub out_dir: Option<&'a Path>,
    /// End training early once train accuracy (percent) reaches this level.
    pub stop_at_accuracy: Option<f64>,
}

pub struct DownstreamOutcome<T: Real> {
    pub store: ParamStore<T>,
    pub records: Vec<EpochRecord>,
    /// Head parameters only; pair with the encoder checkpoint to evaluate.
    pub checkpoint: Checkpoint,
    pub encoder_fingerprint_before: [u8; 32],
    pub encoder_fingerprint_after: [u8; 32],
}

/// Representation cache for the labeled set: one detached tensor per cloud
/// plus its labels (one per sample for classification, one per point for
/// segmentation).
struct RepCache<T: Real> {
    reps: Vec<Tensor<T>>,
    labels: Vec<Vec<usize>>,
}

fn build_cache<T: Real>(
    ds: &Dataset,
    labeled: &[usize],
    encoder: &DualEncoder,
    store: &mut ParamStore<T>,
    cfg: &RunConfig,
) -> Result<RepCache<T>> {
    let mut reps = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    for &idx in labeled {
        let sample = &ds.samples[idx];
        let mut rng = RngStream::new(cfg.seed, "downstream/sample", 0, idx as u64);
        let sampled = sample_points(&sample.cloud, cfg.point_count, &mut rng)?;
        match cfg.task {
            Task::Cls => {
                let rep = cls_representation(encoder, store, &sampled, Mode::Eval)?;
                reps.push(detach(&rep)?);
                labels.push(vec![sample.label as usize]);
            }
            Task::Seg => {
                let point_labels = sampled
                    .labels
                    .clone()
                    .ok_or_else(|| TrainError::MissingPointLabels { id: sample.id.clone() })?;
                let rep = seg_representation(encoder, store, &sampled, Mode::Eval)?;
                reps.push(detach(&rep)?);
                labels.push(point_labels.iter().map(|&l| l as usize).collect());
            }
        }
    }
    Ok(RepCache { reps, labels })
}

enum Head {
    Cls(ClassifierHead),
    Seg(SegmenterHead),
}

impl Head {
    fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        Ok(match self {
            Head::Cls(h) => h.forward(store, x, mode)?,
            Head::Seg(h) => h.forward(store, x, mode)?,
        })
    }
}

/// Train a supervised head on cached, frozen representations of the labeled
/// set. The encoders run once in eval mode to fill the cache; their
/// parameters and running statistics are fingerprinted before and after and
/// must not move.
pub fn train_downstream<T: Real>(
    ds: &Dataset,
    labeled: &[usize],
    encoder_ckpt: &Checkpoint,
    spec: &DownstreamSpec<'_>,
) -> Result<DownstreamOutcome<T>> {
    let cfg = spec.config;
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(TrainError::EmptyLabeled);
    }
    let hash = cfg.hash();
    if encoder_ckpt.config_hash != hash {
        return Err(TrainError::ConfigHashMismatch { what: "encoder checkpoint" });
    }
    let mut store = ParamStore::<T>::new();
    let encoder = DualEncoder::init(&mut store, cfg.seed, spec.encoder, cfg.task)?;
    encoder_ckpt.restore_prefixes(&mut store, &["branch1", "branch2", "proj"])?;
    let encoder_names = store.names();
    let fingerprint_before = store.fingerprint_subset(&encoder_names);
    let cache = build_cache(ds, labeled, &encoder, &mut store, cfg)?;
    let h = spec.encoder.h_dim();
    let head = match cfg.task {
        Task::Cls => Head::Cls(ClassifierHead::init(
            &mut store,
            cfg.seed,
            2 * h,
            spec.head_hidden,
            NUM_CLASSES,
        )?),
        Task::Seg => Head::Seg(SegmenterHead::init(
            &mut store,
            cfg.seed,
            4 * h,
            spec.head_hidden,
            NUM_CLASSES,
        )?),
    };
    let head_names = store.trainable_names(Some("head"));
    let mut adam =
        Adam::new(AdamConfig::with_decay(cfg.weight_decay_downstream, cfg.decoupled_decay));
    let records_path = spec.out_dir.map(|d| d.join("downstream_records.jsonl"));
    let ckpt_path = spec.out_dir.map(|d| d.join("downstream.ckpt"));
    // Whole-cache tensors for the post-epoch accuracy pass.
    let all_refs: Vec<&Tensor<T>> = cache.reps.iter().collect();
    let all_reps = stack_rows(&all_refs)?;
    let all_labels: Vec<usize> = cache.labels.iter().flatten().copied().collect();
    let mut records = Vec::new();
    let mut completed = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg.base_lr, epoch);
        let mut order: Vec<usize> = (0..cache.reps.len()).collect();
        RngStream::new(cfg.seed, "downstream/shuffle", epoch as u64, 0).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        // Short final batches are kept: cross-entropy stays well defined.
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<&Tensor<T>> = chunk.iter().map(|&i| &cache.reps[i]).collect();
            let x = stack_rows(&parts)?;
            let y: Vec<usize> =
                chunk.iter().flat_map(|&i| cache.labels[i].iter().copied()).collect();
            let logits = head.forward(&mut store, &x, Mode::Train)?;
            let loss = cross_entropy(&logits, &y)?;
            backward(&loss)?;
            adam.step(&mut store, &head_names, lr)?;
            loss_sum += loss.item()?.to_f64();
            used += 1;
        }
        let logits = head.forward(&mut store, &all_reps, Mode::Eval)?;
        let pred = predict_rows(&logits);
        let correct = pred.iter().zip(&all_labels).filter(|(p, t)| p == t).count();
        let accuracy = 100.0 * correct as f64 / all_labels.len() as f64;
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / used.max(1) as f64,
            train_accuracy: Some(accuracy),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(path) = &records_path {
            append_record(path, &record)?;
        }
        records.push(record);
        completed = epoch + 1;
        if spec.stop_at_accuracy.is_some_and(|target| accuracy >= target) {
            break;
        }
    }
    let fingerprint_after = store.fingerprint_subset(&encoder_names);
    if fingerprint_after != fingerprint_before {
        return Err(TrainError::EncoderDrift);
    }
    let checkpoint = Checkpoint::from_store_prefixes(&store, &["head"], hash, completed as u32);
    if let Some(path) = &ckpt_path {
        checkpoint.save(path)?;
    }
    Ok(DownstreamOutcome {
        store,
        records,
        checkpoint,
        encoder_fingerprint_before: fingerprint_before,
        encoder_fingerprint_after: fingerprint_after,
    })
}

/// Read the head layout back out of its checkpoint: stage weights are
/// `head.<task>.<i>.weight` with dims `[out, in]`.
fn infer_head_widths(ckpt: &Checkpoint, prefix: &str) -> Result<(usize, Vec<usize>)> {
    let mut stages: Vec<(usize, usize, usize)> = Vec::new();
    for t in &ckpt.tensors {
        let Some(rest) = t.name.strip_prefix(&format!("{prefix}.")) else { continue };
        let Some(index) = rest.strip_suffix(".weight") else { continue };
        let Ok(i) = index.parse::<usize>() else { continue };
        match t.dims.as_slice() {
            [out, inp] => stages.push((i, *out, *inp)),
            other => {
                return Err(TrainError::HeadShape {
                    detail: format!("{} has rank {} weight", t.name, other.len()),
                })
            }
        }
    }
    if stages.is_empty() {
        return Err(TrainError::HeadShape {
            detail: format!("no {prefix}.*.weight tensors present"),
        });
    }
    stages.sort_unstable();
    for (want, (got, _, _)) in stages.iter().enumerate() {
        if *got != want {
            return Err(TrainError::HeadShape {
                detail: format!("stage indices not contiguous: missing {prefix}.{want}.weight"),
            });
        }
    }
    let in_dim = stages[0].2;
    let widths: Vec<usize> = stages.iter().map(|&(_, out, _)| out).collect();
    Ok((in_dim, widths))
}

/// Evaluate an encoder + head checkpoint pair on a test set and report the
/// two-class metrics: per-class accuracy and F1 for classification,
/// per-class accuracy and IoU (pooled and mean per cloud) for segmentation.
pub fn evaluate<T: Real>(
    ds: &Dataset,
    test: &[usize],
    encoder_ckpt: &Checkpoint,
    head_ckpt: &Checkpoint,
    config: &RunConfig,
    enc_cfg: &EncoderConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    if test.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let hash = config.hash();
    if encoder_ckpt.config_hash != hash {
        return Err(TrainError::ConfigHashMismatch { what: "encoder checkpoint" });
    }
    if head_ckpt.config_hash != hash {
        return Err(TrainError::ConfigHashMismatch { what: "head checkpoint" });
    }
    let mut store = ParamStore::<T>::new();
    let encoder = DualEncoder::init(&mut store, config.seed, enc_cfg, config.task)?;
    encoder_ckpt.restore_prefixes(&mut store, &["branch1", "branch2", "proj"])?;
    let head_prefix = match config.task {
        Task::Cls => "head.cls",
        Task::Seg => "head.seg",
    };
    let (in_dim, widths) = infer_head_widths(head_ckpt, head_prefix)?;
    let (hidden, classes) = widths.split_at(widths.len() - 1);
    if classes[0] != NUM_CLASSES {
        return Err(TrainError::HeadShape {
            detail: format!("head emits {} classes, this evaluation reports {}", classes[0], NUM_CLASSES),
        });
    }
    let head = match config.task {
        Task::Cls => {
            Head::Cls(ClassifierHead::init(&mut store, config.seed, in_dim, hidden, NUM_CLASSES)?)
        }
        Task::Seg => {
            Head::Seg(SegmenterHead::init(&mut store, config.seed, in_dim, hidden, NUM_CLASSES)?)
        }
    };
    head_ckpt.restore_prefixes(&mut store, &["head"])?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut cloud_iou: Vec<(f64, f64)> = Vec::new();
    for &idx in test {
        let sample = &ds.samples[idx];
        let mut rng = RngStream::new(config.seed, "eval/sample", 0, idx as u64);
        let sampled = sample_points(&sample.cloud, config.point_count, &mut rng)?;
        match config.task {
            Task::Cls => {
                let rep = cls_representation(&encoder, &mut store, &sampled, Mode::Eval)?;
                let logits = head.forward(&mut store, &rep, Mode::Eval)?;
                pred.push(predict_rows(&logits)[0]);
                truth.push(sample.label as usize);
            }
            Task::Seg => {
                let labels = sampled
                    .labels
                    .clone()
                    .ok_or_else(|| TrainError::MissingPointLabels { id: sample.id.clone() })?;
                let rep = seg_representation(&encoder, &mut store, &sampled, Mode::Eval)?;
                let logits = head.forward(&mut store, &rep, Mode::Eval)?;
                let p = predict_rows(&logits);
                let t: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                cloud_iou.push((iou(&p, &t, 0)?, iou(&p, &t, 1)?));
                pred.extend(p);
                truth.extend(t);
            }
        }
    }
    let healthy_accuracy = per_class_accuracy(&pred, &truth, 0)?;
    let aneurysm_accuracy = per_class_accuracy(&pred, &truth, 1)?;
    let report = match config.task {
        Task::Cls => {
            let conf = ConfusionCounts::from_pairs(&pred, &truth, NUM_CLASSES)?;
            MetricsReport {
                task: config.task.as_str().into(),
                seed: config.seed,
                config_hash: config.hash_hex(),
                samples: test.len(),
                healthy_accuracy,
                aneurysm_accuracy,
                f1_aneurysm: Some(f1(&conf, 1)),
                healthy_iou: None,
                aneurysm_iou: None,
                mean_cloud_healthy_iou: None,
                mean_cloud_aneurysm_iou: None,
            }
        }
        Task::Seg => {
            let count = cloud_iou.len() as f64;
            let mean_v = cloud_iou.iter().map(|c| c.0).sum::<f64>() / count;
            let mean_a = cloud_iou.iter().map(|c| c.1).sum::<f64>() / count;
            MetricsReport {
                task: config.task.as_str().into(),
                seed: config.seed,
                config_hash: config.hash_hex(),
                samples: test.len(),
                healthy_accuracy,
                aneurysm_accuracy,
                f1_aneurysm: None,
                healthy_iou: Some(iou(&pred, &truth, 0)?),
                aneurysm_iou: Some(iou(&pred, &truth, 1)?),
                mean_cloud_healthy_iou: Some(mean_v),
                mean_cloud_aneurysm_iou: Some(mean_a),
            }
        }
    };
    Ok(report)
}

/// Resolve the dataset division: the configured stratified split by default,
/// or one fold of a stratified k-fold when `(folds, index)` is given. In the
/// fold case the labeled part B is drawn from the fold's training side at
/// the configured labeled fraction.
pub fn resolve_splits(
    ds: &Dataset,
    config: &RunConfig,
    fold: Option<(usize, usize)>,
) -> Result<Splits> {
    match fold {
        None => Ok(split_dataset(ds, &config.split)?),
        Some((folds, index)) => {
            let parts = kfold_split(ds, folds, config.split.seed)?;
            if index >= parts.len() {
                return Err(TrainError::BadFold { index, folds });
            }
            let (train, test) = parts[index].clone();
            let labeled_b =
                labeled_subset(ds, &train, config.split.labeled_fraction, config.split.seed)?;
            let pool_a: Vec<usize> =
                train.iter().copied().filter(|i| labeled_b.binary_search(i).is_err()).collect();
            Ok(Splits { pool_a, labeled_b, test })
        }
    }
}

pub struct PipelineSpec<'a> {
    pub config: &'a RunConfig,
    pub encoder: &'a EncoderConfig,
    pub head_hidden: &'a [usize],
    pub out_dir: Option<&'a Path>,
    pub fold: Option<(usize, usize)>,
}

pub struct PipelineOutcome {
    pub pretrain_records: Vec<EpochRecord>,
    pub downstream_records: Vec<EpochRecord>,
    pub report: MetricsReport,
}

/// The full two-stage pipeline: split, pretrain on A ∪ B, train the head on
/// B, evaluate on the held-out part. The pretraining pool is sorted so it
/// depends only on the test split, not on the A/B division.
pub fn run_pipeline<T: Real>(ds: &Dataset, spec: &PipelineSpec<'_>) -> Result<PipelineOutcome> {
    let splits = resolve_splits(ds, spec.config, spec.fold)?;
    let mut pool: Vec<usize> =
        splits.pool_a.iter().chain(&splits.labeled_b).copied().collect();
    pool.sort_unstable();
    let pre = pretrain::<T>(
        ds,
        &pool,
        &PretrainSpec {
            config: spec.config,
            encoder: spec.encoder,
            out_dir: spec.out_dir,
            resume: None,
            stop_after_epoch: None,
        },
    )?;
    let down = train_downstream::<T>(
        ds,
        &splits.labeled_b,
        &pre.checkpoint,
        &DownstreamSpec {
            config: spec.config,
            encoder: spec.encoder,
            head_hidden: spec.head_hidden,
            out_dir: spec.out_dir,
            stop_at_accuracy: None,
        },
    )?;
    let report = evaluate::<T>(
        ds,
        &splits.test,
        &pre.checkpoint,
        &down.checkpoint,
        spec.config,
        spec.encoder,
    )?;
    if let Some(dir) = spec.out_dir {
        let path = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, text + "\n").map_err(io_at(&path))?;
    }
    Ok(PipelineOutcome {
        pretrain_records: pre.records,
        downstream_records: down.records,
        report,
    })
}

/// The four augmentation strategies compared by the ablation table.
pub const ABLATION_AUGMENTS: [AugmentKind; 4] = [
    AugmentKind::Jitter,
    AugmentKind::Rotation,
    AugmentKind::Perturbation,
    AugmentKind::JitterPerturbation,
];

/// Rerun the whole pipeline once per augmentation strategy.
pub fn ablate_augment<T: Real>(
    ds: &Dataset,
    spec: &PipelineSpec<'_>,
) -> Result<Vec<(AugmentKind, MetricsReport)>> {
    let mut out = Vec::with_capacity(ABLATION_AUGMENTS.len());
    for kind in ABLATION_AUGMENTS {
        let mut config = spec.config.clone();
        config.augment.kind = kind;
        let sub = spec.out_dir.map(|d| d.join(format!("augment_{}", kind.as_str())));
        if let Some(dir) = &sub {
            std::fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        let outcome = run_pipeline::<T>(
            ds,
            &PipelineSpec {
                config: &config,
                encoder: spec.encoder,
                head_hidden: spec.head_hidden,
                out_dir: sub.as_deref(),
                fold: spec.fold,
            },
        )?;
        out.push((kind, outcome.report));
    }
    Ok(out)
}

/// The limited-label regimes compared by the label-efficiency study.
pub const ABLATION_LABEL_FRACTIONS: [f64; 3] = [0.10, 0.05, 0.01];

/// Rerun the whole pipeline once per labeled fraction. Pretraining sees the
/// same pool every time (A ∪ B is the full non-test part); only the head's
/// labeled set shrinks.
pub fn ablate_labels<T: Real>(
    ds: &Dataset,
    spec: &PipelineSpec<'_>,
) -> Result<Vec<(f64, MetricsReport)>> {
    let mut out = Vec::with_capacity(ABLATION_LABEL_FRACTIONS.len());
    for fraction in ABLATION_LABEL_FRACTIONS {
        let mut config = spec.config.clone();
        config.split.labeled_fraction = fraction;
        let sub = spec
            .out_dir
            .map(|d| d.join(format!("labels_{}pct", (fraction * 100.0).round() as u32)));
        if let Some(dir) = &sub {
            std::fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        let outcome = run_pipeline::<T>(
            ds,
            &PipelineSpec {
                config: &config,
                encoder: spec.encoder,
                head_hidden: spec.head_hidden,
                out_dir: sub.as_deref(),
                fold: spec.fold,
            },
        )?;
        out.push((fraction, outcome.report));
    }
    Ok(out)
}

fn check_err<E: std::fmt::Display>(e: E) -> NnError {
    NnError::Diff(DiffError::Invalid { op: "gradient check", detail: e.to_string() })
}

/// Central-difference check of the full contrastive pipeline at reduced
/// widths: every encoder and projection parameter against the NT-Xent loss
/// over two tiny synthetic clouds, at 64-bit precision.
pub fn encoder_gradient_report(task: Task, seed: u64) -> Result<GradCheckReport> {
    let enc_cfg = EncoderConfig::tiny();
    let mut store = ParamStore::<f64>::new();
    let encoder = DualEncoder::init(&mut store, seed, &enc_cfg, task)?;
    let spec = crate::data::SynthSpec { per_class: 1, points: 16, ..Default::default() };
    let ds = crate::data::gen_synthetic(&spec, seed);
    let clouds: Vec<PointCloud> = ds.samples.iter().map(|s| s.cloud.clone()).collect();
    let names = store.trainable_names(None);
    let report = grad_check(
        &mut store,
        &names,
        |st| {
            let mut rows = Vec::with_capacity(2 * clouds.len());
            for cloud in &clouds {
                let (ha, hb) = match task {
                    Task::Cls => (
                        encoder.encode_cls_branch1(st, cloud, Mode::Train).map_err(check_err)?,
                        encoder.encode_cls_branch2(st, cloud, Mode::Train).map_err(check_err)?,
                    ),
                    Task::Seg => (
                        encoder.encode_seg_branch1(st, cloud, Mode::Train).map_err(check_err)?.1,
                        encoder.encode_seg_branch2(st, cloud, Mode::Train).map_err(check_err)?.1,
                    ),
                };
                rows.push(ha);
                rows.push(hb);
            }
            let refs: Vec<&Tensor<f64>> = rows.iter().collect();
            let h = stack_rows(&refs)?;
            let z = encoder.project(st, &h, Mode::Train).map_err(check_err)?;
            let batch = EmbeddingBatch::new(z, 0.5).map_err(check_err)?;
            ntxent_loss(&batch).map_err(check_err)
        },
        // the deep composition has large third derivatives; 1e-6 keeps the
        // central-difference truncation error well under the 1e-4 tolerance
        1e-6,
    )?;
    Ok(report)
}

/// Central-difference check of a small downstream head against the
/// cross-entropy loss, on fixed random representations.
pub fn head_gradient_report(task: Task, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let rows = 6usize;
    let in_dim = 10usize;
    let mut rng = RngStream::new(seed, "gradcheck/head", 0, 0);
    let values: Vec<f64> = (0..rows * in_dim).map(|_| rng.normal()).collect();
    let x = Tensor::constant(&[rows, in_dim], values)?;
    let labels: Vec<usize> = (0..rows).map(|i| i % NUM_CLASSES).collect();
    let head = match task {
        Task::Cls => {
            Head::Cls(ClassifierHead::init(&mut store, seed, in_dim, &[8, 6], NUM_CLASSES)?)
        }
        Task::Seg => {
            Head::Seg(SegmenterHead::init(&mut store, seed, in_dim, &[8, 6], NUM_CLASSES)?)
        }
    };
    let names = store.trainable_names(Some("head"));
    let report = grad_check(
        &mut store,
        &names,
        |st| {
            let logits = match &head {
                Head::Cls(h) => h.forward(st, &x, Mode::Train).map_err(check_err)?,
                Head::Seg(h) => h.forward(st, &x, Mode::Train).map_err(check_err)?,
            };
            cross_entropy(&logits, &labels).map_err(check_err)
        },
        1e-5,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthSpec};

    fn tiny_config(task: Task, epochs: usize) -> RunConfig {
        let mut cfg = RunConfig::defaults(task);
        cfg.point_count = 16;
        cfg.batch_size = 4;
        cfg.epochs = epochs;
        cfg.seed = 3;
        cfg.split.seed = 3;
        cfg.split.test_fraction = 0.25;
        cfg
    }

    fn tiny_dataset() -> Dataset {
        gen_synthetic(&SynthSpec { per_class: 8, points: 24, ..Default::default() }, 21)
    }

    fn strip_wall(records: &[EpochRecord]) -> Vec<(usize, f64, f64, Option<f64>)> {
        records.iter().map(|r| (r.epoch, r.lr, r.loss, r.train_accuracy)).collect()
    }

    #[test]
    fn pretraining_is_deterministic_for_a_seed() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Cls, 2);
        let enc = EncoderConfig::tiny();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let spec = PretrainSpec {
            config: &cfg,
            encoder: &enc,
            out_dir: None,
            resume: None,
            stop_after_epoch: None,
        };
        let a = pretrain::<f32>(&ds, &pool, &spec).unwrap();
        let b = pretrain::<f32>(&ds, &pool, &spec).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(strip_wall(&a.records), strip_wall(&b.records));
        assert!(a.records.iter().all(|r| r.loss.is_finite()));
        assert_eq!(a.checkpoint.epoch, 2);
    }

    #[test]
    fn interrupted_pretraining_resumes_on_the_same_trajectory() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Cls, 3);
        let enc = EncoderConfig::tiny();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let full = pretrain::<f32>(
            &ds,
            &pool,
            &PretrainSpec {
                config: &cfg,
                encoder: &enc,
                out_dir: None,
                resume: None,
                stop_after_epoch: None,
            },
        )
        .unwrap();
        let first = pretrain::<f32>(
            &ds,
            &pool,
            &PretrainSpec {
                config: &cfg,
                encoder: &enc,
                out_dir: None,
                resume: None,
                stop_after_epoch: Some(1),
            },
        )
        .unwrap();
        assert_eq!(first.checkpoint.epoch, 1);
        let rest = pretrain::<f32>(
            &ds,
            &pool,
            &PretrainSpec {
                config: &cfg,
                encoder: &enc,
                out_dir: None,
                resume: Some(&first.checkpoint),
                stop_after_epoch: None,
            },
        )
        .unwrap();
        assert_eq!(rest.records.first().unwrap().epoch, 1, "resume continues at the next epoch");
        let mut joined = strip_wall(&first.records);
        joined.extend(strip_wall(&rest.records));
        assert_eq!(joined, strip_wall(&full.records));
        assert_eq!(rest.checkpoint.to_bytes(), full.checkpoint.to_bytes());
    }

    #[test]
    fn resume_rejects_a_foreign_configuration() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Cls, 1);
        let enc = EncoderConfig::tiny();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let done = pretrain::<f32>(
            &ds,
            &pool,
            &PretrainSpec {
                config: &cfg,
                encoder: &enc,
                out_dir: None,
                resume: None,
                stop_after_epoch: None,
            },
        )
        .unwrap();
        let mut other = cfg.clone();
        other.tau = 0.1;
        assert!(matches!(
            pretrain::<f32>(
                &ds,
                &pool,
                &PretrainSpec {
                    config: &other,
                    encoder: &enc,
                    out_dir: None,
                    resume: Some(&done.checkpoint),
                    stop_after_epoch: None,
                },
            ),
            Err(TrainError::ConfigHashMismatch { what: "resume checkpoint" })
        ));
        assert!(matches!(
            pretrain::<f32>(
                &ds,
                &[0],
                &PretrainSpec {
                    config: &cfg,
                    encoder: &enc,
                    out_dir: None,
                    resume: None,
                    stop_after_epoch: None,
                },
            ),
            Err(TrainError::PoolTooSmall { got: 1 })
        ));
    }

    #[test]
    fn downstream_training_freezes_the_encoders() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Cls, 2);
        let enc = EncoderConfig::tiny();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let pre = pretrain::<f32>(
            &ds,
            &pool,
            &PretrainSpec {
                config: &cfg,
                encoder: &enc,
                out_dir: None,
                resume: None,
                stop_after_epoch: None,
            },
        )
        .unwrap();
        let labeled: Vec<usize> = (0..ds.len()).collect();
        let down = train_downstream::<f32>(
            &ds,
            &labeled,
            &pre.checkpoint,
            &DownstreamSpec {
                config: &cfg,
                encoder: &enc,
                head_hidden: &[8],
                out_dir: None,
                stop_at_accuracy: None,
            },
        )
        .unwrap();
        assert_eq!(down.encoder_fingerprint_before, down.encoder_fingerprint_after);
        assert!(down.records.iter().all(|r| r.train_accuracy.is_some()));
        // the head checkpoint holds head tensors only
        assert!(down.checkpoint.tensors.iter().all(|t| t.name.starts_with("head.")));
        assert!(matches!(
            train_downstream::<f32>(
                &ds,
                &[],
                &pre.checkpoint,
                &DownstreamSpec {
                    config: &cfg,
                    encoder: &enc,
                    head_hidden: &[8],
                    out_dir: None,
                    stop_at_accuracy: None,
                },
            ),
            Err(TrainError::EmptyLabeled)
        ));
    }

    #[test]
    fn head_layout_reads_back_from_its_checkpoint() {
        let mut store = ParamStore::<f32>::new();
        ClassifierHead::init(&mut store, 0, 12, &[8, 6], NUM_CLASSES).unwrap();
        let ckpt = Checkpoint::from_store_prefixes(&store, &["head"], [0u8; 32], 0);
        let (in_dim, widths) = infer_head_widths(&ckpt, "head.cls").unwrap();
        assert_eq!(in_dim, 12);
        assert_eq!(widths, vec![8, 6, NUM_CLASSES]);
        assert!(matches!(
            infer_head_widths(&ckpt, "head.seg"),
            Err(TrainError::HeadShape { .. })
        ));
    }

    #[test]
    fn the_whole_pipeline_reports_finite_metrics() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Cls, 2);
        let enc = EncoderConfig::tiny();
        let out = run_pipeline::<f32>(
            &ds,
            &PipelineSpec {
                config: &cfg,
                encoder: &enc,
                head_hidden: &[8],
                out_dir: None,
                fold: None,
            },
        )
        .unwrap();
        assert_eq!(out.pretrain_records.len(), 2);
        assert_eq!(out.downstream_records.len(), 2);
        let r = &out.report;
        assert_eq!(r.task, "cls");
        assert_eq!(r.samples, 4);
        assert!(r.healthy_accuracy.is_finite() && r.aneurysm_accuracy.is_finite());
        assert!(r.f1_aneurysm.unwrap().is_finite());
        assert!(r.healthy_iou.is_none());
    }

    #[test]
    fn segmentation_pipeline_reports_iou_fields() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Seg, 1);
        let enc = EncoderConfig::tiny();
        let out = run_pipeline::<f32>(
            &ds,
            &PipelineSpec {
                config: &cfg,
                encoder: &enc,
                head_hidden: &[8],
                out_dir: None,
                fold: None,
            },
        )
        .unwrap();
        let r = &out.report;
        assert_eq!(r.task, "seg");
        assert!(r.healthy_iou.unwrap().is_finite());
        assert!(r.aneurysm_iou.unwrap().is_finite());
        assert!(r.mean_cloud_healthy_iou.unwrap().is_finite());
        assert!(r.f1_aneurysm.is_none());
    }

    #[test]
    fn fold_resolution_partitions_like_the_kfold() {
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Cls, 1);
        let splits = resolve_splits(&ds, &cfg, Some((4, 1))).unwrap();
        let mut all: Vec<usize> = splits
            .pool_a
            .iter()
            .chain(&splits.labeled_b)
            .chain(&splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert_eq!(splits.test.len(), 4);
        assert!(splits.pool_a.is_empty(), "full labeling leaves pool A empty");
        assert!(matches!(
            resolve_splits(&ds, &cfg, Some((4, 4))),
            Err(TrainError::BadFold { index: 4, folds: 4 })
        ));
    }

    #[test]
    fn head_gradients_match_central_differences() {
        for task in [Task::Cls, Task::Seg] {
            let report = head_gradient_report(task, 5).unwrap();
            assert!(
                report.max_rel_err < 1e-7,
                "{task:?} head: {} at {}[{}]",
                report.max_rel_err,
                report.worst_param,
                report.worst_index
            );
            assert!(report.checked > 100);
        }
    }

    #[test]
    fn run_artifacts_land_in_the_out_dir() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        let cfg = tiny_config(Task::Cls, 1);
        let enc = EncoderConfig::tiny();
        run_pipeline::<f32>(
            &ds,
            &PipelineSpec {
                config: &cfg,
                encoder: &enc,
                head_hidden: &[8],
                out_dir: Some(dir.path()),
                fold: None,
            },
        )
        .unwrap();
        for file in
            ["pretrain_records.jsonl", "pretrain.ckpt", "downstream_records.jsonl", "downstream.ckpt", "metrics.json"]
        {
            assert!(dir.path().join(file).exists(), "{file} missing");
        }
        let ckpt = Checkpoint::load(&dir.path().join("pretrain.ckpt")).unwrap();
        assert_eq!(ckpt.config_hash, cfg.hash());
        let line = std::fs::read_to_string(dir.path().join("pretrain_records.jsonl")).unwrap();
        let rec: EpochRecord = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 0);
    }
}
