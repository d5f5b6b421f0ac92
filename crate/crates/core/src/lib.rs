//! Unsupervised representation learning for 3D point clouds, end to end on
//! the CPU: a dual-branch encoder (a global per-point MLP beside a
//! hierarchical set-abstraction network) trained with a contrastive loss
//! over augmented positive pairs, then small supervised heads for binary
//! cloud classification and per-point segmentation on the frozen
//! representations.
//!
//! Everything runs on a small reverse-mode autodiff core ([`diff`]) with no
//! GPU or external ML framework. All randomness flows through counter-based
//! streams keyed by `(seed, purpose, epoch, sample)` ([`rng`]), so every
//! training run is a pure function of its configuration, dataset, and seed.
//!
//! The pieces, bottom to top:
//!
//! - [`scalar`]: the `f32`/`f64` abstraction the whole stack is generic over
//! - [`diff`]: tensors, the operation set, and backward propagation
//! - [`nn`]: parameter store, dense/batchnorm/MLP layers, gradient checking
//! - [`cloud`], [`pointops`]: point clouds and the geometric kernels
//!   (farthest-point sampling, kNN grouping, inverse-distance interpolation)
//! - [`augment`]: jitter, rotation, and small-angle perturbation pairs
//! - [`encoders`]: the two branches and the shared projection head
//! - [`contrastive`]: normalized-temperature cross-entropy over 2N views
//! - [`downstream`]: classifier and segmenter heads, cross-entropy
//! - [`data`], [`metrics`], [`optim`], [`checkpoint`], [`config`]: dataset
//!   I/O and splits, evaluation metrics, Adam with a step-decay schedule,
//!   binary snapshots, run configuration
//! - [`train`]: the pretraining/downstream loops, evaluation, ablations

pub mod augment;
pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod diff;
pub mod downstream;
pub mod encoders;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pointops;
pub mod rng;
pub mod scalar;
pub mod train;
