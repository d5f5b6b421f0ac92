//! Run configuration: the training hyperparameters, their text-file format
//! (`key = value` lines, unknown keys rejected), and the canonical hash that
//! ties checkpoints and run records to the configuration that produced
//! them.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugmentConfig, AugmentError, AugmentKind};
use crate::data::{DataError, SplitSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: unknown configuration key {key:?}")]
    UnknownKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    BadLine { path: String, line: usize, text: String },
    #[error("{path}:{line}: key {key:?}: {msg}")]
    BadValue { path: String, line: usize, key: String, msg: String },
    #[error("point budget must be 512, 1024, or 2048; got {0}")]
    BadPointCount(usize),
    #[error("{field} must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Split(#[from] DataError),
}

type Result<V> = std::result::Result<V, ConfigError>;

/// Which downstream task the run targets; decides encoder variants, the
/// projection head, and weight-decay defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Cls,
    Seg,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Seg => "seg",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cls" => Ok(Task::Cls),
            "seg" => Ok(Task::Seg),
            other => Err(format!("unknown task {other:?} (expected cls | seg)")),
        }
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_BASE_LR: f64 = 1e-3;
pub const DEFAULT_WEIGHT_DECAY_PRETRAIN: f64 = 1e-6;
pub const DEFAULT_WEIGHT_DECAY_CLS: f64 = 1e-6;
pub const DEFAULT_WEIGHT_DECAY_SEG: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub point_count: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub tau: f64,
    pub augment: AugmentConfig,
    pub weight_decay_pretrain: f64,
    pub weight_decay_downstream: f64,
    /// Decoupled weight decay for the downstream head (the heavy-decay
    /// segmentation profile). Pretraining always couples its small decay.
    pub decoupled_decay: bool,
    pub seed: u64,
    pub split: SplitSpec,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        RunConfig {
            task,
            point_count: 1024,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            base_lr: DEFAULT_BASE_LR,
            tau: crate::contrastive::DEFAULT_TAU,
            augment: AugmentConfig::default(),
            weight_decay_pretrain: DEFAULT_WEIGHT_DECAY_PRETRAIN,
            weight_decay_downstream: match task {
                Task::Cls => DEFAULT_WEIGHT_DECAY_CLS,
                Task::Seg => DEFAULT_WEIGHT_DECAY_SEG,
            },
            decoupled_decay: task == Task::Seg,
            seed: 0,
            split: SplitSpec::default(),
        }
    }

    /// Sanity checks shared by file loads and programmatic construction.
    /// The point budget's fixed menu is enforced only on file load; tests
    /// run smaller clouds.
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("base_lr", self.base_lr),
            ("tau", self.tau),
            ("batch_size", self.batch_size as f64),
            ("point_count", self.point_count as f64),
        ] {
            if !(value > 0.0) {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        if self.weight_decay_pretrain < 0.0 {
            return Err(ConfigError::NonPositive {
                field: "weight_decay_pretrain",
                value: self.weight_decay_pretrain,
            });
        }
        if self.weight_decay_downstream < 0.0 {
            return Err(ConfigError::NonPositive {
                field: "weight_decay_downstream",
                value: self.weight_decay_downstream,
            });
        }
        self.augment.validate()?;
        self.split.validate()?;
        Ok(())
    }

    /// Parse a config file of `key = value` lines (`#` comments allowed).
    /// Any unknown key is an error; omitted keys keep task-appropriate
    /// defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let pstr = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: pstr.clone(), source })?;
        Self::from_str_named(&text, &pstr)
    }

    pub fn from_str_named(text: &str, path: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                path: path.into(),
                line: lineno + 1,
                text: line.into(),
            })?;
            pairs.push((lineno + 1, k.trim().into(), v.trim().into()));
        }
        // task first: it decides the downstream defaults
        let mut task = Task::Cls;
        for (line, k, v) in &pairs {
            if k == "task" {
                task = v.parse().map_err(|msg| ConfigError::BadValue {
                    path: path.into(),
                    line: *line,
                    key: k.clone(),
                    msg,
                })?;
            }
        }
        let mut cfg = RunConfig::defaults(task);
        for (line, key, value) in &pairs {
            let bad = |msg: String| ConfigError::BadValue {
                path: path.into(),
                line: *line,
                key: key.clone(),
                msg,
            };
            let parse_f64 = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
            let parse_usize = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
            let parse_bool = |v: &str| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(bad(format!("{other:?} is not true/false"))),
            };
            match key.as_str() {
                "task" => {} // already applied
                "points" => cfg.point_count = parse_usize(value)?,
                "batch_size" => cfg.batch_size = parse_usize(value)?,
                "epochs" => cfg.epochs = parse_usize(value)?,
                "base_lr" => cfg.base_lr = parse_f64(value)?,
                "tau" => cfg.tau = parse_f64(value)?,
                "augment" => {
                    cfg.augment.kind =
                        value.parse::<AugmentKind>().map_err(|e| bad(e.to_string()))?
                }
                "jitter_sigma" => cfg.augment.sigma = parse_f64(value)?,
                "jitter_clip" => cfg.augment.clip = parse_f64(value)?,
                "max_perturb_angle" => cfg.augment.max_perturb_angle = parse_f64(value)?,
                "renormalize_normals" => cfg.augment.renormalize_normals = parse_bool(value)?,
                "weight_decay_pretrain" => cfg.weight_decay_pretrain = parse_f64(value)?,
                "weight_decay_downstream" => cfg.weight_decay_downstream = parse_f64(value)?,
                "decoupled_decay" => cfg.decoupled_decay = parse_bool(value)?,
                "seed" => {
                    cfg.seed = value.parse::<u64>().map_err(|e| bad(e.to_string()))?
                }
                "test_fraction" => cfg.split.test_fraction = parse_f64(value)?,
                "labeled_fraction" => cfg.split.labeled_fraction = parse_f64(value)?,
                _ => {
                    return Err(ConfigError::UnknownKey {
                        path: path.into(),
                        line: *line,
                        key: key.clone(),
                    })
                }
            }
        }
        cfg.split.seed = cfg.seed;
        if ![512, 1024, 2048].contains(&cfg.point_count) {
            return Err(ConfigError::BadPointCount(cfg.point_count));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable text rendering that the hash is computed over; every field in
    /// fixed order.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("task", self.task.as_str().into());
        put("points", self.point_count.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("base_lr", format!("{:e}", self.base_lr));
        put("tau", format!("{:e}", self.tau));
        put("augment", self.augment.kind.as_str().into());
        put("jitter_sigma", format!("{:e}", self.augment.sigma));
        put("jitter_clip", format!("{:e}", self.augment.clip));
        put("max_perturb_angle", format!("{:e}", self.augment.max_perturb_angle));
        put("renormalize_normals", self.augment.renormalize_normals.to_string());
        put("weight_decay_pretrain", format!("{:e}", self.weight_decay_pretrain));
        put("weight_decay_downstream", format!("{:e}", self.weight_decay_downstream));
        put("decoupled_decay", self.decoupled_decay.to_string());
        put("seed", self.seed.to_string());
        put("test_fraction", format!("{:e}", self.split.test_fraction));
        put("labeled_fraction", format!("{:e}", self.split.labeled_fraction));
        s
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("string write");
    }
    s
}
