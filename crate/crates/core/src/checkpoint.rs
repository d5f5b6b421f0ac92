//! Binary checkpoint format.
//!
//! Layout: magic `PCDU`, little-endian u32 format version, u32 tensor
//! count; per tensor a u16 name length, the UTF-8 name, a u8 rank, u32
//! extents, then the values as little-endian f32 in row-major order. A
//! footer carries the 32-byte configuration hash and the u32 count of
//! completed epochs. Values are stored in 32-bit precision, so a checkpoint
//! of an f32 run round-trips bit-exactly.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::{NnError, ParamStore};
use crate::scalar::Real;

pub const MAGIC: [u8; 4] = *b"PCDU";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}; expected \"PCDU\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnknownVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("checkpoint has {0} trailing bytes after the footer")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("checkpoint tensor {name:?} missing from the model (names must match exactly)")]
    UnknownTensor { name: String },
    #[error("model parameter {name:?} missing from the checkpoint")]
    MissingTensor { name: String },
    #[error("tensor {name:?}: checkpoint shape {ckpt:?} vs model shape {model:?}")]
    ShapeMismatch { name: String, ckpt: Vec<usize>, model: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

type Result<V> = std::result::Result<V, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config_hash: [u8; 32],
    /// Completed epochs at save time; resume starts here.
    pub epoch: u32,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], epoch: u32) -> Self {
        Checkpoint { tensors: Vec::new(), config_hash, epoch }
    }

    /// Snapshot every store entry (parameters and buffers alike).
    pub fn from_store<T: Real>(store: &ParamStore<T>, config_hash: [u8; 32], epoch: u32) -> Self {
        Self::from_store_prefixes(store, &[""], config_hash, epoch)
    }

    /// Snapshot the store entries under any of the dotted prefixes (`""`
    /// matches everything).
    pub fn from_store_prefixes<T: Real>(
        store: &ParamStore<T>,
        prefixes: &[&str],
        config_hash: [u8; 32],
        epoch: u32,
    ) -> Self {
        let mut ckpt = Checkpoint::new(config_hash, epoch);
        for name in store.names() {
            if !matches_prefix(&name, prefixes) {
                continue;
            }
            let t = store.get(&name).expect("name from the store's own listing");
            ckpt.push(
                &name,
                t.shape().to_vec(),
                t.values().iter().map(|v| v.to_f32_lossy()).collect(),
            );
        }
        ckpt
    }

    pub fn push(&mut self, name: &str, dims: Vec<usize>, values: Vec<f32>) {
        self.tensors.push(NamedTensor { name: name.into(), dims, values });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensors under a dotted prefix, converted to the working precision.
    pub fn entries_with_prefix<T: Real>(&self, prefix: &str) -> Vec<(String, Vec<T>)> {
        self.tensors
            .iter()
            .filter(|t| t.name == prefix || t.name.starts_with(&format!("{prefix}.")))
            .map(|t| {
                (t.name.clone(), t.values.iter().map(|&v| T::from_f32_exact(v)).collect())
            })
            .collect()
    }

    /// Write checkpoint values into an existing store; both directions must
    /// cover each other exactly (optimizer tensors excepted), so a partial
    /// or mismatched restore fails loudly.
    pub fn apply_to_store<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.restore_prefixes(store, &[""])
    }

    /// Restore the tensors under the given dotted prefixes. Every matching
    /// checkpoint tensor must exist in the store with the same shape, and
    /// every matching store entry must appear in the checkpoint. Optimizer
    /// state (`optim.*`) never restores here; see
    /// [`Checkpoint::entries_with_prefix`].
    pub fn restore_prefixes<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        prefixes: &[&str],
    ) -> Result<()> {
        for t in &self.tensors {
            if t.name.starts_with("optim.") || !matches_prefix(&t.name, prefixes) {
                continue;
            }
            if !store.contains(&t.name) {
                return Err(CheckpointError::UnknownTensor { name: t.name.clone() });
            }
            let model_shape = store.get(&t.name)?.shape().to_vec();
            if model_shape != t.dims {
                return Err(CheckpointError::ShapeMismatch {
                    name: t.name.clone(),
                    ckpt: t.dims.clone(),
                    model: model_shape,
                });
            }
            store.set_values(&t.name, t.values.iter().map(|&v| T::from_f32_exact(v)).collect())?;
        }
        for name in store.names() {
            if matches_prefix(&name, prefixes) && self.get(&name).is_none() {
                return Err(CheckpointError::MissingTensor { name });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        let magic = r.take::<4>("magic bytes")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(r.take("format version")?);
        if version != VERSION {
            return Err(CheckpointError::UnknownVersion { found: version, supported: VERSION });
        }
        let count = u32::from_le_bytes(r.take("tensor count")?);
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take("tensor name length")?) as usize;
            let name = String::from_utf8(r.take_slice(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::BadName)?;
            let rank = u8::from_le_bytes(r.take("tensor rank")?) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.take("tensor extent")?) as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = r.take_slice(numel * 4, "tensor values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, dims, values });
        }
        let config_hash = r.take::<32>("config hash footer")?;
        let epoch = u32::from_le_bytes(r.take("epoch footer")?);
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { tensors, config_hash, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn matches_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| {
        p.is_empty() || name == *p || (name.starts_with(p) && name.as_bytes().get(p.len()) == Some(&b'.'))
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self, context: &'static str) -> Result<[u8; N]> {
        let slice = self.take_slice(N, context)?;
        let mut out = [0u8; N];
        out.copy_from_slice(slice);
        Ok(out)
    }

    fn take_slice(&mut self, len: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(CheckpointError::Truncated { context });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let mut ckpt = Checkpoint::new([7u8; 32], 12);
        ckpt.push("enc.w", vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, 4.0, -0.125]);
        ckpt.push("enc.b", vec![3], vec![0.5, 0.25, -1.0]);
        ckpt.push("optim.step", vec![1], vec![40.0]);
        ckpt
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ckpt = sample_checkpoint();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn files_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn corrupted_streams_are_named_precisely() {
        let good = sample_checkpoint().to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(CheckpointError::BadMagic { found }) if found[0] == b'X'
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(CheckpointError::UnknownVersion { found: 9, supported: VERSION })
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&good[..good.len() - 10]),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(
            Checkpoint::from_bytes(&trailing),
            Err(CheckpointError::TrailingBytes(3))
        ));
    }

    #[test]
    fn truncation_context_names_the_missing_piece() {
        let good = sample_checkpoint().to_bytes();
        let err = Checkpoint::from_bytes(&good[..2]).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let err = Checkpoint::from_bytes(&good[..6]).unwrap_err();
        assert!(err.to_string().contains("format version"), "{err}");
        let err = Checkpoint::from_bytes(&good[..10]).unwrap_err();
        assert!(err.to_string().contains("tensor count"), "{err}");
    }

    #[test]
    fn store_snapshots_restore_bit_exactly() {
        let mut store = ParamStore::<f32>::new();
        store.insert_param("enc.w", &[2, 2], vec![0.1, -0.2, 0.3, 0.7]).unwrap();
        store.insert_buffer("enc.rm", &[2], vec![0.5, 0.6]).unwrap();
        let before = store.fingerprint();
        let ckpt = Checkpoint::from_store(&store, [0u8; 32], 3);
        let bytes = ckpt.to_bytes();

        let mut fresh = ParamStore::<f32>::new();
        fresh.insert_param("enc.w", &[2, 2], vec![0.0; 4]).unwrap();
        fresh.insert_buffer("enc.rm", &[2], vec![0.0, 0.0]).unwrap();
        Checkpoint::from_bytes(&bytes).unwrap().apply_to_store(&mut fresh).unwrap();
        assert_eq!(fresh.fingerprint(), before);
    }

    #[test]
    fn restore_is_strict_about_coverage_and_shape() {
        let ckpt = sample_checkpoint();
        // store missing a checkpoint tensor
        let mut store = ParamStore::<f32>::new();
        store.insert_param("enc.w", &[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            ckpt.apply_to_store(&mut store),
            Err(CheckpointError::UnknownTensor { .. }) | Err(CheckpointError::MissingTensor { .. })
        ));
        // store with an extra parameter the checkpoint lacks
        let mut store = ParamStore::<f32>::new();
        store.insert_param("enc.w", &[2, 3], vec![0.0; 6]).unwrap();
        store.insert_param("enc.b", &[3], vec![0.0; 3]).unwrap();
        store.insert_param("enc.extra", &[1], vec![0.0]).unwrap();
        assert!(matches!(
            ckpt.apply_to_store(&mut store),
            Err(CheckpointError::MissingTensor { name }) if name == "enc.extra"
        ));
        // shape disagreement
        let mut store = ParamStore::<f32>::new();
        store.insert_param("enc.w", &[3, 2], vec![0.0; 6]).unwrap();
        store.insert_param("enc.b", &[3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            ckpt.apply_to_store(&mut store),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn optimizer_entries_never_restore_into_the_model() {
        let ckpt = sample_checkpoint();
        let mut store = ParamStore::<f32>::new();
        store.insert_param("enc.w", &[2, 3], vec![0.0; 6]).unwrap();
        store.insert_param("enc.b", &[3], vec![0.0; 3]).unwrap();
        // no optim.step entry in the store, yet restore succeeds
        ckpt.apply_to_store(&mut store).unwrap();
        assert_eq!(store.get("enc.b").unwrap().values(), &[0.5, 0.25, -1.0]);
        // the state is still readable for the optimizer itself
        let optim = ckpt.entries_with_prefix::<f64>("optim");
        assert_eq!(optim.len(), 1);
        assert_eq!(optim[0].0, "optim.step");
        assert_eq!(optim[0].1, vec![40.0]);
    }

    #[test]
    fn prefix_matching_respects_dotted_boundaries() {
        let mut store = ParamStore::<f32>::new();
        store.insert_param("branch1.w", &[1], vec![1.0]).unwrap();
        store.insert_param("branch10.w", &[1], vec![2.0]).unwrap();
        let ckpt = Checkpoint::from_store_prefixes(&store, &["branch1"], [0u8; 32], 0);
        assert_eq!(ckpt.tensors.len(), 1);
        assert_eq!(ckpt.tensors[0].name, "branch1.w");
        // partial restore touches only the matching subtree
        let mut target = ParamStore::<f32>::new();
        target.insert_param("branch1.w", &[1], vec![0.0]).unwrap();
        target.insert_param("branch10.w", &[1], vec![0.0]).unwrap();
        let full = Checkpoint::from_store(&store, [0u8; 32], 0);
        full.restore_prefixes(&mut target, &["branch1"]).unwrap();
        assert_eq!(target.get("branch1.w").unwrap().values(), &[1.0]);
        assert_eq!(target.get("branch10.w").unwrap().values(), &[0.0]);
    }

    #[test]
    fn footer_carries_hash_and_epoch() {
        let ckpt = sample_checkpoint();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.config_hash, [7u8; 32]);
        assert_eq!(back.epoch, 12);
    }
}
