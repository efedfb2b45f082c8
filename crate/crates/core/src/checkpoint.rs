//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `KEAGCKPT`, `u32` version, `u64` step,
//! `u64` vocabulary hash, `u64` length and bytes of the config snapshot
//! (JSON), `u64` record count, then per tensor `u32` name length, name bytes,
//! `u32` rank, `u64` extents, raw `f64` values. The file ends with the
//! FNV-1a 64 hash of every preceding byte.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};
use crate::fnv1a64;

pub const MAGIC: &[u8; 8] = b"KEAGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint is corrupt: {0}")]
    CorruptFile(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint has no tensor named {0}")]
    MissingTensor(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub vocab_hash: u64,
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, step: u64, vocab_hash: u64, config_json: String) -> Self {
        let tensors = store.names().iter().cloned().zip(store.tensors().iter().cloned()).collect();
        Self {
            step,
            vocab_hash,
            config_json,
            tensors,
        }
    }

    /// Copies every tensor of `store` from this checkpoint, checking shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for id in store.ids() {
            let name = store.name(id).to_string();
            let (_, t) = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::VersionMismatch(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Fails unless the checkpoint was produced with the given vocabulary.
    pub fn check_vocab(&self, vocab_hash: u64) -> Result<(), CheckpointError> {
        if self.vocab_hash != vocab_hash {
            return Err(CheckpointError::VersionMismatch(format!(
                "vocabulary hash {:016x} differs from {:016x}",
                self.vocab_hash, vocab_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            for e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptFile(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch(format!("file version {version}, expected {VERSION}")));
        }
        let step = r.u64()?;
        let vocab_hash = r.u64()?;
        let cfg_len = r.u64()? as usize;
        let config_json = String::from_utf8(r.take(cfg_len)?.to_vec()).map_err(|_| corrupt("config is not UTF-8"))?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank != 2 {
                return Err(corrupt(&format!("tensor {name} has rank {rank}")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| corrupt("extent overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("extent overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new([rows, cols], data).map_err(|e| corrupt(&e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            step,
            vocab_hash,
            config_json,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::CorruptFile("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::uniform([3, 4], -1.0, 1.0, &mut rng));
        store.add("b", Tensor::new([1, 2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        Checkpoint::from_store(&store, 17, 0xdead_beef, r#"{"x":1}"#.into())
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.config_json, c.config_json);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_or_flipped_file_is_corrupt() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::CorruptFile(_))), "{cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::CorruptFile(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let body = bytes.len() - 8;
        let sum = fnv1a64(&bytes[..body]);
        bytes[body..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::VersionMismatch(_))));
    }

    #[test]
    fn vocab_hash_must_match() {
        let c = sample();
        c.check_vocab(0xdead_beef).unwrap();
        assert!(matches!(c.check_vocab(1), Err(CheckpointError::VersionMismatch(_))));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let c = sample();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros([3, 4]));
        store.add("b", Tensor::zeros([1, 2]));
        c.restore_into(&mut store).unwrap();
        assert_eq!(store.get(store.id("a.w").unwrap()), &c.tensors[0].1);

        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros([4, 3]));
        assert!(matches!(c.restore_into(&mut wrong), Err(CheckpointError::VersionMismatch(_))));
        let mut missing = ParamStore::new();
        missing.add("c", Tensor::zeros([1, 1]));
        assert!(matches!(c.restore_into(&mut missing), Err(CheckpointError::MissingTensor(_))));
    }
}
