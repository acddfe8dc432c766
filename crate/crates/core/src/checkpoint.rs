//! Binary checkpoint container: a JSON header followed by named f64 tensors.
//!
//! Layout (little-endian): `WAITCKPT`, u32 format version, u64 header length,
//! header JSON, u64 tensor count, then per tensor: u32 name length, name,
//! four u64 dims, and the row-major f64 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::config::VariantConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"WAITCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: VariantConfig,
    pub architecture: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

/// SHA-256 over parameter names and shapes, in store order.
pub fn architecture_hash(ps: &ParamStore) -> String {
    let mut h = Sha256::new();
    for id in ps.ids() {
        h.update(ps.name(id).as_bytes());
        let (a, b, c, d) = ps.get(id).dim();
        for v in [a, b, c, d] {
            h.update((v as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.meta).expect("checkpoint header serializes");
        let payload: usize = self.tensors.iter().map(|(n, t)| 4 + n.len() + 32 + 8 * t.len()).sum();
        let mut out = Vec::with_capacity(28 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.write_u64::<LittleEndian>(header.len() as u64).unwrap();
        out.extend_from_slice(&header);
        out.write_u64::<LittleEndian>(self.tensors.len() as u64).unwrap();
        for (name, t) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            let (a, b, c, d) = t.dim();
            for v in [a, b, c, d] {
                out.write_u64::<LittleEndian>(v as u64).unwrap();
            }
            for v in t.iter() {
                out.write_f64::<LittleEndian>(*v).unwrap();
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = bytes;
        if r.len() < 8 || &r[..8] != MAGIC {
            return Err(corrupt(origin, "not a checkpoint (bad magic)"));
        }
        r = &r[8..];
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|_| corrupt(origin, "truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(corrupt(origin, &format!("unsupported format version {version}")));
        }
        let hlen = r
            .read_u64::<LittleEndian>()
            .map_err(|_| corrupt(origin, "truncated header"))? as usize;
        if r.len() < hlen {
            return Err(corrupt(origin, "truncated header"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&r[..hlen])
            .map_err(|e| corrupt(origin, &format!("bad header: {e}")))?;
        r = &r[hlen..];
        let count = r
            .read_u64::<LittleEndian>()
            .map_err(|_| corrupt(origin, "missing tensor count"))?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r
                .read_u32::<LittleEndian>()
                .map_err(|_| corrupt(origin, "truncated tensor record"))? as usize;
            if r.len() < nlen {
                return Err(corrupt(origin, "truncated tensor name"));
            }
            let name = std::str::from_utf8(&r[..nlen])
                .map_err(|_| corrupt(origin, "tensor name is not UTF-8"))?
                .to_string();
            r = &r[nlen..];
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r
                    .read_u64::<LittleEndian>()
                    .map_err(|_| corrupt(origin, "truncated tensor shape"))?
                    as usize;
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| corrupt(origin, &format!("truncated payload for {name}")))?;
            let mut data = vec![0f64; n];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| corrupt(origin, "truncated payload"))?;
            let t = Tensor::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
                .expect("length checked");
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(corrupt(origin, "trailing bytes"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a sibling temporary file first so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.encode()).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }

    /// Copies parameters into `ps`, which must have the checkpoint's architecture.
    pub fn restore_params(&self, ps: &mut ParamStore) -> Result<()> {
        let expected = architecture_hash(ps);
        if expected != self.meta.architecture {
            return Err(Error::Checkpoint(format!(
                "architecture hash mismatch: checkpoint {}, model {expected}",
                self.meta.architecture
            )));
        }
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.name(id).to_string();
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            ps.set(id, t.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use ndarray::Array4;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                config: VariantConfig::new(Variant::Cyclegan),
                architecture: "abc".into(),
                epoch: 3,
                iteration: 12,
                generator_steps: 12,
                discriminator_steps: 12,
            },
            tensors: vec![
                ("a".into(), Array4::from_elem((1, 2, 1, 1), 0.5)),
                ("b".into(), Array4::from_shape_fn((2, 1, 2, 1), |(i, _, k, _)| (i * 2 + k) as f64)),
            ],
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.tensors, c.tensors);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode();
        let p = Path::new("x");
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::decode(b"NOTACKPT", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra, p).is_err());
    }

    #[test]
    fn hash_depends_on_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Array4::zeros((1, 1, 3, 3))).unwrap();
        let mut b = ParamStore::new();
        b.add("w", Array4::zeros((1, 1, 1, 1))).unwrap();
        assert_ne!(architecture_hash(&a), architecture_hash(&b));
        assert_eq!(architecture_hash(&a).len(), 64);
    }
}
