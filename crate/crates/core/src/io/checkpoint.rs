//! Binary checkpoints holding only the physical parameters.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! "FOLDNET1" | meta_len | meta JSON | tensor_count |
//!   { name_len | name | rank | dims.. | values as f64 }*
//! ```
//!
//! The metadata records a SHA-256 of everything after it.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Array, ParamStore};
use crate::engine::{FoldableEncoder, ModelConfig};
use crate::error::{Error, Result};
use crate::io::data::DataConfig;

pub const MAGIC: &[u8; 8] = b"FOLDNET1";
const MAX_RANK: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Data used for training, so evaluation commands can rebuild dev/test.
    pub data: Option<DataConfig>,
    pub n_physical: usize,
    pub max_depth: usize,
    pub mask: String,
    pub step: usize,
    /// SHA-256 of the metrics CSV written so far, empty if none.
    pub metrics_digest: String,
    pub payload_sha256: String,
}

impl CheckpointMeta {
    pub fn new(model: &FoldableEncoder, data: Option<DataConfig>, step: usize) -> Self {
        Self {
            model: model.config().clone(),
            data,
            n_physical: model.n_physical(),
            max_depth: model.max_depth(),
            mask: model.mask().to_string(),
            step,
            metrics_digest: String::new(),
            payload_sha256: String::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn put(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

/// Serialized tensor section for `store`.
pub fn encode_payload(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    put(&mut buf, store.len() as u64);
    for (_, name, a) in store.iter() {
        put(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put(&mut buf, a.shape().len() as u64);
        for &d in a.shape() {
            put(&mut buf, d as u64);
        }
        for &v in a.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Full file contents. The digest field of `meta` is overwritten.
pub fn encode(model: &FoldableEncoder, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let payload = encode_payload(model.store());
    let mut meta = meta.clone();
    meta.payload_sha256 = sha256_hex(&payload);
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + payload.len());
    buf.extend_from_slice(MAGIC);
    put(&mut buf, json.len() as u64);
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&payload);
    Ok(buf)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save_checkpoint(model: &FoldableEncoder, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(model, meta)?;
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, what: &str) -> Result<&'a [u8]> {
        let left = (self.bytes.len() - self.pos) as u64;
        if n > left {
            return Err(Error::Checkpoint(format!(
                "truncated payload: {what} needs {n} bytes, {left} left"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}

fn decode_payload(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u64("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u64("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u64("rank")?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            elems = elems
                .checked_mul(d)
                .filter(|e| e.checked_mul(8).is_some())
                .ok_or_else(|| Error::Checkpoint(format!("dimension overflow in tensor {name}")))?;
            shape.push(
                usize::try_from(d).map_err(|_| {
                    Error::Checkpoint(format!("dimension overflow in tensor {name}"))
                })?,
            );
        }
        let raw = r.take(elems * 8, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        if store.find(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.add(name, Array::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

/// Parses and validates a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<(FoldableEncoder, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let meta_len = r.u64("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let payload = &bytes[r.pos..];
    if sha256_hex(payload) != meta.payload_sha256 {
        return Err(Error::Checkpoint("payload digest mismatch".into()));
    }
    let store = decode_payload(payload)?;
    meta.model.validate()?;
    if meta.n_physical != meta.model.n_physical
        || meta.max_depth != meta.model.max_depth
        || meta.mask != meta.model.mask.to_string()
    {
        return Err(Error::Checkpoint(
            "metadata disagrees with model config".into(),
        ));
    }
    let model = FoldableEncoder::from_store(meta.model.clone(), store)?;
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(FoldableEncoder, CheckpointMeta)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::encoder::tests::small_config;

    fn model(n_p: usize, n_f: usize) -> FoldableEncoder {
        FoldableEncoder::new(small_config(n_p, n_f), 3).unwrap()
    }

    fn image(m: &FoldableEncoder) -> Vec<u8> {
        encode(m, &CheckpointMeta::new(m, None, 7)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(3, 6);
        let meta = CheckpointMeta::new(&m, None, 42);
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&m, &meta, &a).unwrap();
        let (m2, meta2) = load_checkpoint(&a).unwrap();
        assert_eq!(m2, m);
        assert_eq!(meta2.step, 42);
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&m2, &meta2, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        assert!(!dir.path().join("b.ckpt.tmp").exists());
    }

    #[test]
    fn holds_exactly_the_physical_blocks() {
        let m = model(3, 9);
        let (back, _) = decode(&image(&m)).unwrap();
        let blocks: std::collections::BTreeSet<_> = back
            .store()
            .iter()
            .filter_map(|(_, n, _)| {
                n.strip_prefix("block")
                    .map(|r| r.split('.').next().unwrap().to_string())
            })
            .collect();
        assert_eq!(blocks.len(), 3);
    }

    #[test]
    fn named_failures() {
        let m = model(2, 4);
        let good = image(&m);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("bad magic"));

        let cut = &good[..good.len() - 5];
        assert!(decode(cut).unwrap_err().to_string().contains("digest"));

        let mut tampered = good.clone();
        let last = tampered.len() - 1;
        tampered[last] ^= 1;
        assert!(decode(&tampered)
            .unwrap_err()
            .to_string()
            .contains("digest"));
    }

    #[test]
    fn payload_parser_guards() {
        let m = model(2, 4);
        let payload = encode_payload(m.store());
        let err = decode_payload(&payload[..payload.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut huge = Vec::new();
        put(&mut huge, 1);
        put(&mut huge, 1);
        huge.push(b'w');
        put(&mut huge, 2);
        put(&mut huge, u64::MAX / 2);
        put(&mut huge, 4);
        assert!(decode_payload(&huge)
            .unwrap_err()
            .to_string()
            .contains("overflow"));
    }

    #[test]
    fn size_is_independent_of_unfolding() {
        let payloads: Vec<usize> = [3, 6, 12]
            .iter()
            .map(|&n_f| encode_payload(model(3, n_f).store()).len())
            .collect();
        assert!(payloads.windows(2).all(|w| w[0] == w[1]));
    }
}
