//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | field        | bytes                                              |
//! |--------------|----------------------------------------------------|
//! | magic        | `ADVINPNT`                                         |
//! | version      | `u32`                                              |
//! | metadata     | `u64` length + JSON ([`CheckpointMeta`])           |
//! | tensor count | `u32`                                              |
//! | tensor       | `u32` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u32` rank, `u64` per dim, raw values |
//! | checksum     | `u64` FNV-1a over every preceding byte             |
//!
//! Tensors are written in name order and the metadata uses sorted maps, so
//! equal bundles encode to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADVINPNT";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Corrupt(format!("unreadable rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub kind: String,
    pub step: u64,
    /// Run configuration in its flat text form.
    pub config: String,
    pub rngs: BTreeMap<String, RngState>,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl CheckpointBundle {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    /// Adds every entry of `group` under `prefix/`.
    pub fn insert_group(&mut self, prefix: &str, group: &BTreeMap<String, Tensor>) {
        for (k, v) in group {
            self.tensors.insert(format!("{prefix}/{k}"), v.clone());
        }
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::State(format!("expected a {kind} checkpoint, found {}", self.meta.kind)));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let tag: u8 = match t.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
                other => return Err(Error::State(format!("cannot store {other:?} tensor `{name}`"))),
            };
            out.push(tag);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            if tag == 0 {
                for v in flat.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            } else {
                for v in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Corrupt("tensor name".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let t = match tag {
                0 => {
                    let raw = r.take(n * 4)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                t => return Err(Error::Corrupt(format!("unknown dtype tag {t} for `{name}`"))),
            };
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        Ok(Self { meta, tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: &Path, bundle: &CheckpointBundle) -> Result<()> {
    let bytes = bundle.encode()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CheckpointBundle::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> CheckpointBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let mut meta = CheckpointMeta { kind: "stage1".into(), step: 3, config: "x = 1\n".into(), ..Default::default() };
        meta.rngs.insert("pairs".into(), RngState::capture(&rng));
        meta.optimizer_steps.insert("gen".into(), 3);
        let mut b = CheckpointBundle::new(meta);
        b.tensors.insert("gen/a".into(), Tensor::new(&[1.5f32, -0.0, f32::MIN_POSITIVE], &Device::Cpu).unwrap());
        b.tensors.insert("gen/b".into(), Tensor::new(&[[1e-300f64], [2.0]], &Device::Cpu).unwrap());
        b
    }

    #[test]
    fn round_trip_bytes_and_rng() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let b = sample();
        save_checkpoint(&p1, &b).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(back.meta, b.meta);
        let mut orig = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = orig.random();
        let mut restored = back.meta.rngs["pairs"].restore().unwrap();
        assert_eq!(orig.random::<u64>(), restored.random::<u64>());
        assert_eq!(back.group("gen").len(), 2);
    }

    #[test]
    fn version_and_corruption() {
        let mut bytes = sample().encode().unwrap();
        let mut wrong = bytes.clone();
        wrong[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(CheckpointBundle::decode(&wrong), Err(Error::Version { found: 7, expected: 1 })));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(CheckpointBundle::decode(&bytes), Err(Error::Corrupt(_))));
        assert!(matches!(CheckpointBundle::decode(b"nope"), Err(Error::Corrupt(_))));
    }
}
