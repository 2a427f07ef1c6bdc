//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      10 bytes  "PBARL-CKPT"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON (string -> string map)
//! count      u32
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rows     u64
//!   cols     u64
//!   data     rows * cols f64 (little-endian)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::mlp::{Activation, Layer, MlpParams};
use super::tensor::Tensor;
use super::{NnError, Result};

pub const MAGIC: &[u8; 10] = b"PBARL-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NnError::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("string map serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: BTreeMap<String, String> = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| NnError::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| NnError::Checkpoint(format!("tensor name: {e}")))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| NnError::Checkpoint("tensor size overflow".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NnError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Stores an MLP under `prefix` (`{prefix}.{i}.weight` / `.bias`).
    pub fn put_mlp(&mut self, prefix: &str, mlp: &MlpParams) {
        self.meta
            .insert(format!("{prefix}.activation"), mlp.activation().name().to_string());
        self.meta
            .insert(format!("{prefix}.layers"), mlp.layers().len().to_string());
        for (i, l) in mlp.layers().iter().enumerate() {
            self.push(format!("{prefix}.{i}.weight"), l.weight.clone());
            self.push(format!("{prefix}.{i}.bias"), l.bias.clone());
        }
    }

    pub fn get_mlp(&self, prefix: &str) -> Result<MlpParams> {
        let act_name = self.meta(&format!("{prefix}.activation"))?;
        let activation = Activation::from_name(act_name)
            .ok_or_else(|| NnError::Checkpoint(format!("unknown activation {act_name:?}")))?;
        let n: usize = self
            .meta(&format!("{prefix}.layers"))?
            .parse()
            .map_err(|_| NnError::Checkpoint(format!("bad layer count for {prefix}")))?;
        let layers = (0..n)
            .map(|i| {
                Ok(Layer {
                    weight: self.get(&format!("{prefix}.{i}.weight"))?.clone(),
                    bias: self.get(&format!("{prefix}.{i}.bias"))?.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::from_layers(layers, activation)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
