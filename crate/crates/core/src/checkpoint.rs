//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `VQSEGCK\0` |
//! | 4     | format version (`u32`, currently 1) |
//! | 4     | manifest length `N` (`u32`) |
//! | N     | UTF-8 JSON [`Manifest`] |
//! | …     | every parameter as `f64` values, in manifest order |
//! | …     | every buffer as `f64` values, in manifest order |
//!
//! Files are written to a sibling temporary and renamed into place, so an
//! interrupted write never replaces a good checkpoint.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blocks::BufferStore;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, SegModel};
use crate::substrate::{numel, ParamStore, Tensor4};

pub const MAGIC: &[u8; 8] = b"VQSEGCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    /// Seed the model was built from.
    pub seed: u64,
    /// Optimizer steps completed when the checkpoint was taken.
    pub iteration: u64,
    /// Trained without the quantizer.
    pub bypass_vq: bool,
    pub params: Vec<ParamEntry>,
    pub buffers: Vec<BufferEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub buffers: BufferStore,
}

pub fn save_checkpoint(path: &Path, model: &SegModel, seed: u64, iteration: u64, bypass_vq: bool) -> Result<()> {
    let manifest = Manifest {
        model: model.config.clone(),
        seed,
        iteration,
        bypass_vq,
        params: model.params.iter().map(|(n, t)| ParamEntry { name: n.to_owned(), shape: t.shape() }).collect(),
        buffers: model.buffers.iter().map(|(n, b)| BufferEntry { name: n.to_owned(), len: b.len() }).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let values = model.params.num_elements() + model.buffers.iter().map(|(_, b)| b.len()).sum::<usize>();
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * values);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let len = u32::try_from(json.len()).map_err(|_| Error::Data("checkpoint manifest exceeds 4 GiB".into()))?;
    bytes.extend_from_slice(&len.to_le_bytes());
    bytes.extend_from_slice(&json);
    let floats = model.params.iter().flat_map(|(_, t)| t.data()).chain(model.buffers.iter().flat_map(|(_, b)| b));
    for v in floats {
        bytes.extend_from_slice(&v.to_le_bytes());
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).and_then(|()| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Data(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let n = r.u32("manifest length")? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(n, "manifest")?)?;
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let data = r.f64s(numel(e.shape), &e.name)?;
            params.insert(e.name.clone(), Tensor4::from_vec(e.shape, data)?)?;
        }
        let mut buffers = BufferStore::new();
        for e in &manifest.buffers {
            buffers.insert(e.name.clone(), r.f64s(e.len, &e.name)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint payload", bytes.len() - r.pos)));
        }
        Ok(Self { manifest, params, buffers })
    }

    /// Rebuilds the model, refusing if the stored configuration differs from
    /// `expected`.
    pub fn into_model(self, expected: &ModelConfig) -> Result<SegModel> {
        let diffs = config_diff(&self.manifest.model, expected)?;
        if !diffs.is_empty() {
            return Err(Error::Config(format!("checkpoint does not match configuration: {}", diffs.join("; "))));
        }
        let mut model = build_model(&self.manifest.model, self.manifest.seed)?;
        let want: Vec<(&str, [usize; 4])> = model.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, [usize; 4])> = self.params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != got {
            return Err(Error::Data("checkpoint parameters do not match the architecture".into()));
        }
        let want: Vec<(&str, usize)> = model.buffers.iter().map(|(n, b)| (n, b.len())).collect();
        let got: Vec<(&str, usize)> = self.buffers.iter().map(|(n, b)| (n, b.len())).collect();
        if want != got {
            return Err(Error::Data("checkpoint buffers do not match the architecture".into()));
        }
        model.params = self.params;
        model.buffers = self.buffers;
        Ok(model)
    }
}

/// Dotted paths of every field whose value differs, with both values.
pub fn config_diff<T: Serialize>(stored: &T, expected: &T) -> Result<Vec<String>> {
    fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(format!("{path}: checkpoint {a}, config {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(stored)?, &serde_json::to_value(expected)?, &mut out);
    Ok(out)
}
