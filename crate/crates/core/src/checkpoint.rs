//! Checkpoint files.
//!
//! Layout: the 8 bytes `RSEGCKPT`, a little-endian `u32` format version, a
//! little-endian `u32` byte length followed by that many bytes of UTF-8 JSON
//! manifest, then every parameter as raw little-endian `f64` values in
//! manifest order. The manifest lists each parameter's name, shape and byte
//! offset into the blob section, the full run configuration, the vocabulary
//! and its hash, and the iteration counter.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// Coarse-only model after the first stage.
    Low,
    /// Full model with a deconvolution filter.
    High,
    /// Per-word baseline.
    PerWord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub iteration: u64,
    pub config: RunConfig,
    pub vocab: Vocabulary,
    /// Output channel words of a per-word baseline; empty otherwise.
    pub words: Vec<String>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: Kind,
    iteration: u64,
    config: BTreeMap<String, String>,
    vocabulary: Vec<String>,
    vocab_hash: String,
    #[serde(default)]
    words: Vec<String>,
    params: Vec<ParamEntry>,
}

fn bad(field: &str, detail: impl Into<String>) -> Error {
    Error::format(format!("checkpoint field `{field}`"), detail)
}

impl Checkpoint {
    pub fn from_model(model: &SegModel, config: &RunConfig, iteration: u64) -> Self {
        Checkpoint {
            kind: if model.has_deconv() { Kind::High } else { Kind::Low },
            iteration,
            config: config.clone(),
            vocab: model.vocab.clone(),
            words: Vec::new(),
            params: model.params.clone(),
        }
    }

    /// Rebuilds the segmentation model. Per-word checkpoints are rejected.
    pub fn to_model(&self) -> Result<SegModel> {
        if self.kind == Kind::PerWord {
            return Err(Error::contract("checkpoint", "this checkpoint holds a per-word baseline, not a model"));
        }
        let config = ModelConfig::from(&self.config);
        // Shapes must agree with a freshly built model of the same configuration.
        let reference = SegModel::init(config.clone(), self.vocab.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = self.params.get(name).map_err(|_| bad("params", format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(bad("params", format!("`{name}` has shape {:?}, config implies {:?}", got.shape(), t.shape())));
            }
        }
        let model = SegModel { config, vocab: self.vocab.clone(), params: self.params.clone() };
        if model.has_deconv() != (self.kind == Kind::High) {
            return Err(bad("kind", format!("{:?} checkpoint with deconvolution present = {}", self.kind, model.has_deconv())));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            kind: self.kind,
            iteration: self.iteration,
            config: self.config.to_map(),
            vocabulary: self.vocab.tokens().to_vec(),
            vocab_hash: self.vocab.hash(),
            words: self.words.clone(),
            params,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("magic", "not a checkpoint (expected RSEGCKPT header)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad("version", format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("manifest", format!("truncated: declared {len} bytes, {} available", bytes.len() - 16)))?;
        let m: Manifest = serde_json::from_slice(json).map_err(|e| bad("manifest", e.to_string()))?;
        let vocab = Vocabulary::from_tokens(&m.vocabulary).map_err(|e| bad("vocabulary", e.to_string()))?;
        if vocab.hash() != m.vocab_hash {
            return Err(bad("vocab_hash", "does not match the stored vocabulary"));
        }
        let config = RunConfig::from_map(&m.config).map_err(|e| bad("config", e.to_string()))?;
        let blobs = &bytes[16 + len..];
        let mut params = ParamStore::new();
        let mut expected = 0u64;
        for p in &m.params {
            if p.offset != expected {
                return Err(bad("params", format!("`{}` at offset {}, expected {expected}", p.name, p.offset)));
            }
            let n: usize = p.shape.iter().product();
            let start = p.offset as usize;
            let raw = blobs
                .get(start..start + 8 * n)
                .ok_or_else(|| bad("params", format!("`{}`: data truncated", p.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(p.shape.clone(), data).map_err(|e| bad("params", format!("`{}`: {e}", p.name)))?;
            params.insert(p.name.clone(), t);
            expected += 8 * n as u64;
        }
        if blobs.len() as u64 != expected {
            return Err(bad("params", format!("{} trailing bytes after the last parameter", blobs.len() as u64 - expected)));
        }
        Ok(Checkpoint { kind: m.kind, iteration: m.iteration, config, vocab, words: m.words, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}
