// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model parameters and the `ATGW` weight file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ATGW" | u32 version (=1) | u32 header_len | header_len bytes of UTF-8 JSON
//!        | payload (row-major f32 tensors) | u32 CRC32(payload)
//! ```
//!
//! The JSON header is `{"config": ModelConfig, "tensors": [{name, dtype,
//! shape, offset}]}` where `offset` is the byte offset of the tensor inside
//! the payload. With `tied_unembedding` the `unembed` entry may be omitted.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::engine::Tensor;
use crate::error::{Error, LoadError, Result};

pub const MAGIC: &[u8; 4] = b"ATGW";
pub const VERSION: u32 = 1;

/// Parameters of one transformer block. Projection matrices are stored
/// input-major (`x · W`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Arc<Tensor>,
    pub wk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub gate: Arc<Tensor>,
    pub up: Arc<Tensor>,
    pub down: Arc<Tensor>,
    pub norm1: Arc<Tensor>,
    pub norm2: Arc<Tensor>,
}

/// Validated, immutable model: configuration plus all weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    embed: Arc<Tensor>,
    unembed: Arc<Tensor>,
    layers: Vec<LayerWeights>,
    final_norm: Arc<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

impl ModelBundle {
    /// Assembles a bundle, checking every shape against `config`.
    pub fn new(
        config: ModelConfig,
        embed: Tensor,
        unembed: Option<Tensor>,
        layers: Vec<LayerWeights>,
        final_norm: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.hidden_dim, config.intermediate_dim);
        let unembed = match (unembed, config.tied_unembedding) {
            (Some(u), true) => {
                if u != transpose(&embed) {
                    return Err(Error::input("tied unembedding differs from transposed embedding"));
                }
                u
            }
            (Some(u), false) => u,
            (None, true) => transpose(&embed),
            (None, false) => return Err(Error::input("untied model is missing its unembedding")),
        };
        if layers.len() != config.num_layers {
            return Err(Error::input(format!(
                "config declares {} layers, {} provided",
                config.num_layers,
                layers.len()
            )));
        }
        let mut expected: Vec<(String, &Tensor, Vec<usize>)> = vec![
            ("embed".into(), &embed, vec![v, d]),
            ("unembed".into(), &unembed, vec![d, v]),
            ("final_norm".into(), &final_norm, vec![d]),
        ];
        for (l, w) in layers.iter().enumerate() {
            for (name, tensor, shape) in layer_tensors(l, w, d, f) {
                expected.push((name, tensor, shape));
            }
        }
        for (name, tensor, shape) in expected {
            if tensor.shape() != shape.as_slice() {
                return Err(LoadError::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    tensor.shape()
                ))
                .into());
            }
            if !tensor.is_finite() {
                return Err(Error::NonFinite("weights"));
            }
        }
        Ok(Self {
            config,
            embed: Arc::new(embed),
            unembed: Arc::new(unembed),
            layers,
            final_norm: Arc::new(final_norm),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `W_E`, `[vocab, d]`.
    pub fn embed(&self) -> &Tensor {
        &self.embed
    }

    /// `W_U`, `[d, vocab]`.
    pub fn unembed(&self) -> &Tensor {
        &self.unembed
    }

    pub fn layer(&self, index: usize) -> &LayerWeights {
        &self.layers[index]
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &Arc<Tensor> {
        &self.final_norm
    }

    /// Unembedding column for `token`.
    pub fn unembed_column(&self, token: u32) -> Vec<f64> {
        let v = self.config.vocab_size;
        let t = token as usize;
        (0..self.config.hidden_dim).map(|k| self.unembed.data()[k * v + t]).collect()
    }

    /// Short stable identifier derived from the config and weights.
    pub fn fingerprint(&self) -> String {
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&self.to_bytes());
        format!("{:08x}", hasher.finalize())
    }

    /// Serializes to the `ATGW` format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, f) = (self.config.hidden_dim, self.config.intermediate_dim);
        let mut named: Vec<(String, &Tensor)> = vec![("embed".into(), &self.embed)];
        if !self.config.tied_unembedding {
            named.push(("unembed".into(), &self.unembed));
        }
        for (l, w) in self.layers.iter().enumerate() {
            for (name, tensor, _) in layer_tensors(l, w, d, f) {
                named.push((name, tensor));
            }
        }
        named.push(("final_norm".into(), &self.final_norm));

        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(named.len());
        for (name, tensor) in named {
            entries.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape: tensor.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for &v in tensor.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header =
            serde_json::to_vec(&Header { config: self.config.clone(), tensors: entries }).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Parses an `ATGW` buffer. Values are widened from `f32`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LoadError> {
        let truncated = |what: &str| LoadError::ShapeMismatch(format!("file truncated in {what}"));
        if bytes.len() < 4 {
            return Err(truncated("magic"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(LoadError::BadMagic(magic));
        }
        let read_u32 = |at: usize| -> Option<u32> {
            bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let version = read_u32(4).ok_or_else(|| truncated("version"))?;
        if version != VERSION {
            return Err(LoadError::UnsupportedVersion(version));
        }
        let header_len = read_u32(8).ok_or_else(|| truncated("header length"))? as usize;
        let header_end = 12 + header_len;
        let header_bytes = bytes.get(12..header_end).ok_or_else(|| truncated("header"))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| LoadError::Config(e.to_string()))?;
        header.config.validate().map_err(|e| LoadError::Config(e.to_string()))?;
        if bytes.len() < header_end + 4 {
            return Err(truncated("payload"));
        }
        let payload = &bytes[header_end..bytes.len() - 4];
        let expected_crc = read_u32(bytes.len() - 4).expect("length checked");

        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(LoadError::Config(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count * 4;
            let raw = payload.get(start..end).ok_or_else(|| {
                LoadError::ShapeMismatch(format!(
                    "{}: shape {:?} needs bytes {start}..{end}, payload has {}",
                    entry.name,
                    entry.shape,
                    payload.len()
                ))
            })?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| LoadError::ShapeMismatch(e.to_string()))?;
            if tensors.insert(entry.name.clone(), tensor).is_some() {
                return Err(LoadError::Config(format!("duplicate tensor {}", entry.name)));
            }
        }
        let actual_crc = crc32fast::hash(payload);
        if actual_crc != expected_crc {
            return Err(LoadError::Checksum { expected: expected_crc, actual: actual_crc });
        }

        let mut take =
            |name: &str| tensors.remove(name).ok_or_else(|| LoadError::ShapeMismatch(format!("missing tensor {name}")));
        let cfg = header.config;
        let embed = take("embed")?;
        let unembed = if cfg.tied_unembedding { take("unembed").ok() } else { Some(take("unembed")?) };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut get = |part: &str| take(&format!("layer.{l}.{part}")).map(Arc::new);
            layers.push(LayerWeights {
                wq: get("attn.wq")?,
                wk: get("attn.wk")?,
                wv: get("attn.wv")?,
                wo: get("attn.wo")?,
                gate: get("mlp.gate")?,
                up: get("mlp.up")?,
                down: get("mlp.down")?,
                norm1: get("norm1")?,
                norm2: get("norm2")?,
            });
        }
        let final_norm = take("final_norm")?;
        if let Some(extra) = tensors.keys().next() {
            return Err(LoadError::Config(format!("unexpected tensor {extra}")));
        }
        ModelBundle::new(cfg, embed, unembed, layers, final_norm).map_err(|e| match e {
            Error::Load(inner) => inner,
            other => LoadError::Config(other.to_string()),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Loads a model from an `ATGW` file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    Ok(ModelBundle::load(path)?)
}

fn layer_tensors(l: usize, w: &LayerWeights, d: usize, f: usize) -> Vec<(String, &Tensor, Vec<usize>)> {
    vec![
        (format!("layer.{l}.attn.wq"), &*w.wq, vec![d, d]),
        (format!("layer.{l}.attn.wk"), &*w.wk, vec![d, d]),
        (format!("layer.{l}.attn.wv"), &*w.wv, vec![d, d]),
        (format!("layer.{l}.attn.wo"), &*w.wo, vec![d, d]),
        (format!("layer.{l}.mlp.gate"), &*w.gate, vec![d, f]),
        (format!("layer.{l}.mlp.up"), &*w.up, vec![d, f]),
        (format!("layer.{l}.mlp.down"), &*w.down, vec![f, d]),
        (format!("layer.{l}.norm1"), &*w.norm1, vec![d]),
        (format!("layer.{l}.norm2"), &*w.norm2, vec![d]),
    ]
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose preserves size")
}
