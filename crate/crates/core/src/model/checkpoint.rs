// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SINKCKP1`, a little-endian `u64` header length,
//! a JSON header (config, seed, step, tensor directory), then every tensor's
//! values as little-endian `f64` in directory order. Values are stored as raw
//! bits so a write/read round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::lora::{LoraAdapter, LoraSet};
use super::params::{LayerParams, ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SINKCKP1";

/// A model snapshot with its adapters and the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub lora: Option<LoraSet>,
    pub seed: u64,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    step: usize,
    tensors: Vec<Entry>,
    has_adapters: bool,
    adapters: Vec<AdapterEntry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    target: ParamId,
    rank: usize,
    scale_bits: u64,
    a_shape: Vec<usize>,
    b_shape: Vec<usize>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.validate()?;
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        for id in self.params.ids() {
            let t = self.params.get(id)?;
            tensors.push(Entry {
                name: id.to_string(),
                shape: t.shape().to_vec(),
            });
            payload.push(t);
        }
        let mut adapters = Vec::new();
        if let Some(set) = &self.lora {
            set.validate(&self.params)?;
            for ad in &set.adapters {
                adapters.push(AdapterEntry {
                    target: ad.target,
                    rank: ad.rank,
                    scale_bits: ad.scale.to_bits(),
                    a_shape: ad.a.shape().to_vec(),
                    b_shape: ad.b.shape().to_vec(),
                });
                payload.push(&ad.a);
                payload.push(&ad.b);
            }
        }
        let header = Header {
            config: self.params.config.clone(),
            seed: self.seed,
            step: self.step,
            tensors,
            has_adapters: self.lora.is_some(),
            adapters,
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header_json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let mut cursor = 16 + hlen;
        let mut read = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = cursor + 8 * n;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated payload"))?;
            cursor = end;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };

        let cfg = header.config;
        cfg.validate()?;
        let mut params = ModelParams {
            config: cfg.clone(),
            embedding: Tensor::zeros(&[0]),
            head: Tensor::zeros(&[0]),
            final_norm: Tensor::zeros(&[0]),
            audio_proj: Tensor::zeros(&[0]),
            video_proj: Tensor::zeros(&[0]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    wq: Tensor::zeros(&[0]),
                    wk: Tensor::zeros(&[0]),
                    wv: Tensor::zeros(&[0]),
                    wo: Tensor::zeros(&[0]),
                    wgate: Tensor::zeros(&[0]),
                    wup: Tensor::zeros(&[0]),
                    wdown: Tensor::zeros(&[0]),
                    attn_norm: Tensor::zeros(&[0]),
                    mlp_norm: Tensor::zeros(&[0]),
                })
                .collect(),
        };
        let expected = params.ids();
        if header.tensors.len() != expected.len() {
            return Err(bad("tensor directory does not match config"));
        }
        for entry in &header.tensors {
            let id: ParamId = entry.name.parse()?;
            *params.get_mut(id)? = read(&entry.shape)?;
        }
        params.validate()?;
        let lora = if header.has_adapters {
            let mut adapters = Vec::new();
            for e in &header.adapters {
                let a = read(&e.a_shape)?;
                let b = read(&e.b_shape)?;
                adapters.push(LoraAdapter {
                    target: e.target,
                    rank: e.rank,
                    scale: f64::from_bits(e.scale_bits),
                    a,
                    b,
                });
            }
            let set = LoraSet { adapters };
            set.validate(&params)?;
            Some(set)
        } else {
            None
        };
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            params,
            lora,
            seed: header.seed,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        assert!(Checkpoint::from_bytes(b"SINKCKP1\xff\xff\xff\xff\xff\xff\xff\x00").is_err());
    }

    #[test]
    fn truncated_payload_is_detected() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ck = Checkpoint {
            params,
            lora: None,
            seed: 2,
            step: 0,
        };
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
