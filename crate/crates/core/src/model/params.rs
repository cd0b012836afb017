// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the scaled-normal initialization.
pub const INIT_STD: f64 = 0.02;

/// Per-layer weight slot. Weights act on row vectors: `y = x · W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeight {
    Wq,
    Wk,
    Wv,
    Wo,
    Wgate,
    Wup,
    Wdown,
    AttnNorm,
    MlpNorm,
}

impl LayerWeight {
    pub const ALL: [LayerWeight; 9] = [
        Self::Wq,
        Self::Wk,
        Self::Wv,
        Self::Wo,
        Self::Wgate,
        Self::Wup,
        Self::Wdown,
        Self::AttnNorm,
        Self::MlpNorm,
    ];

    fn name(self) -> &'static str {
        match self {
            Self::Wq => "wq",
            Self::Wk => "wk",
            Self::Wv => "wv",
            Self::Wo => "wo",
            Self::Wgate => "wgate",
            Self::Wup => "wup",
            Self::Wdown => "wdown",
            Self::AttnNorm => "attn_norm",
            Self::MlpNorm => "mlp_norm",
        }
    }
}

/// Identifies one parameter array of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embedding,
    Head,
    FinalNorm,
    AudioProj,
    VideoProj,
    /// `(layer, slot)` with 1-based layer numbering.
    Layer(usize, LayerWeight),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embedding => f.write_str("embedding"),
            Self::Head => f.write_str("head"),
            Self::FinalNorm => f.write_str("final_norm"),
            Self::AudioProj => f.write_str("audio_proj"),
            Self::VideoProj => f.write_str("video_proj"),
            Self::Layer(l, w) => write!(f, "layers.{l}.{}", w.name()),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format {
            what: "parameter id",
            detail: s.to_string(),
        };
        Ok(match s {
            "embedding" => Self::Embedding,
            "head" => Self::Head,
            "final_norm" => Self::FinalNorm,
            "audio_proj" => Self::AudioProj,
            "video_proj" => Self::VideoProj,
            other => {
                let rest = other.strip_prefix("layers.").ok_or_else(bad)?;
                let (l, w) = rest.split_once('.').ok_or_else(bad)?;
                let l: usize = l.parse().map_err(|_| bad())?;
                let w = LayerWeight::ALL.into_iter().find(|c| c.name() == w).ok_or_else(bad)?;
                Self::Layer(l, w)
            }
        })
    }
}

impl Serialize for ParamId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub wgate: Tensor,
    pub wup: Tensor,
    pub wdown: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

impl LayerParams {
    pub fn get(&self, w: LayerWeight) -> &Tensor {
        match w {
            LayerWeight::Wq => &self.wq,
            LayerWeight::Wk => &self.wk,
            LayerWeight::Wv => &self.wv,
            LayerWeight::Wo => &self.wo,
            LayerWeight::Wgate => &self.wgate,
            LayerWeight::Wup => &self.wup,
            LayerWeight::Wdown => &self.wdown,
            LayerWeight::AttnNorm => &self.attn_norm,
            LayerWeight::MlpNorm => &self.mlp_norm,
        }
    }

    pub fn get_mut(&mut self, w: LayerWeight) -> &mut Tensor {
        match w {
            LayerWeight::Wq => &mut self.wq,
            LayerWeight::Wk => &mut self.wk,
            LayerWeight::Wv => &mut self.wv,
            LayerWeight::Wo => &mut self.wo,
            LayerWeight::Wgate => &mut self.wgate,
            LayerWeight::Wup => &mut self.wup,
            LayerWeight::Wdown => &mut self.wdown,
            LayerWeight::AttnNorm => &mut self.attn_norm,
            LayerWeight::MlpNorm => &mut self.mlp_norm,
        }
    }
}

/// All weights of the decoder plus the modality projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `V × d`
    pub embedding: Tensor,
    /// `d × V`
    pub head: Tensor,
    pub final_norm: Tensor,
    /// `audio_dim × d`
    pub audio_proj: Tensor,
    /// `video_dim × d`
    pub video_proj: Tensor,
    pub layers: Vec<LayerParams>,
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
    t
}

impl ModelParams {
    /// Scaled-normal projections, unit norm gains.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let embedding = normal(rng, &[v, d]);
        let head = normal(rng, &[d, v]);
        let audio_proj = normal(rng, &[config.audio_dim, d]);
        let video_proj = normal(rng, &[config.video_dim, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: normal(rng, &[d, d]),
                wk: normal(rng, &[d, d]),
                wv: normal(rng, &[d, d]),
                wo: normal(rng, &[d, d]),
                wgate: normal(rng, &[d, f]),
                wup: normal(rng, &[d, f]),
                wdown: normal(rng, &[f, d]),
                attn_norm: Tensor::filled(&[d], 1.0),
                mlp_norm: Tensor::filled(&[d], 1.0),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            head,
            final_norm: Tensor::filled(&[d], 1.0),
            audio_proj,
            video_proj,
            layers,
        })
    }

    /// Every parameter id in a fixed canonical order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            ParamId::Embedding,
            ParamId::Head,
            ParamId::FinalNorm,
            ParamId::AudioProj,
            ParamId::VideoProj,
        ];
        for l in 1..=self.layers.len() {
            ids.extend(LayerWeight::ALL.into_iter().map(|w| ParamId::Layer(l, w)));
        }
        ids
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        Ok(match id {
            ParamId::Embedding => &self.embedding,
            ParamId::Head => &self.head,
            ParamId::FinalNorm => &self.final_norm,
            ParamId::AudioProj => &self.audio_proj,
            ParamId::VideoProj => &self.video_proj,
            ParamId::Layer(l, w) => self.layer(l)?.get(w),
        })
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        Ok(match id {
            ParamId::Embedding => &mut self.embedding,
            ParamId::Head => &mut self.head,
            ParamId::FinalNorm => &mut self.final_norm,
            ParamId::AudioProj => &mut self.audio_proj,
            ParamId::VideoProj => &mut self.video_proj,
            ParamId::Layer(l, w) => {
                let n = self.layers.len();
                self.layers
                    .get_mut(l.wrapping_sub(1))
                    .ok_or(Error::Index {
                        what: "layer",
                        index: l,
                        len: n,
                    })?
                    .get_mut(w)
            }
        })
    }

    /// Layer `l`, 1-based.
    pub fn layer(&self, l: usize) -> Result<&LayerParams> {
        self.layers.get(l.wrapping_sub(1)).ok_or(Error::Index {
            what: "layer",
            index: l,
            len: self.layers.len(),
        })
    }

    /// Shape each parameter must have under `config`.
    pub fn expected_shape(config: &ModelConfig, id: ParamId) -> Vec<usize> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        match id {
            ParamId::Embedding => vec![v, d],
            ParamId::Head => vec![d, v],
            ParamId::FinalNorm => vec![d],
            ParamId::AudioProj => vec![config.audio_dim, d],
            ParamId::VideoProj => vec![config.video_dim, d],
            ParamId::Layer(_, w) => match w {
                LayerWeight::Wq | LayerWeight::Wk | LayerWeight::Wv | LayerWeight::Wo => vec![d, d],
                LayerWeight::Wgate | LayerWeight::Wup => vec![d, f],
                LayerWeight::Wdown => vec![f, d],
                LayerWeight::AttnNorm | LayerWeight::MlpNorm => vec![d],
            },
        }
    }

    /// Checks shapes against the config and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::contract("layer count differs from config"));
        }
        for id in self.ids() {
            let t = self.get(id)?;
            let want = Self::expected_shape(&self.config, id);
            if t.shape() != want.as_slice() {
                return Err(Error::shape(
                    "ModelParams",
                    format!("{id}: expected {want:?}, got {:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::contract(format!("{id} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.ids()
            .into_iter()
            .map(|id| self.get(id).map_or(0, Tensor::numel))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_id_round_trips_through_text() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for id in params.ids() {
            assert_eq!(id.to_string().parse::<ParamId>().unwrap(), id);
        }
        assert!("layers.x.wq".parse::<ParamId>().is_err());
    }

    #[test]
    fn init_matches_config_and_count() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        params.validate().unwrap();
        assert_eq!(params.parameter_count(), cfg.parameter_count());
        assert!(params.final_norm.data().iter().all(|&g| g == 1.0));
    }
}
