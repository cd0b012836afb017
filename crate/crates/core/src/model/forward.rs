// SPDX-License-Identifier: MIT OR Apache-2.0

//! The instrumented forward pass.
//!
//! Each block computes `H^l = H^{l-1} + O^l + MLP(norm(H^{l-1} + O^l))` with
//! `O^l` the multi-head self-attention of `norm(H^{l-1})`. The pass records
//! every block output, every per-head attention map and both residual
//! contributions, and can rotate chosen hidden-state rows between blocks.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, NormKind};
use super::lora::LoraSet;
use super::params::{LayerWeight, ModelParams, ParamId};
use super::sequence::{ModelInput, Role};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where an intervened token's hidden state is pointed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RotationMode {
    /// Along the BOS hidden state.
    TowardBos,
    /// Along the hidden state of another position.
    TowardToken(usize),
}

impl fmt::Display for RotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TowardBos => f.write_str("toward-bos"),
            Self::TowardToken(j) => write!(f, "toward-token:{j}"),
        }
    }
}

impl FromStr for RotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "toward-bos" {
            return Ok(Self::TowardBos);
        }
        s.strip_prefix("toward-token:")
            .and_then(|j| j.parse().ok())
            .map(Self::TowardToken)
            .ok_or_else(|| Error::contract(format!("unknown rotation mode '{s}'")))
    }
}

impl Serialize for RotationMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RotationMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A norm-preserving rotation of `H^layer[token]`, applied to the output of
/// block `layer` (1-based) before the next block reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub token: usize,
    pub mode: RotationMode,
}

impl InterventionSpec {
    pub fn target(&self) -> usize {
        match self.mode {
            RotationMode::TowardBos => 0,
            RotationMode::TowardToken(j) => j,
        }
    }

    pub fn validate(&self, n_layers: usize, n_tokens: usize) -> Result<()> {
        if !(1..=n_layers).contains(&self.layer) {
            return Err(Error::contract(format!(
                "intervention layer {} outside 1..={n_layers}",
                self.layer
            )));
        }
        if self.token >= n_tokens || self.target() >= n_tokens {
            return Err(Error::contract(format!(
                "intervention token {} / target {} outside sequence of {n_tokens}",
                self.token,
                self.target()
            )));
        }
        if self.token == 0 && self.mode == RotationMode::TowardBos {
            return Err(Error::contract("rotating BOS toward itself is vacuous"));
        }
        Ok(())
    }
}

/// Everything recorded for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Block output `H^l` (after any intervention at this layer), `N × d`.
    pub hidden: Tensor,
    /// Per-head attention maps `A_h^l`, each `N × N`.
    pub attention: Vec<Tensor>,
    /// Attention residual contribution `O^l`.
    pub attn_out: Tensor,
    /// MLP residual contribution.
    pub mlp_out: Tensor,
    /// Row changes made by interventions at this layer, if any.
    pub edit: Option<Tensor>,
}

/// Full record of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub roles: Vec<Role>,
    /// Input embeddings `H^0`.
    pub embeddings: Tensor,
    /// Blocks `1..=L`, stored at index `l − 1`.
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.attention.len())
    }

    /// `H^l`; `l = 0` gives the input embeddings.
    pub fn hidden(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.embeddings
        } else {
            &self.layers[l - 1].hidden
        }
    }

    /// Block `l` (1-based).
    pub fn layer(&self, l: usize) -> &LayerTrace {
        &self.layers[l - 1]
    }

    /// Largest deviation from `H^l = H^{l−1} + O^l + MLP^l (+ edits)`.
    pub fn reconstruction_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 1..=self.n_layers() {
            let lt = self.layer(l);
            let prev = self.hidden(l - 1).data();
            for k in 0..prev.len() {
                let edit = lt.edit.as_ref().map_or(0.0, |e| e.data()[k]);
                let rebuilt = prev[k] + lt.attn_out.data()[k] + lt.mlp_out.data()[k] + edit;
                worst = worst.max((lt.hidden.data()[k] - rebuilt).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLora {
    a_t: Var,
    b_t: Var,
    scale: f64,
}

/// One block's weights registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundLayer {
    weights: HashMap<LayerWeight, Var>,
    lora: HashMap<LayerWeight, BoundLora>,
}

impl BoundLayer {
    pub fn weight(&self, w: LayerWeight) -> Var {
        self.weights[&w]
    }
}

/// Model weights registered on a tape, remembering which are trainable.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub params: HashMap<ParamId, Var>,
    /// `(A, B)` leaves of each adapter, keyed by target.
    pub adapters: HashMap<ParamId, (Var, Var)>,
    layers: Vec<BoundLayer>,
}

impl BoundModel {
    pub fn param(&self, id: ParamId) -> Var {
        self.params[&id]
    }

    pub fn layer(&self, l: usize) -> &BoundLayer {
        &self.layers[l - 1]
    }
}

/// Registers all weights on `tape`. Base weights for which `trainable`
/// returns true, and adapters when `train_lora` is set, become gradient leaves.
pub fn bind(
    tape: &mut Tape,
    params: &ModelParams,
    lora: Option<&LoraSet>,
    trainable: &dyn Fn(ParamId) -> bool,
    train_lora: bool,
) -> Result<BoundModel> {
    let mut vars = HashMap::new();
    for id in params.ids() {
        let t = params.get(id)?.clone();
        let v = if trainable(id) { tape.param(t) } else { tape.constant(t) };
        vars.insert(id, v);
    }
    let mut adapters = HashMap::new();
    let mut layer_lora: Vec<HashMap<LayerWeight, BoundLora>> = vec![HashMap::new(); params.config.n_layers];
    if let Some(set) = lora {
        set.validate(params)?;
        for ad in &set.adapters {
            let ParamId::Layer(l, w) = ad.target else {
                return Err(Error::contract(format!(
                    "adapters only attach to layer weights, not {}",
                    ad.target
                )));
            };
            let (a, b) = if train_lora {
                (tape.param(ad.a.clone()), tape.param(ad.b.clone()))
            } else {
                (tape.constant(ad.a.clone()), tape.constant(ad.b.clone()))
            };
            let a_t = tape.transpose(a)?;
            let b_t = tape.transpose(b)?;
            adapters.insert(ad.target, (a, b));
            layer_lora[l - 1].insert(
                w,
                BoundLora {
                    a_t,
                    b_t,
                    scale: ad.scale,
                },
            );
        }
    }
    let layers = layer_lora
        .into_iter()
        .enumerate()
        .map(|(k, lora)| BoundLayer {
            weights: LayerWeight::ALL
                .into_iter()
                .map(|w| (w, vars[&ParamId::Layer(k + 1, w)]))
                .collect(),
            lora,
        })
        .collect();
    Ok(BoundModel {
        config: params.config.clone(),
        params: vars,
        adapters,
        layers,
    })
}

/// Registers everything as constants.
pub fn bind_frozen(tape: &mut Tape, params: &ModelParams, lora: Option<&LoraSet>) -> Result<BoundModel> {
    bind(tape, params, lora, &|_| false, false)
}

fn project(tape: &mut Tape, layer: &BoundLayer, x: Var, w: LayerWeight) -> Result<Var> {
    let y = tape.matmul(x, layer.weight(w))?;
    match layer.lora.get(&w) {
        Some(ad) => {
            let t = tape.matmul(x, ad.a_t)?;
            let t = tape.matmul(t, ad.b_t)?;
            let t = tape.scale(t, ad.scale);
            tape.add(y, t)
        }
        None => Ok(y),
    }
}

fn normalize(tape: &mut Tape, kind: NormKind, x: Var, gain: Var) -> Result<Var> {
    match kind {
        NormKind::Rms => tape.rms_norm(x, gain),
        NormKind::Layer => tape.layer_norm(x, gain),
    }
}

/// Causal multi-head self-attention of an (already normalized) input.
///
/// Returns the projected output `O` and one attention map per head.
pub fn mhsa(tape: &mut Tape, config: &ModelConfig, layer: &BoundLayer, h: Var) -> Result<(Var, Vec<Var>)> {
    let (n_heads, dh) = (config.n_heads, config.d_head());
    let q = project(tape, layer, h, LayerWeight::Wq)?;
    let k = project(tape, layer, h, LayerWeight::Wk)?;
    let v = project(tape, layer, h, LayerWeight::Wv)?;
    let q = tape.rope(q, n_heads, config.rope_base)?;
    let k = tape.rope(k, n_heads, config.rope_base)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut maps = Vec::with_capacity(n_heads);
    let mut heads = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let kh = tape.slice_cols(k, hd * dh, dh)?;
        let vh = tape.slice_cols(v, hd * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt);
        let attn = tape.causal_softmax(scores)?;
        heads.push(tape.matmul(attn, vh)?);
        maps.push(attn);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = project(tape, layer, merged, LayerWeight::Wo)?;
    Ok((out, maps))
}

/// `((h·W_up) ⊙ silu(h·W_gate)) · W_down`, row by row.
pub fn glu_mlp(tape: &mut Tape, layer: &BoundLayer, h: Var) -> Result<Var> {
    let up = project(tape, layer, h, LayerWeight::Wup)?;
    let gate = project(tape, layer, h, LayerWeight::Wgate)?;
    let gate = tape.silu(gate);
    let inner = tape.mul(up, gate)?;
    project(tape, layer, inner, LayerWeight::Wdown)
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    /// `H^0..=H^L`.
    pub hidden: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
    pub attn_out: Vec<Var>,
    pub mlp_out: Vec<Var>,
    /// Block output before interventions, for layers that had any.
    pub pre_edit: Vec<Option<Var>>,
    pub roles: Vec<Role>,
}

impl TapeForward {
    /// Block outputs `H^1..=H^L`.
    pub fn block_outputs(&self) -> &[Var] {
        &self.hidden[1..]
    }

    /// Copies the recorded values off the tape.
    pub fn to_trace(&self, tape: &Tape) -> ForwardTrace {
        let layers = (0..self.attn_out.len())
            .map(|k| {
                let hidden = tape.value(self.hidden[k + 1]).clone();
                let edit = self.pre_edit[k].map(|pre| {
                    let before = tape.value(pre);
                    let data = hidden.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
                    Tensor::new(hidden.shape().to_vec(), data).expect("same shape")
                });
                LayerTrace {
                    hidden,
                    attention: self.attention[k].iter().map(|&a| tape.value(a).clone()).collect(),
                    attn_out: tape.value(self.attn_out[k]).clone(),
                    mlp_out: tape.value(self.mlp_out[k]).clone(),
                    edit,
                }
            })
            .collect();
        ForwardTrace {
            roles: self.roles.clone(),
            embeddings: tape.value(self.hidden[0]).clone(),
            layers,
        }
    }
}

/// Assembles `H^0` from token embeddings and projected modality frames.
pub fn embed_input(tape: &mut Tape, model: &BoundModel, input: &ModelInput) -> Result<Var> {
    input.validate()?;
    let vocab = model.config.vocab_size;
    let mut token_ids = Vec::new();
    for t in input.spec.tokens.iter().flatten() {
        if *t >= vocab {
            return Err(Error::Index {
                what: "token id",
                index: *t,
                len: vocab,
            });
        }
        token_ids.push(*t);
    }
    let mut parts = Vec::new();
    let mut offsets = HashMap::new();
    let mut rows = 0;
    if !token_ids.is_empty() {
        parts.push(tape.select_rows(model.param(ParamId::Embedding), &token_ids)?);
        rows += token_ids.len();
    }
    for (role, stream, proj) in [
        (Role::Audio, &input.audio, ParamId::AudioProj),
        (Role::Video, &input.video, ParamId::VideoProj),
    ] {
        if let Some(frames) = stream {
            let c = tape.constant(frames.clone());
            parts.push(tape.matmul(c, model.param(proj))?);
            offsets.insert(role, rows);
            rows += frames.rows();
        }
    }
    let all = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    let mut order = Vec::with_capacity(input.len());
    let (mut next_token, mut next_audio, mut next_video) = (0, 0, 0);
    for role in &input.spec.roles {
        match role {
            Role::Audio => {
                order.push(offsets[&Role::Audio] + next_audio);
                next_audio += 1;
            }
            Role::Video => {
                order.push(offsets[&Role::Video] + next_video);
                next_video += 1;
            }
            _ => {
                order.push(next_token);
                next_token += 1;
            }
        }
    }
    if order.iter().copied().eq(0..rows) {
        Ok(all)
    } else {
        tape.select_rows(all, &order)
    }
}

/// Runs all blocks on `tape`, applying `interventions` at their layers.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &BoundModel,
    input: &ModelInput,
    interventions: &[InterventionSpec],
) -> Result<TapeForward> {
    let cfg = &model.config;
    let n = input.len();
    if n == 0 {
        return Err(Error::contract("empty input sequence"));
    }
    if n > cfg.max_seq {
        return Err(Error::contract(format!(
            "sequence of {n} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    for spec in interventions {
        spec.validate(cfg.n_layers, n)?;
    }
    let h0 = embed_input(tape, model, input)?;
    let mut hidden = vec![h0];
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut attn_out = Vec::with_capacity(cfg.n_layers);
    let mut mlp_out = Vec::with_capacity(cfg.n_layers);
    let mut pre_edit = Vec::with_capacity(cfg.n_layers);
    let mut h = h0;
    for l in 1..=cfg.n_layers {
        let layer = model.layer(l);
        let x = normalize(tape, cfg.norm, h, layer.weight(LayerWeight::AttnNorm))?;
        let (o, maps) = mhsa(tape, cfg, layer, x)?;
        let r = tape.add(h, o)?;
        let xm = normalize(tape, cfg.norm, r, layer.weight(LayerWeight::MlpNorm))?;
        let m = glu_mlp(tape, layer, xm)?;
        let mut out = tape.add(r, m)?;
        let edits: Vec<_> = interventions.iter().filter(|s| s.layer == l).collect();
        if edits.is_empty() {
            pre_edit.push(None);
        } else {
            pre_edit.push(Some(out));
            for spec in edits {
                out = tape.rotate_row(out, spec.token, spec.target())?;
            }
        }
        attention.push(maps);
        attn_out.push(o);
        mlp_out.push(m);
        hidden.push(out);
        h = out;
    }
    let last = normalize(tape, cfg.norm, h, model.param(ParamId::FinalNorm))?;
    let logits = tape.matmul(last, model.param(ParamId::Head))?;
    Ok(TapeForward {
        logits,
        hidden,
        attention,
        attn_out,
        mlp_out,
        pre_edit,
        roles: input.spec.roles.clone(),
    })
}

/// Logits (`N × V`) and the full trace, with optional rotations.
pub fn forward_with_trace(
    params: &ModelParams,
    lora: Option<&LoraSet>,
    input: &ModelInput,
    interventions: &[InterventionSpec],
) -> Result<(Tensor, ForwardTrace)> {
    let mut tape = Tape::new();
    let model = bind_frozen(&mut tape, params, lora)?;
    let fwd = forward_on_tape(&mut tape, &model, input, interventions)?;
    let trace = fwd.to_trace(&tape);
    Ok((tape.value(fwd.logits).clone(), trace))
}

/// Logits only.
pub fn forward(params: &ModelParams, lora: Option<&LoraSet>, input: &ModelInput) -> Result<Tensor> {
    let mut tape = Tape::new();
    let model = bind_frozen(&mut tape, params, lora)?;
    let fwd = forward_on_tape(&mut tape, &model, input, &[])?;
    Ok(tape.value(fwd.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_mode_text_round_trip() {
        for m in [RotationMode::TowardBos, RotationMode::TowardToken(17)] {
            assert_eq!(m.to_string().parse::<RotationMode>().unwrap(), m);
        }
        assert!("toward-token:x".parse::<RotationMode>().is_err());
        assert!("sideways".parse::<RotationMode>().is_err());
    }

    #[test]
    fn intervention_validation() {
        let ok = InterventionSpec {
            layer: 2,
            token: 3,
            mode: RotationMode::TowardBos,
        };
        ok.validate(4, 5).unwrap();
        assert!(InterventionSpec { layer: 0, ..ok }.validate(4, 5).is_err());
        assert!(InterventionSpec { layer: 5, ..ok }.validate(4, 5).is_err());
        assert!(InterventionSpec { token: 5, ..ok }.validate(4, 5).is_err());
        assert!(InterventionSpec { token: 0, ..ok }.validate(4, 5).is_err());
        let bad_target = InterventionSpec {
            mode: RotationMode::TowardToken(9),
            ..ok
        };
        assert!(bad_target.validate(4, 5).is_err());
    }
}
