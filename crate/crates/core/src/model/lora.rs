// SPDX-License-Identifier: MIT OR Apache-2.0

//! Low-rank adapters on frozen projection weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{LayerWeight, ModelParams, ParamId, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `W_eff = W + scale · (B·A)ᵀ` for a weight `W` of shape `in × out`.
///
/// `A` is `r × in` and `B` is `out × r`; `B` starts at zero so a fresh
/// adapter leaves the model unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn new(target: ParamId, in_dim: usize, out_dim: usize, rank: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut a = Tensor::zeros(&[rank, in_dim]);
        for v in a.data_mut() {
            *v = dist.sample(rng);
        }
        Self {
            target,
            rank,
            scale,
            a,
            b: Tensor::zeros(&[out_dim, rank]),
        }
    }

    /// The dense update `scale · (B·A)ᵀ`, shaped like the target weight.
    pub fn delta(&self) -> Result<Tensor> {
        let ba = self.b.matmul(&self.a)?;
        Ok(ba.transpose()?.map(|v| v * self.scale))
    }

    fn check_against(&self, weight: &Tensor) -> Result<()> {
        let (i, o) = weight.dims2("lora")?;
        if self.rank == 0 || self.a.shape() != [self.rank, i] || self.b.shape() != [o, self.rank] {
            return Err(Error::shape(
                "lora",
                format!(
                    "{}: weight {i}x{o}, rank {}, A {:?}, B {:?}",
                    self.target,
                    self.rank,
                    self.a.shape(),
                    self.b.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// The adapters attached to one model, at most one per target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    /// One fresh adapter per target weight.
    pub fn init(
        params: &ModelParams,
        targets: &[ParamId],
        rank: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::contract("LoRA rank must be positive"));
        }
        let mut adapters = Vec::with_capacity(targets.len());
        for &target in targets {
            let (i, o) = params.get(target)?.dims2("lora")?;
            adapters.push(LoraAdapter::new(target, i, o, rank, scale, rng));
        }
        let set = Self { adapters };
        set.validate(params)?;
        Ok(set)
    }

    /// The attention projections `W_Q, W_K, W_V, W_O` of every layer.
    pub fn attention_targets(n_layers: usize) -> Vec<ParamId> {
        (1..=n_layers)
            .flat_map(|l| {
                [LayerWeight::Wq, LayerWeight::Wk, LayerWeight::Wv, LayerWeight::Wo].map(|w| ParamId::Layer(l, w))
            })
            .collect()
    }

    pub fn get(&self, target: ParamId) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        for (k, adapter) in self.adapters.iter().enumerate() {
            if self.adapters[..k].iter().any(|o| o.target == adapter.target) {
                return Err(Error::contract(format!("duplicate adapter for {}", adapter.target)));
            }
            adapter.check_against(params.get(adapter.target)?)?;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.numel() + a.b.numel()).sum()
    }
}

/// Merges adapters into a copy of the base weights.
pub fn apply_lora(params: &ModelParams, lora: &LoraSet) -> Result<ModelParams> {
    lora.validate(params)?;
    let mut merged = params.clone();
    for adapter in &lora.adapters {
        let delta = adapter.delta()?;
        let w = merged.get_mut(adapter.target)?;
        for (x, dx) in w.data_mut().iter_mut().zip(delta.data()) {
            *x += dx;
        }
    }
    Ok(merged)
}
