// SPDX-License-Identifier: MIT OR Apache-2.0

use super::forward::forward;
use super::lora::LoraSet;
use super::params::ModelParams;
use super::sequence::{ModelInput, Role, Vocab};
use crate::error::{Error, Result};

/// Greedy decoding: appends the arg-max token (lowest id on ties) until
/// `max_new` tokens, EOS, or `max_seq` is reached. EOS is not returned.
pub fn generate_greedy(
    params: &ModelParams,
    lora: Option<&LoraSet>,
    prefix: &ModelInput,
    max_new: usize,
) -> Result<Vec<usize>> {
    if prefix.is_empty() {
        return Err(Error::contract("generation prefix is empty"));
    }
    let mut seq = prefix.clone();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < params.config.max_seq {
        let logits = forward(params, lora, &seq)?;
        let last = logits.row(logits.rows() - 1);
        let next = argmax(last);
        if next == Vocab::EOS {
            break;
        }
        out.push(next);
        seq.push_token(next, Role::Target);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
