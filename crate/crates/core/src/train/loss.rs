// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Role, SequenceSpec, TapeForward};
use crate::tensor::cosine;

/// Positions counted by the decorrelation term: everything except BOS and padding.
pub fn decorrelation_rows(roles: &[Role]) -> Vec<usize> {
    roles
        .iter()
        .enumerate()
        .filter(|(_, r)| !matches!(r, Role::Bos | Role::Pad))
        .map(|(i, _)| i)
        .collect()
}

fn check_shape(n_layers: usize, rows: &[usize]) -> Result<()> {
    if n_layers < 4 {
        return Err(Error::contract("decorrelation needs at least 4 layers"));
    }
    if rows.is_empty() {
        return Err(Error::contract("decorrelation needs a non-BOS, non-pad token"));
    }
    Ok(())
}

/// Mean squared cosine between counted tokens and BOS over layers `2..=L-1`.
pub fn decorrelation_loss(trace: &ForwardTrace) -> Result<f64> {
    let rows = decorrelation_rows(&trace.roles);
    let n_layers = trace.n_layers();
    check_shape(n_layers, &rows)?;
    let mut acc = 0.0;
    for l in 2..n_layers {
        let h = trace.hidden(l);
        for &i in &rows {
            let c = cosine(h.row(i), h.row(0));
            acc += c * c;
        }
    }
    Ok(acc / (rows.len() * (n_layers - 2)) as f64)
}

/// Differentiable form of [`decorrelation_loss`] over a taped forward pass.
pub fn decorrelation_on_tape(tape: &mut Tape, fwd: &TapeForward) -> Result<Var> {
    let rows = decorrelation_rows(&fwd.roles);
    let outputs = fwd.block_outputs();
    let n_layers = outputs.len();
    check_shape(n_layers, &rows)?;
    let mut total: Option<Var> = None;
    for &h in &outputs[1..n_layers - 1] {
        let c = tape.row_cosine(h, 0, &rows)?;
        let sq = tape.square(c);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least two interior layers");
    Ok(tape.scale(total, 1.0 / (rows.len() * (n_layers - 2)) as f64))
}

/// Taped loss terms of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub decor: Var,
}

/// Teacher-forced cross-entropy over the target positions of `spec`.
pub fn sequence_cross_entropy(tape: &mut Tape, logits: Var, spec: &SequenceSpec) -> Result<Var> {
    let (rows, targets) = spec.target_pairs();
    if rows.is_empty() {
        return Err(Error::contract("sequence has no target positions"));
    }
    let picked = tape.select_rows(logits, &rows)?;
    tape.cross_entropy(picked, &targets)
}

/// `CE + λ·decor`. With `λ = 0` the total is the cross-entropy node itself.
pub fn total_loss(tape: &mut Tape, fwd: &TapeForward, spec: &SequenceSpec, lambda: f64) -> Result<LossTerms> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::contract(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let ce = sequence_cross_entropy(tape, fwd.logits, spec)?;
    let decor = decorrelation_on_tape(tape, fwd)?;
    let total = if lambda == 0.0 {
        ce
    } else {
        let weighted = tape.scale(decor, lambda);
        tape.add(ce, weighted)?
    };
    Ok(LossTerms { total, ce, decor })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn token_error_rate<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("token error rate needs a non-empty reference"));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_edit_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(token_error_rate(&[1, 9, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.25);
        assert_eq!(token_error_rate::<u8>(&[], &[1, 2]).unwrap(), 1.0);
        assert_eq!(token_error_rate(&[1, 2, 3], &[7]).unwrap(), 3.0);
        assert!(token_error_rate::<u8>(&[1], &[]).is_err());
    }

    #[test]
    fn distance_handles_empty_sides() {
        assert_eq!(edit_distance::<u8>(&[], &[]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn pad_and_bos_are_not_counted() {
        let roles = [Role::Bos, Role::Marker, Role::Audio, Role::Target, Role::Pad];
        assert_eq!(decorrelation_rows(&roles), vec![1, 2, 3]);
    }
}
