// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference checks against the tape's analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_k |analytic_k − numeric_k| / max(1, |numeric_k|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
}

/// Compares `∂f/∂x` from one backward sweep with central differences of
/// step `step` at `point`. `f` receives a fresh tape and the leaf holding
/// `x`, and must return a scalar node.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !point.is_finite() {
        return Err(Error::contract("grad_check point must be finite"));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for k in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[k] += step;
        let mut minus = point.clone();
        minus.data_mut()[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst.max_rel_error || err.is_nan() {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: k,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 4.0]);
        let check = grad_check(
            |t, v| {
                let s = t.square(v);
                let s = t.sum(s);
                Ok(t.scale(s, 0.5))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-9, "{check:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Copying the leaf into a constant cuts it out of the graph.
        let x = Tensor::vector(vec![1.0, 2.0]);
        let check = grad_check(
            |t, v| {
                let c = t.constant(t.value(v).clone());
                let s = t.square(c);
                Ok(t.sum(s))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_error > 0.5, "{check:?}");
    }
}
