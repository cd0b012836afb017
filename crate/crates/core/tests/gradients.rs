// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference checks of every tape op at random points.

use proptest::prelude::*;
use sinklab::gradcheck::grad_check;
use sinklab::{Result, Tape, Tensor, Var};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// Reduces a matrix to a scalar through fixed, non-uniform weights so every
/// output entry contributes a distinct amount.
fn weighted_sum(t: &mut Tape, x: Var) -> Result<Var> {
    let shape = t.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| 0.3 + 0.17 * ((k * 7) % 11) as f64).collect())?;
    let w = t.constant(w);
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

fn assert_close<F: Fn(&mut Tape, Var) -> Result<Var>>(f: F, point: &Tensor) -> std::result::Result<(), TestCaseError> {
    let check = grad_check(f, point, STEP).unwrap();
    prop_assert!(check.max_rel_error <= TOL, "{check:?}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_both_sides(a in mat(3, 4), b in mat(4, 2)) {
        let bc = b.clone();
        assert_close(|t, x| { let c = t.constant(bc.clone()); let y = t.matmul(x, c)?; weighted_sum(t, y) }, &a)?;
        let ac = a.clone();
        assert_close(|t, x| { let c = t.constant(ac.clone()); let y = t.matmul(c, x)?; weighted_sum(t, y) }, &b)?;
    }

    #[test]
    fn elementwise_ops(a in mat(3, 4), b in mat(3, 4)) {
        let bc = b.clone();
        assert_close(|t, x| { let c = t.constant(bc.clone()); let y = t.add(x, c)?; weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let c = t.constant(bc.clone()); let y = t.sub(c, x)?; weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let c = t.constant(bc.clone()); let y = t.mul(x, c)?; weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let y = t.mul(x, x)?; weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let y = t.scale(x, -1.7); weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let y = t.silu(x); weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let y = t.square(x); weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let y = t.transpose(x)?; weighted_sum(t, y) }, &a)?;
        assert_close(|t, x| { let y = t.square(x); Ok(t.mean(y)) }, &a)?;
    }

    #[test]
    fn norms(x in mat(4, 6), g in mat(1, 6)) {
        let gain = Tensor::vector(g.data().to_vec());
        let gc = gain.clone();
        assert_close(|t, v| { let gg = t.constant(gc.clone()); let y = t.rms_norm(v, gg)?; weighted_sum(t, y) }, &x)?;
        assert_close(|t, v| { let gg = t.constant(gc.clone()); let y = t.layer_norm(v, gg)?; weighted_sum(t, y) }, &x)?;
        let xc = x.clone();
        assert_close(|t, v| { let xx = t.constant(xc.clone()); let y = t.rms_norm(xx, v)?; weighted_sum(t, y) }, &gain)?;
        assert_close(|t, v| { let xx = t.constant(xc.clone()); let y = t.layer_norm(xx, v)?; weighted_sum(t, y) }, &gain)?;
    }

    #[test]
    fn attention_pieces(s in mat(5, 5), x in mat(5, 8)) {
        assert_close(|t, v| { let y = t.causal_softmax(v)?; weighted_sum(t, y) }, &s)?;
        assert_close(|t, v| { let y = t.rope(v, 2, 10_000.0)?; weighted_sum(t, y) }, &x)?;
        assert_close(|t, v| { let y = t.slice_cols(v, 2, 4)?; weighted_sum(t, y) }, &x)?;
        assert_close(|t, v| {
            let a = t.slice_cols(v, 0, 4)?;
            let b = t.scale(v, 0.5);
            let y = t.concat_cols(&[b, a])?;
            weighted_sum(t, y)
        }, &x)?;
        assert_close(|t, v| {
            let a = t.select_rows(v, &[4, 0, 0, 2])?;
            let y = t.concat_rows(&[a, v])?;
            weighted_sum(t, y)
        }, &x)?;
    }

    #[test]
    fn cosines_and_rotation(x in mat(5, 6)) {
        assert_close(|t, v| { let c = t.row_cosine(v, 0, &[1, 2, 4])?; let y = t.square(c); Ok(t.sum(y)) }, &x)?;
        assert_close(|t, v| {
            let a = t.select_rows(v, &[1])?;
            let b = t.select_rows(v, &[3])?;
            t.cosine_sim(a, b)
        }, &x)?;
        assert_close(|t, v| { let y = t.rotate_row(v, 3, 0)?; weighted_sum(t, y) }, &x)?;
        assert_close(|t, v| { let y = t.rotate_row(v, 1, 4)?; weighted_sum(t, y) }, &x)?;
    }

    #[test]
    fn cross_entropy(logits in mat(4, 7), targets in prop::collection::vec(0usize..7, 4)) {
        assert_close(|t, v| t.cross_entropy(v, &targets), &logits)?;
    }
}
