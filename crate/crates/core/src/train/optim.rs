// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay, using the same update order as PyTorch:
/// decay, moment update, bias-corrected step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    /// Fresh state for parameters of the given shapes.
    pub fn new(shapes: &[&[usize]], lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Advances the step counter; follow with one [`AdamW::apply`] per tensor.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates tensor `k` in place for the current step.
    pub fn apply(&mut self, k: usize, p: &mut Tensor, g: &Tensor) -> Result<()> {
        let Some(shape) = self.m.get(k).map(|m| m.shape().to_vec()) else {
            return Err(Error::contract(format!("optimizer has no state for tensor {k}")));
        };
        if p.shape() != shape.as_slice() || g.shape() != shape.as_slice() {
            return Err(Error::contract(format!(
                "tensor {k}: state {shape:?}, param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if self.step == 0 {
            return Err(Error::contract("apply called before begin_step"));
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
        let m = self.m[k].data_mut();
        let v = self.v[k].data_mut();
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *x -= lr * wd * *x;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
        }
        Ok(())
    }

    /// One update of every parameter from its gradient.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[k].shape() || g.shape() != self.m[k].shape() {
                return Err(Error::contract(format!(
                    "tensor {k}: state {:?}, param {:?}, grad {:?}",
                    self.m[k].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.begin_step();
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.apply(k, p, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let g = Tensor::zeros(&[3]);
        let mut opt = AdamW::new(&[&[3]], 0.1, 0.0);
        for _ in 0..5 {
            opt.update(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_hand_trace() {
        // m = 0.1·g, v = 0.001·g², bias correction restores g and g², so the
        // step is lr·g/(|g| + eps) after decay.
        let (x0, g, lr, wd) = (2.0, 0.5, 0.01, 0.1);
        let mut p = Tensor::vector(vec![x0]);
        let mut opt = AdamW::new(&[&[1]], lr, wd);
        opt.update(&mut [&mut p], &[&Tensor::vector(vec![g])]).unwrap();
        let decayed = x0 - lr * wd * x0;
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let want = decayed - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_decreases() {
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        let mut opt = AdamW::new(&[&[2]], 0.01, 0.0);
        let loss = |p: &Tensor| p.data().iter().map(|x| x * x).sum::<f64>();
        let mut last = loss(&p);
        for _ in 0..100 {
            let g = p.map(|x| 2.0 * x);
            opt.update(&mut [&mut p], &[&g]).unwrap();
            let now = loss(&p);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = AdamW::new(&[&[3]], 0.1, 0.0);
        let g = Tensor::zeros(&[2]);
        assert!(matches!(opt.update(&mut [&mut p], &[&g]), Err(Error::Contract(_))));
    }
}
