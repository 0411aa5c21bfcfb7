//! Adam with decoupled weight decay, and the per-epoch learning-rate decay.

use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter tensor. Weight decay shrinks parameters
    /// by `lr * weight_decay` independently of the gradient moments.
    pub fn step<T: Real>(
        &self,
        net: &mut Network<T>,
        grads: &Gradients<T>,
        state: &mut AdamState<T>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.0.len() != net.layers().len() {
            return Err(Error::Invalid(format!(
                "{} gradient slots for {} layers",
                grads.0.len(),
                net.layers().len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let f = |v: f64| T::from_f64(v).unwrap();
        let (b1, b2, eps) = (f(self.beta1), f(self.beta2), f(self.eps));
        let (lr_t, shrink) = (f(lr), f(1.0 - lr * weight_decay));
        let (c1, c2) = (f(c1), f(c2));

        let mut slot = 0;
        for (layer, g) in net.layers_mut().iter_mut().zip(&grads.0) {
            let Some(g) = g else { continue };
            for (param, grad) in [(&mut layer.weight, &g.weight), (&mut layer.bias, &g.bias)] {
                if state.moments.len() <= slot {
                    state.moments.push((Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
                }
                let (m, v) = &mut state.moments[slot];
                if m.shape() != param.shape() || grad.shape() != param.shape() {
                    return Err(Error::shape("Adam::step", format!("{:?}", param.shape()), format!("{:?}", grad.shape())));
                }
                for (((p, &gv), mv), vv) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mv = b1 * *mv + (T::one() - b1) * gv;
                    *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                    let m_hat = *mv / c1;
                    let v_hat = *vv / c2;
                    *p = *p * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
                }
                slot += 1;
            }
            layer.touch();
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: the base rate divided by `sqrt(k)` at
/// each epoch `k >= 2`, cumulatively.
pub fn lr_schedule(base: f64, epoch: usize) -> f64 {
    (2..=epoch).fold(base, |lr, k| lr / (k as f64).sqrt())
}
