//! Minimal CNN engine: tensors, layers with exact gradients, Adam and
//! checkpoints. Generic over the float type so gradient checks can run in f64.

pub mod adam;
pub mod checkpoint;
pub mod gemm;
pub mod layers;
pub mod network;
pub mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub use adam::{lr_schedule, Adam, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{conv_naive, Cache, Layer, LayerSpec, ParamGrads};
pub use network::{Gradients, Network};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + Debug + Default + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Send + Sync + Debug + Default + 'static
{
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Negative log-likelihood of `label` under one row of log-probabilities.
pub fn nll_loss<T: Real>(log_probs: &[T], label: usize) -> Result<T> {
    log_probs
        .get(label)
        .map(|&v| -v)
        .ok_or(Error::LabelOutOfRange {
            label,
            classes: log_probs.len(),
        })
}

/// Mean NLL over a `(N, K)` batch and its gradient with respect to the input.
pub fn batch_nll<T: Real>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = log_probs.batch();
    if labels.len() != n || log_probs.shape().len() != 2 {
        return Err(Error::shape("batch_nll", format!("[{}, K]", labels.len()), format!("{:?}", log_probs.shape())));
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut grad = Tensor::zeros(log_probs.shape());
    let mut total = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        total += nll_loss(log_probs.item(b), label)?;
        grad.item_mut(b)[label] = -inv;
    }
    Ok((total * inv, grad))
}
