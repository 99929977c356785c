//! Dense tensors, tape-based reverse-mode autodiff, finite-difference
//! gradient checking and the Adam optimizer.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
pub mod serial;
mod tensor;

pub use gradcheck::{check_gradients, CoordinateCheck, GradCheckConfig, GradCheckReport};
pub use graph::{AttentionMeta, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use serial::Precision;
pub use tensor::Tensor;

/// Softmax of a plain slice (max-subtracted), for callers outside a tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
