//! Dense numerical core: MLPs with manual backprop, Adam, Smooth-L1 and a
//! checkpoint container.

mod adam;
pub mod checkpoint;
mod loss;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use loss::{smooth_l1, smooth_l1_grad, smooth_l1_scalar, smooth_l1_scalar_grad};
pub use mlp::{
    ForwardCache, Gradients, HiddenActivation, Matrix, NetParams, NetSpec, OutputActivation,
};

/// Euclidean norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
