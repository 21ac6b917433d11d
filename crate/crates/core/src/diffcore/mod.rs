//! Differentiable numeric substrate: dense tensors, a reverse-mode tape,
//! named parameter sets with a binary checkpoint format, and a
//! finite-difference oracle.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{clip_global_norm, fd_grad, global_norm, grad, max_relative_error};
pub use graph::{log_sigmoid, sigmoid, Gradients, Graph, Var};
pub use params::{Bindings, GradMap, ParamSet};
pub use tensor::Tensor;

use rand::Rng;

/// Uniform `[-scale, scale)` initialization.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data)
}
