//! Dense row-major matrices and a reverse-mode tape over whole-matrix ops.

mod graph;
mod matrix;

pub use graph::{Gradients, Graph, ParamKey, Var};
pub use matrix::Matrix;

/// Lower/upper bound applied to discriminator probabilities before any log.
pub const PROB_EPS: f64 = 1e-7;
