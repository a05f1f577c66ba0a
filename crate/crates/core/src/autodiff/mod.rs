//! Dense-matrix reverse-mode differentiation.

mod gradcheck;
mod graph;
mod matrix;

pub use gradcheck::{
    extrapolated_gradient, grad_check, max_relative_error, numeric_gradient, relative_error,
};
pub use graph::{
    cosine_guarded, cosine_similarity, softmax_rows, Graph, NodeId, COSINE_EPS, RANK_EXP_CLAMP,
};

pub use matrix::Matrix;
