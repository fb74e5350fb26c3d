//! Small reverse-mode differentiation engine over dense `f64` matrices.
//!
//! The kernel set is closed: matmul, bias add, elementwise add/sub/mul/scale,
//! tanh, sigmoid, row softmax, row log-sum-exp, row gather, concatenation,
//! dropout, sum, and two fused losses (CRF negative log-likelihood and
//! clamped cross-entropy over picked probabilities).

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{logsumexp, softmax_rows, Graph, Mode, NodeId, PROB_FLOOR};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;
