//! Dense tensors, reverse-mode differentiation, seeded random streams and
//! the scalar nonlinearities used by the encoder.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use ops::{dropout, gelu, layernorm, matmul, sigmoid, softmax_rows};
pub use rng::RngStream;
pub use tensor::Tensor;
