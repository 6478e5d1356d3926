//! Dense 64-bit tensors and a reverse-mode tape over a fixed op set:
//! matmul, add, mul, relu, exp, row log-softmax, row softmax, gather-rows,
//! sum, mean, scale, detach and forward-only quantize / top-k.

mod graph;
mod tensor;

pub use graph::{Fault, Gradients, Graph, NodeId};
pub use tensor::{log_softmax_row, softmax_row, top_k_indices, Tensor};
