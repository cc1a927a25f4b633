//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The op set covers what the classifier needs: matmul, elementwise add/sub,
//! bias-row broadcast, ReLU, per-row concatenation, row slicing and
//! gathering, softmax, cross-entropy on logits, negate, log, scaling, mean
//! and gradient reversal. Graphs are rebuilt for every minibatch.

mod graph;
mod tensor;

pub use graph::{softmax_rows, Graph, Var};
pub use tensor::Tensor;
