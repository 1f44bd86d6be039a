//! Reverse-mode automatic differentiation.

pub mod finite_diff;
mod tape;

pub use tape::{gelu, gelu_grad, softmax_rows, Node, NodeId, Tape, LN_EPS};
