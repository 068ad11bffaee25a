//! Dense tensor arithmetic with reverse-mode automatic differentiation.

mod graph;
mod tensor;

pub use graph::{GradMap, Graph, Var};
pub use tensor::{matmul_raw, Tensor, MAX_RANK};
