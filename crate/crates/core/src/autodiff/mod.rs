//! Reverse-mode automatic differentiation over dense tensors.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{check_gradients, rel_err, FdReference, GradCheckReport, GraphFn};
pub use graph::{BnStats, Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
