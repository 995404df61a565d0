//! Dense tensors with reverse-mode automatic differentiation.

mod graph;
pub mod gradcheck;
pub mod kernels;

pub use graph::{BinaryKind, CustomOp, Elementwise, Gradients, Graph, UnaryKind, Var};
pub use gradcheck::{grad_check, EntryStatus, GradCheckConfig, GradEntry, GradReport};
