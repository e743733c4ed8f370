//! Minimal differentiable-array layer.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use conv::ConvGeometry;
pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{BatchStatsRecord, BnStats, CustomOp, Graph, Var};
pub use tensor::{numel, ParamStore, Shape4, Tensor4};

#[cfg(test)]
mod tests;
