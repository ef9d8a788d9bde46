//! Dense `f64` tensors, a reverse-mode differentiation graph and the
//! numeric kernels behind it.

mod array;
mod conv;
pub mod fft;
pub mod gradcheck;
mod graph;
mod resample;

pub use array::Tensor;
pub use conv::Padding;
pub use graph::{berhu, BatchStats, Graph, RunningStats, Var};
