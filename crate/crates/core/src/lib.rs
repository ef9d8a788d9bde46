//! Joint semantic segmentation and monocular depth estimation on
//! equirectangular panoramas with a frequency-domain encoder-decoder.

pub mod data;
pub mod error;
pub mod fourier;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use data::{Batch, Dataset, Sample, SceneSpec};
pub use error::{Error, Result};
pub use network::{ModelConfig, Network};
pub use nn::{Mode, ModelState};
pub use tensor::{Graph, Padding, Tensor, Var};
