//! Dynamic 3D Gaussian fields driven by sparse control points, a
//! multi-channel splatting renderer, the training objectives and schedule,
//! and a flow-guided token propagation scheduler for multiview sequences.

pub mod buffer;
pub mod error;
pub mod field;
pub mod io;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod render;
pub mod sequence;
pub mod synth;
pub mod tokenflow;
pub mod train;

pub use buffer::{FlowMap, Image, Mask};
pub use error::{Error, Result};
