pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kv;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use detect::{Detection, LossConfig};
pub use error::{Error, Result};
pub use geometry::{BBox, LossKind};
pub use model::{Head, ModelConfig, ModelGraph, PanMode};
pub use tensor::{Float, Tensor};
