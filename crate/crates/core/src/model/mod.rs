//! Detector architecture: configuration, graph assembly, trimming, and
//! parameter/FLOPs accounting.

mod config;
mod graph;

pub use config::{check_heads_and_pan, format_heads, parse_heads, Head, ModelConfig, PanMode, DEFAULT_STAGE_CHANNELS};
pub use graph::{head_hidden, layer_of, Group, Layer, LayerOp, ModelGraph, BOX_OBJ_CHANNELS, INPUT};
