//! Encoder with Standard, Dpm and Fuse layers, the knowledge encoder and the
//! task heads.

mod checkpoint;
mod config;
mod encoder;
pub mod layers;
mod params;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use config::{top_layers, LayerKind, ModelConfig, LN_EPS};
pub use encoder::{describe_layers, ForwardOutput, MemoryMode, Model, Session};
pub use layers::FfnActivation;
pub use params::{filled, identity, uniform, ParamId, ParamSet};
