//! Transformer encoder whose upper feed-forward blocks can be swapped for a
//! differentiable plug-in key-value memory, with the training loop, memory
//! editing operations and a synthetic-domain experiment harness.

pub mod dpm;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod text;
pub mod train;
pub mod util;

pub use error::{Error, Result};
