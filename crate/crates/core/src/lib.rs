//! Region tokenization engine.
//!
//! Turns patch feature maps from a frozen image encoder into object-level
//! region tokens: point prompts cross-attend to the patch features, tokens of
//! the same object are merged by similarity, and region masks derived from
//! superpixels can pool tokens out of any other encoder.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod eval;
pub mod extension;
pub mod model;
pub mod num;
pub mod prompting;
pub mod train;

pub use error::{Error, Result};
