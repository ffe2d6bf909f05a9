//! The region encoder: sinusoidal prompt embeddings, stacked cross-attention
//! blocks over projected patch features, and the alignment projection.

pub(crate) mod block;
pub mod checkpoint;
mod config;
pub mod embed;
pub(crate) mod forward;
mod params;

pub use block::{block_attention, cross_attention_block};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RenConfig;
pub use embed::sinusoidal_embed;
pub use forward::{align, forward, forward_with_attention};
pub use params::{init_params, BlockParams, RenParams, Tensor, TensorMut};
