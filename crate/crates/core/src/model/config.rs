use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a region encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenConfig {
    pub d_model: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    pub encoder_dim: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_blocks() -> usize {
    4
}
fn default_heads() -> usize {
    8
}
fn default_ffn_mult() -> usize {
    4
}

impl RenConfig {
    /// Four blocks, eight heads, `d_model = encoder_dim`.
    pub fn for_encoder(encoder_dim: usize) -> Self {
        Self {
            d_model: encoder_dim,
            n_blocks: default_blocks(),
            n_heads: default_heads(),
            encoder_dim,
            ffn_mult: default_ffn_mult(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.n_blocks, self.n_heads, self.encoder_dim, self.ffn_mult]
            .contains(&0)
        {
            return Err(Error::Config(format!("all config fields must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by 4 for the 2D sinusoidal embedding",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}
