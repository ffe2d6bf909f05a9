//! RENC checkpoint files.
//!
//! ```text
//! "RENC"
//! u32 d_model, u32 n_blocks, u32 n_heads, u32 encoder_dim, u32 ffn_mult
//! u32 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 value count, f32 × count
//! ```
//!
//! Tensors may appear in any order; unknown, duplicate, missing or mis-sized
//! tensors are rejected.

use std::collections::HashMap;
use std::path::Path;

use crate::data::binio::{put_f32s, put_string, put_u32, read_file, write_file, Reader};
use crate::error::{Error, Result};

use super::{RenConfig, RenParams};

pub const RENC_MAGIC: &[u8; 4] = b"RENC";

pub fn encode_checkpoint(config: &RenConfig, params: &RenParams<f32>) -> Result<Vec<u8>> {
    config.validate()?;
    params.check_shapes(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(RENC_MAGIC);
    for v in [
        config.d_model,
        config.n_blocks,
        config.n_heads,
        config.encoder_dim,
        config.ffn_mult,
    ] {
        put_u32(&mut out, v)?;
    }
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        put_string(&mut out, &t.name)?;
        put_u32(&mut out, t.data.len())?;
        put_f32s(&mut out, t.data.iter().copied());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(RenConfig, RenParams<f32>)> {
    let mut r = Reader::new(bytes, "RENC");
    r.magic(RENC_MAGIC)?;
    let config = RenConfig {
        d_model: r.usize()?,
        n_blocks: r.usize()?,
        n_heads: r.usize()?,
        encoder_dim: r.usize()?,
        ffn_mult: r.usize()?,
    };
    config.validate()?;
    let count = r.usize()?;
    let mut blocks: HashMap<String, Vec<f32>> = HashMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let n = r.usize()?;
        let data = r.f32s(n)?;
        if blocks.insert(name.clone(), data).is_some() {
            return Err(Error::Format(format!("RENC: duplicate tensor `{name}`")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("RENC: {} trailing bytes", r.remaining())));
    }
    let mut params = RenParams::<f32>::zeros(&config);
    for t in params.tensors_mut() {
        let data = blocks
            .remove(&t.name)
            .ok_or_else(|| Error::Format(format!("RENC: missing tensor `{}`", t.name)))?;
        if data.len() != t.data.len() {
            return Err(Error::Format(format!(
                "RENC: tensor `{}` has {} values, expected {}",
                t.name,
                data.len(),
                t.data.len()
            )));
        }
        t.data.copy_from_slice(&data);
    }
    if let Some(name) = blocks.keys().min() {
        return Err(Error::Format(format!("RENC: unknown tensor `{name}`")));
    }
    params.check_finite()?;
    Ok((config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &RenConfig, params: &RenParams<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(config, params)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RenConfig, RenParams<f32>)> {
    decode_checkpoint(&read_file(path.as_ref())?)
}
