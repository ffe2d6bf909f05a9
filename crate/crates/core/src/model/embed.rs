use ndarray::Array2;

use crate::data::PointPrompt;
use crate::error::{Error, Result};
use crate::num::Real;

pub const FREQUENCY_BASE: f64 = 10_000.0;

/// 2D sinusoidal embedding of a normalized point.
///
/// The first half encodes `x`, the second `y`. Each half interleaves
/// `sin(2π·c·ω_k), cos(2π·c·ω_k)` for `ω_k = 10000^(-4k/d)`, `k < d/4`.
pub fn sinusoidal_embed(prompt: PointPrompt, d_model: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; d_model];
    embed_into(prompt, d_model, &mut out)?;
    Ok(out)
}

fn embed_into<T: Real>(prompt: PointPrompt, d_model: usize, out: &mut [T]) -> Result<()> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(Error::Config(format!("d_model {d_model} not divisible by 4")));
    }
    let quarter = d_model / 4;
    let tau = std::f64::consts::TAU;
    for (half, coord) in [prompt.x as f64, prompt.y as f64].into_iter().enumerate() {
        for k in 0..quarter {
            let omega = FREQUENCY_BASE.powf(-4.0 * k as f64 / d_model as f64);
            let phase = tau * coord * omega;
            out[half * d_model / 2 + 2 * k] = T::lit(phase.sin());
            out[half * d_model / 2 + 2 * k + 1] = T::lit(phase.cos());
        }
    }
    Ok(())
}

/// Embeddings of many points as an `n × d_model` matrix.
pub fn embed_points<T: Real>(points: &[PointPrompt], d_model: usize) -> Result<Array2<T>> {
    let mut out = Array2::<T>::zeros((points.len(), d_model));
    for (p, mut row) in points.iter().zip(out.rows_mut()) {
        embed_into(*p, d_model, row.as_slice_mut().expect("contiguous row"))?;
    }
    Ok(out)
}

/// Positional code added to the keys: every attention head gets its own
/// 2D sinusoidal code of the patch center, cycling through
/// `sin x, cos x, sin y, cos y` at the prompt frequencies `ω_0, ω_1, …`
/// until the head width is filled.
pub fn key_position_embed<T: Real>(centers: &[PointPrompt], d_model: usize, n_heads: usize) -> Result<Array2<T>> {
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d_model} not divisible into {n_heads} heads")));
    }
    let dh = d_model / n_heads;
    let tau = std::f64::consts::TAU;
    let mut head = vec![0f64; dh];
    let mut out = Array2::<T>::zeros((centers.len(), d_model));
    for (p, mut row) in centers.iter().zip(out.rows_mut()) {
        for (j, v) in head.iter_mut().enumerate() {
            let omega = FREQUENCY_BASE.powf(-4.0 * (j / 4) as f64 / d_model as f64);
            let coord = if j % 4 < 2 { p.x } else { p.y } as f64;
            let phase = tau * coord * omega;
            *v = if j % 2 == 0 { phase.sin() } else { phase.cos() };
        }
        for (j, r) in row.iter_mut().enumerate() {
            *r = T::lit(head[j % dh]);
        }
    }
    Ok(out)
}
