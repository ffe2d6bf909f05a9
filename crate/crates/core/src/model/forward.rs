//! Full encoder pass: prompt embedding, shared key/value projections, the
//! block stack and the alignment projection.
//!
//! Keys carry a fixed per-head sinusoidal code of each patch center on top of
//! the projected features, so prompts can locate their patch; values are the
//! plain feature projection. Block 1 takes the projected prompt embedding
//! `P` as query and residual stream; block `b > 1` queries with `P + out_{b-1}`
//! while its residual stream is `out_{b-1}`.

use ndarray::{Array2, ArrayView2};

use super::block::{block_backward, block_forward, check_finite, BlockCache};
use super::embed::{embed_points, key_position_embed};
use super::{RenConfig, RenParams};
use crate::data::{PatchFeatureMap, PointPrompt, TokenSet};
use crate::error::{Error, Result};
use crate::num::Real;

/// Activations kept for the backward pass.
pub(crate) struct ForwardCache<T> {
    embed: Array2<T>,
    features: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    ren: Array2<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Head-averaged attention of the final block, `n × m`.
    pub(crate) fn final_attention(&self) -> Array2<T> {
        let last = self.blocks.last().expect("at least one block");
        let mut mean = Array2::zeros(last.attn[0].raw_dim());
        for a in &last.attn {
            mean += a;
        }
        mean.mapv_inplace(|v| v / T::lit(last.attn.len() as f64));
        mean
    }

    pub(crate) fn block_attention(&self, b: usize) -> &[Array2<T>] {
        &self.blocks[b].attn
    }
}

pub(crate) struct ForwardOutput<T> {
    pub ren: Array2<T>,
    pub aligned: Array2<T>,
    pub cache: Option<ForwardCache<T>>,
}

/// Inputs shared by every prompt of one feature map.
pub(crate) struct EncodedMap<T> {
    pub features: Array2<T>,
    pub key_pos: Array2<T>,
}

impl<T: Real> EncodedMap<T> {
    pub fn new(map: &PatchFeatureMap, config: &RenConfig) -> Result<Self> {
        Ok(Self {
            features: map.features().mapv(|v| T::lit(v as f64)),
            key_pos: key_position_embed(&map.patch_centers(), config.d_model, config.n_heads)?,
        })
    }
}

pub(crate) fn forward_generic<T: Real>(
    features: ArrayView2<'_, T>,
    key_pos: ArrayView2<'_, T>,
    embed: Array2<T>,
    params: &RenParams<T>,
    config: &RenConfig,
    keep: bool,
) -> Result<ForwardOutput<T>> {
    let k = features.dot(&params.w_k.t()) + key_pos;
    let v = features.dot(&params.w_v.t());
    let p = embed.dot(&params.w_prompt.t());
    let mut stream = p.clone();
    let mut caches = Vec::with_capacity(if keep { params.blocks.len() } else { 0 });
    for (b, bp) in params.blocks.iter().enumerate() {
        let (out, cache) = if b == 0 {
            block_forward(&stream, &p, k.view(), v.view(), bp, config.n_heads, keep)
        } else {
            let query_in = &stream + &p;
            block_forward(&stream, &query_in, k.view(), v.view(), bp, config.n_heads, keep)
        };
        stream = out;
        caches.extend(cache);
    }
    check_finite("ren tokens", &stream)?;
    let aligned = stream.dot(&params.w_align.t());
    let cache = keep.then(|| ForwardCache {
        embed,
        features: features.to_owned(),
        k,
        v,
        blocks: caches,
        ren: stream.clone(),
    });
    Ok(ForwardOutput {
        ren: stream,
        aligned,
        cache,
    })
}

/// Accumulate parameter gradients for upstream gradients on the REN tokens,
/// the aligned tokens and (optionally) the final block's head-averaged
/// attention.
pub(crate) fn backward_generic<T: Real>(
    cache: &ForwardCache<T>,
    params: &RenParams<T>,
    config: &RenConfig,
    d_ren: &Array2<T>,
    d_aligned: &Array2<T>,
    d_attn_final: Option<&Array2<T>>,
    grads: &mut RenParams<T>,
) {
    grads.w_align += &d_aligned.t().dot(&cache.ren);
    let mut d_stream = d_ren + &d_aligned.dot(&params.w_align);
    let mut d_p = Array2::<T>::zeros(d_stream.raw_dim());
    let mut dk = Array2::<T>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<T>::zeros(cache.v.raw_dim());
    let last = params.blocks.len() - 1;
    for b in (0..params.blocks.len()).rev() {
        let extra = if b == last { d_attn_final } else { None };
        let (d_res, d_query) = block_backward(
            &d_stream,
            &cache.blocks[b],
            &params.blocks[b],
            cache.k.view(),
            cache.v.view(),
            config.n_heads,
            extra,
            &mut grads.blocks[b],
            &mut dk,
            &mut dv,
        );
        // later blocks query with stream + P; block 1's stream is P itself
        d_stream = d_res + &d_query;
        if b > 0 {
            d_p += &d_query;
        }
    }
    d_p += &d_stream;
    grads.w_prompt += &d_p.t().dot(&cache.embed);
    grads.w_k += &dk.t().dot(&cache.features);
    grads.w_v += &dv.t().dot(&cache.features);
}

fn check_inputs(
    map: &PatchFeatureMap,
    prompts: &[PointPrompt],
    params: &RenParams<f32>,
    config: &RenConfig,
) -> Result<()> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Validation("forward needs at least one prompt".into()));
    }
    if map.dim != config.encoder_dim {
        return Err(Error::Config(format!(
            "feature dim {} does not match encoder_dim {}",
            map.dim, config.encoder_dim
        )));
    }
    params.check_shapes(config)?;
    for p in prompts {
        p.validate()?;
    }
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics("features", "non-finite input feature"));
    }
    Ok(())
}

/// Region tokens for `prompts` on one feature map.
pub fn forward(
    map: &PatchFeatureMap,
    prompts: &[PointPrompt],
    params: &RenParams<f32>,
    config: &RenConfig,
) -> Result<TokenSet> {
    check_inputs(map, prompts, params, config)?;
    let enc = EncodedMap::<f32>::new(map, config)?;
    let embed = embed_points(prompts, config.d_model)?;
    let out = forward_generic(
        enc.features.view(),
        enc.key_pos.view(),
        embed,
        params,
        config,
        false,
    )?;
    Ok(TokenSet {
        prompts: prompts.to_vec(),
        ren: out.ren,
        aligned: out.aligned,
        source: String::new(),
    })
}

/// Like [`forward`], also returning every block's per-head attention maps
/// (`n_blocks × n_heads` matrices of shape `n × m`).
pub fn forward_with_attention(
    map: &PatchFeatureMap,
    prompts: &[PointPrompt],
    params: &RenParams<f32>,
    config: &RenConfig,
) -> Result<(TokenSet, Vec<Vec<Array2<f32>>>)> {
    check_inputs(map, prompts, params, config)?;
    let enc = EncodedMap::<f32>::new(map, config)?;
    let embed = embed_points(prompts, config.d_model)?;
    let out = forward_generic(
        enc.features.view(),
        enc.key_pos.view(),
        embed,
        params,
        config,
        true,
    )?;
    let cache = out.cache.expect("cache requested");
    let maps = (0..config.n_blocks)
        .map(|b| cache.block_attention(b).to_vec())
        .collect();
    Ok((
        TokenSet {
            prompts: prompts.to_vec(),
            ren: out.ren,
            aligned: out.aligned,
            source: String::new(),
        },
        maps,
    ))
}

/// Aligned tokens as the exact product `ren · W_alignᵀ`.
pub fn align(ren: &Array2<f32>, w_align: &Array2<f32>) -> Result<Array2<f32>> {
    if ren.ncols() != w_align.ncols() {
        return Err(Error::Config(format!(
            "ren tokens have {} columns, W_align expects {}",
            ren.ncols(),
            w_align.ncols()
        )));
    }
    Ok(ren.dot(&w_align.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, render_scene, SceneConfig};
    use crate::model::{embed::sinusoidal_embed, init_params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (PatchFeatureMap, RenParams<f32>, RenConfig) {
        let scene = generate_scene(1, &SceneConfig::new(3, 32, 32, 16)).unwrap();
        let view = render_scene(&scene, 4, 4, 0.05).unwrap();
        let cfg = RenConfig::for_encoder(16);
        let mut p = init_params(9, &cfg).unwrap();
        // non-trivial output projections
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for b in &mut p.blocks {
            b.w_o.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
            b.w2.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        }
        (view.features, p, cfg)
    }

    fn prompts(n: usize, seed: u64) -> Vec<PointPrompt> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| PointPrompt {
                x: rng.gen_range(0.0..1.0),
                y: rng.gen_range(0.0..1.0),
            })
            .collect()
    }

    #[test]
    fn permutation_equivariant() {
        let (map, p, cfg) = setup();
        let ps = prompts(7, 1);
        let out = forward(&map, &ps, &p, &cfg).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let permuted: Vec<PointPrompt> = perm.iter().map(|&i| ps[i]).collect();
        let out2 = forward(&map, &permuted, &p, &cfg).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(out2.ren.row(row), out.ren.row(src));
            assert_eq!(out2.aligned.row(row), out.aligned.row(src));
        }
    }

    #[test]
    fn duplicates_and_repeats_are_bit_identical() {
        let (map, p, cfg) = setup();
        let mut ps = prompts(3, 2);
        ps.push(ps[1]);
        let a = forward(&map, &ps, &p, &cfg).unwrap();
        let b = forward(&map, &ps, &p, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ren.row(1), a.ren.row(3));
    }

    #[test]
    fn init_tokens_are_projected_prompts() {
        let (map, _, cfg) = setup();
        let p = init_params(9, &cfg).unwrap();
        let ps = prompts(4, 3);
        let out = forward(&map, &ps, &p, &cfg).unwrap();
        for (i, prompt) in ps.iter().enumerate() {
            let e = sinusoidal_embed(*prompt, cfg.d_model).unwrap();
            let want = p.w_prompt.dot(&ndarray::Array1::from(e));
            for (a, b) in out.ren.row(i).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn aligned_is_exact_product() {
        let (map, p, cfg) = setup();
        let out = forward(&map, &prompts(5, 4), &p, &cfg).unwrap();
        assert_eq!(align(&out.ren, &p.w_align).unwrap(), out.aligned);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (map, p, cfg) = setup();
        let (_, maps) = forward_with_attention(&map, &prompts(6, 5), &p, &cfg).unwrap();
        assert_eq!(maps.len(), 4);
        for block in &maps {
            assert_eq!(block.len(), 8);
            for head in block {
                for row in head.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn input_errors() {
        let (map, p, cfg) = setup();
        assert!(matches!(forward(&map, &[], &p, &cfg), Err(Error::Validation(_))));
        let mut other = cfg;
        other.encoder_dim = 8;
        other.d_model = 8;
        let p8 = init_params(0, &other).unwrap();
        assert!(matches!(forward(&map, &prompts(2, 0), &p8, &other), Err(Error::Config(_))));
    }

    #[test]
    fn large_inputs_stay_finite() {
        let (mut map, p, cfg) = setup();
        for (i, v) in map.data.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 100.0 } else { -100.0 };
        }
        let out = forward(&map, &prompts(8, 6), &p, &cfg).unwrap();
        assert!(out.ren.iter().all(|v| v.is_finite()));
    }
}
