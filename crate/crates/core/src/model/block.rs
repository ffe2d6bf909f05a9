//! Pre-norm cross-attention block with its analytic backward pass.
//!
//! ```text
//! u   = LN1(query_in)
//! Q   = u·W_qᵀ
//! A_h = softmax(Q_h·K_hᵀ / √d_head)          per head h
//! a   = residual + concat_h(A_h·V_h)·W_oᵀ
//! out = a + GELU(LN2(a)·W1ᵀ)·W2ᵀ
//! ```
//!
//! Keys and values arrive already projected (`m × d_model`).

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::BlockParams;
use crate::error::{Error, Result};
use crate::num::Real;

pub const LN_EPS: f64 = 1e-5;

pub(crate) struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

pub(crate) fn layer_norm<T: Real>(
    x: &Array2<T>,
    gamma: &Array1<T>,
    beta: &Array1<T>,
) -> (Array2<T>, LnCache<T>) {
    let d = T::lit(x.ncols() as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / d;
        *inv = T::one() / (var + eps).sqrt();
        let k = *inv;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gamma: &Array1<T>,
    d_gamma: &mut Array1<T>,
    d_beta: &mut Array1<T>,
) -> Array2<T> {
    *d_gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *d_beta += &dy.sum_axis(Axis(0));
    let d = T::lit(dy.ncols() as f64);
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for ((mut out, g), (xh, &inv)) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows().into_iter().zip(cache.inv_std.iter()))
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh).fold(T::zero(), |acc, (&a, &b)| acc + a * b) / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = inv * (gi - mean_g - xi * mean_gx));
    }
    dx
}

fn gelu_consts<T: Real>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let (k, c) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let (k, c) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows<T: Real>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) struct BlockCache<T> {
    ln1: LnCache<T>,
    u: Array2<T>,
    q: Array2<T>,
    /// Per-head attention, each `n × m`.
    pub(crate) attn: Vec<Array2<T>>,
    o: Array2<T>,
    ln2: LnCache<T>,
    z: Array2<T>,
    h1: Array2<T>,
    g: Array2<T>,
}

pub(crate) fn check_finite<T: Real>(name: &str, a: &Array2<T>) -> Result<()> {
    match a.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::numerics(name, format!("non-finite value at flat index {i}"))),
    }
}

/// Multi-head attention of `q` over `k`/`v`. Returns the concatenated head
/// outputs and, when `keep` is set, the per-head attention matrices.
pub(crate) fn multi_head_attention<T: Real>(
    q: &Array2<T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    n_heads: usize,
    keep: bool,
) -> (Array2<T>, Vec<Array2<T>>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), d));
    let mut maps = Vec::with_capacity(if keep { n_heads } else { 0 });
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        if keep {
            maps.push(scores);
        }
    }
    (out, maps)
}

pub(crate) fn block_forward<T: Real>(
    residual: &Array2<T>,
    query_in: &Array2<T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    bp: &BlockParams<T>,
    n_heads: usize,
    keep: bool,
) -> (Array2<T>, Option<BlockCache<T>>) {
    let (u, ln1) = layer_norm(query_in, &bp.ln1_gamma, &bp.ln1_beta);
    let q = u.dot(&bp.w_q.t());
    let (o, attn) = multi_head_attention(&q, k, v, n_heads, keep);
    let a = residual + &o.dot(&bp.w_o.t());
    let (z, ln2) = layer_norm(&a, &bp.ln2_gamma, &bp.ln2_beta);
    let h1 = z.dot(&bp.w1.t());
    let g = h1.mapv(gelu);
    let out = &a + &g.dot(&bp.w2.t());
    let cache = keep.then(|| BlockCache {
        ln1,
        u,
        q,
        attn,
        o,
        ln2,
        z,
        h1,
        g,
    });
    (out, cache)
}

/// Gradients of one block. Returns `(d_residual, d_query_in)`; parameter
/// gradients accumulate into `grads`, key/value gradients into `dk`/`dv`.
///
/// `d_attn_mean` is an extra upstream gradient on the head-averaged attention
/// map (`n × m`), used by attention supervision.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_backward<T: Real>(
    d_out: &Array2<T>,
    cache: &BlockCache<T>,
    bp: &BlockParams<T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    n_heads: usize,
    d_attn_mean: Option<&Array2<T>>,
    grads: &mut BlockParams<T>,
    dk: &mut Array2<T>,
    dv: &mut Array2<T>,
) -> (Array2<T>, Array2<T>) {
    // FFN branch
    grads.w2 += &d_out.t().dot(&cache.g);
    let mut dh1 = d_out.dot(&bp.w2);
    Zip::from(&mut dh1)
        .and(&cache.h1)
        .for_each(|d, &x| *d = *d * gelu_grad(x));
    grads.w1 += &dh1.t().dot(&cache.z);
    let dz = dh1.dot(&bp.w1);
    let d_a = d_out
        + &layer_norm_backward(&dz, &cache.ln2, &bp.ln2_gamma, &mut grads.ln2_gamma, &mut grads.ln2_beta);

    // attention branch
    grads.w_o += &d_a.t().dot(&cache.o);
    let d_o = d_a.dot(&bp.w_o);
    let d = cache.q.ncols();
    let dh = d / n_heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let inv_heads = T::one() / T::lit(n_heads as f64);
    let mut d_q = Array2::zeros(cache.q.raw_dim());
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &cache.attn[h];
        let d_oh = d_o.slice(cols);
        let mut d_att = d_oh.dot(&v.slice(cols).t());
        if let Some(extra) = d_attn_mean {
            d_att.scaled_add(inv_heads, extra);
        }
        dv.slice_mut(cols).scaled_add(T::one(), &a.t().dot(&d_oh));
        // softmax backward, then the 1/sqrt(d_head) scale
        let mut d_s = d_att;
        for (mut ds_row, a_row) in d_s.rows_mut().into_iter().zip(a.rows()) {
            let dot = ds_row.iter().zip(a_row).fold(T::zero(), |acc, (&g, &p)| acc + g * p);
            Zip::from(&mut ds_row)
                .and(&a_row)
                .for_each(|g, &p| *g = p * (*g - dot) * scale);
        }
        d_q.slice_mut(cols).assign(&d_s.dot(&k.slice(cols)));
        dk.slice_mut(cols).scaled_add(T::one(), &d_s.t().dot(&cache.q.slice(cols)));
    }
    grads.w_q += &d_q.t().dot(&cache.u);
    let d_u = d_q.dot(&bp.w_q);
    let d_query_in =
        layer_norm_backward(&d_u, &cache.ln1, &bp.ln1_gamma, &mut grads.ln1_gamma, &mut grads.ln1_beta);
    (d_a, d_query_in)
}

/// One cross-attention block applied to `queries` (which also form the
/// residual stream) over projected `keys`/`values`.
pub fn cross_attention_block<T: Real>(
    queries: &Array2<T>,
    keys: &Array2<T>,
    values: &Array2<T>,
    block: &BlockParams<T>,
    n_heads: usize,
) -> Result<Array2<T>> {
    let d = queries.ncols();
    if queries.nrows() == 0 || keys.nrows() == 0 {
        return Err(Error::Validation("cross-attention needs n, m >= 1".into()));
    }
    if keys.dim() != values.dim() || keys.ncols() != d || n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "inconsistent shapes: queries {:?}, keys {:?}, values {:?}, heads {n_heads}",
            queries.dim(),
            keys.dim(),
            values.dim()
        )));
    }
    check_finite("queries", queries)?;
    check_finite("keys", keys)?;
    check_finite("values", values)?;
    let (out, _) = block_forward(queries, queries, keys.view(), values.view(), block, n_heads, false);
    check_finite("block output", &out)?;
    Ok(out)
}

/// Per-head attention maps of one block for the given inputs.
pub fn block_attention<T: Real>(
    queries: &Array2<T>,
    keys: &Array2<T>,
    block: &BlockParams<T>,
    n_heads: usize,
) -> Vec<Array2<T>> {
    let (u, _) = layer_norm(queries, &block.ln1_gamma, &block.ln1_beta);
    let q = u.dot(&block.w_q.t());
    multi_head_attention(&q, keys.view(), keys.view(), n_heads, true).1
}
