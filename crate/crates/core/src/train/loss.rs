use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::RegionId;
use crate::error::{Error, Result};
use crate::num::Real;

/// Probability clamp for the binary cross-entropy logs.
pub const BCE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cont: f32,
    pub lambda_feat: f32,
    pub lambda_attn: f32,
    pub tau: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cont: 1.0,
            lambda_feat: 1.0,
            lambda_attn: 0.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        let l = [self.lambda_cont, self.lambda_feat, self.lambda_attn];
        if l.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {l:?}")));
        }
        Ok(())
    }
}

/// Individually reported loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cont: f64,
    pub l_feat: f64,
    pub l_attn: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    let mut total = weights.lambda_cont as f64 * parts.l_cont + weights.lambda_feat as f64 * parts.l_feat;
    if weights.lambda_attn > 0.0 {
        total += weights.lambda_attn as f64 * parts.l_attn;
    }
    total
}

fn unit_rows<T: Real>(x: &Array2<T>, what: &str) -> Result<(Array2<T>, Array1<T>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|n| !(*n > T::zero())) {
        return Err(Error::numerics(what, format!("row {i} has zero or non-finite norm")));
    }
    let mut unit = x.clone();
    for (mut row, &n) in unit.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|v| v / n);
    }
    Ok((unit, norms))
}

/// Gradient through row normalization: `d x_i = (d u_i − u_i (u_i·d u_i)) / ‖x_i‖`.
fn unit_rows_backward<T: Real>(d_unit: &Array2<T>, unit: &Array2<T>, norms: &Array1<T>) -> Array2<T> {
    let mut out = d_unit.clone();
    for ((mut o, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        let proj = o.dot(&u);
        o.zip_mut_with(&u, |g, &uu| *g = (*g - uu * proj) / n);
    }
    out
}

/// Multi-positive InfoNCE over cosine similarities.
///
/// For every anchor with at least one positive,
/// `L_i = −log(Σ_{j∈P(i)} exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ))`; the loss is the
/// mean over those anchors. Tokens with no id, or whose id occurs once, still
/// act as negatives. Returns the loss and its gradient w.r.t. `tokens`.
pub fn info_nce_loss<T: Real>(
    tokens: &Array2<T>,
    ids: &[Option<RegionId>],
    tau: f64,
) -> Result<(T, Array2<T>)> {
    let n = tokens.nrows();
    if ids.len() != n {
        return Err(Error::Validation(format!("{} ids for {n} tokens", ids.len())));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("contrastive loss needs >= 2 tokens, got {n}")));
    }
    let (unit, norms) = unit_rows(tokens, "contrastive tokens")?;
    let inv_tau = T::lit(1.0 / tau);
    let s = unit.dot(&unit.t()).mapv(|v| v * inv_tau);

    let is_pos = |i: usize, j: usize| i != j && ids[i].is_some() && ids[i] == ids[j];
    let anchors: Vec<usize> = (0..n).filter(|&i| (0..n).any(|j| is_pos(i, j))).collect();
    if anchors.is_empty() {
        return Err(Error::DegenerateBatch("no anchor has a positive".into()));
    }
    let inv_n = T::one() / T::lit(anchors.len() as f64);

    // g[i][j] = dL/ds_ij (before the 1/τ factor)
    let mut g = Array2::<T>::zeros((n, n));
    let mut loss = T::zero();
    for &i in &anchors {
        let row = s.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(T::neg_infinity(), T::max);
        let mut all = T::zero();
        let mut pos = T::zero();
        for k in 0..n {
            if k == i {
                continue;
            }
            let e = (row[k] - max).exp();
            all += e;
            if is_pos(i, k) {
                pos += e;
            }
        }
        loss += all.ln() - pos.ln();
        for k in 0..n {
            if k == i {
                continue;
            }
            let e = (row[k] - max).exp();
            let mut v = e / all;
            if is_pos(i, k) {
                v -= e / pos;
            }
            g[[i, k]] = v * inv_n;
        }
    }
    let sym = &g + &g.t();
    let d_unit = sym.dot(&unit).mapv(|v| v * inv_tau);
    Ok((loss * inv_n, unit_rows_backward(&d_unit, &unit, &norms)))
}

/// Mean cosine-embedding loss `1 − cos(t_i, a_i)`; gradient w.r.t. `aligned`.
pub fn feature_similarity_loss<T: Real>(aligned: &Array2<T>, targets: &Array2<T>) -> Result<(T, Array2<T>)> {
    if aligned.dim() != targets.dim() {
        return Err(Error::Validation(format!(
            "aligned {:?} vs targets {:?}",
            aligned.dim(),
            targets.dim()
        )));
    }
    let n = aligned.nrows();
    if n == 0 {
        return Err(Error::Validation("feature loss over zero tokens".into()));
    }
    let (ua, na) = unit_rows(aligned, "aligned tokens")?;
    let (ut, _) = unit_rows(targets, "feature targets")?;
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    for (a, t) in ua.rows().into_iter().zip(ut.rows()) {
        loss += T::one() - a.dot(&t);
    }
    let d_unit = ut.mapv(|v| -v * inv_n);
    Ok((loss * inv_n, unit_rows_backward(&d_unit, &ua, &na)))
}

/// Binary cross-entropy plus soft DICE between rescaled attention and a
/// patch-grid mask.
///
/// Each attention row sums to one, so it is scaled by the mask's support size
/// `k_i` to give per-patch probabilities `p_ij = k_i·a_ij`; an attention row
/// spread uniformly over the mask maps to the mask itself. BCE is the mean over
/// all entries (probabilities clamped to `[ε, 1−ε]`), DICE is
/// `1 − 2Σp·y / (Σp + Σy)` averaged over rows. Returns the loss and its
/// gradient w.r.t. `attn`.
pub fn attention_supervision_loss<T: Real>(attn: &Array2<T>, targets: &Array2<T>) -> Result<(T, Array2<T>)> {
    if attn.dim() != targets.dim() {
        return Err(Error::Validation(format!(
            "attention {:?} vs mask {:?}",
            attn.dim(),
            targets.dim()
        )));
    }
    let (n, m) = attn.dim();
    let eps = T::lit(BCE_CLAMP);
    let inv_entries = T::one() / T::lit((n * m) as f64);
    let inv_rows = T::one() / T::lit(n as f64);
    let mut grad = Array2::<T>::zeros((n, m));
    let mut bce = T::zero();
    let mut dice = T::zero();
    for i in 0..n {
        let y = targets.row(i);
        let k: T = y.iter().copied().sum();
        if !(k > T::zero()) {
            return Err(Error::EmptyMask(format!("attention target {i} covers no patch")));
        }
        let a = attn.row(i);
        let mut sp = T::zero();
        let mut spy = T::zero();
        for j in 0..m {
            let p = k * a[j];
            sp += p;
            spy += p * y[j];
        }
        let denom = sp + k;
        dice += T::one() - T::lit(2.0) * spy / denom;
        for j in 0..m {
            let p = k * a[j];
            let pc = p.max(eps).min(T::one() - eps);
            bce -= y[j] * pc.ln() + (T::one() - y[j]) * (T::one() - pc).ln();
            let d_bce = if p > eps && p < T::one() - eps {
                (-y[j] / pc + (T::one() - y[j]) / (T::one() - pc)) * inv_entries
            } else {
                T::zero()
            };
            let d_dice = -T::lit(2.0) * (y[j] * denom - spy) / (denom * denom) * inv_rows;
            grad[[i, j]] = (d_bce + d_dice) * k;
        }
    }
    Ok((bce * inv_entries + dice * inv_rows, grad))
}
