//! Region tokens in another encoder's feature space.
//!
//! The target encoder's global aggregation query is duplicated once per
//! region and its attention restricted to the patches that overlap the
//! region mask. The query attends to patches only, never to itself.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::aggregation::{masks_from_groups, AggregationResult, PromptLayout};
use crate::data::{PatchFeatureMap, RegionMask, TokenSet};
use crate::error::{Error, Result};

/// One attention layer that pools patch features into a single vector.
/// Projections act on column vectors (`W·x`) and are all `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingHead {
    /// Pre-attention state of the CLS / aggregation query.
    pub query: Vec<f32>,
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub w_o: Array2<f32>,
    pub n_heads: usize,
}

impl PoolingHead {
    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Validation(format!(
                "pooling head dim {d} not divisible into {} heads",
                self.n_heads
            )));
        }
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.dim() != (d, d) {
                return Err(Error::Validation(format!("pooling head {name} is {:?}, expected {d}x{d}", w.dim())));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("pooling head {name} is not finite")));
            }
        }
        if self.query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pooling head query is not finite".into()));
        }
        Ok(())
    }

    /// Gaussian head standing in for a real encoder's final layer:
    /// query entries ~ N(0, 1), projections ~ N(0, 1/dim).
    pub fn random(seed: u64, dim: usize, n_heads: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
        let query = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        let scale = 1.0 / (dim.max(1) as f32).sqrt();
        let mut m = || Array2::from_shape_simple_fn((dim, dim), || scale * unit.sample(&mut rng));
        let (w_q, w_k, w_v, w_o) = (m(), m(), m(), m());
        let head = Self {
            query,
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
        };
        head.validate()?;
        Ok(head)
    }

    fn projected_query(&self) -> Array1<f32> {
        self.w_q.dot(&Array1::from(self.query.clone()))
    }
}

/// Patches whose cell holds at least one mask pixel, row-major.
pub fn patch_membership(
    mask: &RegionMask,
    h_patches: usize,
    w_patches: usize,
    image_h: usize,
    image_w: usize,
) -> Result<Vec<bool>> {
    if mask.width() != image_w || mask.height() != image_h {
        return Err(Error::Validation(format!(
            "mask canvas {}x{} does not match target image {image_w}x{image_h}",
            mask.width(),
            mask.height()
        )));
    }
    let mut out = Vec::with_capacity(h_patches * w_patches);
    for r in 0..h_patches {
        for c in 0..w_patches {
            let (x0, x1, y0, y1) =
                crate::data::cell_bounds(image_w, image_h, w_patches, h_patches, r, c);
            out.push((y0..y1).any(|y| (x0..x1).any(|x| mask.get(x, y))));
        }
    }
    if !out.iter().any(|&b| b) {
        return Err(Error::EmptyRegion("mask overlaps no patch".into()));
    }
    Ok(out)
}

/// Per-head softmax over the member logits, weighted sum of values, then
/// the output projection. Non-members take no part (their logit is −∞).
fn attend(
    logits: &Array2<f32>,
    values: ArrayView2<'_, f32>,
    members: Option<&[bool]>,
    head: &PoolingHead,
) -> Array1<f32> {
    let d = head.dim();
    let dh = d / head.n_heads;
    let m = values.nrows();
    let keep = |j: usize| members.map_or(true, |mm| mm[j]);
    let mut concat = Array1::<f32>::zeros(d);
    for h in 0..head.n_heads {
        let lg = logits.row(h);
        let max = (0..m).filter(|&j| keep(j)).fold(f32::NEG_INFINITY, |a, j| a.max(lg[j]));
        let mut denom = 0f32;
        let mut acc = Array1::<f32>::zeros(dh);
        for j in (0..m).filter(|&j| keep(j)) {
            let w = (lg[j] - max).exp();
            denom += w;
            acc.scaled_add(w, &values.slice(s![j, h * dh..(h + 1) * dh]));
        }
        concat.slice_mut(s![h * dh..(h + 1) * dh]).assign(&(acc / denom));
    }
    head.w_o.dot(&concat)
}

/// `n_heads × m` attention logits of the head's query over `features`.
fn head_logits(features: ArrayView2<'_, f32>, head: &PoolingHead) -> (Array2<f32>, Array2<f32>) {
    let d = head.dim();
    let dh = d / head.n_heads;
    let q = head.projected_query();
    let k = features.dot(&head.w_k.t());
    let v = features.dot(&head.w_v.t());
    let scale = 1.0 / (dh as f32).sqrt();
    let mut logits = Array2::<f32>::zeros((head.n_heads, features.nrows()));
    for h in 0..head.n_heads {
        let qh = q.slice(s![h * dh..(h + 1) * dh]);
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
        logits.row_mut(h).assign(&(kh.dot(&qh) * scale));
    }
    (logits, v)
}

fn check_features(features: ArrayView2<'_, f32>, head: &PoolingHead) -> Result<()> {
    head.validate()?;
    if features.ncols() != head.dim() || features.nrows() == 0 {
        return Err(Error::Config(format!(
            "features {:?} do not match pooling head dim {}",
            features.dim(),
            head.dim()
        )));
    }
    Ok(())
}

/// The head applied to all patches.
pub fn attention_pool(features: ArrayView2<'_, f32>, head: &PoolingHead) -> Result<Array1<f32>> {
    check_features(features, head)?;
    let (logits, v) = head_logits(features, head);
    Ok(attend(&logits, v.view(), None, head))
}

/// The head with attention restricted to `members`.
pub fn masked_attention_pool(
    features: ArrayView2<'_, f32>,
    head: &PoolingHead,
    members: &[bool],
) -> Result<Array1<f32>> {
    check_features(features, head)?;
    if members.len() != features.nrows() {
        return Err(Error::Validation(format!(
            "member set has {} entries for {} patches",
            members.len(),
            features.nrows()
        )));
    }
    if !members.iter().any(|&b| b) {
        return Err(Error::EmptyRegion("member set is empty".into()));
    }
    let (logits, v) = head_logits(features, head);
    Ok(attend(&logits, v.view(), Some(members), head))
}

/// Pool every member set in one pass: projections and logits are shared since
/// each region uses a copy of the same query.
pub fn masked_attention_pool_batched(
    features: ArrayView2<'_, f32>,
    head: &PoolingHead,
    member_sets: &[Vec<bool>],
) -> Result<Array2<f32>> {
    check_features(features, head)?;
    let (logits, v) = head_logits(features, head);
    let mut out = Array2::<f32>::zeros((member_sets.len(), head.dim()));
    for (i, members) in member_sets.iter().enumerate() {
        if members.len() != features.nrows() || !members.iter().any(|&b| b) {
            return Err(Error::EmptyRegion(format!("region {i} has no member patches")));
        }
        out.row_mut(i).assign(&attend(&logits, v.view(), Some(members), head));
    }
    Ok(out)
}

/// Target-space region tokens for every aggregated group.
///
/// The target map must carry a pooling head and describe the same image as
/// the superpixel layout. Returned tokens fill both the `ren` and `aligned`
/// slots; prompts are the groups' representatives.
pub fn extend(
    target: &PatchFeatureMap,
    layout: &PromptLayout,
    aggregation: &AggregationResult,
) -> Result<TokenSet> {
    let head = target
        .pooling_head
        .as_ref()
        .ok_or_else(|| Error::Validation("target feature map carries no pooling head".into()))?;
    let masks = masks_from_groups(layout, aggregation)?;
    let member_sets = masks
        .iter()
        .map(|m| {
            patch_membership(m, target.h_patches, target.w_patches, target.image_h, target.image_w)
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens = masked_attention_pool_batched(target.features(), head, &member_sets)?;
    Ok(TokenSet {
        prompts: aggregation.representatives.clone(),
        ren: tokens.clone(),
        aligned: tokens,
        source: "extend".into(),
    })
}
