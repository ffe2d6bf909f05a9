use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{View, ViewPair};
use super::loss::{attention_supervision_loss, feature_similarity_loss, info_nce_loss, total_loss, LossParts, LossWeights};
use super::targets::{attention_targets, patch_center_membership, target_tokens};
use crate::data::{assign_region_ids, PatchFeatureMap, PointPrompt, RegionId, RegionMask};
use crate::error::{Error, Result};
use crate::model::embed::embed_points;
use crate::model::forward::{backward_generic, forward_generic, EncodedMap};
use crate::model::{RenConfig, RenParams};
use crate::num::Real;

/// Model inputs and supervision for the prompts of one view.
#[derive(Debug, Clone)]
pub struct ViewSample<T> {
    features: Array2<T>,
    key_pos: Array2<T>,
    prompts: Vec<PointPrompt>,
    embed: Array2<T>,
    ids: Vec<RegionId>,
    targets: Array2<T>,
    attn_targets: Array2<T>,
}

/// Both views of one scene, prompted and labelled.
#[derive(Debug, Clone)]
pub struct PairSample<T> {
    pub views: [ViewSample<T>; 2],
}

impl<T: Real> ViewSample<T> {
    /// Build from explicit prompts. Every prompt's region must cover at least
    /// one patch center.
    pub fn new(map: &PatchFeatureMap, masks: &[RegionMask], prompts: Vec<PointPrompt>, config: &RenConfig) -> Result<Self> {
        let ids = assign_region_ids(&prompts, masks)?
            .into_iter()
            .enumerate()
            .map(|(i, id)| id.ok_or_else(|| Error::Validation(format!("prompt {i} lies in no mask"))))
            .collect::<Result<Vec<_>>>()?;
        let enc = EncodedMap::<T>::new(map, config)?;
        let cast = |a: Array2<f32>| a.mapv(|v| T::lit(v as f64));
        Ok(Self {
            embed: embed_points(&prompts, config.d_model)?,
            targets: cast(target_tokens(map, masks, &ids)?),
            attn_targets: cast(attention_targets(map, masks, &ids)?),
            features: enc.features,
            key_pos: enc.key_pos,
            prompts,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[PointPrompt] {
        &self.prompts
    }

    pub fn ids(&self) -> &[RegionId] {
        &self.ids
    }

    pub fn cast<U: Real>(&self) -> ViewSample<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        ViewSample {
            features: c(&self.features),
            key_pos: c(&self.key_pos),
            prompts: self.prompts.clone(),
            embed: c(&self.embed),
            ids: self.ids.clone(),
            targets: c(&self.targets),
            attn_targets: c(&self.attn_targets),
        }
    }
}

/// Uniformly random prompts whose region covers at least one patch center
/// of the view; at most `n` of them.
pub fn sample_prompts(view: &View, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PointPrompt>> {
    let r = &view.rendered;
    let usable: Vec<bool> = r
        .masks
        .iter()
        .map(|m| patch_center_membership(&r.features, m).map(|v| v.contains(&true)))
        .collect::<Result<_>>()?;
    let (w, h) = (r.features.image_w, r.features.image_h);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = PointPrompt {
            x: rng.gen::<f32>(),
            y: rng.gen::<f32>(),
        };
        let (px, py) = p.pixel(w, h);
        if usable[r.owners[py * w + px] as usize] {
            out.push(p);
        }
    }
    Ok(out)
}

impl<T: Real> PairSample<T> {
    pub fn from_pair(pair: &ViewPair, prompts_per_view: usize, seed: u64, config: &RenConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut build = |v: &View| -> Result<ViewSample<T>> {
            let prompts = sample_prompts(v, prompts_per_view, &mut rng)?;
            if prompts.is_empty() {
                return Err(Error::DegenerateBatch("view received no usable prompt".into()));
            }
            ViewSample::new(&v.rendered.features, &v.rendered.masks, prompts, config)
        };
        let a = build(&pair.a)?;
        let b = build(&pair.b)?;
        Ok(Self { views: [a, b] })
    }

    pub fn cast<U: Real>(&self) -> PairSample<U> {
        PairSample {
            views: [self.views[0].cast(), self.views[1].cast()],
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.views[0].len() + self.views[1].len()
    }
}

/// Loss parts, weighted total and parameter gradients for one view pair.
///
/// InfoNCE runs over the concatenated tokens of both views; the feature and
/// attention terms average over all tokens of the pair.
pub fn pair_loss_and_grad<T: Real>(
    sample: &PairSample<T>,
    params: &RenParams<T>,
    config: &RenConfig,
    weights: &LossWeights,
) -> Result<(LossParts, f64, RenParams<T>)> {
    let mut outs = Vec::with_capacity(2);
    for v in &sample.views {
        outs.push(forward_generic(
            v.features.view(),
            v.key_pos.view(),
            v.embed.clone(),
            params,
            config,
            true,
        )?);
    }
    let n0 = sample.views[0].len();
    let ren = concatenate(Axis(0), &[outs[0].ren.view(), outs[1].ren.view()]).expect("same width");
    let aligned = concatenate(Axis(0), &[outs[0].aligned.view(), outs[1].aligned.view()]).expect("same width");
    let targets = concatenate(Axis(0), &[sample.views[0].targets.view(), sample.views[1].targets.view()])
        .expect("same width");
    let ids: Vec<Option<RegionId>> = sample.views.iter().flat_map(|v| v.ids.iter().map(|&i| Some(i))).collect();

    let (l_cont, d_cont) = info_nce_loss(&ren, &ids, weights.tau as f64)?;
    let (l_feat, d_feat) = feature_similarity_loss(&aligned, &targets)?;
    let mut l_attn = T::zero();
    let mut d_attn: Option<Array2<T>> = None;
    if weights.lambda_attn > 0.0 {
        let caches: Vec<_> = outs.iter().map(|o| o.cache.as_ref().expect("kept")).collect();
        let attn = concatenate(
            Axis(0),
            &[caches[0].final_attention().view(), caches[1].final_attention().view()],
        )
        .expect("same width");
        let y = concatenate(
            Axis(0),
            &[sample.views[0].attn_targets.view(), sample.views[1].attn_targets.view()],
        )
        .expect("same width");
        let (l, d) = attention_supervision_loss(&attn, &y)?;
        l_attn = l;
        d_attn = Some(d.mapv(|v| v * T::lit(weights.lambda_attn as f64)));
    }
    let parts = LossParts {
        l_cont: l_cont.to_f64_lossy(),
        l_feat: l_feat.to_f64_lossy(),
        l_attn: l_attn.to_f64_lossy(),
    };
    let d_ren = d_cont.mapv(|v| v * T::lit(weights.lambda_cont as f64));
    let d_aligned = d_feat.mapv(|v| v * T::lit(weights.lambda_feat as f64));

    let mut grads = params.zeros_like();
    for (vi, out) in outs.iter().enumerate() {
        let rows = if vi == 0 { s![..n0, ..] } else { s![n0.., ..] };
        let d_att_v = d_attn.as_ref().map(|d| d.slice(rows).to_owned());
        backward_generic(
            out.cache.as_ref().expect("kept"),
            params,
            config,
            &d_ren.slice(rows).to_owned(),
            &d_aligned.slice(rows).to_owned(),
            d_att_v.as_ref(),
            &mut grads,
        );
    }
    grads.check_finite()?;
    Ok((parts, total_loss(&parts, weights), grads))
}

/// Weighted total loss only, in any precision.
pub fn pair_loss<T: Real>(
    sample: &PairSample<T>,
    params: &RenParams<T>,
    config: &RenConfig,
    weights: &LossWeights,
) -> Result<(LossParts, f64)> {
    let mut rens = Vec::with_capacity(2);
    let mut aligneds = Vec::with_capacity(2);
    let mut attns = Vec::with_capacity(2);
    for v in &sample.views {
        let out = forward_generic(
            v.features.view(),
            v.key_pos.view(),
            v.embed.clone(),
            params,
            config,
            weights.lambda_attn > 0.0,
        )?;
        if let Some(c) = &out.cache {
            attns.push(c.final_attention());
        }
        rens.push(out.ren);
        aligneds.push(out.aligned);
    }
    let cat = |a: &[Array2<T>]| concatenate(Axis(0), &[a[0].view(), a[1].view()]).expect("same width");
    let ids: Vec<Option<RegionId>> = sample.views.iter().flat_map(|v| v.ids.iter().map(|&i| Some(i))).collect();
    let targets = cat(&[sample.views[0].targets.clone(), sample.views[1].targets.clone()]);
    let (l_cont, _) = info_nce_loss(&cat(&rens), &ids, weights.tau as f64)?;
    let (l_feat, _) = feature_similarity_loss(&cat(&aligneds), &targets)?;
    let l_attn = if weights.lambda_attn > 0.0 {
        let y = cat(&[sample.views[0].attn_targets.clone(), sample.views[1].attn_targets.clone()]);
        attention_supervision_loss(&cat(&attns), &y)?.0.to_f64_lossy()
    } else {
        0.0
    };
    let parts = LossParts {
        l_cont: l_cont.to_f64_lossy(),
        l_feat: l_feat.to_f64_lossy(),
        l_attn,
    };
    Ok((parts, total_loss(&parts, weights)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub n_values: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub epsilon: f64,
    pub abs_floor: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub const GRADCHECK_EPS: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

/// Compare analytic gradients with central differences of the f64 loss.
///
/// Differences at `ε` and `ε/2` are combined by Richardson extrapolation,
/// which cancels the leading `O(ε²)` truncation term.
pub fn gradcheck(
    sample: &PairSample<f64>,
    params: &RenParams<f64>,
    config: &RenConfig,
    weights: &LossWeights,
) -> Result<GradcheckReport> {
    let (_, _, grads) = pair_loss_and_grad(sample, params, config, weights)?;
    let mut probe = params.clone();
    let names: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.iter().enumerate() {
        let mut max_rel = 0f64;
        let mut max_abs = 0f64;
        for i in 0..*len {
            let orig = probe.tensors()[ti].data[i];
            let mut central = |h: f64| -> Result<f64> {
                set_value(&mut probe, ti, i, orig + h);
                let (_, lp) = pair_loss(sample, &probe, config, weights)?;
                set_value(&mut probe, ti, i, orig - h);
                let (_, lm) = pair_loss(sample, &probe, config, weights)?;
                set_value(&mut probe, ti, i, orig);
                Ok((lp - lm) / (2.0 * h))
            };
            let coarse = central(GRADCHECK_EPS)?;
            let fine = central(GRADCHECK_EPS / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = analytic[ti][i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRADCHECK_ABS_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            n_values: *len,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        epsilon: GRADCHECK_EPS,
        abs_floor: GRADCHECK_ABS_FLOOR,
        tolerance: GRADCHECK_TOL,
        tensors,
        max_rel_err,
        passed: max_rel_err <= GRADCHECK_TOL,
    })
}

fn set_value(p: &mut RenParams<f64>, tensor: usize, index: usize, value: f64) {
    p.tensors_mut()[tensor].data[index] = value;
}

/// The small gradcheck problem: a 2×2 patch grid on an 8×8 canvas split into
/// left and right regions, two prompts per view (one per region), random
/// features and random nonzero parameters everywhere.
pub fn gradcheck_problem(seed: u64) -> Result<(RenConfig, PairSample<f64>, RenParams<f64>)> {
    let config = RenConfig {
        d_model: 8,
        n_blocks: 4,
        n_heads: 2,
        encoder_dim: 8,
        ffn_mult: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = RegionMask::from_fn(8, 8, |x, _| x < 4);
    let right = RegionMask::from_fn(8, 8, |x, _| x >= 4);
    let masks = [left, right];
    let mut view = |prompts: Vec<PointPrompt>| -> Result<ViewSample<f64>> {
        let data: Vec<f32> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map = PatchFeatureMap::new(2, 2, 8, 8, 8, 4, data)?;
        ViewSample::new(&map, &masks, prompts, &config)
    };
    let a = view(vec![PointPrompt { x: 0.2, y: 0.3 }, PointPrompt { x: 0.8, y: 0.6 }])?;
    let b = view(vec![PointPrompt { x: 0.7, y: 0.2 }, PointPrompt { x: 0.3, y: 0.9 }])?;
    let mut params = RenParams::<f64>::zeros(&config);
    params.for_each_mut(|name, data, _| {
        let ln_gamma = name.ends_with("gamma");
        for v in data.iter_mut() {
            let r: f64 = rng.gen_range(-0.5..0.5);
            *v = if ln_gamma { 1.0 + r } else { r };
        }
    });
    Ok((config, PairSample { views: [a, b] }, params))
}
