//! Desk-scale evaluation tasks on held-out synthetic scenes.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ari::ari;
use super::probe::{paint_predictions, train_probe, Confusion, PaintLayout};
use super::retrieval::{map_mrp, retrieve, RetrievalScores};
use crate::aggregation::{aggregate, MinGroup};
use crate::data::{render_scene, PatchFeatureMap, PointPrompt, RegionId, RenderedView, SyntheticScene, TokenSet};
use crate::error::{Error, Result};
use crate::model::{forward, RenConfig, RenParams};
use crate::prompting::{grid_prompts, slic_prompts, slic_segment, SuperpixelMap, DEFAULT_COMPACTNESS, DEFAULT_ITERS};
use crate::train::{DataConfig, HELD_OUT_OFFSET};

/// Default superpixel count for a 96×96 canvas, one per 8×8 patch.
pub const DEFAULT_SUPERPIXELS: usize = 144;
/// Superpixel count for partition recovery, one per 4×4 pixel block.
pub const RECOVERY_SUPERPIXELS: usize = 576;

/// Held-out split offsets, disjoint from each other and from training.
pub mod splits {
    pub const RECOVERY: u64 = 0;
    pub const PROBE_TRAIN: u64 = 10_000;
    pub const PROBE_TEST: u64 = 20_000;
    pub const RETRIEVAL_DB: u64 = 30_000;
    pub const RETRIEVAL_QUERY: u64 = 40_000;
    pub const COSINE: u64 = 50_000;
    /// View pairs for held-out loss.
    pub const PAIRS: u64 = 60_000;
}

#[derive(Debug, Clone)]
pub struct EvalScene {
    pub scene: SyntheticScene,
    pub view: RenderedView,
}

impl EvalScene {
    pub fn width(&self) -> usize {
        self.scene.width
    }

    pub fn height(&self) -> usize {
        self.scene.height
    }

    /// Ground-truth class of every pixel.
    pub fn class_map(&self) -> Vec<usize> {
        self.view.owners.iter().map(|&id| self.scene.class_of(id) as usize).collect()
    }

    pub fn owner_at(&self, p: PointPrompt) -> RegionId {
        let (x, y) = p.pixel(self.width(), self.height());
        self.view.owners[y * self.width() + x]
    }
}

/// `n` untransformed held-out scenes from one split.
pub fn held_out(data: &DataConfig, split: u64, n: usize) -> Result<Vec<EvalScene>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let scene = data.scene(HELD_OUT_OFFSET + split, i)?;
            let view = render_scene(&scene, data.patch_grid, data.patch_grid, data.noise_sigma)?;
            Ok(EvalScene { scene, view })
        })
        .collect()
}

/// SLIC superpixels, one prompt per superpixel and its tokens.
pub struct SlicTokens {
    pub superpixels: SuperpixelMap,
    pub prompts: Vec<PointPrompt>,
    pub tokens: TokenSet,
}

pub fn slic_tokens(scene: &EvalScene, s: usize, params: &RenParams<f32>, config: &RenConfig) -> Result<SlicTokens> {
    let superpixels = slic_segment(&scene.view.rgb, s, DEFAULT_COMPACTNESS, DEFAULT_ITERS)?;
    let prompts = slic_prompts(&superpixels);
    let tokens = forward(&scene.view.features, &prompts, params, config)?;
    Ok(SlicTokens {
        superpixels,
        prompts,
        tokens,
    })
}

/// Nearest-patch feature of each prompt.
pub fn patch_tokens(map: &PatchFeatureMap, prompts: &[PointPrompt]) -> Array2<f32> {
    let f = map.features();
    let mut out = Array2::zeros((prompts.len(), map.dim));
    for (p, mut row) in prompts.iter().zip(out.rows_mut()) {
        row.assign(&f.row(map.patch_at(*p)));
    }
    out
}

fn unit(v: ndarray::ArrayView1<'_, f32>) -> Array1<f64> {
    let v = v.mapv(|x| x as f64);
    let n = v.dot(&v).sqrt().max(1e-300);
    v / n
}

/// Uniform pixel-center prompts, optionally restricted to one region.
pub fn random_prompts(scene: &EvalScene, n: usize, region: Option<RegionId>, seed: u64) -> Vec<PointPrompt> {
    let (w, h) = (scene.width(), scene.height());
    let pool: Vec<usize> = (0..w * h)
        .filter(|&i| region.map_or(true, |r| scene.view.owners[i] == r))
        .collect();
    if pool.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let i = pool[rng.gen_range(0..pool.len())];
            PointPrompt::from_pixel(i % w, i / w, w, h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineGap {
    pub within: f64,
    pub cross: f64,
}

impl CosineGap {
    pub fn gap(&self) -> f64 {
        self.within - self.cross
    }
}

/// Mean REN-token cosine over same-region and over cross-region prompt
/// pairs, averaged over scenes.
pub fn region_cosine_gap(
    scenes: &[EvalScene],
    prompts_per_scene: usize,
    params: &RenParams<f32>,
    config: &RenConfig,
    seed: u64,
) -> Result<CosineGap> {
    let per: Vec<(f64, f64)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let prompts = random_prompts(s, prompts_per_scene, None, seed.wrapping_add(i as u64));
            let ids: Vec<RegionId> = prompts.iter().map(|&p| s.owner_at(p)).collect();
            let t = forward(&s.view.features, &prompts, params, config)?;
            let u: Vec<Array1<f64>> = t.ren.rows().into_iter().map(unit).collect();
            let (mut ws, mut wn, mut cs, mut cn) = (0.0, 0usize, 0.0, 0usize);
            for a in 0..u.len() {
                for b in a + 1..u.len() {
                    let c = u[a].dot(&u[b]);
                    if ids[a] == ids[b] {
                        ws += c;
                        wn += 1;
                    } else {
                        cs += c;
                        cn += 1;
                    }
                }
            }
            if wn == 0 || cn == 0 {
                return Err(Error::DegenerateData(format!("scene {i} has no within or cross pairs")));
            }
            Ok((ws / wn as f64, cs / cn as f64))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(CosineGap {
        within: per.iter().map(|p| p.0).sum::<f64>() / n,
        cross: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mu: f32,
    pub superpixels: usize,
    pub per_scene_ari: Vec<f64>,
    pub mean_ari: f64,
    pub n_prompts: usize,
    pub n_groups: usize,
    /// Prompt count over group count, summed across scenes.
    pub reduction: f64,
}

/// Aggregate SLIC-prompted tokens and score the pixel partition they induce
/// against the ground-truth region ids.
pub fn aggregation_recovery(
    scenes: &[EvalScene],
    s: usize,
    mu: f32,
    params: &RenParams<f32>,
    config: &RenConfig,
) -> Result<RecoveryReport> {
    let per: Vec<(f64, usize, usize)> = scenes
        .par_iter()
        .map(|scene| {
            let st = slic_tokens(scene, s, params, config)?;
            let agg = aggregate(&st.tokens, mu, MinGroup::Fixed(1))?;
            let mut group_of = vec![0usize; st.prompts.len()];
            for (g, members) in agg.groups.iter().enumerate() {
                for &m in members {
                    group_of[m] = g;
                }
            }
            // prompt i is the prompt of superpixel i
            let pred: Vec<usize> = st.superpixels.labels.iter().map(|&l| group_of[l as usize]).collect();
            Ok((ari(&pred, &scene.view.owners), st.prompts.len(), agg.n_groups()))
        })
        .collect::<Result<_>>()?;
    let n_prompts: usize = per.iter().map(|p| p.1).sum();
    let n_groups: usize = per.iter().map(|p| p.2).sum();
    let aris: Vec<f64> = per.iter().map(|p| p.0).collect();
    Ok(RecoveryReport {
        mu,
        superpixels: s,
        mean_ari: aris.iter().sum::<f64>() / aris.len().max(1) as f64,
        per_scene_ari: aris,
        n_prompts,
        n_groups,
        reduction: n_prompts as f64 / n_groups.max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub ren_miou: f64,
    pub patch_miou: f64,
    pub n_train_tokens: usize,
}

pub const PROBE_EPOCHS: usize = 500;
pub const PROBE_LR: f32 = 1.0;

struct ProbeSet {
    ren: Array2<f32>,
    patch: Array2<f32>,
    labels: Vec<usize>,
}

/// Rows scaled to unit length so both token kinds share one probe step size.
pub fn unit_rows(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r /= n;
        }
    }
    out
}

fn probe_set(scenes: &[SlicScene<'_>]) -> ProbeSet {
    let ren: Vec<_> = scenes.iter().map(|s| s.ren.view()).collect();
    let patch: Vec<_> = scenes.iter().map(|s| s.patch.view()).collect();
    ProbeSet {
        ren: ndarray::concatenate(Axis(0), &ren).expect("same width"),
        patch: ndarray::concatenate(Axis(0), &patch).expect("same width"),
        labels: scenes.iter().flat_map(|s| s.labels.iter().copied()).collect(),
    }
}

struct SlicScene<'a> {
    scene: &'a EvalScene,
    tokens: SlicTokens,
    ren: Array2<f32>,
    patch: Array2<f32>,
    labels: Vec<usize>,
}

fn slic_scenes<'a>(
    scenes: &'a [EvalScene],
    s: usize,
    params: &RenParams<f32>,
    config: &RenConfig,
) -> Result<Vec<SlicScene<'a>>> {
    scenes
        .par_iter()
        .map(|scene| {
            let tokens = slic_tokens(scene, s, params, config)?;
            let patch = unit_rows(&patch_tokens(&scene.view.features, &tokens.prompts));
            let ren = unit_rows(&tokens.tokens.ren);
            let labels = tokens
                .prompts
                .iter()
                .map(|&p| scene.scene.class_of(scene.owner_at(p)) as usize)
                .collect();
            Ok(SlicScene {
                scene,
                tokens,
                ren,
                patch,
                labels,
            })
        })
        .collect()
}

/// Linear probe on unit-normalized SLIC-prompted REN tokens against the same probe on the
/// nearest patch feature of each prompt; predictions are painted over the
/// superpixels and scored by mIoU on the test scenes.
pub fn probe_segmentation(
    train_scenes: &[EvalScene],
    test_scenes: &[EvalScene],
    n_classes: usize,
    s: usize,
    params: &RenParams<f32>,
    config: &RenConfig,
) -> Result<ProbeReport> {
    let train = slic_scenes(train_scenes, s, params, config)?;
    let test = slic_scenes(test_scenes, s, params, config)?;
    let set = probe_set(&train);
    let ren_probe = train_probe(set.ren.view(), &set.labels, n_classes, PROBE_EPOCHS, PROBE_LR)?;
    let patch_probe = train_probe(set.patch.view(), &set.labels, n_classes, PROBE_EPOCHS, PROBE_LR)?;
    let mut ren_conf = Confusion::new(n_classes);
    let mut patch_conf = Confusion::new(n_classes);
    for t in &test {
        let truth = t.scene.class_map();
        let sp_labels: Vec<u32> = (0..t.tokens.prompts.len() as u32).collect();
        let layout = PaintLayout::Superpixels {
            map: &t.tokens.superpixels,
            prompt_labels: &sp_labels,
        };
        let pred = ren_probe.predict(t.ren.view());
        ren_conf.add(&paint_predictions(&t.tokens.prompts, &pred, layout), &truth);
        let pred = patch_probe.predict(t.patch.view());
        patch_conf.add(&paint_predictions(&t.tokens.prompts, &pred, layout), &truth);
    }
    Ok(ProbeReport {
        ren_miou: ren_conf.miou(),
        patch_miou: patch_conf.miou(),
        n_train_tokens: set.labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ren: RetrievalScores,
    pub baseline: RetrievalScores,
    pub n_database: usize,
    pub n_queries: usize,
}

pub const QUERY_PROMPTS: usize = 128;
/// Grid of prompts tokenized per database image before aggregation.
pub const DATABASE_GRID: usize = 12;
pub const RETRIEVAL_K: usize = 10;

/// Largest non-background region of a query scene.
fn query_region(scene: &EvalScene) -> RegionId {
    let n_ids = scene.scene.n_ids();
    (1..n_ids as RegionId)
        .max_by_key(|&id| (scene.view.masks[id as usize].area(), std::cmp::Reverse(id)))
        .unwrap_or(0)
}

/// Object retrieval: each query is the mean aligned token of 128 prompts
/// inside its region; database images are scored by their best aggregated
/// region token. An image is relevant when it shows the query's class.
/// The baseline compares mean patch features of the query region and of
/// each whole image.
pub fn object_retrieval(
    database: &[EvalScene],
    queries: &[EvalScene],
    params: &RenParams<f32>,
    config: &RenConfig,
    seed: u64,
) -> Result<RetrievalReport> {
    let db_tokens: Vec<Array2<f32>> = database
        .par_iter()
        .map(|s| {
            let prompts = grid_prompts(DATABASE_GRID)?;
            let t = forward(&s.view.features, &prompts, params, config)?;
            Ok(aggregate(&t, crate::aggregation::DEFAULT_MU, MinGroup::Fixed(1))?.pooled_aligned)
        })
        .collect::<Result<_>>()?;
    let db_means: Vec<Array2<f32>> = database
        .iter()
        .map(|s| s.view.features.features().mean_axis(Axis(0)).expect("patches").insert_axis(Axis(0)))
        .collect();
    let db_classes: Vec<Vec<u32>> = database
        .iter()
        .map(|s| {
            (0..s.scene.n_ids() as RegionId)
                .filter(|&id| !s.view.masks[id as usize].is_empty())
                .map(|id| s.scene.class_of(id))
                .collect()
        })
        .collect();

    let db_views: Vec<_> = db_tokens.iter().map(|t| t.view()).collect();
    let mean_views: Vec<_> = db_means.iter().map(|t| t.view()).collect();
    let mut ren_rank = Vec::new();
    let mut base_rank = Vec::new();
    let mut relevance = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let region = query_region(q);
        let class = q.scene.class_of(region);
        let prompts = random_prompts(q, QUERY_PROMPTS, Some(region), seed.wrapping_add(qi as u64));
        let t = forward(&q.view.features, &prompts, params, config)?;
        let query = t.aligned.mean_axis(Axis(0)).expect("prompts");
        ren_rank.push(retrieve(query.view(), &db_views)?.iter().map(|r| r.image).collect());

        let map = &q.view.features;
        let mask = &q.view.masks[region as usize];
        let mut inside: Vec<usize> = Vec::new();
        for r in 0..map.h_patches {
            for c in 0..map.w_patches {
                let (x, y) = map.cell_center_pixel(r, c);
                if mask.get(x, y) {
                    inside.push(r * map.w_patches + c);
                }
            }
        }
        if inside.is_empty() {
            inside = prompts.iter().map(|&p| map.patch_at(p)).collect();
        }
        let f = map.features();
        let mut qmean = Array1::<f32>::zeros(map.dim);
        for &i in &inside {
            qmean += &f.row(i);
        }
        base_rank.push(retrieve(qmean.view(), &mean_views)?.iter().map(|r| r.image).collect());
        relevance.push(db_classes.iter().map(|c| c.contains(&class)).collect());
    }
    Ok(RetrievalReport {
        ren: map_mrp(&ren_rank, &relevance, RETRIEVAL_K),
        baseline: map_mrp(&base_rank, &relevance, RETRIEVAL_K),
        n_database: database.len(),
        n_queries: queries.len(),
    })
}
