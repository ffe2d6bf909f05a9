use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment_scene, AugmentConfig, RenderSpec};
use super::loss::{LossParts, LossWeights};
use super::optim::{clip_global_norm, lr_at, AdamW};
use super::step::{pair_loss, pair_loss_and_grad, PairSample};
use crate::data::{generate_scene, ClassBank, SceneConfig, SyntheticScene};
use crate::error::{Error, Result};
use crate::model::{init_params, save_checkpoint, RenConfig, RenParams};

/// Synthetic training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub n_regions: usize,
    pub canvas: usize,
    pub patch_grid: usize,
    pub dim: usize,
    /// Object classes, background excluded.
    pub n_classes: usize,
    pub class_jitter: f32,
    pub noise_sigma: f32,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_scenes: 64,
            n_regions: 5,
            canvas: 96,
            patch_grid: 12,
            dim: 64,
            n_classes: 12,
            class_jitter: 0.3,
            noise_sigma: 0.05,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn class_bank(&self) -> Result<ClassBank> {
        ClassBank::generate(self.seed ^ 0xc1a55, self.n_classes + 1, self.dim, self.class_jitter)
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let mut cfg = SceneConfig::new(self.n_regions, self.canvas, self.canvas, self.dim);
        cfg.class_bank = Some(self.class_bank()?);
        Ok(cfg)
    }

    pub fn render_spec(&self) -> RenderSpec {
        RenderSpec {
            h_patches: self.patch_grid,
            w_patches: self.patch_grid,
            noise_sigma: self.noise_sigma,
        }
    }

    /// Scene `i` of the split starting at `offset`; training uses offset 0.
    pub fn scene(&self, offset: u64, i: usize) -> Result<SyntheticScene> {
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(offset + i as u64);
        generate_scene(seed, &self.scene_config()?)
    }

    pub fn scenes(&self, offset: u64, n: usize) -> Result<Vec<SyntheticScene>> {
        (0..n).map(|i| self.scene(offset, i)).collect()
    }
}

/// Seed offset of held-out scenes.
pub const HELD_OUT_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_scenes: usize,
    pub max_prompts: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Defaults to the feature dimension.
    pub d_model: Option<usize>,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_scenes: 16,
            max_prompts: 256,
            lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            grad_clip_norm: 5.0,
            weight_decay: 0.01,
            seed: 0,
            weights: LossWeights::default(),
            d_model: None,
            n_blocks: 4,
            n_heads: 8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_scenes == 0 || self.max_prompts == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_scenes, max_prompts and total_steps must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.grad_clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and grad_clip_norm must be > 0, weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, encoder_dim: usize) -> RenConfig {
        RenConfig {
            d_model: self.d_model.unwrap_or(encoder_dim),
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            encoder_dim,
            ffn_mult: 4,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_cont: f64,
    pub l_feat: f64,
    pub l_attn: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub config: RenConfig,
    pub params: RenParams<f32>,
    pub metrics: Vec<StepMetrics>,
    pub skipped_steps: Vec<usize>,
}

/// Where to write progress; both optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics_log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Augmented, prompted view pairs for `scene_indices`.
pub fn build_samples(
    scenes: &[SyntheticScene],
    scene_indices: &[usize],
    data: &DataConfig,
    prompts_per_view: usize,
    config: &RenConfig,
    seed: u64,
) -> Vec<Result<PairSample<f32>>> {
    let spec = data.render_spec();
    scene_indices
        .par_iter()
        .enumerate()
        .map(|(slot, &si)| {
            let s = mix(seed, slot as u64);
            let pair = augment_scene(&scenes[si], s, &data.augment, &spec)?;
            PairSample::from_pair(&pair, prompts_per_view, mix(s, 1), config)
        })
        .collect()
}

/// Mean loss parts of `params` over fixed samples.
pub fn evaluate_loss(
    samples: &[PairSample<f32>],
    params: &RenParams<f32>,
    config: &RenConfig,
    weights: &LossWeights,
) -> Result<LossParts> {
    let parts = samples
        .par_iter()
        .map(|s| pair_loss(s, params, config, weights).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len().max(1) as f64;
    Ok(LossParts {
        l_cont: parts.iter().map(|p| p.l_cont).sum::<f64>() / n,
        l_feat: parts.iter().map(|p| p.l_feat).sum::<f64>() / n,
        l_attn: parts.iter().map(|p| p.l_attn).sum::<f64>() / n,
    })
}

/// Train a region encoder on synthetic view pairs.
pub fn train(train: &TrainConfig, data: &DataConfig, outputs: &TrainOutputs) -> Result<TrainOutcome> {
    train.validate()?;
    data.augment.validate()?;
    let config = train.model_config(data.dim);
    let mut params = init_params(train.seed, &config)?;
    let scenes = data.scenes(0, data.n_scenes)?;
    let mut opt = AdamW::new(&params, train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(train.seed, 0x7a1b));
    let mut log = match &outputs.metrics_log {
        Some(path) => Some(std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        )),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut metrics = Vec::with_capacity(train.total_steps);
    let mut skipped = Vec::new();

    for step in 1..=train.total_steps {
        let indices: Vec<usize> = (0..train.batch_scenes).map(|_| rng.gen_range(0..scenes.len())).collect();
        let step_seed: u64 = rng.gen();
        let samples = build_samples(&scenes, &indices, data, train.max_prompts, &config, step_seed);
        let results: Vec<_> = samples
            .into_par_iter()
            .map(|s| s.and_then(|s| pair_loss_and_grad(&s, &params, &config, &train.weights)))
            .collect();

        let mut grads = params.zeros_like();
        let mut parts = LossParts::default();
        let mut used = 0usize;
        for r in results {
            match r {
                Ok((p, _, g)) => {
                    grads.add_scaled(&g, 1.0);
                    parts.l_cont += p.l_cont;
                    parts.l_feat += p.l_feat;
                    parts.l_attn += p.l_attn;
                    used += 1;
                }
                Err(Error::DegenerateBatch(msg)) => log::debug!("step {step}: skipping pair: {msg}"),
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            log::warn!("step {step}: every pair degenerate, skipping");
            skipped.push(step);
            continue;
        }
        let inv = 1.0 / used as f64;
        grads.for_each_mut(|_, g, _| g.iter_mut().for_each(|v| *v *= inv as f32));
        let grad_norm = clip_global_norm(&mut grads, train.grad_clip_norm);
        let lr = lr_at(step, train.lr, train.warmup_steps, train.total_steps);
        opt.step(&mut params, &grads, step, lr);
        params.check_finite()?;

        let m = StepMetrics {
            step,
            l_cont: parts.l_cont * inv,
            l_feat: parts.l_feat * inv,
            l_attn: parts.l_attn * inv,
            lr,
            grad_norm,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&m)?;
            writeln!(w, "{line}").map_err(|e| Error::io(outputs.metrics_log.clone().unwrap_or_default(), e))?;
        }
        if step % 100 == 0 {
            log::info!(
                "step {step}: l_cont {:.4} l_feat {:.4} lr {:.2e} |g| {:.3}",
                m.l_cont,
                m.l_feat,
                lr,
                grad_norm
            );
        }
        metrics.push(m);
        if let Some(dir) = &outputs.checkpoint_dir {
            if train.checkpoint_every > 0 && (step % train.checkpoint_every == 0 || step == train.total_steps) {
                save_checkpoint(dir.join(format!("step_{step:06}.renc")), &config, &params)?;
            }
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| Error::io(outputs.metrics_log.clone().unwrap_or_default(), e))?;
    }
    Ok(TrainOutcome {
        config,
        params,
        metrics,
        skipped_steps: skipped,
    })
}
