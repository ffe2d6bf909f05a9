//! Synthetic scenes: layered ellipses and rectangles over a background, each
//! with a unit-norm latent feature vector. They stand in for real images and
//! their ground-truth region masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::RegionId;
use crate::error::{Error, Result};

/// Largest allowed |cosine| between any two latents of one scene.
pub const MAX_LATENT_COSINE: f32 = 0.3;
/// Resample budget shared by latents, shapes and colors.
pub const MAX_RESAMPLES: usize = 1000;
/// Every region shape covers at least this fraction of the canvas.
pub const MIN_SHAPE_FRACTION: f64 = 0.01;
const MIN_COLOR_DISTANCE: f32 = 48.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned ellipse, pixel units.
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)`, pixel units.
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
}

impl Shape {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x - cx) / rx;
                let dy = (y - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }

    /// Number of canvas pixel centers inside the shape.
    pub fn pixel_area(&self, width: usize, height: usize) -> usize {
        let mut n = 0;
        for y in 0..height {
            for x in 0..width {
                n += self.contains(x as f32 + 0.5, y as f32 + 0.5) as usize;
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRegion {
    pub shape: Shape,
    pub z: i32,
    pub class: u32,
    pub latent: Vec<f32>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub class: u32,
    pub latent: Vec<f32>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub background: Background,
    pub regions: Vec<SceneRegion>,
}

impl SyntheticScene {
    /// Number of region ids, background included.
    pub fn n_ids(&self) -> usize {
        self.regions.len() + 1
    }

    pub fn latent(&self, id: RegionId) -> &[f32] {
        match id {
            0 => &self.background.latent,
            k => &self.regions[k as usize - 1].latent,
        }
    }

    pub fn class_of(&self, id: RegionId) -> u32 {
        match id {
            0 => self.background.class,
            k => self.regions[k as usize - 1].class,
        }
    }

    pub fn color(&self, id: RegionId) -> [u8; 3] {
        match id {
            0 => self.background.color,
            k => self.regions[k as usize - 1].color,
        }
    }

    /// Region ids ordered front to back.
    pub fn z_order(&self) -> Vec<RegionId> {
        let mut ids: Vec<RegionId> = (1..=self.regions.len() as RegionId).collect();
        ids.sort_by_key(|&k| std::cmp::Reverse(self.regions[k as usize - 1].z));
        ids
    }

    /// Owner of a continuous canvas point, resolving overlaps by z-order.
    pub fn owner_at(&self, x: f32, y: f32) -> RegionId {
        self.owner_with_order(&self.z_order(), x, y)
    }

    pub(crate) fn owner_with_order(&self, order: &[RegionId], x: f32, y: f32) -> RegionId {
        order
            .iter()
            .copied()
            .find(|&k| self.regions[k as usize - 1].shape.contains(x, y))
            .unwrap_or(0)
    }

    /// Per-pixel owner map of the untransformed canvas, row-major.
    pub fn owner_map(&self) -> Vec<RegionId> {
        let order = self.z_order();
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.owner_with_order(&order, x as f32 + 0.5, y as f32 + 0.5));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Class prototypes shared across scenes so that regions carry semantic
/// labels. Prototypes are orthonormal; a region of class `c` gets latent
/// `normalize(proto[c] + noise)` with per-component noise std `jitter/√dim`.
/// Class 0 is reserved for the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBank {
    pub protos: Vec<Vec<f32>>,
    pub jitter: f32,
}

impl ClassBank {
    pub fn generate(seed: u64, n_classes: usize, dim: usize, jitter: f32) -> Result<Self> {
        if n_classes < 2 || n_classes > dim {
            return Err(Error::Config(format!(
                "class bank needs 2 <= n_classes <= dim, got {n_classes} classes in dim {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut protos: Vec<Vec<f32>> = Vec::with_capacity(n_classes);
        while protos.len() < n_classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for p in &protos {
                let d: f64 = v.iter().zip(p).map(|(a, &b)| a * b as f64).sum();
                v.iter_mut().zip(p).for_each(|(a, &b)| *a -= d * b as f64);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-3 {
                protos.push(v.iter().map(|a| (a / n) as f32).collect());
            }
        }
        Ok(Self { protos, jitter })
    }

    pub fn n_classes(&self) -> usize {
        self.protos.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub n_regions: usize,
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// Minimum fraction of the canvas each region must keep after occlusion.
    #[serde(default = "default_min_visible")]
    pub min_visible_frac: f64,
    #[serde(default)]
    pub class_bank: Option<ClassBank>,
}

fn default_min_visible() -> f64 {
    MIN_SHAPE_FRACTION
}

impl SceneConfig {
    pub fn new(n_regions: usize, width: usize, height: usize, dim: usize) -> Self {
        Self {
            n_regions,
            width,
            height,
            dim,
            min_visible_frac: MIN_SHAPE_FRACTION,
            class_bank: None,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|a| (a / n) as f32).collect();
        }
    }
}

fn class_latent(rng: &mut ChaCha8Rng, proto: &[f32], jitter: f32) -> Vec<f32> {
    let scale = jitter as f64 / (proto.len() as f64).sqrt();
    let v: Vec<f64> = proto
        .iter()
        .map(|&p| p as f64 + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| (a / n) as f32).collect()
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    dot / (na * nb)
}

struct Budget(usize);

impl Budget {
    fn spend(&mut self, what: &str) -> Result<()> {
        self.0 += 1;
        if self.0 > MAX_RESAMPLES {
            Err(Error::Generation(format!(
                "{what}: constraints unsatisfied after {MAX_RESAMPLES} resamples"
            )))
        } else {
            Ok(())
        }
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, w: f32, h: f32) -> Shape {
    let cx = rng.gen_range(0.1 * w..0.9 * w);
    let cy = rng.gen_range(0.1 * h..0.9 * h);
    let rx = rng.gen_range(0.08 * w..0.3 * w);
    let ry = rng.gen_range(0.08 * h..0.3 * h);
    if rng.gen_bool(0.5) {
        Shape::Ellipse { cx, cy, rx, ry }
    } else {
        Shape::Rect {
            x0: cx - rx,
            y0: cy - ry,
            x1: cx + rx,
            y1: cy + ry,
        }
    }
}

/// Generate a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    let n = config.n_regions;
    if !(1..=32).contains(&n) {
        return Err(Error::Config(format!("n_regions must be in 1..=32, got {n}")));
    }
    if config.dim < 4 {
        return Err(Error::Config(format!("latent dim must be >= 4, got {}", config.dim)));
    }
    if config.width == 0 || config.height == 0 {
        return Err(Error::Config("canvas must be nonempty".into()));
    }
    if let Some(bank) = &config.class_bank {
        if bank.n_classes() < n + 1 {
            return Err(Error::Config(format!(
                "class bank has {} classes, scene needs {} distinct",
                bank.n_classes(),
                n + 1
            )));
        }
        if bank.protos.iter().any(|p| p.len() != config.dim) {
            return Err(Error::Config("class bank dim does not match scene dim".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut budget = Budget(0);

    // classes: background is class 0, regions draw distinct classes
    let classes: Vec<u32> = match &config.class_bank {
        Some(bank) => {
            let mut pool: Vec<u32> = (1..bank.n_classes() as u32).collect();
            pool.shuffle(&mut rng);
            std::iter::once(0).chain(pool.into_iter().take(n)).collect()
        }
        None => (0..=n as u32).collect(),
    };

    let mut latents: Vec<Vec<f32>> = Vec::with_capacity(n + 1);
    while latents.len() < n + 1 {
        let cand = match &config.class_bank {
            Some(bank) => {
                let c = classes[latents.len()] as usize;
                class_latent(&mut rng, &bank.protos[c], bank.jitter)
            }
            None => unit_vector(&mut rng, config.dim),
        };
        if latents
            .iter()
            .all(|l| cosine(l, &cand).abs() <= MAX_LATENT_COSINE)
        {
            latents.push(cand);
        } else {
            budget.spend("latents")?;
        }
    }

    let (w, h) = (config.width as f32, config.height as f32);
    let canvas = (config.width * config.height) as f64;
    let (shapes, zs) = loop {
        let mut shapes = Vec::with_capacity(n);
        while shapes.len() < n {
            let s = sample_shape(&mut rng, w, h);
            if s.pixel_area(config.width, config.height) as f64 >= MIN_SHAPE_FRACTION * canvas {
                shapes.push(s);
            } else {
                budget.spend("shape area")?;
            }
        }
        let mut zs: Vec<i32> = (0..n as i32).collect();
        zs.shuffle(&mut rng);
        let probe = SyntheticScene {
            seed,
            width: config.width,
            height: config.height,
            dim: config.dim,
            background: Background {
                class: 0,
                latent: Vec::new(),
                color: [0; 3],
            },
            regions: shapes
                .iter()
                .zip(&zs)
                .map(|(&shape, &z)| SceneRegion {
                    shape,
                    z,
                    class: 0,
                    latent: Vec::new(),
                    color: [0; 3],
                })
                .collect(),
        };
        let mut visible = vec![0usize; n + 1];
        for id in probe.owner_map() {
            visible[id as usize] += 1;
        }
        if visible[1..]
            .iter()
            .all(|&v| v as f64 >= config.min_visible_frac * canvas && v > 0)
        {
            break (shapes, zs);
        }
        budget.spend("region visibility")?;
    };

    let mut colors: Vec<[u8; 3]> = Vec::with_capacity(n + 1);
    while colors.len() < n + 1 {
        let c: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let ok = colors.iter().all(|o| {
            let d: f32 = o
                .iter()
                .zip(&c)
                .map(|(&a, &b)| (a as f32 - b as f32).powi(2))
                .sum();
            d.sqrt() >= MIN_COLOR_DISTANCE
        });
        if ok {
            colors.push(c);
        } else {
            budget.spend("colors")?;
        }
    }

    let mut latents = latents.into_iter();
    let background = Background {
        class: classes[0],
        latent: latents.next().expect("background latent"),
        color: colors[0],
    };
    let regions = shapes
        .into_iter()
        .zip(zs)
        .enumerate()
        .map(|(i, (shape, z))| SceneRegion {
            shape,
            z,
            class: classes[i + 1],
            latent: latents.next().expect("region latent"),
            color: colors[i + 1],
        })
        .collect();
    Ok(SyntheticScene {
        seed,
        width: config.width,
        height: config.height,
        dim: config.dim,
        background,
        regions,
    })
}
