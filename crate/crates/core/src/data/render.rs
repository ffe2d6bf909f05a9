//! Rasterizing synthetic scenes into patch features, ground-truth masks and an
//! RGB image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{PatchFeatureMap, RegionId, RegionMask, SyntheticScene};
use crate::error::{Error, Result};

/// Affine map from view pixel coordinates to scene canvas coordinates:
/// `x = a·u + b·v + tx`, `y = c·u + d·v + ty`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub a: f32,
    pub b: f32,
    pub c: f32,
    pub d: f32,
    pub tx: f32,
    pub ty: f32,
}

impl Default for ViewTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl ViewTransform {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn apply(&self, u: f32, v: f32) -> (f32, f32) {
        (
            self.a * u + self.b * v + self.tx,
            self.c * u + self.d * v + self.ty,
        )
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Per-view appearance changes applied to the RGB render only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// 1 leaves the image unchanged, < 1 blurs, > 1 sharpens.
    pub sharpness: f32,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            sharpness: 1.0,
        }
    }
}

impl Appearance {
    pub fn jitter_color(&self, c: [u8; 3]) -> [u8; 3] {
        if *self == Self::default() {
            return c;
        }
        let f = c.map(|v| v as f32);
        let gray = 0.299 * f[0] + 0.587 * f[1] + 0.114 * f[2];
        f.map(|v| {
            let s = gray + self.saturation * (v - gray);
            let k = 128.0 + self.contrast * (s - 128.0);
            (k * self.brightness).round().clamp(0.0, 255.0) as u8
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        self.data[y * self.width + x] = c;
    }

    /// Blend with a 3×3 smoothed copy, `out = blur + factor·(img − blur)`.
    /// The one-pixel border is left as is.
    pub fn adjust_sharpness(&self, factor: f32) -> RgbImage {
        if factor == 1.0 || self.width < 3 || self.height < 3 {
            return self.clone();
        }
        let mut out = self.clone();
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                let mut acc = [0f32; 3];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let w = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        let p = self.get(x + dx - 1, y + dy - 1);
                        for ch in 0..3 {
                            acc[ch] += w * p[ch] as f32;
                        }
                    }
                }
                let orig = self.get(x, y);
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let blur = acc[ch] / 13.0;
                    px[ch] = (blur + factor * (orig[ch] as f32 - blur))
                        .round()
                        .clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, px);
            }
        }
        out
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.data {
            out.extend_from_slice(p);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub features: PatchFeatureMap,
    /// One mask per region id (index 0 is background); masks partition the canvas.
    pub masks: Vec<RegionMask>,
    pub rgb: RgbImage,
    /// Per-pixel owning region id, row-major.
    pub owners: Vec<RegionId>,
}

/// Render the scene as seen through `transform`.
///
/// Patch features mix the latents of the regions owning the pixels of each
/// patch cell, weighted by pixel count, add N(0, σ²) noise per component and
/// are unit-normalized.
pub fn render_view(
    scene: &SyntheticScene,
    transform: &ViewTransform,
    appearance: &Appearance,
    h_patches: usize,
    w_patches: usize,
    noise_sigma: f32,
    noise_seed: u64,
) -> Result<RenderedView> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::Validation(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let (w, h) = (scene.width, scene.height);
    if h_patches == 0 || w_patches == 0 || h_patches > h || w_patches > w {
        return Err(Error::Config(format!(
            "patch grid {w_patches}x{h_patches} does not fit canvas {w}x{h}"
        )));
    }
    let order = scene.z_order();
    let mut owners = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = transform.apply(x as f32 + 0.5, y as f32 + 0.5);
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f32 && sy < h as f32;
            owners.push(if inside {
                scene.owner_with_order(&order, sx, sy)
            } else {
                0
            });
        }
    }

    let n_ids = scene.n_ids();
    let mut masks = vec![RegionMask::empty(w, h); n_ids];
    let mut rgb = RgbImage::new(w, h);
    let colors: Vec<[u8; 3]> = (0..n_ids as RegionId)
        .map(|k| appearance.jitter_color(scene.color(k)))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let id = owners[y * w + x] as usize;
            masks[id].set(x, y, true);
            rgb.set(x, y, colors[id]);
        }
    }
    let rgb = rgb.adjust_sharpness(appearance.sharpness);

    let dim = scene.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut data = Vec::with_capacity(h_patches * w_patches * dim);
    let mut counts = vec![0usize; n_ids];
    let mut mix = vec![0f64; dim];
    for r in 0..h_patches {
        for c in 0..w_patches {
            let (x0, x1, y0, y1) = super::cell_bounds(w, h, w_patches, h_patches, r, c);
            counts.iter_mut().for_each(|v| *v = 0);
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[owners[y * w + x] as usize] += 1;
                }
            }
            let total = ((x1 - x0) * (y1 - y0)) as f64;
            mix.iter_mut().for_each(|v| *v = 0.0);
            for (id, &cnt) in counts.iter().enumerate() {
                if cnt == 0 {
                    continue;
                }
                let wgt = cnt as f64 / total;
                for (m, &l) in mix.iter_mut().zip(scene.latent(id as RegionId)) {
                    *m += wgt * l as f64;
                }
            }
            if noise_sigma > 0.0 {
                for m in mix.iter_mut() {
                    *m += noise_sigma as f64 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let norm = mix.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            data.extend(mix.iter().map(|v| (v / norm) as f32));
        }
    }
    let features = PatchFeatureMap::new(
        h_patches,
        w_patches,
        dim,
        h,
        w,
        (w / w_patches).max(1),
        data,
    )?;
    Ok(RenderedView {
        features,
        masks,
        rgb,
        owners,
    })
}

/// Render the untransformed scene. Noise is seeded from the scene seed.
pub fn render_scene(
    scene: &SyntheticScene,
    h_patches: usize,
    w_patches: usize,
    noise_sigma: f32,
) -> Result<RenderedView> {
    render_view(
        scene,
        &ViewTransform::IDENTITY,
        &Appearance::default(),
        h_patches,
        w_patches,
        noise_sigma,
        scene.seed ^ 0x5eed_0f_f3a7,
    )
}
