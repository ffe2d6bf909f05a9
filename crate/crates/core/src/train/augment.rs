use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::render::Appearance;
use crate::data::{render_view, RenderedView, SyntheticScene, ViewTransform};
use crate::error::{Error, Result};

pub const MAX_AUGMENT_TRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f32,
    pub max_rotation_deg: f32,
    /// Smallest crop, as a fraction of the canvas area.
    pub min_crop_area: f32,
    /// Brightness, contrast and saturation factors are drawn from `1 ± color_jitter`.
    pub color_jitter: f32,
    pub sharpness_jitter: f32,
    /// Both views draw the same feature noise.
    pub shared_noise: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_rotation_deg: 30.0,
            min_crop_area: 0.6,
            color_jitter: 0.2,
            sharpness_jitter: 0.5,
            shared_noise: false,
        }
    }
}

impl AugmentConfig {
    /// No geometric or appearance change and shared noise: both views coincide.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            min_crop_area: 1.0,
            color_jitter: 0.0,
            sharpness_jitter: 0.0,
            shared_noise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=180.0).contains(&self.max_rotation_deg)
            && self.min_crop_area > 0.0
            && self.min_crop_area <= 1.0
            && (0.0..1.0).contains(&self.color_jitter)
            && (0.0..1.0).contains(&self.sharpness_jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config {self:?}")))
        }
    }
}

/// Patch grid and feature noise of rendered views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    pub h_patches: usize,
    pub w_patches: usize,
    pub noise_sigma: f32,
}

#[derive(Debug, Clone)]
pub struct View {
    pub transform: ViewTransform,
    pub appearance: Appearance,
    pub rendered: RenderedView,
}

/// Two views of one scene. Region ids index the scene's regions in both.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub scene_seed: u64,
    pub a: View,
    pub b: View,
}

/// View-to-scene transform: optional horizontal flip, rotation by `theta`
/// about the canvas center and a crop of side fraction `scale` shifted by
/// `(ox, oy)` pixels.
pub fn augment_transform(flip: bool, theta: f32, scale: f32, ox: f32, oy: f32, width: usize, height: usize) -> ViewTransform {
    let (cx, cy) = (width as f32 / 2.0, height as f32 / 2.0);
    let f = if flip { -1.0 } else { 1.0 };
    let (sin, cos) = theta.sin_cos();
    let a = scale * f * cos;
    let b = -scale * sin;
    let c = scale * f * sin;
    let d = scale * cos;
    ViewTransform {
        a,
        b,
        c,
        d,
        tx: cx + ox - a * cx - b * cy,
        ty: cy + oy - c * cx - d * cy,
    }
}

fn draw_view_params(rng: &mut ChaCha8Rng, cfg: &AugmentConfig, w: usize, h: usize) -> (ViewTransform, Appearance) {
    let flip = rng.gen::<f32>() < cfg.flip_prob;
    let max_t = cfg.max_rotation_deg.to_radians();
    let theta = if max_t > 0.0 { rng.gen_range(-max_t..=max_t) } else { 0.0 };
    let min_s = cfg.min_crop_area.sqrt();
    let scale = if min_s < 1.0 { rng.gen_range(min_s..=1.0) } else { 1.0 };
    let slack_x = (1.0 - scale) * w as f32 / 2.0;
    let slack_y = (1.0 - scale) * h as f32 / 2.0;
    let ox = if slack_x > 0.0 { rng.gen_range(-slack_x..=slack_x) } else { 0.0 };
    let oy = if slack_y > 0.0 { rng.gen_range(-slack_y..=slack_y) } else { 0.0 };
    let mut jit = |r: f32| if r > 0.0 { rng.gen_range(1.0 - r..=1.0 + r) } else { 1.0 };
    let appearance = Appearance {
        brightness: jit(cfg.color_jitter),
        contrast: jit(cfg.color_jitter),
        saturation: jit(cfg.color_jitter),
        sharpness: jit(cfg.sharpness_jitter),
    };
    (augment_transform(flip, theta, scale, ox, oy, w, h), appearance)
}

/// Render two independently augmented views of `scene`.
///
/// Geometry is applied to the scene descriptor, so a region keeps its id in
/// both views. Draws in which a view loses a region that is visible in the
/// untransformed scene are rejected.
pub fn augment_scene(scene: &SyntheticScene, seed: u64, cfg: &AugmentConfig, spec: &RenderSpec) -> Result<ViewPair> {
    cfg.validate()?;
    let (w, h) = (scene.width, scene.height);
    let base = scene.owner_map();
    let mut present = vec![false; scene.n_ids()];
    for &o in &base {
        present[o as usize] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_AUGMENT_TRIES {
        let (ta, aa) = draw_view_params(&mut rng, cfg, w, h);
        let (tb, ab) = draw_view_params(&mut rng, cfg, w, h);
        let noise_a: u64 = rng.gen();
        let noise_b: u64 = if cfg.shared_noise { noise_a } else { rng.gen() };
        let ra = render_view(scene, &ta, &aa, spec.h_patches, spec.w_patches, spec.noise_sigma, noise_a)?;
        let rb = render_view(scene, &tb, &ab, spec.h_patches, spec.w_patches, spec.noise_sigma, noise_b)?;
        let keeps_all = |r: &RenderedView| {
            present
                .iter()
                .zip(&r.masks)
                .all(|(&p, m)| !p || !m.is_empty())
        };
        if keeps_all(&ra) && keeps_all(&rb) {
            return Ok(ViewPair {
                scene_seed: scene.seed,
                a: View {
                    transform: ta,
                    appearance: aa,
                    rendered: ra,
                },
                b: View {
                    transform: tb,
                    appearance: ab,
                    rendered: rb,
                },
            });
        }
    }
    Err(Error::Generation(format!(
        "no augmentation of scene {} kept every region within {MAX_AUGMENT_TRIES} tries",
        scene.seed
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};

    const SPEC: RenderSpec = RenderSpec {
        h_patches: 8,
        w_patches: 8,
        noise_sigma: 0.05,
    };

    #[test]
    fn identity_views_coincide() {
        let scene = generate_scene(4, &SceneConfig::new(4, 64, 64, 8)).unwrap();
        let pair = augment_scene(&scene, 9, &AugmentConfig::identity(), &SPEC).unwrap();
        assert!(pair.a.transform.is_identity());
        assert_eq!(pair.a.rendered.features, pair.b.rendered.features);
        assert_eq!(pair.a.rendered.masks, pair.b.rendered.masks);
        assert_eq!(pair.a.rendered.rgb, pair.b.rendered.rgb);
    }

    #[test]
    fn flip_mirrors_ownership() {
        let scene = generate_scene(5, &SceneConfig::new(5, 64, 48, 8)).unwrap();
        let t = augment_transform(true, 0.0, 1.0, 0.0, 0.0, 64, 48);
        let flipped = render_view(&scene, &t, &Appearance::default(), 6, 8, 0.0, 0).unwrap();
        let plain = render_view(&scene, &ViewTransform::IDENTITY, &Appearance::default(), 6, 8, 0.0, 0).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                assert_eq!(flipped.owners[y * 64 + x], plain.owners[y * 64 + (63 - x)]);
            }
        }
    }

    #[test]
    fn transform_parameters() {
        let t = augment_transform(false, 0.0, 0.5, 3.0, -2.0, 40, 20);
        // view center maps to the shifted scene center
        assert_eq!(t.apply(20.0, 10.0), (23.0, 8.0));
        assert_eq!(t.apply(30.0, 10.0), (28.0, 8.0));
        let r = augment_transform(false, std::f32::consts::FRAC_PI_2, 1.0, 0.0, 0.0, 10, 10);
        let (x, y) = r.apply(6.0, 5.0);
        assert!((x - 5.0).abs() < 1e-5 && (y - 6.0).abs() < 1e-5);
    }

    #[test]
    fn views_keep_every_region() {
        let cfg = SceneConfig::new(5, 64, 64, 8);
        for seed in 0..100u64 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let pair = augment_scene(&scene, seed * 31 + 7, &AugmentConfig::default(), &SPEC).unwrap();
            let ra = &pair.a.rendered;
            let rb = &pair.b.rendered;
            assert_eq!(ra.masks.len(), rb.masks.len());
            for (k, m) in ra.masks.iter().enumerate() {
                if !m.is_empty() {
                    assert!(!rb.masks[k].is_empty(), "seed {seed}: region {k} lost in view b");
                }
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        let scene = generate_scene(1, &SceneConfig::new(2, 32, 32, 8)).unwrap();
        let cfg = AugmentConfig {
            min_crop_area: 0.0,
            ..AugmentConfig::default()
        };
        assert!(matches!(augment_scene(&scene, 0, &cfg, &SPEC), Err(Error::Config(_))));
    }
}
