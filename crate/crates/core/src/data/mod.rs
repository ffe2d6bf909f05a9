//! Core data types, interchange formats and the synthetic-scene oracle.

pub(crate) mod binio;
pub mod ids;
pub mod mask;
pub mod render;
pub mod rft;
pub mod rtok;
pub mod scene;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::PoolingHead;

pub use ids::assign_region_ids;
pub use mask::RegionMask;
pub use render::{render_scene, render_view, RenderedView, RgbImage, ViewTransform};
pub use scene::{generate_scene, ClassBank, SceneConfig, Shape, SyntheticScene};

/// Region identifier: 0 is the scene background, `k` the k-th scene region.
pub type RegionId = u32;

/// A grid of frozen encoder features together with the image geometry it was
/// computed from. Rows are patches in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    pub h_patches: usize,
    pub w_patches: usize,
    pub dim: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub data: Vec<f32>,
    /// Final-layer aggregation head of the encoder, when the producer exported one.
    pub pooling_head: Option<PoolingHead>,
}

impl PatchFeatureMap {
    pub fn new(
        h_patches: usize,
        w_patches: usize,
        dim: usize,
        image_h: usize,
        image_w: usize,
        patch_size: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let map = Self {
            h_patches,
            w_patches,
            dim,
            image_h,
            image_w,
            patch_size,
            data,
            pooling_head: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.h_patches,
            self.w_patches,
            self.dim,
            self.image_h,
            self.image_w,
            self.patch_size,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("feature map has a zero dimension: {dims:?}")));
        }
        if self.data.len() != self.n_patches() * self.dim {
            return Err(Error::Validation(format!(
                "feature payload has {} values, expected {}",
                self.data.len(),
                self.n_patches() * self.dim
            )));
        }
        if self.image_h < self.h_patches || self.image_w < self.w_patches {
            return Err(Error::Validation(format!(
                "image {}x{} smaller than patch grid {}x{}",
                self.image_w, self.image_h, self.w_patches, self.h_patches
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite feature value at index {i}")));
        }
        if let Some(head) = &self.pooling_head {
            head.validate()?;
            if head.dim() != self.dim {
                return Err(Error::Validation(format!(
                    "pooling head dim {} does not match feature dim {}",
                    head.dim(),
                    self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.h_patches * self.w_patches
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f32] {
        let i = row * self.w_patches + col;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Features as an `n_patches × dim` matrix view.
    pub fn features(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.n_patches(), self.dim), &self.data).expect("validated shape")
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` covered by a patch cell.
    pub fn cell_bounds(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        cell_bounds(self.image_w, self.image_h, self.w_patches, self.h_patches, row, col)
    }

    /// Pixel holding the patch cell's center.
    pub fn cell_center_pixel(&self, row: usize, col: usize) -> (usize, usize) {
        let x = ((2 * col + 1) * self.image_w) / (2 * self.w_patches);
        let y = ((2 * row + 1) * self.image_h) / (2 * self.h_patches);
        (x, y)
    }

    /// Normalized center of each patch, row-major.
    pub fn patch_centers(&self) -> Vec<PointPrompt> {
        let mut out = Vec::with_capacity(self.n_patches());
        for r in 0..self.h_patches {
            for c in 0..self.w_patches {
                out.push(PointPrompt {
                    x: (c as f32 + 0.5) / self.w_patches as f32,
                    y: (r as f32 + 0.5) / self.h_patches as f32,
                });
            }
        }
        out
    }

    /// Index of the patch whose cell contains a normalized point.
    pub fn patch_at(&self, p: PointPrompt) -> usize {
        let c = ((p.x * self.w_patches as f32) as usize).min(self.w_patches - 1);
        let r = ((p.y * self.h_patches as f32) as usize).min(self.h_patches - 1);
        r * self.w_patches + c
    }
}

pub(crate) fn cell_bounds(
    image_w: usize,
    image_h: usize,
    w_patches: usize,
    h_patches: usize,
    row: usize,
    col: usize,
) -> (usize, usize, usize, usize) {
    let x0 = col * image_w / w_patches;
    let x1 = (col + 1) * image_w / w_patches;
    let y0 = row * image_h / h_patches;
    let y1 = (row + 1) * image_h / h_patches;
    (x0, x1, y0, y1)
}

/// A point prompt in normalized image coordinates, `[0,1)` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f32,
    pub y: f32,
}

impl PointPrompt {
    pub fn new(x: f32, y: f32) -> Result<Self> {
        let p = Self { x, y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.x) && (0.0..1.0).contains(&self.y) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "prompt ({}, {}) outside [0,1)^2",
                self.x, self.y
            )))
        }
    }

    /// Pixel containing the prompt on a `width × height` canvas.
    pub fn pixel(&self, width: usize, height: usize) -> (usize, usize) {
        let x = ((self.x * width as f32) as usize).min(width - 1);
        let y = ((self.y * height as f32) as usize).min(height - 1);
        (x, y)
    }

    /// Normalized coordinates of a pixel's center.
    pub fn from_pixel(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x: (x as f32 + 0.5) / width as f32,
            y: (y as f32 + 0.5) / height as f32,
        }
    }
}

/// Region tokens produced for a list of prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub prompts: Vec<PointPrompt>,
    /// `n × d_model`
    pub ren: Array2<f32>,
    /// `n × encoder_dim`
    pub aligned: Array2<f32>,
    pub source: String,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.prompts.len();
        if self.ren.nrows() != n || self.aligned.nrows() != n {
            return Err(Error::Validation(format!(
                "token set rows disagree: {} prompts, {} ren, {} aligned",
                n,
                self.ren.nrows(),
                self.aligned.nrows()
            )));
        }
        if self.ren.iter().chain(self.aligned.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("token set holds non-finite values".into()));
        }
        Ok(())
    }
}
