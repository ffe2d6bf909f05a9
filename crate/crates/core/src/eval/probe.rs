use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::PointPrompt;
use crate::error::{Error, Result};
use crate::prompting::SuperpixelMap;

/// Multinomial logistic regression over frozen tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `classes × token_dim`
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.b.len()
    }

    pub fn logits(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn predict(&self, x: ArrayView2<'_, f32>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            })
            .collect()
    }
}

/// Mean cross-entropy and its gradient w.r.t. `(w, b)`.
pub fn probe_loss_and_grad(model: &ProbeModel, x: ArrayView2<'_, f32>, labels: &[usize]) -> (f64, Array2<f32>, Array1<f32>) {
    let n = x.nrows();
    let mut p = model.logits(x).mapv(|v| v as f64);
    let mut loss = 0.0;
    for (mut row, &y) in p.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
        loss -= row[y].max(1e-300).ln();
        row[y] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    let d = p.mapv(|v| (v * inv) as f32);
    let gw = d.t().dot(&x);
    let gb = d.sum_axis(Axis(0));
    (loss * inv, gw, gb)
}

/// Full-batch gradient descent from zero weights.
pub fn train_probe(x: ArrayView2<'_, f32>, labels: &[usize], n_classes: usize, epochs: usize, lr: f32) -> Result<ProbeModel> {
    if labels.len() != x.nrows() {
        return Err(Error::Validation(format!("{} labels for {} tokens", labels.len(), x.nrows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Validation(format!("label {bad} outside {n_classes} classes")));
    }
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateData("probe needs at least two classes".into()));
    }
    let mut model = ProbeModel {
        w: Array2::zeros((n_classes, x.ncols())),
        b: Array1::zeros(n_classes),
    };
    for _ in 0..epochs {
        let (_, gw, gb) = probe_loss_and_grad(&model, x, labels);
        model.w.scaled_add(-lr, &gw);
        model.b.scaled_add(-lr, &gb);
    }
    Ok(model)
}

/// Where each prompt's label is painted.
#[derive(Debug, Clone, Copy)]
pub enum PaintLayout<'a> {
    /// Prompt `i` paints superpixel `prompt_labels[i]`.
    Superpixels {
        map: &'a SuperpixelMap,
        prompt_labels: &'a [u32],
    },
    /// Prompt paints the patch cell containing it.
    Cells {
        h_patches: usize,
        w_patches: usize,
        width: usize,
        height: usize,
    },
}

/// Per-pixel label image; pixels no prompt reaches stay `None`.
pub fn paint_predictions(prompts: &[PointPrompt], labels: &[usize], layout: PaintLayout<'_>) -> Vec<Option<usize>> {
    match layout {
        PaintLayout::Superpixels { map, prompt_labels } => {
            let mut per_sp = vec![None; map.count()];
            for (&sp, &l) in prompt_labels.iter().zip(labels) {
                per_sp[sp as usize] = Some(l);
            }
            map.labels.iter().map(|&sp| per_sp[sp as usize]).collect()
        }
        PaintLayout::Cells {
            h_patches,
            w_patches,
            width,
            height,
        } => {
            let mut out = vec![None; width * height];
            for (p, &l) in prompts.iter().zip(labels) {
                let c = ((p.x * w_patches as f32) as usize).min(w_patches - 1);
                let r = ((p.y * h_patches as f32) as usize).min(h_patches - 1);
                let (x0, x1, y0, y1) = crate::data::cell_bounds(width, height, w_patches, h_patches, r, c);
                for y in y0..y1 {
                    for x in x0..x1 {
                        out[y * width + x] = Some(l);
                    }
                }
            }
            out
        }
    }
}

/// Per-class pixel counts accumulated over many images.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub n_classes: usize,
    /// `counts[truth][pred]`; unpainted pixels go to the extra last column.
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes + 1]; n_classes],
        }
    }

    pub fn add(&mut self, pred: &[Option<usize>], truth: &[usize]) {
        for (p, &t) in pred.iter().zip(truth) {
            self.counts[t][p.unwrap_or(self.n_classes)] += 1;
        }
    }

    /// Mean IoU over classes present in either truth or prediction.
    pub fn miou(&self) -> f64 {
        let k = self.n_classes;
        let mut total = 0.0;
        let mut present = 0;
        for c in 0..k {
            let tp = self.counts[c][c];
            let truth: u64 = self.counts[c].iter().sum();
            let pred: u64 = (0..k).map(|t| self.counts[t][c]).sum();
            let union = truth + pred - tp;
            if union > 0 {
                total += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            total / present as f64
        }
    }
}

pub fn miou(pred: &[Option<usize>], truth: &[usize], n_classes: usize) -> f64 {
    let mut c = Confusion::new(n_classes);
    c.add(pred, truth);
    c.miou()
}
