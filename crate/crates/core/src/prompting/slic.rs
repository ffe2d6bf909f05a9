//! SLIC superpixels in CIELAB + position space.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::lab::{rgb_to_lab, Lab};
use crate::data::{PointPrompt, RegionMask, RgbImage};
use crate::error::{Error, Result};

pub const DEFAULT_COMPACTNESS: f32 = 256.0;
pub const DEFAULT_ITERS: usize = 10;

/// Superpixel labelling of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    /// Per-pixel label in `0..count`, row-major.
    pub labels: Vec<u32>,
    /// Normalized centroid of each superpixel.
    pub centers: Vec<PointPrompt>,
}

#[derive(Serialize, Deserialize)]
struct SuperpixelJson {
    width: usize,
    height: usize,
    superpixels: Vec<LabelMask>,
}

#[derive(Serialize, Deserialize)]
struct LabelMask {
    label: u32,
    mask: RegionMask,
}

impl SuperpixelMap {
    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.count()];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    pub fn mask(&self, label: u32) -> RegionMask {
        RegionMask::from_bits(
            self.width,
            self.height,
            self.labels.iter().map(|&l| l == label).collect(),
        )
        .expect("canvas-sized")
    }

    /// Build from a raw label image; labels must be exactly `0..k`, all used.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::Validation("label image size mismatch".into()));
        }
        let k = *labels.iter().max().expect("nonempty") as usize + 1;
        let mut sx = vec![0f64; k];
        let mut sy = vec![0f64; k];
        let mut n = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sx[l as usize] += (i % width) as f64;
            sy[l as usize] += (i / width) as f64;
            n[l as usize] += 1;
        }
        if n.contains(&0) {
            return Err(Error::Validation("superpixel labels are not contiguous".into()));
        }
        let centers = (0..k)
            .map(|l| PointPrompt {
                x: ((sx[l] / n[l as usize] as f64 + 0.5) / width as f64) as f32,
                y: ((sy[l] / n[l] as f64 + 0.5) / height as f64) as f32,
            })
            .collect();
        Ok(Self {
            width,
            height,
            labels,
            centers,
        })
    }

    /// RLE mask per label as JSON.
    pub fn to_json(&self) -> Result<String> {
        let doc = SuperpixelJson {
            width: self.width,
            height: self.height,
            superpixels: (0..self.count() as u32)
                .map(|label| LabelMask {
                    label,
                    mask: self.mask(label),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: SuperpixelJson = serde_json::from_str(s)?;
        let mut labels = vec![u32::MAX; doc.width * doc.height];
        for sp in &doc.superpixels {
            if sp.mask.width() != doc.width || sp.mask.height() != doc.height {
                return Err(Error::Validation("superpixel mask canvas mismatch".into()));
            }
            for (l, &b) in labels.iter_mut().zip(sp.mask.bits()) {
                if b {
                    if *l != u32::MAX {
                        return Err(Error::Validation("superpixel masks overlap".into()));
                    }
                    *l = sp.label;
                }
            }
        }
        if labels.contains(&u32::MAX) {
            return Err(Error::Validation("superpixel masks leave pixels unlabelled".into()));
        }
        Self::from_labels(doc.width, doc.height, labels)
    }
}

#[derive(Clone, Copy)]
struct Center {
    lab: Lab,
    x: f64,
    y: f64,
}

fn gradient(lab: &[Lab], w: usize, h: usize, x: usize, y: usize) -> f64 {
    let at = |x: usize, y: usize| lab[y * w + x];
    let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
    let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
    at(xr, y).distance(&at(xl, y)).powi(2) + at(x, yd).distance(&at(x, yu)).powi(2)
}

/// Segment `image` into about `s` superpixels.
///
/// Seeds sit on a regular grid with spacing `√(N/s)` and move to the lowest
/// gradient pixel of their 3×3 neighbourhood. Each iteration assigns every
/// pixel within one grid interval of a center to the center minimizing
/// `‖lab_p − lab_c‖ + (compactness / interval)·‖xy_p − xy_c‖` (lowest index
/// wins ties), then moves centers to their cluster means. Finally every
/// superpixel keeps only its largest 4-connected piece; other pieces join the
/// largest adjacent superpixel.
pub fn slic_segment(image: &RgbImage, s: usize, compactness: f32, iters: usize) -> Result<SuperpixelMap> {
    let (w, h) = (image.width, image.height);
    let n = w * h;
    if n == 0 {
        return Err(Error::Config("image is empty".into()));
    }
    if s == 0 || s > n {
        return Err(Error::Config(format!("superpixel count {s} outside 1..={n}")));
    }
    if !(compactness >= 0.0) {
        return Err(Error::Config(format!("compactness must be >= 0, got {compactness}")));
    }
    let lab: Vec<Lab> = image.data.iter().map(|&c| rgb_to_lab(c)).collect();
    let interval = (n as f64 / s as f64).sqrt();
    let rows = ((h as f64 / interval).round() as usize).clamp(1, h);
    let cols = ((w as f64 / interval).round() as usize).clamp(1, w);

    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut bx = ((c as f64 + 0.5) * w as f64 / cols as f64) as usize;
            let mut by = ((r as f64 + 0.5) * h as f64 / rows as f64) as usize;
            let mut best = gradient(&lab, w, h, bx, by);
            let (cx, cy) = (bx, by);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let x = cx as i64 + dx;
                    let y = cy as i64 + dy;
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let g = gradient(&lab, w, h, x as usize, y as usize);
                    if g < best {
                        best = g;
                        bx = x as usize;
                        by = y as usize;
                    }
                }
            }
            centers.push(Center {
                lab: lab[by * w + bx],
                x: bx as f64,
                y: by as f64,
            });
        }
    }

    let spatial = compactness as f64 / interval;
    let reach = interval.ceil() as i64;
    let dist = |c: &Center, i: usize| {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        lab[i].distance(&c.lab) + spatial * ((x - c.x).powi(2) + (y - c.y).powi(2)).sqrt()
    };
    let mut labels = vec![u32::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..iters.max(1) {
        labels.fill(u32::MAX);
        best.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c.x.round() as i64 - reach).max(0) as usize;
            let x1 = (c.x.round() as i64 + reach).min(w as i64 - 1) as usize;
            let y0 = (c.y.round() as i64 - reach).max(0) as usize;
            let y1 = (c.y.round() as i64 + reach).min(h as i64 - 1) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = y * w + x;
                    let d = dist(c, i);
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        // pixels out of every window go to the globally nearest center
        for i in 0..n {
            if labels[i] == u32::MAX {
                let (k, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, dist(c, i)))
                    .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
                labels[i] = k as u32;
            }
        }
        let mut sums = vec![(Lab::default(), 0f64, 0f64, 0usize); centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            let e = &mut sums[l as usize];
            e.0.l += lab[i].l;
            e.0.a += lab[i].a;
            e.0.b += lab[i].b;
            e.1 += (i % w) as f64;
            e.2 += (i / w) as f64;
            e.3 += 1;
        }
        for (c, (sl, sx, sy, cnt)) in centers.iter_mut().zip(sums) {
            if cnt > 0 {
                let k = cnt as f64;
                *c = Center {
                    lab: Lab {
                        l: sl.l / k,
                        a: sl.a / k,
                        b: sl.b / k,
                    },
                    x: sx / k,
                    y: sy / k,
                };
            }
        }
    }

    let labels = enforce_connectivity(w, h, labels);
    SuperpixelMap::from_labels(w, h, labels)
}

/// 4-connected components of equal label: component id per pixel, plus each
/// component's label and size.
fn components(w: usize, h: usize, labels: &[u32]) -> (Vec<usize>, Vec<(u32, usize)>) {
    let mut comp = vec![usize::MAX; w * h];
    let mut info = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = info.len();
        let label = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && labels[j] == label {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        info.push((label, size));
    }
    (comp, info)
}

fn enforce_connectivity(w: usize, h: usize, mut labels: Vec<u32>) -> Vec<u32> {
    loop {
        let (comp, info) = components(w, h, &labels);
        let max_label = info.iter().map(|c| c.0).max().unwrap_or(0) as usize;
        // the largest piece of each label is its main component
        let mut main = vec![usize::MAX; max_label + 1];
        for (id, &(l, size)) in info.iter().enumerate() {
            let m = &mut main[l as usize];
            if *m == usize::MAX || size > info[*m].1 {
                *m = id;
            }
        }
        let is_main = |id: usize| main[info[id].0 as usize] == id;
        let mut label_size = vec![0usize; max_label + 1];
        for &(l, size) in &info {
            label_size[l as usize] += size;
        }
        // target label for each orphan: adjacent main component with the largest superpixel
        let mut target = vec![None::<u32>; info.len()];
        for i in 0..w * h {
            let id = comp[i];
            if is_main(id) {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let mut consider = |j: usize| {
                let nid = comp[j];
                if nid != id && is_main(nid) {
                    let l = info[nid].0;
                    let better = match target[id] {
                        None => true,
                        Some(t) => {
                            label_size[l as usize] > label_size[t as usize]
                                || (label_size[l as usize] == label_size[t as usize] && l < t)
                        }
                    };
                    if better {
                        target[id] = Some(l);
                    }
                }
            };
            if x > 0 {
                consider(i - 1);
            }
            if x + 1 < w {
                consider(i + 1);
            }
            if y > 0 {
                consider(i - w);
            }
            if y + 1 < h {
                consider(i + w);
            }
        }
        let orphans = (0..info.len()).filter(|&id| !is_main(id)).count();
        if orphans == 0 {
            break;
        }
        for i in 0..w * h {
            if let Some(t) = target[comp[i]] {
                labels[i] = t;
            }
        }
    }
    // compact relabel in scan order
    let mut remap = std::collections::HashMap::new();
    for l in labels.iter_mut() {
        let next = remap.len() as u32;
        *l = *remap.entry(*l).or_insert(next);
    }
    labels
}

/// One prompt per superpixel at its centroid, snapped to the nearest member
/// pixel when the centroid falls outside the superpixel.
pub fn slic_prompts(superpixels: &SuperpixelMap) -> Vec<PointPrompt> {
    let (w, h) = (superpixels.width, superpixels.height);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); superpixels.count()];
    for (i, &l) in superpixels.labels.iter().enumerate() {
        members[l as usize].push(i);
    }
    superpixels
        .centers
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let (px, py) = c.pixel(w, h);
            if superpixels.label_at(px, py) == k as u32 {
                return c;
            }
            let cx = c.x as f64 * w as f64 - 0.5;
            let cy = c.y as f64 * h as f64 - 0.5;
            let nearest = members[k]
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = ((a % w) as f64 - cx).powi(2) + ((a / w) as f64 - cy).powi(2);
                    let db = ((b % w) as f64 - cx).powi(2) + ((b / w) as f64 - cy).powi(2);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .expect("superpixels are nonempty");
            PointPrompt::from_pixel(nearest % w, nearest / w, w, h)
        })
        .collect()
}
