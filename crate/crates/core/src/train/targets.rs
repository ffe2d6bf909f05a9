use ndarray::{Array1, Array2};

use crate::data::{PatchFeatureMap, RegionId, RegionMask};
use crate::error::{Error, Result};

/// Patches whose cell-center pixel lies inside `mask`.
pub fn patch_center_membership(map: &PatchFeatureMap, mask: &RegionMask) -> Result<Vec<bool>> {
    if mask.width() != map.image_w || mask.height() != map.image_h {
        return Err(Error::Validation(format!(
            "mask canvas {}x{} vs image {}x{}",
            mask.width(),
            mask.height(),
            map.image_w,
            map.image_h
        )));
    }
    let mut out = Vec::with_capacity(map.n_patches());
    for r in 0..map.h_patches {
        for c in 0..map.w_patches {
            let (x, y) = map.cell_center_pixel(r, c);
            out.push(mask.get(x, y));
        }
    }
    Ok(out)
}

/// Mask-averaged encoder feature for every prompt id.
pub fn target_tokens(map: &PatchFeatureMap, masks: &[RegionMask], ids: &[RegionId]) -> Result<Array2<f32>> {
    let feats = map.features();
    let mut cache: Vec<Option<Array1<f32>>> = vec![None; masks.len()];
    let mut out = Array2::zeros((ids.len(), map.dim));
    for (i, &id) in ids.iter().enumerate() {
        let k = id as usize;
        let mask = masks
            .get(k)
            .ok_or_else(|| Error::Validation(format!("prompt {i} has id {id} without a mask")))?;
        if cache[k].is_none() {
            let members = patch_center_membership(map, mask)?;
            let count = members.iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(Error::EmptyMask(format!("mask of region {id} covers no patch center")));
            }
            let mut acc = Array1::<f64>::zeros(map.dim);
            for (p, _) in members.iter().enumerate().filter(|(_, &b)| b) {
                acc.zip_mut_with(&feats.row(p), |a, &v| *a += v as f64);
            }
            cache[k] = Some(acc.mapv(|v| (v / count as f64) as f32));
        }
        out.row_mut(i).assign(cache[k].as_ref().expect("filled above"));
    }
    Ok(out)
}

/// Binary patch-grid rasterization of each prompt's mask, `n × n_patches`.
pub fn attention_targets(map: &PatchFeatureMap, masks: &[RegionMask], ids: &[RegionId]) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((ids.len(), map.n_patches()));
    for (i, &id) in ids.iter().enumerate() {
        let mask = masks
            .get(id as usize)
            .ok_or_else(|| Error::Validation(format!("prompt {i} has id {id} without a mask")))?;
        let members = patch_center_membership(map, mask)?;
        if !members.contains(&true) {
            return Err(Error::EmptyMask(format!("mask of region {id} covers no patch center")));
        }
        for (j, b) in members.into_iter().enumerate() {
            out[[i, j]] = b as u8 as f32;
        }
    }
    Ok(out)
}
