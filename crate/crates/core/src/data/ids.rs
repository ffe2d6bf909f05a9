use super::{PointPrompt, RegionId, RegionMask};
use crate::error::{Error, Result};

/// Region id for each prompt: the mask containing the prompt's pixel.
///
/// When several masks contain it the mid-sized one by pixel area wins. Masks
/// are ordered by `(area, index)` and the lower middle element is taken, so
/// the choice is total even for an even count or equal areas.
pub fn assign_region_ids(
    prompts: &[PointPrompt],
    masks: &[RegionMask],
) -> Result<Vec<Option<RegionId>>> {
    let Some(first) = masks.first() else {
        return Ok(vec![None; prompts.len()]);
    };
    if masks.iter().any(|m| !m.same_canvas(first)) {
        return Err(Error::Validation("masks do not share one canvas".into()));
    }
    let (w, h) = (first.width(), first.height());
    let areas: Vec<usize> = masks.iter().map(RegionMask::area).collect();
    let mut hits: Vec<usize> = Vec::new();
    prompts
        .iter()
        .map(|p| {
            p.validate()?;
            let (x, y) = p.pixel(w, h);
            hits.clear();
            hits.extend((0..masks.len()).filter(|&k| masks[k].get(x, y)));
            if hits.is_empty() {
                return Ok(None);
            }
            hits.sort_by_key(|&k| (areas[k], k));
            Ok(Some(hits[(hits.len() - 1) / 2] as RegionId))
        })
        .collect()
}
