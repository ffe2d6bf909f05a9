//! Token aggregation over the μ-thresholded cosine graph.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{PointPrompt, RegionMask, TokenSet};
use crate::error::{Error, Result};
use crate::prompting::SuperpixelMap;

pub const DEFAULT_MU: f32 = 0.975;
/// Prompt count above which the automatic policy starts discarding small groups.
pub const AUTO_DISCARD_ABOVE: usize = 1000;
pub const AUTO_MIN_GROUP: usize = 3;

/// Small-group discard policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinGroup {
    #[default]
    Auto,
    Fixed(usize),
}

impl MinGroup {
    pub fn resolve(self, n_prompts: usize) -> usize {
        match self {
            MinGroup::Auto if n_prompts > AUTO_DISCARD_ABOVE => AUTO_MIN_GROUP,
            MinGroup::Auto => 1,
            MinGroup::Fixed(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationResult {
    /// Member token indices, ascending; groups ordered by smallest member.
    pub groups: Vec<Vec<usize>>,
    pub pooled_ren: Array2<f32>,
    pub pooled_aligned: Array2<f32>,
    pub representatives: Vec<PointPrompt>,
    pub representative_indices: Vec<usize>,
    pub discarded: Vec<usize>,
    pub mu: f32,
    pub min_group: usize,
    pub n_prompts: usize,
}

impl AggregationResult {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Pooled tokens as a token set with representative prompts.
    pub fn to_token_set(&self) -> TokenSet {
        TokenSet {
            prompts: self.representatives.clone(),
            ren: self.pooled_ren.clone(),
            aligned: self.pooled_aligned.clone(),
            source: format!("aggregate(mu={})", self.mu),
        }
    }

    pub fn report(&self, with_masks: bool) -> AggregationReport {
        AggregationReport {
            mu: self.mu,
            n_prompts: self.n_prompts,
            n_groups: self.groups.len(),
            n_discarded: self.discarded.len(),
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(g, members)| GroupReport {
                    members: members.clone(),
                    representative: self.representatives[g],
                    mask_ref: with_masks.then_some(g),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub mu: f32,
    pub n_prompts: usize,
    pub n_groups: usize,
    pub n_discarded: usize,
    pub groups: Vec<GroupReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub members: Vec<usize>,
    pub representative: PointPrompt,
    /// Index into the accompanying mask list, if masks were exported.
    pub mask_ref: Option<usize>,
}

fn unit_rows(x: &Array2<f32>) -> Array2<f64> {
    let mut out = x.mapv(f64::from);
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

fn cos(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b).clamp(-1.0, 1.0)
}

/// Connected components of the graph with an edge wherever cosine > `mu`,
/// found by breadth-first search from the lowest unvisited index.
pub fn connected_components(ren: &Array2<f32>, mu: f32) -> Vec<Vec<usize>> {
    let n = ren.nrows();
    let unit = unit_rows(ren);
    let mu = mu as f64;
    let mut seen = vec![false; n];
    let mut groups = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let ui = unit.row(i);
            for j in 0..n {
                if !seen[j] && cos(ui, unit.row(j)) > mu {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        members.sort_unstable();
        groups.push(members);
    }
    groups
}

fn mean_rows(x: &Array2<f32>, members: &[usize]) -> Array1<f32> {
    let mut acc = Array1::<f64>::zeros(x.ncols());
    for &i in members {
        acc.zip_mut_with(&x.row(i), |a, &v| *a += v as f64);
    }
    acc.mapv(|v| (v / members.len() as f64) as f32)
}

/// Merge tokens whose REN cosine similarity exceeds `mu` (transitively) and
/// mean-pool each group. Groups smaller than the resolved minimum are discarded.
pub fn aggregate(tokens: &TokenSet, mu: f32, min_group: MinGroup) -> Result<AggregationResult> {
    tokens.validate()?;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::Validation("cannot aggregate an empty token set".into()));
    }
    let min_group = min_group.resolve(n);
    let mut groups = Vec::new();
    let mut discarded = Vec::new();
    for g in connected_components(&tokens.ren, mu) {
        if g.len() < min_group {
            discarded.extend(g);
        } else {
            groups.push(g);
        }
    }
    discarded.sort_unstable();

    let mut pooled_ren = Array2::zeros((groups.len(), tokens.ren.ncols()));
    let mut pooled_aligned = Array2::zeros((groups.len(), tokens.aligned.ncols()));
    let mut representative_indices = Vec::with_capacity(groups.len());
    for (g, members) in groups.iter().enumerate() {
        let mean = mean_rows(&tokens.ren, members);
        let rep = *members
            .iter()
            .min_by(|&&a, &&b| {
                let da = (&tokens.ren.row(a) - &mean).mapv(|v| (v as f64).powi(2)).sum();
                let db = (&tokens.ren.row(b) - &mean).mapv(|v| (v as f64).powi(2)).sum();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("groups are nonempty");
        pooled_ren.row_mut(g).assign(&mean);
        pooled_aligned
            .row_mut(g)
            .assign(&mean_rows(&tokens.aligned, members));
        representative_indices.push(rep);
    }
    Ok(AggregationResult {
        representatives: representative_indices.iter().map(|&i| tokens.prompts[i]).collect(),
        groups,
        pooled_ren,
        pooled_aligned,
        representative_indices,
        discarded,
        mu,
        min_group,
        n_prompts: n,
    })
}

/// Group count at each threshold, without discarding.
pub fn token_count_curve(tokens: &TokenSet, mus: &[f32]) -> Result<Vec<(f32, usize)>> {
    if mus.is_empty() {
        return Err(Error::Config("empty mu grid".into()));
    }
    tokens.validate()?;
    Ok(mus
        .iter()
        .map(|&mu| (mu, connected_components(&tokens.ren, mu).len()))
        .collect())
}

/// How the prompts of a token set were produced.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptLayout {
    Grid,
    /// `prompt_labels[i]` is the superpixel prompt `i` was placed in.
    Superpixels {
        map: SuperpixelMap,
        prompt_labels: Vec<u32>,
    },
}

impl PromptLayout {
    /// Layout of prompts placed one per superpixel by `slic_prompts`.
    pub fn from_superpixels(map: SuperpixelMap) -> Self {
        let prompt_labels = (0..map.count() as u32).collect();
        PromptLayout::Superpixels { map, prompt_labels }
    }
}

/// Pixel union of each group's member superpixels.
pub fn masks_from_groups(layout: &PromptLayout, result: &AggregationResult) -> Result<Vec<RegionMask>> {
    let (map, prompt_labels) = match layout {
        PromptLayout::Grid => {
            return Err(Error::UnsupportedPrompt(
                "grid prompts carry no superpixels to build masks from".into(),
            ))
        }
        PromptLayout::Superpixels { map, prompt_labels } => (map, prompt_labels),
    };
    if prompt_labels.len() != result.n_prompts {
        return Err(Error::Validation(format!(
            "layout has {} prompts, aggregation saw {}",
            prompt_labels.len(),
            result.n_prompts
        )));
    }
    let mut owner = vec![None::<usize>; map.count()];
    for (g, members) in result.groups.iter().enumerate() {
        for &i in members {
            let l = prompt_labels[i] as usize;
            if l >= map.count() {
                return Err(Error::Validation(format!("prompt {i} names missing superpixel {l}")));
            }
            match owner[l] {
                Some(o) if o != g => {
                    return Err(Error::Validation(format!(
                        "superpixel {l} claimed by groups {o} and {g}"
                    )))
                }
                _ => owner[l] = Some(g),
            }
        }
    }
    let mut bits = vec![vec![false; map.width * map.height]; result.groups.len()];
    for (p, &l) in map.labels.iter().enumerate() {
        if let Some(g) = owner[l as usize] {
            bits[g][p] = true;
        }
    }
    bits.into_iter()
        .map(|b| RegionMask::from_bits(map.width, map.height, b))
        .collect()
}

/// Label per token: group index, or `None` when discarded.
pub fn token_labels(result: &AggregationResult) -> Vec<Option<usize>> {
    let mut out = vec![None; result.n_prompts];
    for (g, members) in result.groups.iter().enumerate() {
        for &i in members {
            out[i] = Some(g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;

    fn tokens(ren: Array2<f32>) -> TokenSet {
        let n = ren.nrows();
        TokenSet {
            prompts: (0..n)
                .map(|i| PointPrompt {
                    x: (i as f32 + 0.5) / n as f32,
                    y: 0.5,
                })
                .collect(),
            aligned: ren.mapv(|v| 2.0 * v),
            ren,
            source: "test".into(),
        }
    }

    fn union_find(ren: &Array2<f32>, mu: f32) -> Vec<Vec<usize>> {
        let n = ren.nrows();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (ren.row(i), ren.row(j));
                let c = a.dot(&b) as f64
                    / ((a.dot(&a) as f64).sqrt() * (b.dot(&b) as f64).sqrt());
                if c.clamp(-1.0, 1.0) > mu as f64 {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    #[test]
    fn mu_one_keeps_every_token() {
        let t = tokens(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let r = aggregate(&t, 1.0, MinGroup::Auto).unwrap();
        assert_eq!(r.groups, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(token_count_curve(&t, &[1.1]).unwrap(), vec![(1.1, 3)]);
    }

    #[test]
    fn duplicates_merge_orthogonals_do_not() {
        let t = tokens(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let r = aggregate(&t, 0.975, MinGroup::Auto).unwrap();
        assert_eq!(r.groups, vec![vec![0, 1], vec![2]]);
        assert_eq!(r.pooled_ren.row(0), array![1.0, 0.0]);
        assert_eq!(r.pooled_aligned.row(0), array![2.0, 0.0]);
        assert_eq!(r.representative_indices, vec![0, 2]);
        assert!(r.discarded.is_empty());
    }

    #[test]
    fn chain_closes_transitively() {
        // a·c = 0.92 with a·b = b·c = 0.98 is not a valid Gram matrix (a·c ≥ 2·0.98² − 1),
        // so the endpoints sit at 0.93, still well below the threshold
        let g = [[1.0, 0.98, 0.93], [0.98, 1.0, 0.98], [0.93, 0.98, 1.0f64]];
        let mut l = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                l[i][j] = if i == j { (g[i][i] - s).sqrt() } else { (g[i][j] - s) / l[j][j] };
            }
        }
        let ren = Array2::from_shape_fn((3, 3), |(i, j)| l[i][j] as f32);
        let unit = unit_rows(&ren);
        assert!((cos(unit.row(0), unit.row(2)) - 0.93).abs() < 1e-6);
        assert!((cos(unit.row(0), unit.row(1)) - 0.98).abs() < 1e-6);
        let t = tokens(ren.clone());
        assert_eq!(aggregate(&t, 0.975, MinGroup::Auto).unwrap().groups, vec![vec![0, 1, 2]]);
        assert_eq!(union_find(&ren, 0.975), vec![vec![0, 1, 2]]);
        // without the bridge the endpoints stay apart
        let ends = tokens(ren.select(Axis(0), &[0, 2]));
        assert_eq!(aggregate(&ends, 0.975, MinGroup::Auto).unwrap().n_groups(), 2);
    }

    #[test]
    fn identical_tokens_form_one_group() {
        let t = tokens(Array2::from_elem((7, 4), 0.3));
        for mu in [0.0, 0.5, 0.975, 0.999] {
            assert_eq!(token_count_curve(&t, &[mu]).unwrap()[0].1, 1);
        }
    }

    #[test]
    fn auto_policy_discards_only_above_1000() {
        assert_eq!(MinGroup::Auto.resolve(1000), 1);
        assert_eq!(MinGroup::Auto.resolve(1001), 3);
        assert_eq!(MinGroup::Fixed(2).resolve(5000), 2);
        let mut ren = Array2::zeros((1001, 1001));
        for i in 0..1001 {
            ren[[i, if i < 3 { 0 } else { i }]] = 1.0;
        }
        let r = aggregate(&tokens(ren), 0.975, MinGroup::Auto).unwrap();
        assert_eq!(r.groups, vec![vec![0, 1, 2]]);
        assert_eq!(r.discarded.len(), 998);
    }

    #[test]
    fn grid_layout_is_unsupported() {
        let t = tokens(array![[1.0, 0.0]]);
        let r = aggregate(&t, 0.975, MinGroup::Auto).unwrap();
        assert!(matches!(masks_from_groups(&PromptLayout::Grid, &r), Err(Error::UnsupportedPrompt(_))));
    }

    #[test]
    fn masks_cover_canvas() {
        let labels: Vec<u32> = (0..8 * 4).map(|i| ((i % 8) / 2) as u32).collect();
        let map = SuperpixelMap::from_labels(8, 4, labels).unwrap();
        let layout = PromptLayout::from_superpixels(map.clone());
        let same = tokens(Array2::from_elem((4, 2), 1.0));
        let r = aggregate(&same, 0.975, MinGroup::Auto).unwrap();
        let masks = masks_from_groups(&layout, &r).unwrap();
        assert_eq!(masks, vec![RegionMask::full(8, 4)]);

        let distinct = tokens(Array2::eye(4));
        let r = aggregate(&distinct, 0.975, MinGroup::Auto).unwrap();
        let masks = masks_from_groups(&layout, &r).unwrap();
        for (k, m) in masks.iter().enumerate() {
            assert_eq!(*m, map.mask(k as u32));
        }
    }

    #[test]
    fn report_json_shape() {
        let t = tokens(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let r = aggregate(&t, 0.975, MinGroup::Auto).unwrap();
        let v: serde_json::Value = serde_json::to_value(r.report(false)).unwrap();
        assert_eq!(v["n_groups"], 2);
        assert_eq!(v["n_prompts"], 3);
        assert_eq!(v["groups"][0]["members"], serde_json::json!([0, 1]));
    }

    fn token_matrix() -> impl Strategy<Value = Array2<f32>> {
        (1usize..24, 2usize..5).prop_flat_map(|(n, d)| {
            // few distinct directions plus small noise gives nontrivial graphs
            proptest::collection::vec(0usize..4, n).prop_flat_map(move |ids| {
                proptest::collection::vec(-0.2f32..0.2, ids.len() * d).prop_map(move |noise| {
                    Array2::from_shape_fn((ids.len(), d), |(i, j)| {
                        let base = if j == ids[i] % d { 1.0 } else { 0.0 };
                        base + noise[i * d + j]
                    })
                })
            })
        })
    }

    proptest! {
        #[test]
        fn bfs_matches_union_find(ren in token_matrix(), mu in 0.5f32..1.0) {
            prop_assert_eq!(connected_components(&ren, mu), union_find(&ren, mu));
        }

        #[test]
        fn permutation_invariant(ren in token_matrix(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = ren.nrows();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate(&tokens(ren.clone()), 0.9, MinGroup::Fixed(1)).unwrap();
            let b = aggregate(&tokens(ren.select(Axis(0), &perm)), 0.9, MinGroup::Fixed(1)).unwrap();
            let mut mapped: Vec<(Vec<usize>, usize)> = b.groups.iter().enumerate()
                .map(|(g, m)| { let mut m: Vec<usize> = m.iter().map(|&i| perm[i]).collect(); m.sort(); (m, g) })
                .collect();
            mapped.sort();
            prop_assert_eq!(mapped.iter().map(|x| x.0.clone()).collect::<Vec<_>>(), a.groups.clone());
            for (g, (_, gb)) in mapped.iter().enumerate() {
                for (x, y) in a.pooled_ren.row(g).iter().zip(b.pooled_ren.row(*gb)) {
                    prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
                }
            }
        }

        #[test]
        fn partition_and_monotone(ren in token_matrix()) {
            let t = tokens(ren.clone());
            let r = aggregate(&t, 0.95, MinGroup::Fixed(2)).unwrap();
            let mut all: Vec<usize> = r.groups.iter().flatten().copied().chain(r.discarded.iter().copied()).collect();
            all.sort();
            prop_assert_eq!(all, (0..ren.nrows()).collect::<Vec<_>>());
            let mus = [0.875, 0.9, 0.925, 0.95, 0.975, 1.0];
            let curve = token_count_curve(&t, &mus).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert_eq!(curve.last().unwrap().1, ren.nrows());
        }
    }
}
