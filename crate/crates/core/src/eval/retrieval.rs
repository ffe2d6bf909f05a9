use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn cosine(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Highest cosine between the query and any token row of one image.
pub fn image_score(query: ArrayView1<'_, f32>, tokens: ArrayView2<'_, f32>) -> f64 {
    tokens
        .rows()
        .into_iter()
        .map(|r| cosine(query, r))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// One database entry in a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub image: usize,
    pub score: f64,
}

/// Database images by descending score; ties go to the lower image id.
pub fn retrieve(query: ArrayView1<'_, f32>, database: &[ArrayView2<'_, f32>]) -> Result<Vec<Ranked>> {
    if database.is_empty() {
        return Err(Error::Validation("retrieval database is empty".into()));
    }
    let mut out: Vec<Ranked> = database
        .iter()
        .enumerate()
        .map(|(image, t)| Ranked {
            image,
            score: image_score(query, *t),
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)));
    Ok(out)
}

/// Average precision of a ranking given per-image relevance.
/// Zero when no image is relevant.
pub fn average_precision(ranking: &[usize], relevant: &[bool]) -> f64 {
    let total = ranking.iter().filter(|&&i| relevant[i]).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in ranking.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / total as f64
}

/// Fraction of the top `k` that is relevant.
pub fn precision_at(ranking: &[usize], relevant: &[bool], k: usize) -> f64 {
    let k = k.min(ranking.len());
    if k == 0 {
        return 0.0;
    }
    ranking[..k].iter().filter(|&&i| relevant[i]).count() as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub mrp_at_k: f64,
    pub k: usize,
}

/// Mean AP and mean precision@K over queries.
pub fn map_mrp(rankings: &[Vec<usize>], relevance: &[Vec<bool>], k: usize) -> RetrievalScores {
    assert_eq!(rankings.len(), relevance.len());
    let n = rankings.len().max(1) as f64;
    let map = rankings.iter().zip(relevance).map(|(r, rel)| average_precision(r, rel)).sum::<f64>() / n;
    let mrp = rankings.iter().zip(relevance).map(|(r, rel)| precision_at(r, rel, k)).sum::<f64>() / n;
    RetrievalScores { map, mrp_at_k: mrp, k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_relevant_image() {
        assert_eq!(average_precision(&[0], &[true]), 1.0);
    }

    #[test]
    fn hand_computed_ap() {
        let ap = average_precision(&[0, 1, 2, 3], &[true, false, true, false]);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    /// AP as the mean over relevant items of precision at their rank,
    /// computed by scanning prefixes from scratch.
    fn ap_oracle(ranking: &[usize], relevant: &[bool]) -> f64 {
        let mut vals = Vec::new();
        for r in 0..ranking.len() {
            if relevant[ranking[r]] {
                let prefix = &ranking[..=r];
                vals.push(prefix.iter().filter(|&&i| relevant[i]).count() as f64 / prefix.len() as f64);
            }
        }
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    #[test]
    fn ap_matches_exhaustive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let n = rng.gen_range(1..=16);
            let mut ranking: Vec<usize> = (0..n).collect();
            ranking.shuffle(&mut rng);
            let rel: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            assert_eq!(average_precision(&ranking, &rel), ap_oracle(&ranking, &rel));
        }
    }

    #[test]
    fn copied_token_ranks_first() {
        let a = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let b = array![[0.3f32, 0.5, 0.2], [0.9, 0.1, 0.4]];
        let c = array![[0.0f32, 0.0, 1.0]];
        let db = [a.view(), b.view(), c.view()];
        let r = retrieve(b.row(1), &db).unwrap();
        assert_eq!(r[0].image, 1);
        assert!((r[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ties_broken_by_id() {
        let t = array![[1.0f32, 0.0]];
        let db = [t.view(), t.view(), t.view()];
        let r = retrieve(t.row(0), &db).unwrap();
        assert_eq!(r.iter().map(|x| x.image).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_database() {
        let q = array![1.0f32];
        assert!(retrieve(q.view(), &[]).is_err());
        let empty = Array2::<f32>::zeros((0, 1));
        assert_eq!(image_score(q.view(), empty.view()), f64::NEG_INFINITY);
    }

    #[test]
    fn mean_scores() {
        let s = map_mrp(
            &[vec![0, 1, 2, 3], vec![1, 0]],
            &[vec![true, false, true, false], vec![true, false]],
            2,
        );
        assert!((s.map - (5.0 / 6.0 + 0.5) / 2.0).abs() < 1e-15);
        assert!((s.mrp_at_k - 0.5).abs() < 1e-15);
    }
}
