use std::collections::HashMap;

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand index between two labelings of the same elements.
///
/// Identical partitions score 1 even in the degenerate cases where the
/// chance-corrected denominator vanishes.
pub fn ari<A, B>(pred: &[A], truth: &[B]) -> f64
where
    A: Eq + std::hash::Hash + Copy,
    B: Eq + std::hash::Hash + Copy,
{
    assert_eq!(pred.len(), truth.len(), "labelings cover different elements");
    let n = pred.len() as u64;
    if n < 2 {
        return 1.0;
    }
    let mut table: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < 1e-12 {
        return if index == max { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}
