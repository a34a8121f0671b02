//! Retrieval metrics over 1-based ground-truth ranks.

use thiserror::Error;

/// Default MRR truncation; ranks beyond it contribute nothing.
pub const MRR_CUTOFF: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("empty query set")]
    NoQueries,
    #[error("query {0}: ground truth missing from its pool")]
    MissingTruth(usize),
}

/// Rank of `truth` in `ranked` (1-based).
pub fn rank_of<T: PartialEq>(ranked: &[T], truth: &T) -> Option<usize> {
    ranked.iter().position(|x| x == truth).map(|p| p + 1)
}

/// `ranks[q]` is `None` when query `q`'s ground truth was not in its pool.
pub fn ranks_checked(ranks: &[Option<usize>]) -> Result<Vec<usize>, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::NoQueries);
    }
    ranks
        .iter()
        .enumerate()
        .map(|(q, r)| r.filter(|&r| r >= 1).ok_or(MetricError::MissingTruth(q)))
        .collect()
}

/// Fraction of queries whose ground truth ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::NoQueries);
    }
    if let Some(q) = ranks.iter().position(|&r| r == 0) {
        return Err(MetricError::MissingTruth(q));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank; with `Some(c)` ranks above `c` count as zero.
pub fn mrr(ranks: &[usize], cutoff: Option<usize>) -> Result<f64, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::NoQueries);
    }
    if let Some(q) = ranks.iter().position(|&r| r == 0) {
        return Err(MetricError::MissingTruth(q));
    }
    let total: f64 = ranks
        .iter()
        .map(|&r| match cutoff {
            Some(c) if r > c => 0.0,
            _ => 1.0 / r as f64,
        })
        .sum();
    Ok(total / ranks.len() as f64)
}

/// `(k, Recall@k)` for k = 1..=max_k.
pub fn recall_curve(ranks: &[usize], max_k: usize) -> Result<Vec<(usize, f64)>, MetricError> {
    (1..=max_k).map(|k| recall_at_k(ranks, k).map(|r| (k, r))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        assert_eq!(recall_at_k(&[1, 3], 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[1, 2, 4], 2).unwrap(), 2.0 / 3.0);
        for k in 1..5 {
            assert_eq!(recall_at_k(&[1, 1, 1], k).unwrap(), 1.0);
        }
        assert_eq!(mrr(&[1], Some(10)).unwrap(), 1.0);
        assert!((mrr(&[1, 2, 4], Some(10)).unwrap() - 0.583_333_333_333_333_4).abs() < 1e-15);
        assert_eq!(mrr(&[11], Some(10)).unwrap(), 0.0);
        assert!((mrr(&[11], None).unwrap() - 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(recall_at_k(&[], 1), Err(MetricError::NoQueries));
        assert_eq!(mrr(&[], None), Err(MetricError::NoQueries));
        assert_eq!(ranks_checked(&[Some(1), None]), Err(MetricError::MissingTruth(1)));
        assert_eq!(ranks_checked(&[Some(2)]).unwrap(), vec![2]);
        assert_eq!(rank_of(&["a", "b"], &"b"), Some(2));
    }

    proptest! {
        #[test]
        fn ordering_between_metrics(ranks in prop::collection::vec(1usize..40, 1..30)) {
            let r1 = recall_at_k(&ranks, 1).unwrap();
            let r10 = recall_at_k(&ranks, 10).unwrap();
            let m = mrr(&ranks, Some(10)).unwrap();
            prop_assert!(r1 <= m + 1e-12 && m <= r10 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&m));
            let curve = recall_curve(&ranks, 40).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }
}
