//! Leave-one-out ranking metrics with a single relevant item per user.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Ndcg,
    Hit,
    Mrr,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Ndcg, Metric::Hit, Metric::Mrr];

    /// Value for a 1-based `rank` at cutoff `k`.
    pub fn at(self, rank: usize, k: usize) -> f64 {
        if rank == 0 || rank > k {
            return 0.0;
        }
        match self {
            Metric::Ndcg => 1.0 / ((rank + 1) as f64).log2(),
            Metric::Hit => 1.0,
            Metric::Mrr => 1.0 / rank as f64,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Ndcg => "NDCG",
            Metric::Hit => "HIT",
            Metric::Mrr => "MRR",
        })
    }
}

/// 1-based rank of `held_out` among all items not listed in `excluded`
/// (sorted ascending). Higher scores rank first; ties go to the lower index.
pub fn rank_of(scores: &[f64], held_out: usize, excluded: &[usize]) -> usize {
    let target = scores[held_out];
    let mut rank = 1;
    for (item, &s) in scores.iter().enumerate() {
        if item == held_out || excluded.binary_search(&item).is_ok() {
            continue;
        }
        if s > target || (s == target && item < held_out) {
            rank += 1;
        }
    }
    rank
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: usize,
    pub item: usize,
    pub rank: usize,
    /// `(metric, k, value)` with values in `[0, 1]`.
    pub metrics: Vec<(Metric, usize, f64)>,
}

impl RankingResult {
    pub fn new(user: usize, item: usize, rank: usize, ks: &[usize]) -> Self {
        let metrics = Metric::ALL
            .iter()
            .flat_map(|&m| ks.iter().map(move |&k| (m, k, m.at(rank, k))))
            .collect();
        RankingResult {
            user,
            item,
            rank,
            metrics,
        }
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(m, kk, _)| *m == metric && *kk == k)
            .map(|t| t.2)
    }
}

/// Mean over users, scaled by 100, in `(metric, k)` order.
pub fn aggregate(results: &[RankingResult], ks: &[usize]) -> Vec<(Metric, usize, f64)> {
    let n = results.len().max(1) as f64;
    Metric::ALL
        .iter()
        .flat_map(|&m| ks.iter().map(move |&k| (m, k)))
        .map(|(m, k)| {
            let sum: f64 = results.iter().map(|r| m.at(r.rank, k)).sum();
            (m, k, 100.0 * sum / n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        let r = RankingResult::new(0, 0, 1, &[10, 100]);
        for m in Metric::ALL {
            assert_eq!(r.get(m, 10), Some(1.0));
        }
        let r = RankingResult::new(0, 0, 3, &[10]);
        assert_eq!(r.get(Metric::Ndcg, 10), Some(0.5));
        assert_eq!(r.get(Metric::Mrr, 10), Some(1.0 / 3.0));
        assert_eq!(r.get(Metric::Hit, 10), Some(1.0));
        let r = RankingResult::new(0, 0, 11, &[10, 100]);
        for m in Metric::ALL {
            assert_eq!(r.get(m, 10), Some(0.0));
        }
        assert_eq!(r.get(Metric::Ndcg, 100), Some(1.0 / 12f64.log2()));
    }

    #[test]
    fn ties_break_by_index() {
        let scores = [0.5, 0.5, 0.5];
        assert_eq!(rank_of(&scores, 0, &[]), 1);
        assert_eq!(rank_of(&scores, 2, &[]), 3);
        assert_eq!(rank_of(&scores, 2, &[0]), 2);
    }

    #[test]
    fn aggregate_scales_to_percent() {
        let rs = vec![RankingResult::new(0, 0, 1, &[10]), RankingResult::new(1, 0, 20, &[10])];
        let agg = aggregate(&rs, &[10]);
        assert_eq!(agg[1], (Metric::Hit, 10, 50.0));
    }

    proptest! {
        #[test]
        fn cutoffs_are_monotone(rank in 1usize..500) {
            for m in Metric::ALL {
                prop_assert!(m.at(rank, 10) <= m.at(rank, 100));
                prop_assert!((m.at(rank, 10) > 0.0) == (rank <= 10));
            }
        }
    }
}
