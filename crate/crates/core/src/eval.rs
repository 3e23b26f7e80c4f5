//! Full-catalog top-N ranking metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::graph::{items_by_user, DatasetSplit};
use crate::matrix::{dot, Matrix};
use crate::quant::StorageReport;

/// Affinity `h_u . h_i` between user `u` and item entity `item_entity`.
pub fn score(h: &Matrix, num_users: usize, u: usize, item_entity: usize) -> Result<f64> {
    if u >= num_users {
        return Err(argument(format!("{u} is not a user ID (num_users = {num_users})")));
    }
    if item_entity < num_users || item_entity >= h.rows() {
        return Err(argument(format!("{item_entity} is not an item entity ID")));
    }
    Ok(dot(h.row(u), h.row(item_entity)))
}

fn check_user(h: &Matrix, num_users: usize, u: usize) -> Result<()> {
    if u >= num_users || num_users > h.rows() {
        return Err(argument(format!("unknown user {u}")));
    }
    Ok(())
}

fn ranking_order(a: &(u32, f64), b: &(u32, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn candidate_scores(h: &Matrix, num_users: usize, u: usize, exclude: &[u32]) -> Vec<(u32, f64)> {
    let hu = h.row(u);
    (0..(h.rows() - num_users) as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (i, dot(hu, h.row(num_users + i as usize))))
        .collect()
}

/// Every non-excluded item, by descending score then ascending item ID.
/// `exclude` must be sorted.
pub fn rank_items(h: &Matrix, num_users: usize, u: usize, exclude: &[u32]) -> Result<Vec<u32>> {
    check_user(h, num_users, u)?;
    let mut scored = candidate_scores(h, num_users, u, exclude);
    scored.sort_unstable_by(ranking_order);
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Prefix of length `n` of [`rank_items`], without sorting the whole catalog.
pub fn top_n_items(h: &Matrix, num_users: usize, u: usize, exclude: &[u32], n: usize) -> Result<Vec<u32>> {
    check_user(h, num_users, u)?;
    let mut scored = candidate_scores(h, num_users, u, exclude);
    if n < scored.len() {
        scored.select_nth_unstable_by(n, ranking_order);
        scored.truncate(n);
    }
    scored.sort_unstable_by(ranking_order);
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// `|top-n ∩ relevant| / |relevant|`; `None` when nothing is relevant.
/// `relevant` must be sorted.
pub fn recall_at_n(ranked: &[u32], relevant: &[u32], n: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked
        .iter()
        .take(n)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with the `1 / log2(p + 1)` discount.
pub fn ndcg_at_n(ranked: &[u32], relevant: &[u32], n: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..n.min(relevant.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub recall: f64,
    pub ndcg: f64,
}

/// User-averaged metrics keyed by cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub users: usize,
    pub at: BTreeMap<usize, MetricPair>,
}

impl RankingMetrics {
    pub fn ndcg(&self, n: usize) -> f64 {
        self.at.get(&n).map_or(0.0, |m| m.ndcg)
    }

    pub fn recall(&self, n: usize) -> f64 {
        self.at.get(&n).map_or(0.0, |m| m.recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    /// Rank against validation items, excluding training items.
    Validation,
    /// Rank against test items, excluding training and validation items.
    Test,
}

/// Mean Recall@n and NDCG@n over users with a nonempty target set.
pub fn evaluate(h: &Matrix, split: &DatasetSplit, cutoffs: &[usize], target: EvalTarget) -> Result<RankingMetrics> {
    if h.rows() != split.num_entities() {
        return Err(argument(format!(
            "table has {} rows, split has {} entities",
            h.rows(),
            split.num_entities()
        )));
    }
    if cutoffs.contains(&0) {
        return Err(argument("cutoffs must be at least 1"));
    }
    let max_n = cutoffs.iter().copied().max().unwrap_or(0);
    let (relevant, known): (Vec<Vec<u32>>, Vec<Vec<u32>>) = match target {
        EvalTarget::Validation => (
            items_by_user(split.num_users, &split.valid),
            items_by_user(split.num_users, &split.train),
        ),
        EvalTarget::Test => {
            let mut known = split.train.clone();
            known.extend_from_slice(&split.valid);
            (
                items_by_user(split.num_users, &split.test),
                items_by_user(split.num_users, &known),
            )
        }
    };

    let per_user: Vec<Vec<MetricPair>> = (0..split.num_users)
        .into_par_iter()
        .filter(|&u| !relevant[u].is_empty())
        .map(|u| {
            let ranked = top_n_items(h, split.num_users, u, &known[u], max_n).expect("valid user");
            cutoffs
                .iter()
                .map(|&n| MetricPair {
                    recall: recall_at_n(&ranked, &relevant[u], n).unwrap(),
                    ndcg: ndcg_at_n(&ranked, &relevant[u], n).unwrap(),
                })
                .collect()
        })
        .collect();

    let users = per_user.len();
    let mut at = BTreeMap::new();
    for (k, &n) in cutoffs.iter().enumerate() {
        let (mut recall, mut ndcg) = (0.0, 0.0);
        for row in &per_user {
            recall += row[k].recall;
            ndcg += row[k].ndcg;
        }
        let denom = users.max(1) as f64;
        at.insert(
            n,
            MetricPair {
                recall: recall / denom,
                ndcg: ndcg / denom,
            },
        );
    }
    Ok(RankingMetrics { users, at })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

/// Serialized evaluation report: ranking quality plus the storage and
/// propagation-cost budget of the evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub config_hash: String,
    pub storage_bytes: StorageReport,
    pub macs_per_layer: u64,
    pub metrics: BTreeMap<String, MetricPair>,
    pub timing: Timing,
}

impl MetricsReport {
    pub fn new(
        dataset: impl Into<String>,
        config_hash: impl Into<String>,
        storage_bytes: StorageReport,
        macs_per_layer: u64,
        ranking: &RankingMetrics,
        timing: Timing,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            config_hash: config_hash.into(),
            storage_bytes,
            macs_per_layer,
            metrics: ranking.at.iter().map(|(n, m)| (n.to_string(), *m)).collect(),
            timing,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_by_hand() {
        // One user, three items with scores 0.2, 0.9, 0.5.
        let h = Matrix::from_rows(&[vec![1.0], vec![0.2], vec![0.9], vec![0.5]]).unwrap();
        assert_eq!(rank_items(&h, 1, 0, &[]).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_items(&h, 1, 0, &[0, 1, 2]).unwrap(), Vec::<u32>::new());
        assert_eq!(rank_items(&h, 1, 0, &[0, 2]).unwrap(), vec![1]);
        assert!(rank_items(&h, 1, 1, &[]).is_err());
    }

    #[test]
    fn ties_break_by_item_id() {
        let h = Matrix::from_rows(&[vec![1.0], vec![0.5], vec![0.5], vec![0.5]]).unwrap();
        assert_eq!(rank_items(&h, 1, 0, &[]).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_n_items(&h, 1, 0, &[], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn recall_cases() {
        let ranked: Vec<u32> = (0..20).collect();
        assert_eq!(recall_at_n(&ranked, &[0], 10), Some(1.0));
        assert_eq!(recall_at_n(&ranked, &[10], 10), Some(0.0));
        assert_eq!(recall_at_n(&ranked, &[3, 15], 10), Some(0.5));
        assert_eq!(recall_at_n(&ranked, &[], 10), None);
    }

    #[test]
    fn ndcg_cases() {
        let ranked: Vec<u32> = (0..20).collect();
        assert_eq!(ndcg_at_n(&ranked, &[0], 10), Some(1.0));
        let second = ndcg_at_n(&ranked, &[1], 10).unwrap();
        assert!((second - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((second - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_n(&ranked, &[12], 10), Some(0.0));
    }

    #[test]
    fn score_dot_product() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(score(&h, 1, 0, 1).unwrap(), 1.0);
        assert_eq!(score(&h, 1, 0, 1).unwrap(), dot(h.row(1), h.row(0)));
        let zero = Matrix::zeros(2, 2);
        assert_eq!(score(&zero, 1, 0, 1).unwrap(), 0.0);
        assert!(score(&h, 1, 1, 1).is_err());
        assert!(score(&h, 1, 0, 0).is_err());
    }
}
