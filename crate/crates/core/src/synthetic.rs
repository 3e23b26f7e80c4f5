//! Planted-community interaction generator for experiments and tests.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::graph::InteractionDataset;

/// Users and items are split round-robin into communities; each user mostly
/// interacts with items of its own community, with popularity skew inside
/// every pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub communities: usize,
    /// Mean interactions per user; counts vary uniformly in `[n/2, 3n/2]`.
    pub interactions_per_user: usize,
    /// Probability that an interaction stays inside the user's community.
    pub in_community: f64,
    /// Item weight `1 / (rank + 1)^exponent` within a pool.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_items: 1000,
            communities: 10,
            interactions_per_user: 20,
            in_community: 0.8,
            popularity_exponent: 0.6,
            seed: 7,
        }
    }
}

pub fn planted_communities(cfg: &PlantedConfig) -> Result<InteractionDataset> {
    let k = cfg.communities;
    if k == 0 || cfg.num_users < k || cfg.num_items < k {
        return Err(argument("need at least one user and item per community"));
    }
    if !(0.0..=1.0).contains(&cfg.in_community) {
        return Err(argument("in_community must be a probability"));
    }
    let per_user = cfg.interactions_per_user.max(1);
    if per_user * 3 / 2 > cfg.num_items / k {
        return Err(argument("communities too small for the requested interactions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weight = |rank: usize| 1.0 / ((rank + 1) as f64).powf(cfg.popularity_exponent);

    let pools: Vec<Vec<u32>> = (0..k)
        .map(|c| (c..cfg.num_items).step_by(k).map(|i| i as u32).collect())
        .collect();
    let pool_dists: Vec<WeightedIndex<f64>> = pools
        .iter()
        .map(|p| WeightedIndex::new((0..p.len()).map(weight)).expect("nonempty pool"))
        .collect();
    let global = WeightedIndex::new((0..cfg.num_items).map(weight)).expect("nonempty catalog");

    let mut pairs = Vec::new();
    let mut chosen = Vec::new();
    for u in 0..cfg.num_users {
        let c = u % k;
        let count = rng.gen_range(per_user.div_ceil(2)..=per_user * 3 / 2);
        chosen.clear();
        while chosen.len() < count {
            let item = if rng.gen_bool(cfg.in_community) {
                pools[c][pool_dists[c].sample(&mut rng)]
            } else {
                global.sample(&mut rng) as u32
            };
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        pairs.extend(chosen.iter().map(|&i| (u as u32, i)));
    }
    InteractionDataset::new(cfg.num_users, cfg.num_items, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_mostly_in_community() {
        let cfg = PlantedConfig {
            num_users: 100,
            num_items: 200,
            communities: 4,
            interactions_per_user: 10,
            ..Default::default()
        };
        let a = planted_communities(&cfg).unwrap();
        let b = planted_communities(&cfg).unwrap();
        assert_eq!(a.pairs, b.pairs);
        let inside = a.pairs.iter().filter(|(u, i)| u % 4 == i % 4).count();
        assert!(inside as f64 / a.pairs.len() as f64 > 0.75);
        assert!(a.pairs.len() >= 500 && a.pairs.len() <= 1500);
    }

    #[test]
    fn rejects_degenerate_settings() {
        let cfg = PlantedConfig {
            communities: 0,
            ..Default::default()
        };
        assert!(planted_communities(&cfg).is_err());
    }
}
