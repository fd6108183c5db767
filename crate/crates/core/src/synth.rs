//! Deterministic synthetic interaction logs.
//!
//! Users and items are grouped into matching clusters; each user interacts
//! mostly inside their own cluster, with popularity-skewed item choice.
//! Clusters can optionally contain subclusters, giving each user a taste
//! narrower than their whole community. The resulting bipartite graph has
//! the two-level structure that neighborhood smoothing exploits — and that
//! unbounded smoothing washes out — at a scale where training takes seconds.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::InteractionTable;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    /// Inclusive range of interactions drawn per user.
    pub min_per_user: usize,
    pub max_per_user: usize,
    /// Probability that a draw stays inside the user's own cluster.
    pub in_cluster_prob: f64,
    /// Subclusters per cluster; 1 leaves clusters flat.
    pub n_subclusters: usize,
    /// Probability that an own-cluster draw narrows to the user's own
    /// subcluster rather than the whole cluster.
    pub in_subcluster_prob: f64,
    /// Exponent > 1 biases draws toward each cluster's popular head.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Small corpus for unit tests.
    pub fn tiny(seed: u64) -> Self {
        SynthConfig {
            n_users: 40,
            n_items: 30,
            n_clusters: 3,
            min_per_user: 5,
            max_per_user: 12,
            in_cluster_prob: 0.8,
            n_subclusters: 1,
            in_subcluster_prob: 0.0,
            popularity_skew: 1.6,
            seed,
        }
    }

    /// Workstation-scale corpus: trains in seconds but is large enough for
    /// ranking metrics to separate models.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            n_users: 700,
            n_items: 900,
            n_clusters: 8,
            min_per_user: 5,
            max_per_user: 18,
            in_cluster_prob: 0.85,
            n_subclusters: 6,
            in_subcluster_prob: 0.55,
            popularity_skew: 2.3,
            seed,
        }
    }
}

/// Generates the interaction table for `cfg`. Same config, same table.
pub fn generate(cfg: &SynthConfig) -> InteractionTable {
    assert!(cfg.n_clusters >= 1 && cfg.n_users >= 1 && cfg.n_items >= cfg.n_clusters);
    assert!(cfg.min_per_user >= 1 && cfg.max_per_user >= cfg.min_per_user);
    assert!(cfg.n_subclusters >= 1 && (0.0..=1.0).contains(&cfg.in_subcluster_prob));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Items of cluster c are those with i % n_clusters == c, listed from most
    // to least popular.
    let cluster_items: Vec<Vec<u32>> = (0..cfg.n_clusters)
        .map(|c| {
            (0..cfg.n_items)
                .filter(|i| i % cfg.n_clusters == c)
                .map(|i| i as u32)
                .collect()
        })
        .collect();
    // Subcluster s of cluster c takes every n_subclusters-th item of c, so
    // each subcluster still spans the popularity range.
    let sub_items: Vec<Vec<Vec<u32>>> = cluster_items
        .iter()
        .map(|items| {
            (0..cfg.n_subclusters)
                .map(|s| {
                    items
                        .iter()
                        .copied()
                        .skip(s)
                        .step_by(cfg.n_subclusters)
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut pairs: Vec<(String, String)> = Vec::new();
    for u in 0..cfg.n_users {
        let own = u % cfg.n_clusters;
        let own_sub = (u / cfg.n_clusters) % cfg.n_subclusters;
        let m = rng.random_range(cfg.min_per_user..=cfg.max_per_user);
        let mut chosen: HashSet<u32> = HashSet::with_capacity(m);
        let mut attempts = 0;
        while chosen.len() < m && attempts < 40 * m {
            attempts += 1;
            let pool = if rng.random::<f64>() < cfg.in_cluster_prob {
                let sub = &sub_items[own][own_sub];
                if cfg.n_subclusters > 1
                    && !sub.is_empty()
                    && rng.random::<f64>() < cfg.in_subcluster_prob
                {
                    sub
                } else {
                    &cluster_items[own]
                }
            } else {
                &cluster_items[rng.random_range(0..cfg.n_clusters)]
            };
            let x: f64 = rng.random();
            let idx = ((pool.len() as f64) * x.powf(cfg.popularity_skew)) as usize;
            chosen.insert(pool[idx.min(pool.len() - 1)]);
        }
        // Rejection sampling can stall on tiny clusters; top up in order.
        if chosen.len() < m.min(cfg.n_items) {
            for pool in std::iter::once(&cluster_items[own]).chain(&cluster_items) {
                for &i in pool {
                    if chosen.len() >= m.min(cfg.n_items) {
                        break;
                    }
                    chosen.insert(i);
                }
            }
        }
        let mut chosen: Vec<u32> = chosen.into_iter().collect();
        chosen.sort_unstable();
        for i in chosen {
            pairs.push((format!("u{u}"), format!("i{i}")));
        }
    }
    InteractionTable::from_pairs(pairs)
}
