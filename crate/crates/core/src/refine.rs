//! Interaction refinement: item similarity, community-based noise
//! down-weighting, and edge augmentation.
//!
//! Per interval: compute item-item similarities from the co-interaction
//! graph, run Louvain over each active user's induced similarity subgraph to
//! flag items that end up in singleton communities, scale those entries by
//! `beta`, then add synthetic interactions — for users inactive this interval
//! from their previous-interval items, for active users from similar but
//! untouched items above `min_sim`.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{IntervalGraphs, ItemItemGraph};
use crate::error::Result;
use crate::louvain::{louvain, WeightedGraph};

/// Division guard for the similarity denominator; pairs that share no
/// co-interaction support get `numerator / EPSILON`.
pub const SIM_EPSILON: f64 = 1e-8;

/// Tuning knobs for refinement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Multiplier applied to noisy entries; 1 disables down-weighting,
    /// 0 deletes the entry.
    pub beta: f64,
    /// Similarity threshold for augmentation, in `(0, 1]`.
    pub min_sim: f64,
    /// Cap on augmented edges per user per interval.
    pub max_aug_per_user: usize,
    /// Keep only the `k` most similar neighbors per item; `None` = exact.
    pub top_k: Option<usize>,
    /// Users with fewer items than this in an interval skip noise detection.
    pub min_items_for_detection: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            min_sim: 0.7,
            max_aug_per_user: 10,
            top_k: Some(50),
            min_items_for_detection: 3,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(crate::error::Error::Config(format!(
                "beta must be in [0,1], got {}",
                self.beta
            )));
        }
        if !(self.min_sim > 0.0 && self.min_sim <= 1.0) {
            return Err(crate::error::Error::Config(format!(
                "min_sim must be in (0,1], got {}",
                self.min_sim
            )));
        }
        Ok(())
    }
}

/// Sparse symmetric item-similarity matrix for one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// Neighbor lists sorted by item id; `(j, sim)` with `j != i`.
    rows: Vec<Vec<(usize, f64)>>,
    pub interval: usize,
}

impl SimilarityMatrix {
    pub fn num_items(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows[i]
            .binary_search_by_key(&j, |&(n, _)| n)
            .ok()
            .map(|pos| self.rows[i][pos].1)
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn num_entries(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }
}

/// Computes pairwise item similarities from a normalized co-interaction
/// graph: `sim(i,j) = ((Z+I)(Z+I)ᵀ)[i,j] / (Z[i]·Z[j] + ε)` — paths of
/// length up to two, with direct links up-weighted by the identity term and
/// the denominator discounting popular items. Pairs with zero numerator are
/// omitted, as is the diagonal.
pub fn item_similarity(z: &ItemItemGraph, top_k: Option<usize>) -> SimilarityMatrix {
    let n = z.num_items();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            // numerator[j] = Σ_k (Z+I)[i,k]·(Z+I)[j,k]; accumulate by walking
            // k over row i's support (plus the identity entry), then j over
            // row k's support. Denominator likewise without the identity.
            let mut num: BTreeMap<usize, f64> = BTreeMap::new();
            let mut den: BTreeMap<usize, f64> = BTreeMap::new();

            let row_i: Vec<(usize, f64)> = z
                .neighbors(i)
                .iter()
                .map(|(&k, &w)| (k, w))
                .chain(std::iter::once((i, 1.0)))
                .collect();
            for &(k, w_ik) in &row_i {
                // (Z+I) row k support: neighbors of k plus k itself.
                for (&j, &w_kj) in z.neighbors(k) {
                    *num.entry(j).or_insert(0.0) += w_ik * w_kj;
                }
                *num.entry(k).or_insert(0.0) += w_ik * 1.0;
            }
            for (&k, &w_ik) in z.neighbors(i) {
                for (&j, &w_kj) in z.neighbors(k) {
                    *den.entry(j).or_insert(0.0) += w_ik * w_kj;
                }
            }

            let mut out: Vec<(usize, f64)> = num
                .into_iter()
                .filter(|&(j, v)| j != i && v > 0.0)
                .map(|(j, v)| {
                    let d = den.get(&j).copied().unwrap_or(0.0);
                    (j, v / (d + SIM_EPSILON))
                })
                .collect();
            if let Some(k) = top_k {
                if out.len() > k {
                    // Highest similarity first, item id breaking ties.
                    out.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0))
                    });
                    out.truncate(k);
                    out.sort_by_key(|&(j, _)| j);
                }
            }
            out
        })
        .collect();

    let mut sim = SimilarityMatrix {
        rows,
        interval: z.interval,
    };
    // Truncation is per-row; restore symmetry by keeping an entry when either
    // endpoint retained it.
    if top_k.is_some() {
        symmetrize(&mut sim);
    }
    sim
}

fn symmetrize(sim: &mut SimilarityMatrix) {
    let n = sim.rows.len();
    let mut extra: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for &(j, v) in &sim.rows[i] {
            if sim.get(j, i).is_none() {
                extra[j].push((i, v));
            }
        }
    }
    for (i, mut add) in extra.into_iter().enumerate() {
        if !add.is_empty() {
            sim.rows[i].append(&mut add);
            sim.rows[i].sort_by_key(|&(j, _)| j);
        }
    }
}

/// Items in a user's interval row whose Louvain community (over the induced
/// similarity subgraph) is a singleton. Detection is skipped for users with
/// fewer than `min_items_for_detection` items.
pub fn detect_noise(
    user: usize,
    interval: usize,
    sim: &SimilarityMatrix,
    graphs: &IntervalGraphs,
    cfg: &RefineConfig,
) -> Result<Vec<usize>> {
    let items: Vec<usize> = graphs.user_item[interval]
        .row(user)
        .keys()
        .copied()
        .collect();
    if items.len() < cfg.min_items_for_detection {
        return Ok(Vec::new());
    }
    let mut sub = WeightedGraph::new(items.len());
    for (a_pos, &a) in items.iter().enumerate() {
        for (b_pos, &b) in items.iter().enumerate().skip(a_pos + 1) {
            if let Some(s) = sim.get(a, b) {
                if s > 0.0 {
                    sub.add_edge(a_pos, b_pos, s);
                }
            }
        }
    }
    let partition = louvain(&sub)?;
    Ok(partition
        .singletons()
        .into_iter()
        .map(|pos| items[pos])
        .collect())
}

/// Candidate synthetic edges for a user inactive in `interval` but active in
/// the previous one: items above `min_sim` from any original previous-interval
/// item, best-first, capped.
pub fn augment_inactive(
    user: usize,
    interval: usize,
    sim: &SimilarityMatrix,
    graphs: &IntervalGraphs,
    cfg: &RefineConfig,
) -> Vec<(usize, f64)> {
    if interval == 0 {
        return Vec::new();
    }
    if !graphs.user_item[interval].row(user).is_empty() {
        return Vec::new();
    }
    let sources = graphs.original_items(interval - 1, user);
    if sources.is_empty() {
        return Vec::new();
    }
    collect_candidates(&sources, sim, graphs, user, interval, cfg)
}

/// Candidate synthetic edges for a user active in `interval`: similar but
/// untouched items above `min_sim`, best-first, capped.
pub fn augment_active(
    user: usize,
    interval: usize,
    sim: &SimilarityMatrix,
    graphs: &IntervalGraphs,
    cfg: &RefineConfig,
) -> Vec<(usize, f64)> {
    let sources: Vec<usize> = graphs.user_item[interval]
        .row(user)
        .keys()
        .copied()
        .collect();
    if sources.is_empty() {
        return Vec::new();
    }
    collect_candidates(&sources, sim, graphs, user, interval, cfg)
}

fn collect_candidates(
    sources: &[usize],
    sim: &SimilarityMatrix,
    graphs: &IntervalGraphs,
    user: usize,
    interval: usize,
    cfg: &RefineConfig,
) -> Vec<(usize, f64)> {
    // Keep the best similarity per candidate; never touch existing entries.
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for &i in sources {
        for &(j, s) in sim.neighbors(i) {
            if s >= cfg.min_sim && graphs.user_item[interval].weight(user, j).is_none() {
                let e = best.entry(j).or_insert(s);
                if s > *e {
                    *e = s;
                }
            }
        }
    }
    let mut candidates: Vec<(usize, f64)> = best.into_iter().collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    candidates.truncate(cfg.max_aug_per_user);
    candidates
        .into_iter()
        .map(|(j, s)| (j, s.min(1.0)))
        .collect()
}

/// Per-interval and total refinement statistics, mirroring the usual
/// preprocessing report columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementReport {
    pub per_interval: Vec<IntervalStats>,
    pub total_initial: usize,
    pub total_noisy: usize,
    pub total_augmented: usize,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalStats {
    pub interval: usize,
    pub initial_interactions: usize,
    pub noisy_interactions: usize,
    pub augmented_interactions: usize,
}

/// Runs the full refinement pass over every interval in place.
pub fn refine_all(graphs: &mut IntervalGraphs, cfg: &RefineConfig) -> Result<RefinementReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut per_interval = Vec::with_capacity(graphs.num_intervals);

    for t in 0..graphs.num_intervals {
        let initial = graphs.user_item[t].num_entries();
        let sim = item_similarity(&graphs.item_item[t], cfg.top_k);

        // Noise pass: per-user results computed in parallel (each user reads
        // only its own row), applied serially in user order.
        let noisy: Vec<Vec<usize>> = (0..graphs.num_users)
            .into_par_iter()
            .map(|user| {
                if graphs.user_item[t].row(user).is_empty() {
                    Ok(Vec::new())
                } else {
                    detect_noise(user, t, &sim, graphs, cfg)
                }
            })
            .collect::<Result<_>>()?;
        let mut noisy_count = 0;
        for (user, items) in noisy.iter().enumerate() {
            for &item in items {
                graphs.user_item[t].scale(user, item, cfg.beta);
                noisy_count += 1;
            }
        }

        // Augmentation pass: the branch per user depends on activity.
        let additions: Vec<Vec<(usize, f64)>> = (0..graphs.num_users)
            .into_par_iter()
            .map(|user| {
                if graphs.user_item[t].row(user).is_empty() {
                    augment_inactive(user, t, &sim, graphs, cfg)
                } else {
                    augment_active(user, t, &sim, graphs, cfg)
                }
            })
            .collect();
        let mut augmented_count = 0;
        for (user, list) in additions.iter().enumerate() {
            for &(item, w) in list {
                graphs.user_item[t].set(user, item, w);
                augmented_count += 1;
            }
        }

        per_interval.push(IntervalStats {
            interval: t,
            initial_interactions: initial,
            noisy_interactions: noisy_count,
            augmented_interactions: augmented_count,
        });
    }

    Ok(RefinementReport {
        total_initial: per_interval.iter().map(|s| s.initial_interactions).sum(),
        total_noisy: per_interval.iter().map(|s| s.noisy_interactions).sum(),
        total_augmented: per_interval.iter().map(|s| s.augmented_interactions).sum(),
        per_interval,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
