//! Ranking protocol and Top-N metrics.
//!
//! Each evaluated user ranks a candidate set (full catalog minus the items
//! they touched during the input intervals, or a sampled subset) and is
//! scored by whether the held-out item lands in the top N (HR@N) and at what
//! discount (NDCG@N, binary relevance).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{IntervalGraphs, TargetInterval};
use crate::error::{Error, Result};

/// One user's ranking problem.
#[derive(Debug, Clone)]
pub struct RankingTask {
    pub user: usize,
    /// The held-out item (the user's earliest final-interval interaction).
    pub ground_truth: usize,
    /// Candidate items including the ground truth, ascending.
    pub candidates: Vec<usize>,
}

/// Candidate-set policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidatePolicy {
    /// Rank the whole catalog minus the user's input-interval items.
    FullCatalog,
    /// Rank the ground truth against `negatives` sampled non-interacted
    /// items (seeded).
    Sampled { negatives: usize, seed: u64 },
}

/// Builds one task per user with a held-out target. Users whose target also
/// appears among their input-interval interactions are skipped (the protocol
/// requires the ground truth to be a fresh candidate). Exclusion uses the
/// original event sequences, never augmented entries.
pub fn build_tasks(
    inputs: &IntervalGraphs,
    target: &TargetInterval,
    policy: CandidatePolicy,
) -> Vec<RankingTask> {
    let mut tasks = Vec::new();
    for user in target.users_with_targets() {
        let Some(ground_truth) = target.first_item_of(user) else {
            continue;
        };
        let mut seen = vec![false; inputs.num_items];
        for t in 0..inputs.num_intervals {
            for &(item, _) in &inputs.sequences[t][user] {
                seen[item] = true;
            }
        }
        if seen[ground_truth] {
            continue;
        }
        let full: Vec<usize> = (0..inputs.num_items).filter(|&j| !seen[j]).collect();
        if full.len() < 2 {
            continue;
        }
        let candidates = match policy {
            CandidatePolicy::FullCatalog => full,
            CandidatePolicy::Sampled { negatives, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (user as u64).wrapping_mul(0x9e3779b97f4a7c15));
                let mut pool: Vec<usize> =
                    full.iter().copied().filter(|&j| j != ground_truth).collect();
                pool.shuffle(&mut rng);
                pool.truncate(negatives);
                pool.push(ground_truth);
                pool.sort_unstable();
                pool
            }
        };
        tasks.push(RankingTask {
            user,
            ground_truth,
            candidates,
        });
    }
    tasks
}

/// Per-user outcome: the ground truth's 1-based rank among the candidates.
#[derive(Debug, Clone, Copy)]
pub struct UserRank {
    pub user: usize,
    pub rank: usize,
}

/// Ranks the candidates by `(score desc, item asc)` and locates the ground
/// truth. Scores must be finite; the candidate set must be non-empty.
pub fn rank_and_score(task: &RankingTask, scores: &[f64]) -> Result<UserRank> {
    if task.candidates.is_empty() {
        return Err(Error::Data(format!(
            "empty candidate set for user {}",
            task.user
        )));
    }
    if scores.len() != task.candidates.len() {
        return Err(Error::Data(format!(
            "got {} scores for {} candidates",
            scores.len(),
            task.candidates.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite candidate score for user {}",
            task.user
        )));
    }
    let mut order: Vec<usize> = (0..task.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(task.candidates[a].cmp(&task.candidates[b]))
    });
    let position = order
        .iter()
        .position(|&k| task.candidates[k] == task.ground_truth)
        .ok_or_else(|| {
            Error::Data(format!(
                "ground truth {} missing from candidates of user {}",
                task.ground_truth, task.user
            ))
        })?;
    Ok(UserRank {
        user: task.user,
        rank: position + 1,
    })
}

/// HR@N / NDCG@N means over evaluated users.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub topn: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl MetricsReport {
    pub fn hr_at(&self, n: usize) -> Option<f64> {
        self.topn.iter().position(|&k| k == n).map(|i| self.hr[i])
    }

    pub fn ndcg_at(&self, n: usize) -> Option<f64> {
        self.topn.iter().position(|&k| k == n).map(|i| self.ndcg[i])
    }

    /// Flat `{"HR@5": ..., "NDCG@5": ...}` JSON object.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = BTreeMap::new();
        for (i, &n) in self.topn.iter().enumerate() {
            map.insert(format!("HR@{n}"), serde_json::json!(self.hr[i]));
            map.insert(format!("NDCG@{n}"), serde_json::json!(self.ndcg[i]));
        }
        map.insert("users".into(), serde_json::json!(self.users_evaluated));
        serde_json::json!(map)
    }

    /// Aligned metric table, one row per cutoff.
    pub fn table_string(&self) -> String {
        let mut out = String::from("      |");
        for &n in &self.topn {
            out.push_str(&format!(" @{n:<6} |"));
        }
        out.push('\n');
        out.push_str("HR    |");
        for &v in &self.hr {
            out.push_str(&format!(" {v:<7.4}|"));
        }
        out.push('\n');
        out.push_str("NDCG  |");
        for &v in &self.ndcg {
            out.push_str(&format!(" {v:<7.4}|"));
        }
        out.push('\n');
        out
    }
}

/// With one binary-relevant item, `DCG = 1/log2(rank+1)` if it made the top
/// `n`, and the ideal ranking gives `IDCG = 1`.
pub fn ndcg_contribution(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Averages per-user hit flags and NDCG contributions.
pub fn aggregate(ranks: &[UserRank], topn: &[usize]) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::Data("no users to aggregate".into()));
    }
    let count = ranks.len() as f64;
    let mut hr = Vec::with_capacity(topn.len());
    let mut ndcg = Vec::with_capacity(topn.len());
    for &n in topn {
        let hits = ranks.iter().filter(|r| r.rank <= n).count() as f64;
        let gain: f64 = ranks.iter().map(|r| ndcg_contribution(r.rank, n)).sum();
        hr.push(hits / count);
        ndcg.push(gain / count);
    }
    Ok(MetricsReport {
        topn: topn.to_vec(),
        hr,
        ndcg,
        users_evaluated: ranks.len(),
    })
}

/// Scores every task with the given function and aggregates the metrics.
/// Per-user scoring is parallel; results are reduced in task order.
pub fn evaluate<F>(score: F, tasks: &[RankingTask], topn: &[usize]) -> Result<MetricsReport>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let ranks: Vec<UserRank> = tasks
        .par_iter()
        .map(|task| {
            let scores: Vec<f64> = task
                .candidates
                .iter()
                .map(|&j| score(task.user, j))
                .collect();
            rank_and_score(task, &scores)
        })
        .collect::<Result<_>>()?;
    aggregate(&ranks, topn)
}

/// Draws a random subset of size `k` without replacement (used by tests and
/// the synthetic generator).
pub fn sample_without_replacement<R: Rng>(
    pool: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut pool = pool.to_vec();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}
