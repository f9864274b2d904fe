//! Seeded synthetic interaction logs with planted community structure,
//! noise, and drift — the workload for tests and benchmarks.
//!
//! Items are partitioned into contiguous communities; each user draws from a
//! covered subset of one home community, with optional cross-community noise
//! and per-interval drift. The final interval holds exactly one target event
//! per user: a home-community item the user never touched during training.
//! Event timestamps sit on a fixed grid so slicing the produced log into
//! `num_input_intervals + 1` intervals reproduces the generation schedule.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{log_from_events_sized, InteractionLog};
use crate::error::{Error, Result};

/// Interval width on the generated timestamp grid.
pub const INTERVAL_SPAN: i64 = 1000;
/// Events occupy `[t·1000, t·1000 + 900]`, keeping equal-width slicing of
/// the observed range aligned with the generation grid.
const EVENT_SPAN: i64 = 900;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_communities: usize,
    /// Input intervals; the generator emits one extra target interval.
    pub num_input_intervals: usize,
    /// Events drawn per user per input interval.
    pub events_per_interval: usize,
    /// Fraction of the home community each user's pool covers, in `(0, 1]`.
    pub coverage: f64,
    /// Fraction of events replaced by cross-community noise, in `[0, 1]`.
    pub noise_rate: f64,
    /// Per-interval probability that a user drifts to another community.
    pub drift: f64,
    /// Plant noise as single-event intervals on globally unique junk items,
    /// which therefore acquire no co-interaction edges at all.
    pub isolate_noise: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 20,
            num_items: 30,
            num_communities: 3,
            num_input_intervals: 5,
            events_per_interval: 3,
            coverage: 0.9,
            noise_rate: 0.0,
            drift: 0.0,
            isolate_noise: false,
            seed: 0,
        }
    }
}

/// Ground truth planted by the generator.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    /// Community per item; `None` marks reserved junk items.
    pub item_community: Vec<Option<usize>>,
    /// Home community per user.
    pub user_community: Vec<usize>,
    /// Noise flag per interaction, aligned with `log.interactions`.
    pub noise_flags: Vec<bool>,
    /// Held-out target item per user, if one was generated.
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub log: InteractionLog,
    pub truth: SyntheticTruth,
}

fn event_ts(interval: usize, slot: usize, events_per_interval: usize) -> i64 {
    let spacing = EVENT_SPAN / events_per_interval.max(1) as i64;
    interval as i64 * INTERVAL_SPAN + slot as i64 * spacing
}

/// Generates a log plus planted ground truth, deterministically for a seed.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_inputs = spec.num_input_intervals;

    // Junk pool: one globally unique item per isolated-noise event.
    let junk_per_user = if spec.isolate_noise {
        (spec.noise_rate * t_inputs as f64).ceil() as usize
    } else {
        0
    };
    let total_junk = junk_per_user * spec.num_users;
    let community_items = spec.num_items - total_junk;
    if community_items < spec.num_communities {
        return Err(Error::Config(format!(
            "{} items cannot host {} communities plus {} junk slots",
            spec.num_items, spec.num_communities, total_junk
        )));
    }

    let mut item_community = vec![None; spec.num_items];
    let mut community_members: Vec<Vec<usize>> = vec![Vec::new(); spec.num_communities];
    for item in 0..community_items {
        let c = item * spec.num_communities / community_items;
        item_community[item] = Some(c);
        community_members[c].push(item);
    }

    let user_community: Vec<usize> = (0..spec.num_users).map(|u| u % spec.num_communities).collect();

    let mut events: Vec<(usize, usize, i64)> = Vec::new();
    let mut noise_events: BTreeSet<(usize, usize, i64)> = BTreeSet::new();
    let mut targets = vec![None; spec.num_users];
    let mut next_junk = community_items;

    for user in 0..spec.num_users {
        let home = user_community[user];
        let members = &community_members[home];
        let pool_size = ((spec.coverage * members.len() as f64).ceil() as usize)
            .clamp(1, members.len());
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let pool: Vec<usize> = shuffled[..pool_size].to_vec();
        let unseen: Vec<usize> = shuffled[pool_size..].to_vec();
        if !unseen.is_empty() {
            targets[user] = Some(unseen[rng.random_range(0..unseen.len())]);
        }

        let junk_intervals: BTreeSet<usize> = if junk_per_user > 0 {
            let all: Vec<usize> = (0..t_inputs).collect();
            crate::evaluator::sample_without_replacement(&all, junk_per_user, &mut rng)
                .into_iter()
                .collect()
        } else {
            BTreeSet::new()
        };

        for t in 0..t_inputs {
            if junk_intervals.contains(&t) {
                let junk = next_junk;
                next_junk += 1;
                let ts = event_ts(t, 0, spec.events_per_interval);
                events.push((user, junk, ts));
                noise_events.insert((user, junk, ts));
                continue;
            }
            // Drift: sample this interval from another community wholesale.
            let drifted = spec.drift > 0.0 && rng.random::<f64>() < spec.drift;
            let interval_pool: Vec<usize> = if drifted {
                let mut other = rng.random_range(0..spec.num_communities);
                if other == home && spec.num_communities > 1 {
                    other = (other + 1) % spec.num_communities;
                }
                community_members[other].clone()
            } else {
                pool.clone()
            };
            for k in 0..spec.events_per_interval {
                let ts = event_ts(t, k, spec.events_per_interval);
                let mut item = interval_pool[rng.random_range(0..interval_pool.len())];
                let mut is_noise = false;
                if !spec.isolate_noise
                    && spec.noise_rate > 0.0
                    && spec.num_communities > 1
                    && rng.random::<f64>() < spec.noise_rate
                {
                    let mut other = rng.random_range(0..spec.num_communities);
                    if other == home {
                        other = (other + 1) % spec.num_communities;
                    }
                    let members = &community_members[other];
                    item = members[rng.random_range(0..members.len())];
                    is_noise = true;
                }
                events.push((user, item, ts));
                if is_noise {
                    noise_events.insert((user, item, ts));
                }
            }
        }

        if let Some(target) = targets[user] {
            // All targets share the grid's final instant, anchoring t_max.
            events.push((user, target, t_inputs as i64 * INTERVAL_SPAN + EVENT_SPAN));
        }
    }

    if targets.iter().all(|t| t.is_none()) {
        return Err(Error::Config(
            "coverage leaves no unseen items: no held-out targets".into(),
        ));
    }

    let log = log_from_events_sized(&events, spec.num_users, spec.num_items)?;
    let noise_flags = log
        .interactions
        .iter()
        .map(|x| noise_events.contains(&(x.user, x.item, x.timestamp)))
        .collect();

    Ok(SyntheticData {
        log,
        truth: SyntheticTruth {
            item_community,
            user_community,
            noise_flags,
            targets,
        },
    })
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    if spec.num_users == 0 || spec.num_items == 0 {
        return Err(Error::Config("need at least one user and item".into()));
    }
    if spec.num_communities == 0 || spec.num_communities > spec.num_items {
        return Err(Error::Config("invalid community count".into()));
    }
    if spec.num_input_intervals == 0 || spec.events_per_interval == 0 {
        return Err(Error::Config("need at least one interval and event".into()));
    }
    if !(0.0..=1.0).contains(&spec.coverage) || spec.coverage == 0.0 {
        return Err(Error::Config(format!(
            "coverage must be in (0,1], got {}",
            spec.coverage
        )));
    }
    for (name, v) in [("noise_rate", spec.noise_rate), ("drift", spec.drift)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
        }
    }
    Ok(())
}
