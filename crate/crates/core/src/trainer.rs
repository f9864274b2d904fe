//! Training loop: one sampled batch per epoch, adaptive-moment updates with
//! per-epoch learning-rate decay, periodic held-out evaluation with optional
//! early stopping, and a structured per-epoch log.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{IntervalGraphs, TargetInterval};
use crate::error::{Error, Result};
use crate::evaluator::{build_tasks, evaluate, CandidatePolicy, MetricsReport};
use crate::fusion::RankingBatch;
use crate::model::{prepare, EvalEmbeddings, Model, ModelConfig, Prepared};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Optimization schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Users sampled per batch (one batch per epoch).
    pub batch_size: usize,
    /// Initial learning rate ρ.
    pub learning_rate: f64,
    /// Multiplicative decay per epoch: epoch `e` (1-based) runs at
    /// `ρ · decay^(e-1)`.
    pub lr_decay: f64,
    pub seed: u64,
    /// Evaluate HR/NDCG on the held-out targets every this many epochs;
    /// 0 disables mid-training evaluation.
    pub eval_every: usize,
    /// Early-stop after this many evaluations without an HR@10 improvement;
    /// 0 disables early stopping. The best snapshot is restored either way.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: 0.96,
            seed: 0,
            eval_every: 0,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::Config(
                "learning_rate must be >= 0 and lr_decay in (0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first: BTreeMap<ParamId, Tensor>,
    second: BTreeMap<ParamId, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update; only parameters present in `grads` are touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (&id, grad) in grads {
            let value = store.get_mut(id);
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Tensor::zeros(value.rows, value.cols));
            let v = self
                .second
                .entry(id)
                .or_insert_with(|| Tensor::zeros(value.rows, value.cols));
            for k in 0..value.data.len() {
                let g = grad.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * g;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[k] / bc1;
                let v_hat = v.data[k] / bc2;
                value.data[k] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Samples a batch of `(user, positive, negative)` triples: users with at
/// least one target interaction, each contributing `n_pr` pairs; positives
/// uniform over the user's target items, negatives rejection-sampled from
/// the complement.
pub fn sample_batch<R: Rng>(
    rng: &mut R,
    target: &TargetInterval,
    batch_size: usize,
    n_pr: usize,
) -> Result<RankingBatch> {
    let mut eligible = target.users_with_targets();
    if eligible.is_empty() {
        return Err(Error::Data("no users with target-interval items".into()));
    }
    if eligible.len() > batch_size {
        eligible.shuffle_in_place(rng);
        eligible.truncate(batch_size);
        eligible.sort_unstable();
    }

    let mut batch = RankingBatch::default();
    for &user in &eligible {
        let positives = target.items_of(user);
        if positives.len() >= target.num_items {
            return Err(Error::Data(format!(
                "user {user} interacted with every item; cannot sample a negative"
            )));
        }
        let positive_set: BTreeSet<usize> = positives.iter().copied().collect();
        for _ in 0..n_pr {
            let p = positives[rng.random_range(0..positives.len())];
            let n = loop {
                let candidate = rng.random_range(0..target.num_items);
                if !positive_set.contains(&candidate) {
                    break candidate;
                }
            };
            batch.users.push(user);
            batch.positives.push(p);
            batch.negatives.push(n);
        }
    }
    Ok(batch)
}

trait ShuffleInPlace {
    fn shuffle_in_place<R: Rng>(&mut self, rng: &mut R);
}

impl ShuffleInPlace for Vec<usize> {
    fn shuffle_in_place<R: Rng>(&mut self, rng: &mut R) {
        use rand::seq::SliceRandom;
        self.as_mut_slice().shuffle(rng);
    }
}

/// One epoch's log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_gru: f64,
    pub loss_mean: f64,
    pub mean_gate: f64,
    pub lr: f64,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hr10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg10: Option<f64>,
}

/// Training result: the fitted model plus logs and final held-out metrics.
pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub final_metrics: MetricsReport,
    /// Epoch whose parameters were kept (differs from `epochs` when early
    /// stopping restored an earlier snapshot).
    pub kept_epoch: usize,
}

/// Event-level disjointness between the held-out target and every model
/// input; violated leakage is an error.
pub fn leakage_check(inputs: &IntervalGraphs, target: &TargetInterval) -> Result<()> {
    let mut input_events: BTreeSet<(usize, usize, i64)> = BTreeSet::new();
    let mut max_input_ts = i64::MIN;
    for t in 0..inputs.num_intervals {
        for (user, seq) in inputs.sequences[t].iter().enumerate() {
            for &(item, ts) in seq {
                input_events.insert((user, item, ts));
                max_input_ts = max_input_ts.max(ts);
            }
        }
    }
    for &(user, item, ts) in &target.events {
        if input_events.contains(&(user, item, ts)) {
            return Err(Error::Data(format!(
                "target event ({user}, {item}, {ts}) leaked into the inputs"
            )));
        }
        if ts <= max_input_ts {
            return Err(Error::Data(format!(
                "target event ({user}, {item}, {ts}) predates the last input event"
            )));
        }
    }
    Ok(())
}

/// Runs the full loop over refined input graphs and held-out targets.
pub fn train(
    inputs: &IntervalGraphs,
    target: &TargetInterval,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    leakage_check(inputs, target)?;

    let mut model = Model::init(
        inputs.num_users,
        inputs.num_items,
        inputs.num_intervals,
        model_cfg,
        cfg.seed,
    )?;
    let prep = prepare(inputs, model.cfg.max_seq_len);
    let tasks = build_tasks(inputs, target, CandidatePolicy::FullCatalog);
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = ChaCha8Rng::seed_from_u64(master.random());
    let mut adam = Adam::default();

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut evals_since_best = 0usize;
    let mut kept_epoch = cfg.epochs;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1);
        let step_seed: u64 = master.random();

        let batch = sample_batch(&mut sampler, target, cfg.batch_size, model.cfg.loss.n_pr)?;
        let mut tape = Tape::train(step_seed);
        let (total, loss_gru, loss_mean, fwd) =
            model.training_loss(&model.store, &mut tape, &prep, &batch)?;
        let loss_value = tape.value(total).scalar()?;
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became non-finite at epoch {epoch}"
            )));
        }
        let loss_gru_value = tape.value(loss_gru).scalar()?;
        let loss_mean_value = tape.value(loss_mean).scalar()?;
        let gate_values = tape.value(fwd.gate);
        let mean_gate = gate_values.data.iter().sum::<f64>() / gate_values.rows as f64;

        tape.backward(total)?;
        adam.step(&mut model.store, &tape.param_grads(), lr);

        let mut log = EpochLog {
            epoch,
            loss: loss_value,
            loss_gru: loss_gru_value,
            loss_mean: loss_mean_value,
            mean_gate,
            lr,
            wall_ms: 0.0,
            hr10: None,
            ndcg10: None,
        };

        let evaluate_now = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        if evaluate_now && !tasks.is_empty() {
            let emb = model.eval_embeddings(&prep)?;
            let metrics = evaluate(|u, j| emb.score(u, j), &tasks, &[10])?;
            let hr10 = metrics.hr[0];
            log.hr10 = Some(hr10);
            log.ndcg10 = Some(metrics.ndcg[0]);

            let improved = best.as_ref().map_or(true, |(b, _, _)| hr10 > *b);
            if improved {
                best = Some((hr10, model.store.clone(), epoch));
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
                if cfg.patience > 0 && evals_since_best >= cfg.patience {
                    log.wall_ms = started.elapsed().as_secs_f64() * 1e3;
                    logs.push(log);
                    break;
                }
            }
        }
        log.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        logs.push(log);
    }

    // Keep the best evaluated snapshot when early stopping was active.
    if cfg.patience > 0 {
        if let Some((_, snapshot, epoch)) = best {
            model.store = snapshot;
            kept_epoch = epoch;
        }
    } else {
        kept_epoch = logs.last().map_or(0, |l| l.epoch);
    }

    let emb = model.eval_embeddings(&prep)?;
    let final_metrics = if tasks.is_empty() {
        MetricsReport {
            topn: vec![5, 10, 20],
            hr: vec![0.0; 3],
            ndcg: vec![0.0; 3],
            users_evaluated: 0,
        }
    } else {
        evaluate(|u, j| emb.score(u, j), &tasks, &[5, 10, 20])?
    };

    Ok(TrainOutcome {
        model,
        logs,
        final_metrics,
        kept_epoch,
    })
}

/// Eval-mode embeddings for an already-trained model over fresh graphs.
pub fn embeddings_for(model: &Model, inputs: &IntervalGraphs) -> Result<(Prepared, EvalEmbeddings)> {
    let prep = prepare(inputs, model.cfg.max_seq_len);
    let emb = model.eval_embeddings(&prep)?;
    Ok((prep, emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_interval_graphs, split_target};
    use crate::encoder::ShortTermConfig;
    use crate::synthetic::{generate, SyntheticSpec};

    fn tiny_setup() -> (IntervalGraphs, TargetInterval) {
        let data = generate(&SyntheticSpec {
            num_users: 6,
            num_items: 12,
            num_communities: 2,
            num_input_intervals: 3,
            events_per_interval: 2,
            coverage: 0.7,
            seed: 5,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let graphs = build_interval_graphs(&data.log, 4).unwrap();
        split_target(graphs).unwrap()
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            short: ShortTermConfig {
                dim: 4,
                layers: 1,
                edge_dropout: 0.0,
                message_dropout: 0.0,
            },
            num_heads: 2,
            attention_layers: 2,
            max_seq_len: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn sample_batch_respects_membership() {
        let (_, target) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let batch = sample_batch(&mut rng, &target, 64, 2).unwrap();
            for k in 0..batch.len() {
                let items = target.items_of(batch.users[k]);
                assert!(items.contains(&batch.positives[k]));
                assert!(!items.contains(&batch.negatives[k]));
            }
        }
    }

    #[test]
    fn sample_batch_forced_negative() {
        // Two items, user interacted with item 0 only: negative must be 1.
        let target = TargetInterval {
            num_users: 1,
            num_items: 2,
            events: vec![(0, 0, 100)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let batch = sample_batch(&mut rng, &target, 8, 1).unwrap();
            assert_eq!(batch.negatives, vec![1]);
        }
    }

    #[test]
    fn sample_batch_degenerate_user_errors() {
        let target = TargetInterval {
            num_users: 1,
            num_items: 2,
            events: vec![(0, 0, 100), (0, 1, 101)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_batch(&mut rng, &target, 8, 1).is_err());
    }

    #[test]
    fn sample_batch_seeded_reproducible() {
        let (_, target) = tiny_setup();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ba = sample_batch(&mut a, &target, 16, 3).unwrap();
        let bb = sample_batch(&mut b, &target, 16, 3).unwrap();
        assert_eq!(ba.users, bb.users);
        assert_eq!(ba.positives, bb.positives);
        assert_eq!(ba.negatives, bb.negatives);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (inputs, target) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let outcome = train(&inputs, &target, tiny_model_cfg(), &cfg).unwrap();
        let fresh = Model::init(
            inputs.num_users,
            inputs.num_items,
            inputs.num_intervals,
            tiny_model_cfg(),
            cfg.seed,
        )
        .unwrap();
        for (_, name, tensor) in fresh.store.iter() {
            let id = outcome.model.store.id_of(name).unwrap();
            assert_eq!(outcome.model.store.get(id), tensor, "{name} changed at lr=0");
        }
    }

    #[test]
    fn adam_touches_only_parameters_with_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_flat(1, 2, vec![1.0, 2.0]));
        let b = store.add("b", Tensor::from_flat(1, 2, vec![3.0, 4.0]));
        let mut adam = Adam::default();
        let mut grads = BTreeMap::new();
        grads.insert(a, Tensor::from_flat(1, 2, vec![0.5, 0.0]));
        adam.step(&mut store, &grads, 0.1);
        assert_ne!(store.get(a).data[0], 1.0);
        assert_eq!(store.get(a).data[1], 2.0, "zero-grad coord unchanged");
        assert_eq!(store.get(b).data, vec![3.0, 4.0], "no-grad tensor unchanged");
    }

    #[test]
    fn lr_decays_exactly() {
        let (inputs, target) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay: 0.96,
            ..TrainConfig::default()
        };
        let outcome = train(&inputs, &target, tiny_model_cfg(), &cfg).unwrap();
        for (i, log) in outcome.logs.iter().enumerate() {
            assert_eq!(log.lr, 1e-3 * 0.96f64.powi(i as i32));
        }
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let (inputs, target) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut model_cfg = tiny_model_cfg();
        model_cfg.short.edge_dropout = 0.3;
        model_cfg.short.message_dropout = 0.2;
        let a = train(&inputs, &target, model_cfg.clone(), &cfg).unwrap();
        let b = train(&inputs, &target, model_cfg, &cfg).unwrap();
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
        }
        assert_eq!(a.final_metrics, b.final_metrics);
    }

    #[test]
    fn leakage_check_passes_for_split_and_catches_injection() {
        let (inputs, target) = tiny_setup();
        leakage_check(&inputs, &target).unwrap();

        let mut poisoned = inputs.clone();
        let &(u, i, ts) = &target.events[0];
        poisoned.sequences[0][u].push((i, ts));
        assert!(leakage_check(&poisoned, &target).is_err());
    }

    #[test]
    fn divergence_guard_trips_on_huge_lr() {
        let (inputs, target) = tiny_setup();
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 8,
            learning_rate: 1e18,
            lr_decay: 1.0,
            ..TrainConfig::default()
        };
        match train(&inputs, &target, tiny_model_cfg(), &cfg) {
            Err(Error::Divergence(_)) => {}
            Err(other) => panic!("expected divergence, got {other}"),
            Ok(outcome) => {
                // Extremely aggressive steps may still converge on a tiny
                // problem; accept only finite losses in that case.
                assert!(outcome.logs.iter().all(|l| l.loss.is_finite()));
            }
        }
    }
}
