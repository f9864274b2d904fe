//! Full model assembly: per-interval encoders feeding the three long-term
//! views, the adaptive gate, and the evaluation-side scorer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Idx, Tape};
use crate::corpus::IntervalGraphs;
use crate::encoder::{
    edge_dropout, encode_interval, normalize_adjacency, EncoderAdjacency, ShortTermConfig,
};
use crate::error::{Error, Result};
use crate::fusion::{self, BranchInputs, GateParams, LossConfig};
use crate::temporal::{
    gru_sequence, instant_attention, interval_attention, mean_pool, AttentionParams, GruParams,
    PositionTable, TemporalConfig,
};
use crate::tensor::{ParamId, ParamStore, Tensor};

const INIT_STD: f64 = 0.1;

/// Everything needed to instantiate and run the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub short: ShortTermConfig,
    /// Attention heads for both attention stacks.
    pub num_heads: usize,
    /// Depth of the instant-level self-attention stack.
    pub attention_layers: usize,
    /// Maximum instant-sequence length `M`.
    pub max_seq_len: usize,
    pub loss: LossConfig,
    /// Use the gate's value in the loss coefficients without gradient flow.
    pub detach_gate_in_loss: bool,
    /// Ablation: drop the mean-level branch entirely.
    pub disable_mean_branch: bool,
    /// Ablation: drop the recurrent/attentive branch entirely.
    pub disable_gru_branch: bool,
    /// Ablation: replace the learned gate with a constant.
    pub fixed_gate: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            short: ShortTermConfig::default(),
            num_heads: 2,
            attention_layers: 2,
            max_seq_len: 30,
            loss: LossConfig::default(),
            detach_gate_in_loss: false,
            disable_mean_branch: false,
            disable_gru_branch: false,
            fixed_gate: None,
        }
    }
}

impl ModelConfig {
    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig {
            dim: self.short.dim,
            input_dim: self.short.layers * self.short.dim,
            num_heads: self.num_heads,
            attention_layers: self.attention_layers,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.short.validate()?;
        self.temporal().validate()?;
        self.loss.validate()?;
        if let Some(v) = self.fixed_gate {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "fixed_gate must be in [0,1], got {v}"
                )));
            }
        }
        if self.disable_mean_branch && self.disable_gru_branch {
            return Err(Error::Config(
                "cannot disable both prediction branches".into(),
            ));
        }
        Ok(())
    }

    /// Effective blend weight for the two hinge terms, honoring ablations.
    pub fn effective_lambda1(&self) -> f64 {
        if self.disable_mean_branch {
            1.0
        } else if self.disable_gru_branch {
            0.0
        } else {
            self.loss.lambda1
        }
    }
}

/// Immutable per-job inputs: normalized adjacencies and instant sequences.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub adjacency: Vec<EncoderAdjacency>,
    /// Per user, most recent items across all input intervals, time order.
    pub instant_sequences: Vec<Vec<usize>>,
    pub num_users: usize,
    pub num_items: usize,
}

/// Normalizes every input interval and builds the per-user recent-item
/// windows fed to the instant-level attention.
pub fn prepare(graphs: &IntervalGraphs, max_seq_len: usize) -> Prepared {
    let adjacency = graphs.user_item.iter().map(normalize_adjacency).collect();
    let mut instant_sequences = vec![Vec::new(); graphs.num_users];
    for t in 0..graphs.num_intervals {
        for (user, seq) in graphs.sequences[t].iter().enumerate() {
            for &(item, _) in seq {
                instant_sequences[user].push(item);
            }
        }
    }
    for seq in &mut instant_sequences {
        if seq.len() > max_seq_len {
            seq.drain(..seq.len() - max_seq_len);
        }
    }
    Prepared {
        adjacency,
        instant_sequences,
        num_users: graphs.num_users,
        num_items: graphs.num_items,
    }
}

/// The model: a parameter store plus the ids of every component.
pub struct Model {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    pub num_users: usize,
    pub num_items: usize,
    pub num_intervals: usize,
    user_tables: Vec<ParamId>,
    item_tables: Vec<ParamId>,
    user_gru: GruParams,
    item_gru: GruParams,
    user_attention: AttentionParams,
    item_attention: AttentionParams,
    instant_layers: Vec<AttentionParams>,
    positions: PositionTable,
    mean_proj_user: ParamId,
    mean_proj_item: ParamId,
    gate: GateParams,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// Per-interval `(I, L·d)` short-term user embeddings.
    pub short_users: Vec<Idx>,
    /// Per-interval `(J, L·d)` short-term item embeddings.
    pub short_items: Vec<Idx>,
    pub branches: BranchInputs,
    /// `(I, 1)` gate values in `(0, 1)`.
    pub gate: Idx,
}

impl Model {
    pub fn init(
        num_users: usize,
        num_items: usize,
        num_intervals: usize,
        cfg: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_intervals == 0 {
            return Err(Error::Config("need at least one input interval".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.short.dim;
        let wide = cfg.short.layers * d;

        let user_tables = (0..num_intervals)
            .map(|t| {
                store.add(
                    &format!("embed/user/t{t:03}"),
                    Tensor::randn(num_users, d, INIT_STD, &mut rng),
                )
            })
            .collect();
        let item_tables = (0..num_intervals)
            .map(|t| {
                store.add(
                    &format!("embed/item/t{t:03}"),
                    Tensor::randn(num_items, d, INIT_STD, &mut rng),
                )
            })
            .collect();
        let user_gru = GruParams::init(&mut store, "gru/user", wide, d, INIT_STD, &mut rng);
        let item_gru = GruParams::init(&mut store, "gru/item", wide, d, INIT_STD, &mut rng);
        let user_attention =
            AttentionParams::init(&mut store, "attn/interval/user", d, cfg.num_heads, INIT_STD, &mut rng);
        let item_attention =
            AttentionParams::init(&mut store, "attn/interval/item", d, cfg.num_heads, INIT_STD, &mut rng);
        let instant_layers = (0..cfg.attention_layers)
            .map(|l| {
                AttentionParams::init(
                    &mut store,
                    &format!("attn/instant/layer{l}"),
                    d,
                    cfg.num_heads,
                    INIT_STD,
                    &mut rng,
                )
            })
            .collect();
        let positions =
            PositionTable::init(&mut store, "positions", cfg.max_seq_len, d, INIT_STD, &mut rng);
        let mean_proj_user = store.add("mean/proj/user", Tensor::randn(wide, d, INIT_STD, &mut rng));
        let mean_proj_item = store.add("mean/proj/item", Tensor::randn(wide, d, INIT_STD, &mut rng));
        let gate = GateParams::init(&mut store, "gate", d, INIT_STD, &mut rng);

        Ok(Self {
            store,
            cfg,
            num_users,
            num_items,
            num_intervals,
            user_tables,
            item_tables,
            user_gru,
            item_gru,
            user_attention,
            item_attention,
            instant_layers,
            positions,
            mean_proj_user,
            mean_proj_item,
            gate,
        })
    }

    /// Builds the whole computation graph for one step. Edge and message
    /// dropout fire only on training tapes.
    pub fn forward(&self, tape: &mut Tape, prep: &Prepared) -> Result<Forward> {
        self.forward_with(&self.store, tape, prep)
    }

    /// Like [`Model::forward`] but reading parameter values from an alternate
    /// store with the same layout (finite-difference checks perturb a copy).
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        prep: &Prepared,
    ) -> Result<Forward> {
        if prep.adjacency.len() != self.num_intervals {
            return Err(Error::Data(format!(
                "prepared {} intervals, model expects {}",
                prep.adjacency.len(),
                self.num_intervals
            )));
        }
        let d = self.cfg.short.dim;

        let mut short_users = Vec::with_capacity(self.num_intervals);
        let mut short_items = Vec::with_capacity(self.num_intervals);
        for t in 0..self.num_intervals {
            let adj = if tape.is_train() && self.cfg.short.edge_dropout > 0.0 {
                edge_dropout(&prep.adjacency[t], self.cfg.short.edge_dropout, tape.rng_mut())
            } else {
                prep.adjacency[t].clone()
            };
            let e_u = tape.param(store, self.user_tables[t]);
            let e_v = tape.param(store, self.item_tables[t]);
            let (u, v) = encode_interval(tape, &adj, e_u, e_v, &self.cfg.short)?;
            short_users.push(u);
            short_items.push(v);
        }

        let zeros_users = || Tensor::zeros(prep.num_users, d);
        let zeros_items = || Tensor::zeros(prep.num_items, d);

        let (user_interval, item_interval, user_instant) = if self.cfg.disable_gru_branch {
            let zu = tape.constant(zeros_users());
            let zv = tape.constant(zeros_items());
            let zi = tape.constant(zeros_users());
            (zu, zv, zi)
        } else {
            let user_hidden = gru_sequence(tape, store, &self.user_gru, &short_users)?;
            let item_hidden = gru_sequence(tape, store, &self.item_gru, &short_items)?;
            let e_bar_u =
                interval_attention(tape, store, &self.user_attention, &user_hidden)?;
            let e_bar_v =
                interval_attention(tape, store, &self.item_attention, &item_hidden)?;
            let e_tilde_u = instant_attention(
                tape,
                store,
                &self.instant_layers,
                &self.positions,
                e_bar_v,
                &prep.instant_sequences,
            )?;
            (e_bar_u, e_bar_v, e_tilde_u)
        };

        let (user_mean, item_mean) = if self.cfg.disable_mean_branch {
            let zu = tape.constant(zeros_users());
            let zv = tape.constant(zeros_items());
            (zu, zv)
        } else {
            let u = mean_pool(tape, store, self.mean_proj_user, &short_users)?;
            let v = mean_pool(tape, store, self.mean_proj_item, &short_items)?;
            (u, v)
        };

        let gate = if let Some(v) = self.cfg.fixed_gate {
            tape.constant(Tensor::from_flat(prep.num_users, 1, vec![v; prep.num_users]))
        } else if self.cfg.disable_mean_branch {
            // Only the recurrent branch exists; route everything through it.
            tape.constant(Tensor::from_flat(prep.num_users, 1, vec![1.0; prep.num_users]))
        } else if self.cfg.disable_gru_branch {
            tape.constant(Tensor::from_flat(prep.num_users, 1, vec![0.0; prep.num_users]))
        } else {
            fusion::gate(tape, store, &self.gate, user_mean, user_interval)?
        };

        Ok(Forward {
            short_users,
            short_items,
            branches: BranchInputs {
                user_mean,
                item_mean,
                user_interval,
                item_interval,
                user_instant,
            },
            gate,
        })
    }

    /// Assembles the complete training objective for one batch:
    /// branch hinges, ablation-aware blending, and L2 over every parameter
    /// pulled onto the tape. Returns `(total, hinge_gru, hinge_mean)`.
    pub fn training_loss(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        prep: &Prepared,
        batch: &fusion::RankingBatch,
    ) -> Result<(Idx, Idx, Idx, Forward)> {
        let fwd = self.forward_with(store, tape, prep)?;
        let (loss_gru, loss_mean) = fusion::rec_loss(
            tape,
            &fwd.branches,
            fwd.gate,
            batch,
            self.cfg.detach_gate_in_loss,
        )?;
        let leaves = tape.param_leaf_indices();
        let effective = LossConfig {
            lambda1: self.cfg.effective_lambda1(),
            lambda2: self.cfg.loss.lambda2,
            n_pr: self.cfg.loss.n_pr,
        };
        let total = fusion::total_loss(tape, loss_gru, loss_mean, &leaves, &effective)?;
        Ok((total, loss_gru, loss_mean, fwd))
    }

    /// Replaces parameter values with a checkpointed store. Every parameter
    /// must be present with a matching shape.
    pub fn load_store(&mut self, loaded: &ParamStore) -> Result<()> {
        if loaded.len() != self.store.len() {
            return Err(Error::Artifact(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                self.store.len()
            )));
        }
        let ids: Vec<(ParamId, String)> = self
            .store
            .iter()
            .map(|(id, name, _)| (id, name.to_string()))
            .collect();
        for (id, name) in ids {
            let source = loaded
                .id_of(&name)
                .ok_or_else(|| Error::Artifact(format!("checkpoint missing tensor {name}")))?;
            let value = loaded.get(source);
            if value.shape() != self.store.get(id).shape() {
                return Err(Error::Artifact(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    value.shape_vec(),
                    self.store.get(id).shape_vec()
                )));
            }
            *self.store.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Runs an eval-mode forward pass and extracts plain tensors for scoring.
    pub fn eval_embeddings(&self, prep: &Prepared) -> Result<EvalEmbeddings> {
        let mut tape = Tape::eval();
        let fwd = self.forward(&mut tape, prep)?;
        Ok(EvalEmbeddings {
            user_mean: tape.value(fwd.branches.user_mean).clone(),
            item_mean: tape.value(fwd.branches.item_mean).clone(),
            user_interval: tape.value(fwd.branches.user_interval).clone(),
            item_interval: tape.value(fwd.branches.item_interval).clone(),
            user_instant: tape.value(fwd.branches.user_instant).clone(),
            gate: tape.value(fwd.gate).clone(),
            disable_mean_branch: self.cfg.disable_mean_branch,
            disable_gru_branch: self.cfg.disable_gru_branch,
        })
    }
}

/// Final embeddings lifted off the tape, with the fused scoring rule.
#[derive(Debug, Clone)]
pub struct EvalEmbeddings {
    pub user_mean: Tensor,
    pub item_mean: Tensor,
    pub user_interval: Tensor,
    pub item_interval: Tensor,
    pub user_instant: Tensor,
    pub gate: Tensor,
    disable_mean_branch: bool,
    disable_gru_branch: bool,
}

impl EvalEmbeddings {
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Mean-branch score `U_i · V_j`.
    pub fn score_mean(&self, user: usize, item: usize) -> f64 {
        Self::dot(self.user_mean.row(user), self.item_mean.row(item))
    }

    /// Recurrent-branch score `(ē_i + ẽ_i) · ē_j`.
    pub fn score_gru(&self, user: usize, item: usize) -> f64 {
        let q: Vec<f64> = self
            .user_interval
            .row(user)
            .iter()
            .zip(self.user_instant.row(user))
            .map(|(a, b)| a + b)
            .collect();
        Self::dot(&q, self.item_interval.row(item))
    }

    /// Fused prediction, honoring ablation modes.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        if self.disable_mean_branch {
            self.score_gru(user, item)
        } else if self.disable_gru_branch {
            self.score_mean(user, item)
        } else {
            fusion::fuse(
                self.gate.data[user],
                self.score_gru(user, item),
                self.score_mean(user, item),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_interval_graphs, log_from_events};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            short: ShortTermConfig {
                dim: 4,
                layers: 2,
                edge_dropout: 0.0,
                message_dropout: 0.0,
            },
            num_heads: 2,
            attention_layers: 2,
            max_seq_len: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_graphs() -> IntervalGraphs {
        let log = log_from_events(&[
            (0, 0, 0),
            (0, 1, 10),
            (1, 2, 20),
            (2, 0, 40),
            (1, 1, 55),
            (2, 2, 80),
            (0, 2, 95),
        ])
        .unwrap();
        build_interval_graphs(&log, 3).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let graphs = tiny_graphs();
        let cfg = tiny_cfg();
        let model = Model::init(3, 3, 3, cfg.clone(), 1).unwrap();
        let prep = prepare(&graphs, cfg.max_seq_len);
        let mut tape = Tape::eval();
        let fwd = model.forward(&mut tape, &prep).unwrap();
        assert_eq!(fwd.short_users.len(), 3);
        assert_eq!(tape.value(fwd.short_users[0]).shape(), (3, 8));
        assert_eq!(tape.value(fwd.branches.user_mean).shape(), (3, 4));
        assert_eq!(tape.value(fwd.branches.item_interval).shape(), (3, 4));
        assert_eq!(tape.value(fwd.branches.user_instant).shape(), (3, 4));
        assert_eq!(tape.value(fwd.gate).shape(), (3, 1));
        for &w in &tape.value(fwd.gate).data {
            assert!(w > 0.0 && w < 1.0);
        }
    }

    #[test]
    fn fixed_gate_constant() {
        let graphs = tiny_graphs();
        let mut cfg = tiny_cfg();
        cfg.fixed_gate = Some(0.0);
        let model = Model::init(3, 3, 3, cfg.clone(), 1).unwrap();
        let prep = prepare(&graphs, cfg.max_seq_len);
        let emb = model.eval_embeddings(&prep).unwrap();
        // w = 0 forces the fused score onto the mean branch.
        for u in 0..3 {
            for j in 0..3 {
                assert_eq!(emb.score(u, j), emb.score_mean(u, j));
            }
        }
    }

    #[test]
    fn ablation_single_branch_scores() {
        let graphs = tiny_graphs();
        let prep = prepare(&graphs, 4);

        let mut cfg = tiny_cfg();
        cfg.disable_gru_branch = true;
        let model = Model::init(3, 3, 3, cfg, 2).unwrap();
        let emb = model.eval_embeddings(&prep).unwrap();
        assert_eq!(emb.score(1, 2), emb.score_mean(1, 2));

        let mut cfg = tiny_cfg();
        cfg.disable_mean_branch = true;
        let model = Model::init(3, 3, 3, cfg, 2).unwrap();
        let emb = model.eval_embeddings(&prep).unwrap();
        assert_eq!(emb.score(1, 2), emb.score_gru(1, 2));
    }

    #[test]
    fn both_branches_disabled_rejected() {
        let mut cfg = tiny_cfg();
        cfg.disable_mean_branch = true;
        cfg.disable_gru_branch = true;
        assert!(Model::init(3, 3, 3, cfg, 1).is_err());
    }

    #[test]
    fn eval_forward_deterministic() {
        let graphs = tiny_graphs();
        let cfg = tiny_cfg();
        let model = Model::init(3, 3, 3, cfg.clone(), 9).unwrap();
        let prep = prepare(&graphs, cfg.max_seq_len);
        let a = model.eval_embeddings(&prep).unwrap();
        let b = model.eval_embeddings(&prep).unwrap();
        assert_eq!(a.user_mean, b.user_mean);
        assert_eq!(a.gate, b.gate);
        assert_eq!(a.user_instant, b.user_instant);
    }

    #[test]
    fn prepare_truncates_instant_window() {
        let graphs = tiny_graphs();
        let prep = prepare(&graphs, 2);
        // User 0 interacted with 0, 1, 2 in time order; window keeps [1, 2].
        assert_eq!(prep.instant_sequences[0], vec![1, 2]);
    }

    #[test]
    fn full_model_gradient_check_small() {
        let graphs = tiny_graphs();
        let cfg = tiny_cfg();
        let model = Model::init(3, 3, 3, cfg.clone(), 4).unwrap();
        let prep = prepare(&graphs, cfg.max_seq_len);
        let batch = crate::fusion::RankingBatch {
            users: vec![0, 1, 2],
            positives: vec![2, 0, 1],
            negatives: vec![1, 2, 0],
        };
        let coords = crate::autodiff::sample_coords(&model.store, 80, 3);
        let err = crate::autodiff::grad_check(&model.store, &coords, 1e-5, |tape, store| {
            let (total, _, _, _) = model.training_loss(store, tape, &prep, &batch)?;
            Ok(total)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
