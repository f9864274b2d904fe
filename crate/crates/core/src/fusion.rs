//! Adaptive fusion of the two long-term branches: a per-user gate blends the
//! recurrent-branch and mean-branch predictions, and the same gate scales the
//! two hinge ranking losses with swapped coefficients, so a user leaning on
//! one branch for prediction trains the other branch harder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Idx, Tape};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Two-layer gate MLP: `(2d → d)` LeakyReLU, `(d → 1)` sigmoid.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GateParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: store.add(&format!("{prefix}/w1"), Tensor::randn(2 * dim, dim, std, rng)),
            b1: store.add(&format!("{prefix}/b1"), Tensor::zeros(1, dim)),
            w2: store.add(&format!("{prefix}/w2"), Tensor::randn(dim, 1, std, rng)),
            b2: store.add(&format!("{prefix}/b2"), Tensor::zeros(1, 1)),
        }
    }
}

/// Per-user importance weight `w = sigmoid(MLP([U ‖ ē]))`, shape `(n, 1)`,
/// strictly inside `(0, 1)`.
pub fn gate(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GateParams,
    mean_level: Idx,
    interval_level: Idx,
) -> Result<Idx> {
    let joined = tape.concat_cols(&[mean_level, interval_level])?;
    let w1 = tape.param(store, params.w1);
    let b1 = tape.param(store, params.b1);
    let w2 = tape.param(store, params.w2);
    let b2 = tape.param(store, params.b2);
    let h = tape.matmul(joined, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.leaky_relu(h)?;
    let o = tape.matmul(h, w2)?;
    let o = tape.add_row(o, b2)?;
    tape.sigmoid(o)
}

/// Blends branch scores: `w·gru + (1-w)·mean`. Plain-value twin of the
/// on-tape fusion used during training.
#[inline]
pub fn fuse(w: f64, gru: f64, mean: f64) -> f64 {
    w * gru + (1.0 - w) * mean
}

/// A training batch of `(user, positive, negative)` triples in struct-of-
/// arrays form.
#[derive(Debug, Clone, Default)]
pub struct RankingBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl RankingBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Branch embeddings entering the loss, all on tape.
#[derive(Debug, Clone, Copy)]
pub struct BranchInputs {
    /// Mean-level user embeddings `(I, d)`.
    pub user_mean: Idx,
    /// Mean-level item embeddings `(J, d)`.
    pub item_mean: Idx,
    /// Interval-level user embeddings `(I, d)`.
    pub user_interval: Idx,
    /// Interval-level item embeddings `(J, d)`.
    pub item_interval: Idx,
    /// Instant-level user embeddings `(I, d)`.
    pub user_instant: Idx,
}

/// Hinge ranking losses for one batch:
/// `L_gru = Σ max(0, 1 − (1−w)·(â_gru(p) − â_gru(n)))` and
/// `L_mean = Σ max(0, 1 − w·(â_mean(p) − â_mean(n)))`.
///
/// With `detach_gate` the coefficients use the gate's value but pass no
/// gradient back through it.
pub fn rec_loss(
    tape: &mut Tape,
    inputs: &BranchInputs,
    gate_w: Idx,
    batch: &RankingBatch,
    detach_gate: bool,
) -> Result<(Idx, Idx)> {
    if batch.is_empty() {
        return Err(Error::Data("ranking batch is empty".into()));
    }
    let w_users = tape.gather(gate_w, &batch.users)?;
    let w_users = if detach_gate {
        tape.stop_grad(w_users)?
    } else {
        w_users
    };

    // GRU branch: query = interval + instant user embedding.
    let u_int = tape.gather(inputs.user_interval, &batch.users)?;
    let u_inst = tape.gather(inputs.user_instant, &batch.users)?;
    let u_gru = tape.add(u_int, u_inst)?;
    let p_gru_items = tape.gather(inputs.item_interval, &batch.positives)?;
    let n_gru_items = tape.gather(inputs.item_interval, &batch.negatives)?;
    let p_gru = tape.row_dot(u_gru, p_gru_items)?;
    let n_gru = tape.row_dot(u_gru, n_gru_items)?;
    let gap_gru = tape.sub(p_gru, n_gru)?;
    let coeff_gru = tape.affine(w_users, -1.0, 1.0)?; // 1 - w
    let weighted_gru = tape.mul(coeff_gru, gap_gru)?;
    let margin_gru = tape.affine(weighted_gru, -1.0, 1.0)?; // 1 - (1-w)·gap
    let hinge_gru = tape.relu(margin_gru)?;
    let loss_gru = tape.sum_all(hinge_gru)?;

    // Mean branch.
    let u_mean = tape.gather(inputs.user_mean, &batch.users)?;
    let p_mean_items = tape.gather(inputs.item_mean, &batch.positives)?;
    let n_mean_items = tape.gather(inputs.item_mean, &batch.negatives)?;
    let p_mean = tape.row_dot(u_mean, p_mean_items)?;
    let n_mean = tape.row_dot(u_mean, n_mean_items)?;
    let gap_mean = tape.sub(p_mean, n_mean)?;
    let weighted_mean = tape.mul(w_users, gap_mean)?;
    let margin_mean = tape.affine(weighted_mean, -1.0, 1.0)?; // 1 - w·gap
    let hinge_mean = tape.relu(margin_mean)?;
    let loss_mean = tape.sum_all(hinge_mean)?;

    Ok((loss_gru, loss_mean))
}

/// Loss blend weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the GRU-branch hinge; the mean branch gets `1 - lambda1`.
    pub lambda1: f64,
    /// L2 regularization coefficient over every learnable tensor.
    pub lambda2: f64,
    /// Positive/negative pairs sampled per user per batch.
    pub n_pr: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1e-2,
            n_pr: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::Config(format!(
                "lambda1 must be in [0,1], got {}",
                self.lambda1
            )));
        }
        if self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "lambda2 must be >= 0, got {}",
                self.lambda2
            )));
        }
        if self.n_pr == 0 {
            return Err(Error::Config("n_pr must be >= 1".into()));
        }
        Ok(())
    }
}

/// `L = λ₁·L_gru + (1−λ₁)·L_mean + λ₂·Σ‖θ‖²` over the given parameter leaves.
pub fn total_loss(
    tape: &mut Tape,
    loss_gru: Idx,
    loss_mean: Idx,
    param_leaves: &[Idx],
    cfg: &LossConfig,
) -> Result<Idx> {
    let weighted_gru = tape.affine(loss_gru, cfg.lambda1, 0.0)?;
    let weighted_mean = tape.affine(loss_mean, 1.0 - cfg.lambda1, 0.0)?;
    let mut total = tape.add(weighted_gru, weighted_mean)?;
    if cfg.lambda2 > 0.0 && !param_leaves.is_empty() {
        let mut squares = Vec::with_capacity(param_leaves.len());
        for &leaf in param_leaves {
            squares.push(tape.sum_squares(leaf)?);
        }
        let reg = tape.add_n(&squares)?;
        let reg = tape.affine(reg, cfg.lambda2, 0.0)?;
        total = tape.add(total, reg)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sample_coords};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_zero_everything_is_half() {
        let mut store = ParamStore::new();
        let params = GateParams {
            w1: store.add("g/w1", Tensor::zeros(4, 2)),
            b1: store.add("g/b1", Tensor::zeros(1, 2)),
            w2: store.add("g/w2", Tensor::zeros(2, 1)),
            b2: store.add("g/b2", Tensor::zeros(1, 1)),
        };
        let mut tape = Tape::eval();
        let u = tape.constant(Tensor::zeros(3, 2));
        let e = tape.constant(Tensor::zeros(3, 2));
        let w = gate(&mut tape, &store, &params, u, e).unwrap();
        assert_eq!(tape.value(w).data, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn gate_stays_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let params = GateParams::init(&mut store, "g", 3, 2.0, &mut rng);
        let mut tape = Tape::eval();
        let u = tape.constant(Tensor::randn(20, 3, 5.0, &mut rng));
        let e = tape.constant(Tensor::randn(20, 3, 5.0, &mut rng));
        let w = gate(&mut tape, &store, &params, u, e).unwrap();
        for &v in &tape.value(w).data {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let params = GateParams::init(&mut store, "g", 3, 0.5, &mut rng);
        let u = Tensor::randn(4, 3, 0.6, &mut rng);
        let e = Tensor::randn(4, 3, 0.6, &mut rng);
        let coords = sample_coords(&store, store.total_coords(), 3);
        let err = grad_check(&store, &coords, 1e-6, |tape, store| {
            let uu = tape.constant(u.clone());
            let ee = tape.constant(e.clone());
            let w = gate(tape, store, &params, uu, ee)?;
            tape.sum_squares(w)
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn fuse_boundaries_and_convexity() {
        assert_eq!(fuse(1.0, 2.5, -1.0), 2.5);
        assert_eq!(fuse(0.0, 2.5, -1.0), -1.0);
        assert_eq!(fuse(0.5, 2.0, 0.0), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let w: f64 = rng.random();
            let g: f64 = rng.random::<f64>() * 8.0 - 4.0;
            let m: f64 = rng.random::<f64>() * 8.0 - 4.0;
            let f = fuse(w, g, m);
            assert!(f >= g.min(m) - 1e-12 && f <= g.max(m) + 1e-12);
        }
    }

    fn loss_fixture() -> (ParamStore, BranchFixture) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let ids = BranchFixture {
            user_mean: store.add("um", Tensor::randn(4, 3, 0.7, &mut rng)),
            item_mean: store.add("im", Tensor::randn(5, 3, 0.7, &mut rng)),
            user_interval: store.add("ui", Tensor::randn(4, 3, 0.7, &mut rng)),
            item_interval: store.add("ii", Tensor::randn(5, 3, 0.7, &mut rng)),
            user_instant: store.add("un", Tensor::randn(4, 3, 0.7, &mut rng)),
            gate: store.add("w", Tensor::from_flat(4, 1, vec![0.3, 0.6, 0.5, 0.9])),
        };
        (store, ids)
    }

    struct BranchFixture {
        user_mean: ParamId,
        item_mean: ParamId,
        user_interval: ParamId,
        item_interval: ParamId,
        user_instant: ParamId,
        gate: ParamId,
    }

    fn build_inputs(tape: &mut Tape, store: &ParamStore, f: &BranchFixture) -> (BranchInputs, Idx) {
        let inputs = BranchInputs {
            user_mean: tape.param(store, f.user_mean),
            item_mean: tape.param(store, f.item_mean),
            user_interval: tape.param(store, f.user_interval),
            item_interval: tape.param(store, f.item_interval),
            user_instant: tape.param(store, f.user_instant),
        };
        let w = tape.param(store, f.gate);
        (inputs, w)
    }

    /// Independent per-sample oracle for the two hinges.
    fn hinge_oracle(
        store: &ParamStore,
        f: &BranchFixture,
        batch: &RankingBatch,
    ) -> (f64, f64) {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (mut l_gru, mut l_mean) = (0.0, 0.0);
        for k in 0..batch.len() {
            let (u, p, n) = (batch.users[k], batch.positives[k], batch.negatives[k]);
            let w = store.get(f.gate).data[u];
            let u_gru: Vec<f64> = store
                .get(f.user_interval)
                .row(u)
                .iter()
                .zip(store.get(f.user_instant).row(u))
                .map(|(a, b)| a + b)
                .collect();
            let gap_gru = dot(&u_gru, store.get(f.item_interval).row(p))
                - dot(&u_gru, store.get(f.item_interval).row(n));
            l_gru += (1.0 - (1.0 - w) * gap_gru).max(0.0);
            let gap_mean = dot(store.get(f.user_mean).row(u), store.get(f.item_mean).row(p))
                - dot(store.get(f.user_mean).row(u), store.get(f.item_mean).row(n));
            l_mean += (1.0 - w * gap_mean).max(0.0);
        }
        (l_gru, l_mean)
    }

    #[test]
    fn rec_loss_matches_per_sample_oracle() {
        let (store, f) = loss_fixture();
        let batch = RankingBatch {
            users: vec![0, 1, 2, 3, 0],
            positives: vec![1, 2, 0, 4, 3],
            negatives: vec![0, 3, 2, 1, 4],
        };
        let mut tape = Tape::eval();
        let (inputs, w) = build_inputs(&mut tape, &store, &f);
        let (lg, lm) = rec_loss(&mut tape, &inputs, w, &batch, false).unwrap();
        let (og, om) = hinge_oracle(&store, &f, &batch);
        assert!((tape.value(lg).data[0] - og).abs() < 1e-12);
        assert!((tape.value(lm).data[0] - om).abs() < 1e-12);
        assert!(og >= 0.0 && om >= 0.0);
    }

    #[test]
    fn rec_loss_zero_gap_gives_one_per_term() {
        // Equal positive and negative scores: each term is max(0, 1-0) = 1.
        let mut store = ParamStore::new();
        let f = BranchFixture {
            user_mean: store.add("um", Tensor::zeros(2, 3)),
            item_mean: store.add("im", Tensor::zeros(3, 3)),
            user_interval: store.add("ui", Tensor::zeros(2, 3)),
            item_interval: store.add("ii", Tensor::zeros(3, 3)),
            user_instant: store.add("un", Tensor::zeros(2, 3)),
            gate: store.add("w", Tensor::from_flat(2, 1, vec![0.2, 0.8])),
        };
        let batch = RankingBatch {
            users: vec![0, 1],
            positives: vec![0, 1],
            negatives: vec![2, 0],
        };
        let mut tape = Tape::eval();
        let (inputs, w) = build_inputs(&mut tape, &store, &f);
        let (lg, lm) = rec_loss(&mut tape, &inputs, w, &batch, false).unwrap();
        assert_eq!(tape.value(lg).data[0], 2.0);
        assert_eq!(tape.value(lm).data[0], 2.0);
    }

    #[test]
    fn rec_loss_saturated_hinge_contributes_zero() {
        // A gap large enough that 1 - (1-w)·gap < 0 zeroes the term.
        let mut store = ParamStore::new();
        let f = BranchFixture {
            user_mean: store.add("um", Tensor::from_flat(1, 1, vec![10.0])),
            item_mean: store.add("im", Tensor::from_flat(2, 1, vec![10.0, -10.0])),
            user_interval: store.add("ui", Tensor::from_flat(1, 1, vec![10.0])),
            item_interval: store.add("ii", Tensor::from_flat(2, 1, vec![10.0, -10.0])),
            user_instant: store.add("un", Tensor::from_flat(1, 1, vec![0.0])),
            gate: store.add("w", Tensor::from_flat(1, 1, vec![0.5])),
        };
        let batch = RankingBatch {
            users: vec![0],
            positives: vec![0],
            negatives: vec![1],
        };
        let mut tape = Tape::eval();
        let (inputs, w) = build_inputs(&mut tape, &store, &f);
        let (lg, lm) = rec_loss(&mut tape, &inputs, w, &batch, false).unwrap();
        assert_eq!(tape.value(lg).data[0], 0.0);
        assert_eq!(tape.value(lm).data[0], 0.0);
    }

    #[test]
    fn detach_gate_blocks_gate_gradient() {
        let (store, f) = loss_fixture();
        let batch = RankingBatch {
            users: vec![0, 1],
            positives: vec![1, 2],
            negatives: vec![0, 3],
        };
        let run = |detach: bool| {
            let mut tape = Tape::eval();
            let (inputs, w) = build_inputs(&mut tape, &store, &f);
            let (lg, lm) = rec_loss(&mut tape, &inputs, w, &batch, detach).unwrap();
            let cfg = LossConfig {
                lambda1: 0.4,
                lambda2: 0.0,
                n_pr: 1,
            };
            let total = total_loss(&mut tape, lg, lm, &[], &cfg).unwrap();
            tape.backward(total).unwrap();
            tape.param_grads().contains_key(&f.gate)
        };
        assert!(run(false), "gate should receive gradient by default");
        assert!(!run(true), "detached gate must receive no gradient");
    }

    #[test]
    fn total_loss_weighting_and_reg() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_flat(1, 2, vec![2.0, -1.0]));
        let mut tape = Tape::eval();
        let leaf = tape.param(&store, p);
        let lg = tape.constant(Tensor::from_flat(1, 1, vec![3.0]));
        let lm = tape.constant(Tensor::from_flat(1, 1, vec![7.0]));
        let cfg = LossConfig {
            lambda1: 0.1,
            lambda2: 0.01,
            n_pr: 1,
        };
        let total = total_loss(&mut tape, lg, lm, &[leaf], &cfg).unwrap();
        // 0.1·3 + 0.9·7 + 0.01·(4+1) = 0.3 + 6.3 + 0.05
        assert!((tape.value(total).data[0] - 6.65).abs() < 1e-12);

        // lambda1 = 1 silences the mean branch, lambda2 = 0 the regularizer.
        let cfg2 = LossConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            n_pr: 1,
        };
        let total2 = total_loss(&mut tape, lg, lm, &[leaf], &cfg2).unwrap();
        assert_eq!(tape.value(total2).data[0], 3.0);
    }

    #[test]
    fn loss_gradients_full_path() {
        let (store, f) = loss_fixture();
        let batch = RankingBatch {
            users: vec![0, 1, 2],
            positives: vec![1, 0, 4],
            negatives: vec![2, 3, 0],
        };
        let coords = sample_coords(&store, store.total_coords(), 23);
        let err = grad_check(&store, &coords, 1e-6, |tape, store| {
            let (inputs, w) = build_inputs(tape, store, &f);
            let (lg, lm) = rec_loss(tape, &inputs, w, &batch, false)?;
            let leaves = [
                inputs.user_mean,
                inputs.item_mean,
                inputs.user_interval,
                inputs.item_interval,
                inputs.user_instant,
                w,
            ];
            total_loss(
                tape,
                lg,
                lm,
                &leaves,
                &LossConfig {
                    lambda1: 0.3,
                    lambda2: 0.05,
                    n_pr: 1,
                },
            )
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
