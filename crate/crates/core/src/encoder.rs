//! Short-term embeddings: simplified graph convolution over each interval's
//! user-item bipartite graph.
//!
//! Per layer, users aggregate item embeddings through the degree-normalized
//! adjacency and vice versa, pass through LeakyReLU, and add a residual
//! connection; the final representation concatenates all layer outputs, so a
//! `d`-dimensional table yields `L·d`-dimensional short-term embeddings.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Idx, Tape};
use crate::corpus::UserItemGraph;
use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

/// Short-term encoder knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShortTermConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Graph-convolution depth.
    pub layers: usize,
    /// Probability of dropping an adjacency nonzero during training.
    pub edge_dropout: f64,
    /// Probability of dropping a message coordinate during training.
    pub message_dropout: f64,
}

impl Default for ShortTermConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            edge_dropout: 0.5,
            message_dropout: 0.5,
        }
    }
}

impl ShortTermConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be >= 1".into()));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::Config(format!(
                "gcn layers must be in {{1,2,3}}, got {}",
                self.layers
            )));
        }
        for (name, p) in [
            ("edge_dropout", self.edge_dropout),
            ("message_dropout", self.message_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {p}")));
            }
        }
        Ok(())
    }
}

/// Degree-normalized bipartite adjacency with its transpose, shared by the
/// user-side and item-side propagation of one interval.
#[derive(Debug, Clone)]
pub struct EncoderAdjacency {
    /// `Â` of shape `(I, J)`.
    pub fwd: Arc<SparseMatrix>,
    /// `Âᵀ` of shape `(J, I)`.
    pub back: Arc<SparseMatrix>,
}

/// Symmetric degree normalization `Â = D_u^{-1/2} A D_v^{-1/2}`;
/// zero-degree rows and columns stay zero.
pub fn normalize_adjacency(graph: &UserItemGraph) -> EncoderAdjacency {
    let (num_users, num_items) = (graph.num_users(), graph.num_items());
    let mut user_deg = vec![0.0f64; num_users];
    let mut item_deg = vec![0.0f64; num_items];
    for (u, i, w) in graph.iter() {
        user_deg[u] += w;
        item_deg[i] += w;
    }
    let triplets: Vec<(usize, usize, f64)> = graph
        .iter()
        .map(|(u, i, w)| (u, i, w / (user_deg[u].sqrt() * item_deg[i].sqrt())))
        .collect();
    let transposed: Vec<(usize, usize, f64)> =
        triplets.iter().map(|&(u, i, w)| (i, u, w)).collect();
    EncoderAdjacency {
        fwd: Arc::new(SparseMatrix::from_triplets(num_users, num_items, &triplets)),
        back: Arc::new(SparseMatrix::from_triplets(num_items, num_users, &transposed)),
    }
}

/// Drops adjacency nonzeros with probability `p`, scaling survivors by
/// `1/(1-p)`. The same surviving edges are used in both directions.
pub fn edge_dropout<R: Rng>(adj: &EncoderAdjacency, p: f64, rng: &mut R) -> EncoderAdjacency {
    if p <= 0.0 {
        return adj.clone();
    }
    let keep = 1.0 - p;
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for r in 0..adj.fwd.rows {
        for (c, v) in adj.fwd.row_entries(r) {
            if rng.random::<f64>() < keep {
                kept.push((r, c, v / keep));
            }
        }
    }
    let transposed: Vec<(usize, usize, f64)> = kept.iter().map(|&(u, i, w)| (i, u, w)).collect();
    EncoderAdjacency {
        fwd: Arc::new(SparseMatrix::from_triplets(adj.fwd.rows, adj.fwd.cols, &kept)),
        back: Arc::new(SparseMatrix::from_triplets(adj.fwd.cols, adj.fwd.rows, &transposed)),
    }
}

/// Runs `layers` rounds of cross-side message passing starting from the
/// interval's embedding tables and returns the layer-concatenated user and
/// item representations, each of width `layers · dim`.
pub fn encode_interval(
    tape: &mut Tape,
    adj: &EncoderAdjacency,
    user_table: Idx,
    item_table: Idx,
    cfg: &ShortTermConfig,
) -> Result<(Idx, Idx)> {
    let mut cur_u = user_table;
    let mut cur_v = item_table;
    let mut layers_u = Vec::with_capacity(cfg.layers);
    let mut layers_v = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let agg_u = tape.sparse_matmul(adj.fwd.clone(), cur_v)?;
        let mut z_u = tape.leaky_relu(agg_u)?;
        z_u = tape.dropout(z_u, 1.0 - cfg.message_dropout)?;
        let agg_v = tape.sparse_matmul(adj.back.clone(), cur_u)?;
        let mut z_v = tape.leaky_relu(agg_v)?;
        z_v = tape.dropout(z_v, 1.0 - cfg.message_dropout)?;

        let next_u = tape.add(z_u, cur_u)?;
        let next_v = tape.add(z_v, cur_v)?;
        layers_u.push(next_u);
        layers_v.push(next_v);
        cur_u = next_u;
        cur_v = next_v;
    }
    Ok((tape.concat_cols(&layers_u)?, tape.concat_cols(&layers_v)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sample_coords, LEAKY_SLOPE};
    use crate::tensor::{ParamStore, Tensor};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaky(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            LEAKY_SLOPE * x
        }
    }

    fn cfg(dim: usize, layers: usize) -> ShortTermConfig {
        ShortTermConfig {
            dim,
            layers,
            edge_dropout: 0.0,
            message_dropout: 0.0,
        }
    }

    #[test]
    fn normalize_unit_degrees() {
        let mut g = UserItemGraph::new(1, 1, 0);
        g.set(0, 0, 1.0);
        let adj = normalize_adjacency(&g);
        let x = Tensor::from_flat(1, 1, vec![3.0]);
        assert_eq!(adj.fwd.mul_dense(&x).unwrap().data, vec![3.0]);
    }

    #[test]
    fn normalize_degree_two() {
        let mut g = UserItemGraph::new(1, 2, 0);
        g.set(0, 0, 1.0);
        g.set(0, 1, 1.0);
        let adj = normalize_adjacency(&g);
        // User degree 2, item degrees 1: entries 1/sqrt(2).
        let ones = Tensor::from_flat(2, 1, vec![1.0, 1.0]);
        let y = adj.fwd.mul_dense(&ones).unwrap();
        assert!((y.data[0] - 2.0 / 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn normalize_empty_graph() {
        let g = UserItemGraph::new(2, 3, 0);
        let adj = normalize_adjacency(&g);
        assert_eq!(adj.fwd.nnz(), 0);
        assert_eq!(adj.back.nnz(), 0);
    }

    #[test]
    fn empty_adjacency_is_identity_on_tables() {
        // With no edges, sigma(0) = 0 and the residual passes the table
        // through each layer, so layer 1 equals the input table.
        let g = UserItemGraph::new(2, 2, 0);
        let adj = normalize_adjacency(&g);
        let mut tape = Tape::eval();
        let e_u = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]));
        let e_v = tape.constant(Tensor::from_rows(&[vec![4.0, 1.0], vec![-1.0, 2.0]]));
        let (u, v) = encode_interval(&mut tape, &adj, e_u, e_v, &cfg(2, 1)).unwrap();
        assert_eq!(tape.value(u), tape.value(e_u));
        assert_eq!(tape.value(v), tape.value(e_v));
    }

    #[test]
    fn output_width_is_layers_times_dim() {
        let mut g = UserItemGraph::new(3, 4, 0);
        g.set(0, 1, 1.0);
        g.set(2, 3, 0.5);
        let adj = normalize_adjacency(&g);
        for layers in 1..=3 {
            let mut tape = Tape::eval();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let e_u = tape.constant(Tensor::randn(3, 4, 0.1, &mut rng));
            let e_v = tape.constant(Tensor::randn(4, 4, 0.1, &mut rng));
            let (u, v) = encode_interval(&mut tape, &adj, e_u, e_v, &cfg(4, layers)).unwrap();
            assert_eq!(tape.value(u).shape(), (3, layers * 4));
            assert_eq!(tape.value(v).shape(), (4, layers * 4));
        }
    }

    #[test]
    fn two_layer_single_edge_matches_hand_computation() {
        let mut g = UserItemGraph::new(1, 1, 0);
        g.set(0, 0, 1.0);
        let adj = normalize_adjacency(&g);
        let a = [0.3, -0.7];
        let b = [-0.2, 0.9];
        let mut tape = Tape::eval();
        let e_u = tape.constant(Tensor::from_flat(1, 2, a.to_vec()));
        let e_v = tape.constant(Tensor::from_flat(1, 2, b.to_vec()));
        let (u, _) = encode_interval(&mut tape, &adj, e_u, e_v, &cfg(2, 2)).unwrap();

        // Layer 1: u1 = leaky(b) + a, v1 = leaky(a) + b.
        // Layer 2: u2 = leaky(v1) + u1.
        let u1: Vec<f64> = (0..2).map(|k| leaky(b[k]) + a[k]).collect();
        let v1: Vec<f64> = (0..2).map(|k| leaky(a[k]) + b[k]).collect();
        let u2: Vec<f64> = (0..2).map(|k| leaky(v1[k]) + u1[k]).collect();
        let expected: Vec<f64> = u1.iter().chain(&u2).copied().collect();
        for (got, want) in tape.value(u).data.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn eval_mode_deterministic() {
        let mut g = UserItemGraph::new(2, 3, 0);
        g.set(0, 0, 1.0);
        g.set(1, 2, 1.0);
        g.set(0, 2, 0.5);
        let adj = normalize_adjacency(&g);
        let run = || {
            let mut tape = Tape::eval();
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let e_u = tape.constant(Tensor::randn(2, 3, 0.1, &mut rng));
            let e_v = tape.constant(Tensor::randn(3, 3, 0.1, &mut rng));
            let (u, _) = encode_interval(&mut tape, &adj, e_u, e_v, &cfg(3, 2)).unwrap();
            tape.value(u).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn user_permutation_equivariance() {
        let mut g = UserItemGraph::new(3, 2, 0);
        g.set(0, 0, 1.0);
        g.set(1, 1, 1.0);
        g.set(2, 0, 0.5);
        let perm = [2usize, 0, 1]; // new index -> old index
        let mut gp = UserItemGraph::new(3, 2, 0);
        for (new, &old) in perm.iter().enumerate() {
            for (&item, &w) in g.row(old) {
                gp.set(new, item, w);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = Tensor::randn(3, 2, 0.5, &mut rng);
        let items = Tensor::randn(2, 2, 0.5, &mut rng);
        let table_p = Tensor::from_rows(&perm.iter().map(|&o| table.row(o).to_vec()).collect::<Vec<_>>());

        let encode = |graph: &UserItemGraph, users: &Tensor| {
            let adj = normalize_adjacency(graph);
            let mut tape = Tape::eval();
            let e_u = tape.constant(users.clone());
            let e_v = tape.constant(items.clone());
            let (u, _) = encode_interval(&mut tape, &adj, e_u, e_v, &cfg(2, 2)).unwrap();
            tape.value(u).clone()
        };
        let base = encode(&g, &table);
        let permuted = encode(&gp, &table_p);
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(permuted.row(new), base.row(old));
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut g = UserItemGraph::new(3, 4, 0);
        g.set(0, 0, 1.0);
        g.set(0, 2, 1.0);
        g.set(1, 1, 0.5);
        g.set(2, 3, 1.0);
        let adj = normalize_adjacency(&g);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let eu = store.add("e_u", Tensor::randn(3, 3, 0.4, &mut rng));
        let ev = store.add("e_v", Tensor::randn(4, 3, 0.4, &mut rng));
        let c = cfg(3, 2);
        let coords = sample_coords(&store, store.total_coords(), 13);
        let err = grad_check(&store, &coords, 1e-6, |tape, store| {
            let e_u = tape.param(store, eu);
            let e_v = tape.param(store, ev);
            let (u, v) = encode_interval(tape, &adj, e_u, e_v, &c)?;
            let su = tape.sum_squares(u)?;
            let sv = tape.sum_squares(v)?;
            tape.add(su, sv)
        })
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }
}
