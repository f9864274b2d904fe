//! Long-term embeddings from the per-interval short-term sequence.
//!
//! Three views are combined downstream: interval-level (GRU over the interval
//! sequence, refined by one multi-head self-attention pass and summed over
//! time), instant-level (positional self-attention stacks over each user's
//! recent item sequence), and mean-level (average of short-term embeddings,
//! projected back to width `d`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Idx, Tape};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Structural dimensions of the temporal stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalConfig {
    /// Hidden width `d` shared by all long-term embeddings.
    pub dim: usize,
    /// Width of the short-term inputs (`layers · d` from the encoder).
    pub input_dim: usize,
    /// Attention heads; must divide `dim`.
    pub num_heads: usize,
    /// Self-attention depth for the instant-level stack.
    pub attention_layers: usize,
    /// Maximum instant-sequence length `M`.
    pub max_seq_len: usize,
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("temporal dims must be >= 1".into()));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {} must divide dim {}",
                self.num_heads, self.dim
            )));
        }
        if !(2..=4).contains(&self.attention_layers) {
            return Err(Error::Config(format!(
                "attention layers must be in {{2,3,4}}, got {}",
                self.attention_layers
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gated recurrent unit over `input_dim → dim`, with the input projection
/// folding the concatenated short-term width down to `dim`.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_in: ParamId,
    pub w_xz: ParamId,
    pub w_hz: ParamId,
    pub b_z: ParamId,
    pub w_xr: ParamId,
    pub w_hr: ParamId,
    pub b_r: ParamId,
    pub w_xh: ParamId,
    pub w_hh: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut mat = |name: &str, r: usize, c: usize| {
            store.add(&format!("{prefix}/{name}"), Tensor::randn(r, c, std, rng))
        };
        let w_in = mat("w_in", input_dim, dim);
        let w_xz = mat("w_xz", dim, dim);
        let w_hz = mat("w_hz", dim, dim);
        let w_xr = mat("w_xr", dim, dim);
        let w_hr = mat("w_hr", dim, dim);
        let w_xh = mat("w_xh", dim, dim);
        let w_hh = mat("w_hh", dim, dim);
        let b_z = store.add(&format!("{prefix}/b_z"), Tensor::zeros(1, dim));
        let b_r = store.add(&format!("{prefix}/b_r"), Tensor::zeros(1, dim));
        let b_h = store.add(&format!("{prefix}/b_h"), Tensor::zeros(1, dim));
        Self {
            w_in,
            w_xz,
            w_hz,
            b_z,
            w_xr,
            w_hr,
            b_r,
            w_xh,
            w_hh,
            b_h,
        }
    }
}

/// Standard GRU recurrence applied row-wise over the interval sequence;
/// `h_0 = 0`. Inputs are `(n, input_dim)`, hidden states `(n, dim)`.
pub fn gru_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GruParams,
    inputs: &[Idx],
) -> Result<Vec<Idx>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Data("gru over empty sequence".into()))?;
    let rows = tape.value(*first).rows;
    let dim = store.get(params.w_in).cols;

    let w_in = tape.param(store, params.w_in);
    let w_xz = tape.param(store, params.w_xz);
    let w_hz = tape.param(store, params.w_hz);
    let b_z = tape.param(store, params.b_z);
    let w_xr = tape.param(store, params.w_xr);
    let w_hr = tape.param(store, params.w_hr);
    let b_r = tape.param(store, params.b_r);
    let w_xh = tape.param(store, params.w_xh);
    let w_hh = tape.param(store, params.w_hh);
    let b_h = tape.param(store, params.b_h);

    let mut hidden = tape.constant(Tensor::zeros(rows, dim));
    let mut out = Vec::with_capacity(inputs.len());
    for &raw in inputs {
        let x = tape.matmul(raw, w_in)?;

        let zx = tape.matmul(x, w_xz)?;
        let zh = tape.matmul(hidden, w_hz)?;
        let z_pre = tape.add(zx, zh)?;
        let z_pre = tape.add_row(z_pre, b_z)?;
        let z = tape.sigmoid(z_pre)?;

        let rx = tape.matmul(x, w_xr)?;
        let rh = tape.matmul(hidden, w_hr)?;
        let r_pre = tape.add(rx, rh)?;
        let r_pre = tape.add_row(r_pre, b_r)?;
        let r = tape.sigmoid(r_pre)?;

        let gated = tape.mul(r, hidden)?;
        let cx = tape.matmul(x, w_xh)?;
        let ch = tape.matmul(gated, w_hh)?;
        let c_pre = tape.add(cx, ch)?;
        let c_pre = tape.add_row(c_pre, b_h)?;
        let candidate = tape.tanh(c_pre)?;

        // h = (1 - z) ⊙ h_prev + z ⊙ candidate
        let keep = tape.affine(z, -1.0, 1.0)?;
        let carried = tape.mul(keep, hidden)?;
        let injected = tape.mul(z, candidate)?;
        hidden = tape.add(carried, injected)?;
        out.push(hidden);
    }
    Ok(out)
}

/// One multi-head self-attention pass: per-head query/key/value projections
/// of width `dim / num_heads` plus an output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub w_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_heads: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let head_dim = dim / num_heads;
        let heads = (0..num_heads)
            .map(|h| HeadParams {
                w_q: store.add(
                    &format!("{prefix}/head{h}/w_q"),
                    Tensor::randn(dim, head_dim, std, rng),
                ),
                w_k: store.add(
                    &format!("{prefix}/head{h}/w_k"),
                    Tensor::randn(dim, head_dim, std, rng),
                ),
                w_v: store.add(
                    &format!("{prefix}/head{h}/w_v"),
                    Tensor::randn(dim, head_dim, std, rng),
                ),
            })
            .collect();
        Self {
            heads,
            w_out: store.add(&format!("{prefix}/w_out"), Tensor::randn(dim, dim, std, rng)),
        }
    }
}

/// Self-attention over the interval axis, batched across rows: `hidden` holds
/// one `(n, dim)` tensor per interval, attention runs independently per row
/// over the `T` positions, and the attended features are summed over time.
/// Returns `(n, dim)`.
pub fn interval_attention(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    hidden: &[Idx],
) -> Result<Idx> {
    let steps = hidden.len();
    if steps == 0 {
        return Err(Error::Data("attention over empty sequence".into()));
    }
    let head_dim = store.get(params.heads[0].w_q).cols;
    let scale = 1.0 / (head_dim as f64).sqrt();

    // Σ over query positions of the per-position attended vector, computed
    // head by head; the output projection is applied once after summing
    // (it is linear, so projecting before or after the sum is identical).
    let mut per_head_sums = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let w_q = tape.param(store, head.w_q);
        let w_k = tape.param(store, head.w_k);
        let w_v = tape.param(store, head.w_v);
        let queries: Vec<Idx> = hidden
            .iter()
            .map(|&h| tape.matmul(h, w_q))
            .collect::<Result<_>>()?;
        let keys: Vec<Idx> = hidden
            .iter()
            .map(|&h| tape.matmul(h, w_k))
            .collect::<Result<_>>()?;
        let values: Vec<Idx> = hidden
            .iter()
            .map(|&h| tape.matmul(h, w_v))
            .collect::<Result<_>>()?;

        let mut attended = Vec::with_capacity(steps);
        for tq in 0..steps {
            let mut score_cols = Vec::with_capacity(steps);
            for tk in 0..steps {
                let dot = tape.row_dot(queries[tq], keys[tk])?;
                score_cols.push(tape.affine(dot, scale, 0.0)?);
            }
            let scores = tape.concat_cols(&score_cols)?;
            let weights = tape.softmax_rows(scores)?;
            let mut contributions = Vec::with_capacity(steps);
            for tk in 0..steps {
                let w_col = tape.slice_cols(weights, tk, 1)?;
                contributions.push(tape.mul_col(values[tk], w_col)?);
            }
            attended.push(tape.add_n(&contributions)?);
        }
        per_head_sums.push(tape.add_n(&attended)?);
    }
    let concat = tape.concat_cols(&per_head_sums)?;
    let w_out = tape.param(store, params.w_out);
    tape.matmul(concat, w_out)
}

/// Learnable positional table for instant sequences.
#[derive(Debug, Clone)]
pub struct PositionTable {
    pub table: ParamId,
    pub max_len: usize,
}

impl PositionTable {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        max_len: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add(name, Tensor::randn(max_len, dim, std, rng)),
            max_len,
        }
    }
}

/// Positional self-attention over each user's recent item sequence.
///
/// `sequences[u]` lists the user's most recent interactions in time order;
/// anything beyond the last `max_len` entries is dropped. Tokens are the
/// interval-level item embeddings plus the position embedding of their
/// ordinal. Each of the `attention_layers` stacks applies
/// `LeakyReLU(Self-Att(S)) + S`, and the result is summed over positions.
/// Users with empty history map to the zero vector. Attention runs per user
/// over exactly its real tokens, which is equivalent to masking padded slots
/// out of both the softmax and the final sum.
pub fn instant_attention(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[AttentionParams],
    positions: &PositionTable,
    item_embeddings: Idx,
    sequences: &[Vec<usize>],
) -> Result<Idx> {
    let dim = tape.value(item_embeddings).cols;
    let pos_table = tape.param(store, positions.table);
    let mut layer_params: Vec<(Vec<(Idx, Idx, Idx)>, Idx)> = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut heads = Vec::with_capacity(layer.heads.len());
        for h in &layer.heads {
            heads.push((
                tape.param(store, h.w_q),
                tape.param(store, h.w_k),
                tape.param(store, h.w_v),
            ));
        }
        let w_out = tape.param(store, layer.w_out);
        layer_params.push((heads, w_out));
    }

    let mut user_rows = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.is_empty() {
            user_rows.push(tape.constant(Tensor::zeros(1, dim)));
            continue;
        }
        let window: Vec<usize> = if seq.len() > positions.max_len {
            seq[seq.len() - positions.max_len..].to_vec()
        } else {
            seq.clone()
        };
        let len = window.len();
        let tokens = tape.gather(item_embeddings, &window)?;
        let pos = tape.gather(pos_table, &(0..len).collect::<Vec<_>>())?;
        let mut state = tape.add(tokens, pos)?;

        for (heads, w_out) in &layer_params {
            let mut head_outs = Vec::with_capacity(heads.len());
            for &(w_q, w_k, w_v) in heads {
                let head_dim = tape.value(w_q).cols;
                let q = tape.matmul(state, w_q)?;
                let k = tape.matmul(state, w_k)?;
                let v = tape.matmul(state, w_v)?;
                let scores = tape.matmul_transb(q, k)?;
                let scaled = tape.affine(scores, 1.0 / (head_dim as f64).sqrt(), 0.0)?;
                let weights = tape.softmax_rows(scaled)?;
                head_outs.push(tape.matmul(weights, v)?);
            }
            let concat = tape.concat_cols(&head_outs)?;
            let projected = tape.matmul(concat, *w_out)?;
            let activated = tape.leaky_relu(projected)?;
            state = tape.add(activated, state)?;
        }
        user_rows.push(tape.sum_rows(state)?);
    }
    tape.concat_rows(&user_rows)
}

/// Mean over the interval axis followed by a learned projection down to the
/// long-term width. Input tensors are `(n, input_dim)`; output `(n, dim)`.
pub fn mean_pool(
    tape: &mut Tape,
    store: &ParamStore,
    projection: ParamId,
    short_terms: &[Idx],
) -> Result<Idx> {
    if short_terms.is_empty() {
        return Err(Error::Data("mean_pool over empty sequence".into()));
    }
    let mean = tape.mean_n(short_terms)?;
    let w = tape.param(store, projection);
    tape.matmul(mean, w)
}
