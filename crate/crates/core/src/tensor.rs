//! Dense rank-2 tensors, sparse adjacency matrices, and the named parameter
//! store with binary checkpointing.
//!
//! Everything is double precision. Reverse-mode differentiation over these
//! values lives in [`crate::autodiff`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`. Vectors are `(n, 1)` or `(1, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        // Box-Muller keeps us off distribution-crate APIs.
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < n {
                data.push(r * theta.sin() * std);
            }
        }
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_vec(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a `(1, 1)` tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.rows == 1 && self.cols == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape {
                op: "scalar",
                left: self.shape_vec(),
                right: vec![1, 1],
            })
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape_vec(),
                right: other.shape_vec(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let base = r * out.cols;
                for c in 0..other.cols {
                    out.data[base + c] += a * orow[c];
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transb(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_transb",
                left: self.shape_vec(),
                right: other.shape_vec(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let arow = self.row(r);
            for c in 0..other.rows {
                let brow = other.row(c);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.data[r * out.cols + c] = acc;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn transa_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "transa_matmul",
                left: self.shape_vec(),
                right: other.shape_vec(),
            });
        }
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for r in 0..self.cols {
                let a = arow[r];
                if a == 0.0 {
                    continue;
                }
                let base = r * out.cols;
                for c in 0..other.cols {
                    out.data[base + c] += a * brow[c];
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Immutable CSR sparse matrix for adjacency operations.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); rows];
        for &(r, c, v) in triplets {
            assert!(r < rows && c < cols);
            *per_row[r].entry(c).or_insert(0.0) += v;
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &per_row {
            for (&c, &v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        span.map(move |k| (self.col_idx[k], self.values[k]))
    }

    /// `S · x` for dense `x` of shape `(cols, d)`.
    pub fn mul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows != self.cols {
            return Err(Error::Shape {
                op: "sparse_dense_matmul",
                left: vec![self.rows, self.cols],
                right: x.shape_vec(),
            });
        }
        let mut out = Tensor::zeros(self.rows, x.cols);
        for r in 0..self.rows {
            let base = r * x.cols;
            for (c, v) in self.row_entries(r) {
                let xrow = x.row(c);
                for k in 0..x.cols {
                    out.data[base + k] += v * xrow[k];
                }
            }
        }
        Ok(out)
    }

    /// `Sᵀ · x` for dense `x` of shape `(rows, d)`.
    pub fn t_mul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows != self.rows {
            return Err(Error::Shape {
                op: "sparse_dense_matmul_t",
                left: vec![self.cols, self.rows],
                right: x.shape_vec(),
            });
        }
        let mut out = Tensor::zeros(self.cols, x.cols);
        for r in 0..self.rows {
            let xrow = x.row(r);
            for (c, v) in self.row_entries(r) {
                let base = c * x.cols;
                for k in 0..x.cols {
                    out.data[base + k] += v * xrow[k];
                }
            }
        }
        Ok(out)
    }

    /// Randomly drops nonzeros with probability `1 - keep`, scaling the
    /// survivors by `1/keep` (inverted dropout on edges).
    pub fn dropout_edges<R: Rng>(&self, keep: f64, rng: &mut R) -> Arc<SparseMatrix> {
        assert!(keep > 0.0 && keep <= 1.0);
        if keep >= 1.0 {
            return Arc::new(self.clone());
        }
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                if rng.random::<f64>() < keep {
                    triplets.push((r, c, v / keep));
                }
            }
        }
        Arc::new(SparseMatrix::from_triplets(self.rows, self.cols, &triplets))
    }
}

/// Handle to a named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// All learnable tensors, addressable by insertion slot or name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_coords(&self) -> usize {
        self.values.iter().map(|v| v.data.len()).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the binary blob, counted in doubles.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    tensors: Vec<CheckpointEntry>,
}

/// Writes the store as `params.bin` (raw little-endian doubles) plus
/// `manifest.json` describing names, shapes, and offsets.
pub fn save_checkpoint(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    // Name-sorted for stable output regardless of registration order.
    let mut order: Vec<usize> = (0..store.len()).collect();
    order.sort_by(|&a, &b| store.names[a].cmp(&store.names[b]));
    for i in order {
        let t = &store.values[i];
        entries.push(CheckpointEntry {
            name: store.names[i].clone(),
            rows: t.rows,
            cols: t.cols,
            offset,
        });
        for &v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.data.len();
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&CheckpointManifest { tensors: entries })?,
    )?;
    fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Parameters are
/// registered in manifest order.
pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Artifact(format!("cannot open {}: {}", manifest_path.display(), e))
        })?)?;
    let blob = fs::read(dir.join("params.bin"))
        .map_err(|e| Error::Artifact(format!("cannot open params.bin: {e}")))?;
    let mut store = ParamStore::new();
    for entry in manifest.tensors {
        let n = entry.rows * entry.cols;
        let start = entry.offset * 8;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Artifact(format!(
                "checkpoint blob too short for tensor {}",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.add(&entry.name, Tensor::from_flat(entry.rows, entry.cols, data));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data, vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        match a.matmul(&b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(5, 4, 1.0, &mut rng);
        let direct = a.matmul_transb(&b).unwrap();
        // Compare against explicit transpose.
        let mut bt = Tensor::zeros(4, 5);
        for r in 0..5 {
            for c in 0..4 {
                bt.set(c, r, b.get(r, c));
            }
        }
        let expected = a.matmul(&bt).unwrap();
        assert_eq!(direct, expected);
    }

    #[test]
    fn sparse_matches_dense() {
        let triplets = vec![(0, 1, 2.0), (1, 0, 1.0), (1, 2, -0.5), (2, 2, 3.0)];
        let s = SparseMatrix::from_triplets(3, 3, &triplets);
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
        let y = s.mul_dense(&x).unwrap();
        let mut dense = Tensor::zeros(3, 3);
        for &(r, c, v) in &triplets {
            dense.set(r, c, v);
        }
        assert_eq!(y, dense.matmul(&x).unwrap());

        let g = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let yt = s.t_mul_dense(&g).unwrap();
        let expected = dense.transa_matmul(&g).unwrap();
        assert_eq!(yt, expected);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.add("b/second", Tensor::randn(3, 2, 0.1, &mut rng));
        store.add("a/first", Tensor::randn(1, 5, 0.1, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        for (_, name, tensor) in store.iter() {
            let id = loaded.id_of(name).unwrap();
            assert_eq!(loaded.get(id), tensor, "mismatch for {name}");
        }
    }
}
