//! Sparse bipartite interaction graph with symmetric normalization.
//!
//! The train split induces a user-item graph whose edge (u, i) carries weight
//! 1/√(|N(u)|·|N(i)|). Both orientations are kept in CSR form so that
//! item-to-user and user-to-item aggregation are plain sparse row products.
//! Self-loops are never materialized; convolution variants that need them add
//! the identity term on the fly.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::datapipe::Dataset;
use crate::{Error, Result};

/// Compressed sparse row matrix with f32 weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub data: Vec<f32>,
}

impl Csr {
    /// Builds from unordered (row, col, weight) triples; columns are sorted
    /// within each row.
    pub fn from_triples(
        n_rows: usize,
        n_cols: usize,
        triples: impl IntoIterator<Item = (u32, u32, f32)>,
    ) -> Self {
        let mut rows: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n_rows];
        for (r, c, w) in triples {
            rows[r as usize].push((c, w));
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in &mut rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            for &(c, w) in row.iter() {
                indices.push(c);
                data.push(w);
            }
            indptr.push(indices.len());
        }
        Csr {
            n_rows,
            n_cols,
            indptr,
            indices,
            data,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Column indices and weights of one row.
    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (lo, hi) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[lo..hi], &self.data[lo..hi])
    }

    /// Sparse-dense product `self · x`, rows in parallel, accumulated in f64.
    pub fn matmul(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        if x.nrows() != self.n_cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows", self.n_cols),
                found: format!("{} rows", x.nrows()),
            });
        }
        let d = x.ncols();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array2::<f32>::zeros((self.n_rows, d));
        let out_slice = out.as_slice_mut().expect("freshly allocated");
        out_slice
            .par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(r, row_out)| {
                let mut acc = vec![0f64; d];
                for k in self.indptr[r]..self.indptr[r + 1] {
                    let c = self.indices[k] as usize;
                    let w = self.data[k] as f64;
                    for (a, &v) in acc.iter_mut().zip(&xs[c * d..(c + 1) * d]) {
                        *a += w * v as f64;
                    }
                }
                for (o, &a) in row_out.iter_mut().zip(&acc) {
                    *o = a as f32;
                }
            });
        Ok(out)
    }
}

/// Normalized bipartite train graph in both orientations.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    pub n_users: usize,
    pub n_items: usize,
    /// users × items block, weights 1/√(|N(u)|·|N(i)|).
    pub r: Csr,
    /// items × users transpose of `r`.
    pub rt: Csr,
}

/// Builds the normalized graph from a dataset's train split.
pub fn build_graph(dataset: &Dataset) -> Result<BipartiteGraph> {
    for (u, &deg) in dataset.user_degree.iter().enumerate() {
        if deg == 0 {
            return Err(Error::IsolatedNode { kind: "user", id: u });
        }
    }
    for (i, &deg) in dataset.item_degree.iter().enumerate() {
        if deg == 0 {
            return Err(Error::IsolatedNode { kind: "item", id: i });
        }
    }

    let weight = |u: u32, i: u32| -> f32 {
        let du = dataset.user_degree[u as usize] as f64;
        let di = dataset.item_degree[i as usize] as f64;
        (1.0 / (du * di).sqrt()) as f32
    };
    let r = Csr::from_triples(
        dataset.n_users,
        dataset.n_items,
        dataset.train.iter().map(|&(u, i)| (u, i, weight(u, i))),
    );
    let rt = Csr::from_triples(
        dataset.n_items,
        dataset.n_users,
        dataset.train.iter().map(|&(u, i)| (i, u, weight(u, i))),
    );
    Ok(BipartiteGraph {
        n_users: dataset.n_users,
        n_items: dataset.n_items,
        r,
        rt,
    })
}

impl BipartiteGraph {
    /// Sorted train items of one user.
    pub fn user_items(&self, u: usize) -> &[u32] {
        self.r.row(u).0
    }

    /// u_out[u] = Σ_{i ∈ N(u)} w_ui · items[i].
    pub fn agg_items_to_users(&self, items: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.r.matmul(items)
    }

    /// v_out[i] = Σ_{u ∈ N(i)} w_ui · users[u].
    pub fn agg_users_to_items(&self, users: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.rt.matmul(users)
    }
}
