//! User/item embedding matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether a set holds raw trained embeddings or post-convolution ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Initial,
    Convolved,
}

/// A user matrix (`n_users × d`) and an item matrix (`n_items × d`) of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub users: Array2<f32>,
    pub items: Array2<f32>,
    pub flavor: Flavor,
}

impl EmbeddingSet {
    pub fn new(users: Array2<f32>, items: Array2<f32>, flavor: Flavor) -> Result<Self> {
        if users.ncols() != items.ncols() {
            return Err(Error::ShapeMismatch {
                expected: format!("item dim {}", users.ncols()),
                found: format!("item dim {}", items.ncols()),
            });
        }
        Ok(Self {
            users,
            items,
            flavor,
        })
    }

    pub fn zeros(n_users: usize, n_items: usize, dim: usize, flavor: Flavor) -> Self {
        Self {
            users: Array2::zeros((n_users, dim)),
            items: Array2::zeros((n_items, dim)),
            flavor,
        }
    }

    pub fn n_users(&self) -> usize {
        self.users.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.items.nrows()
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in [("user", &self.users), ("item", &self.items)] {
            if let Some((row, _)) = m
                .outer_iter()
                .enumerate()
                .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::NonFinite {
                    what: format!("{name} row {row}"),
                });
            }
        }
        Ok(())
    }
}

/// Row-wise L2 normalization in f64, erroring on zero-norm rows.
///
/// Returns one `Vec<f64>` of length `d` per row.
pub(crate) fn normalized_rows_f64(
    m: &Array2<f32>,
    matrix: &'static str,
) -> Result<Vec<Vec<f64>>> {
    m.outer_iter()
        .enumerate()
        .map(|(row, r)| {
            let v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow { matrix, row });
            }
            Ok(v.iter().map(|x| x / norm).collect())
        })
        .collect()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
