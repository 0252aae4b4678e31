//! Fixed sparse linear maps applied row-wise to `[batch, in_dim]` tensors.
//!
//! Convolution patches (im2col), mean pooling and bicubic upsampling are all
//! linear with constant coefficients. Storing both the map and its transpose
//! lets the graph express the vector-Jacobian product of one as the other, so
//! these operators stay differentiable to any order.

use std::sync::Arc;

/// Compressed sparse rows: `rows[r]` lists `(input column, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
struct Csr {
    in_dim: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Csr {
    fn out_dim(&self) -> usize {
        self.offsets.len() - 1
    }

    fn apply_row(&self, input: &[f64], output: &mut [f64]) {
        for (r, out) in output.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in self.offsets[r]..self.offsets[r + 1] {
                acc += self.weights[j] * input[self.cols[j]];
            }
            *out = acc;
        }
    }

    fn transpose(&self) -> Csr {
        let out_dim = self.out_dim();
        let mut counts = vec![0usize; self.in_dim + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for i in 0..self.in_dim {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0; self.cols.len()];
        let mut weights = vec![0.0; self.cols.len()];
        // Rows are visited in increasing order, so each transposed row keeps
        // its entries sorted by column.
        for r in 0..out_dim {
            for j in self.offsets[r]..self.offsets[r + 1] {
                let c = self.cols[j];
                let slot = fill[c];
                cols[slot] = r;
                weights[slot] = self.weights[j];
                fill[c] += 1;
            }
        }
        Csr {
            in_dim: out_dim,
            offsets,
            cols,
            weights,
        }
    }
}

/// A named constant linear operator `R^in_dim -> R^out_dim`.
#[derive(Debug, PartialEq)]
pub struct SparseMap {
    name: String,
    forward: Csr,
    adjoint: Csr,
}

impl SparseMap {
    /// Builds the map from per-output-row entry lists.
    ///
    /// Duplicate columns within a row are merged. Panics if a column is out of
    /// range.
    pub fn from_rows(name: impl Into<String>, in_dim: usize, rows: Vec<Vec<(usize, f64)>>) -> Arc<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, w) in row {
                assert!(c < in_dim, "column {c} out of range for input dim {in_dim}");
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += w,
                    _ => merged.push((c, w)),
                }
            }
            for (c, w) in merged {
                cols.push(c);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        let forward = Csr {
            in_dim,
            offsets,
            cols,
            weights,
        };
        let adjoint = forward.transpose();
        Arc::new(SparseMap {
            name: name.into(),
            forward,
            adjoint,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.forward.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.forward.out_dim()
    }

    /// Input and output dimensions of the map (or of its transpose).
    pub fn dims(&self, transposed: bool) -> (usize, usize) {
        if transposed {
            (self.out_dim(), self.in_dim())
        } else {
            (self.in_dim(), self.out_dim())
        }
    }

    /// Applies the map (or its transpose) to each row of a `[batch, in]` buffer.
    pub fn apply(&self, input: &[f64], batch: usize, transposed: bool) -> Vec<f64> {
        let csr = if transposed { &self.adjoint } else { &self.forward };
        let (n_in, n_out) = (csr.in_dim, csr.out_dim());
        debug_assert_eq!(input.len(), batch * n_in);
        let mut out = vec![0.0; batch * n_out];
        for b in 0..batch {
            csr.apply_row(&input[b * n_in..(b + 1) * n_in], &mut out[b * n_out..(b + 1) * n_out]);
        }
        out
    }

    /// Dense `out_dim x in_dim` matrix, for tests and small diagnostics.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.in_dim()]; self.out_dim()];
        for (r, row) in dense.iter_mut().enumerate() {
            for j in self.forward.offsets[r]..self.forward.offsets[r + 1] {
                row[self.forward.cols[j]] += self.forward.weights[j];
            }
        }
        dense
    }
}
