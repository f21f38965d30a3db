use std::collections::HashMap;

use nalgebra::DMatrix;

use super::NngpFactors;
use crate::par::{map_indexed, Execution};
use crate::sparse::SymmetricCsc;

/// Block-sparse `C̃_S⁻¹ = B′F⁻¹B`, lower triangle only, stored by block
/// column. Each column lists `(row, block)` with `row ≥ col`, rows ascending.
#[derive(Clone, Debug)]
pub struct SparsePrecision {
    k: usize,
    q: usize,
    columns: Vec<Vec<(usize, DMatrix<f64>)>>,
}

/// Builds `B′F⁻¹B` by summing the contribution of each node `l`: with
/// `A_l = [I, −B_l]` over `{l} ∪ N(l)`, node `l` adds `A_l′ F_l⁻¹ A_l`.
pub fn assemble_precision(f: &NngpFactors, exec: Execution) -> SparsePrecision {
    let k = f.len();
    let q = f.q();
    let dag = f.dag();
    let contributions = map_indexed(exec, k, |l| {
        let nf = f.node(l);
        let nb = dag.neighbors(l);
        let mut members = Vec::with_capacity(nb.len() + 1);
        members.push(l);
        members.extend_from_slice(nb);
        // A_l as a q × (|members| q) matrix
        let mut a = DMatrix::zeros(q, members.len() * q);
        for d in 0..q {
            a[(d, d)] = 1.0;
        }
        if !nb.is_empty() {
            a.columns_mut(q, nb.len() * q).copy_from(&(-&nf.b));
        }
        let fa = &nf.f_inv * &a;
        let mut out = Vec::with_capacity(members.len() * (members.len() + 1) / 2);
        for (x, &i) in members.iter().enumerate() {
            for (y, &j) in members.iter().enumerate() {
                if i < j {
                    continue;
                }
                let blk = a.columns(x * q, q).transpose() * fa.columns(y * q, q);
                out.push((i, j, blk));
            }
        }
        out
    });
    let mut map: HashMap<(usize, usize), DMatrix<f64>> = HashMap::new();
    for list in contributions {
        for (i, j, blk) in list {
            map.entry((i, j))
                .and_modify(|e| *e += &blk)
                .or_insert(blk);
        }
    }
    let mut columns: Vec<Vec<(usize, DMatrix<f64>)>> = vec![Vec::new(); k];
    for ((i, j), blk) in map {
        columns[j].push((i, blk));
    }
    for c in &mut columns {
        c.sort_by_key(|e| e.0);
        // diagonal blocks must be exactly symmetric
        if let Some((_, d)) = c.first_mut() {
            let t = d.transpose();
            *d = (&*d + t) * 0.5;
        }
    }
    SparsePrecision { k, q, columns }
}

impl SparsePrecision {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Nonzero blocks strictly below the diagonal.
    pub fn nnz_offdiag_blocks(&self) -> usize {
        self.columns
            .iter()
            .enumerate()
            .map(|(j, c)| c.iter().filter(|(i, _)| *i != j).count())
            .sum()
    }

    /// Block `(i, j)` with `i ≥ j`, if stored.
    pub fn block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        let col = &self.columns[j];
        col.binary_search_by_key(&i, |e| e.0).ok().map(|p| &col[p].1)
    }

    /// Lower-triangle blocks of column `j`.
    pub fn column(&self, j: usize) -> &[(usize, DMatrix<f64>)] {
        &self.columns[j]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let q = self.q;
        let mut d = DMatrix::zeros(self.k * q, self.k * q);
        for (j, col) in self.columns.iter().enumerate() {
            for (i, blk) in col {
                d.view_mut((i * q, j * q), (q, q)).copy_from(blk);
                if *i != j {
                    d.view_mut((j * q, i * q), (q, q)).copy_from(&blk.transpose());
                }
            }
        }
        d
    }

    /// `y = P x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let q = self.q;
        let mut y = vec![0.0; self.k * q];
        for (j, col) in self.columns.iter().enumerate() {
            for (i, blk) in col {
                for a in 0..q {
                    for b in 0..q {
                        let v = blk[(a, b)];
                        y[i * q + a] += v * x[j * q + b];
                        if *i != j {
                            y[j * q + b] += v * x[i * q + a];
                        }
                    }
                }
            }
        }
        y
    }

    /// `x′ P x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let y = self.mul_vec(x);
        x.iter().zip(&y).map(|(a, b)| a * b).sum()
    }

    /// Scalar lower-triangle triplets `(row, col, value)`, `row ≥ col`.
    pub fn lower_triplets(&self) -> Vec<(usize, usize, f64)> {
        let q = self.q;
        let mut out = Vec::new();
        for (j, col) in self.columns.iter().enumerate() {
            for (i, blk) in col {
                for a in 0..q {
                    for b in 0..q {
                        let (r, c) = (i * q + a, j * q + b);
                        if r >= c {
                            out.push((r, c, blk[(a, b)]));
                        }
                    }
                }
            }
        }
        out
    }

    /// The precision plus an optional diagonal, as a scalar sparse matrix.
    pub fn to_csc_plus_diagonal(&self, diag: Option<&[f64]>) -> SymmetricCsc {
        let mut t = self.lower_triplets();
        if let Some(d) = diag {
            t.extend(d.iter().enumerate().map(|(i, &v)| (i, i, v)));
        }
        SymmetricCsc::from_lower_triplets(self.k * self.q, &t)
    }

    pub fn to_csc(&self) -> SymmetricCsc {
        self.to_csc_plus_diagonal(None)
    }
}
