use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::DMatrix;

use super::{query_factors_with_index, reference_index, NngpFactors, NodeFactor};
use crate::error::Result;
use crate::geo::{NeighborIndex, Point};

/// Memoized blocks of `C̃_S` plus lookup structures for evaluating the NNGP
/// covariance at arbitrary locations.
pub struct CovarianceCache<'a> {
    f: &'a NngpFactors,
    index: NeighborIndex,
    lookup: HashMap<(u64, u64), usize>,
    blocks: RefCell<HashMap<(usize, usize), DMatrix<f64>>>,
}

enum Located {
    Reference(usize),
    Free(NodeFactor, Vec<usize>),
}

fn key(p: &Point) -> (u64, u64) {
    // +0.0 and -0.0 are the same location
    ((p[0] + 0.0).to_bits(), (p[1] + 0.0).to_bits())
}

impl<'a> CovarianceCache<'a> {
    pub fn new(f: &'a NngpFactors) -> Self {
        let dag = f.dag();
        let lookup = (0..dag.len()).map(|p| (key(dag.coord(p)), p)).collect();
        Self {
            f,
            index: reference_index(dag),
            lookup,
            blocks: RefCell::new(HashMap::new()),
        }
    }

    /// Block `C̃_{i,j}` for reference positions `i`, `j`.
    pub fn reference_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        if i >= j {
            self.lower(i, j)
        } else {
            self.lower(j, i).transpose()
        }
    }

    /// `C̃_{i,j}` for `i ≥ j` by `C̃_{i,j} = B_i C̃_{N(i),j} (+ F_i if i = j)`,
    /// evaluated with an explicit work stack.
    fn lower(&self, i: usize, j: usize) -> DMatrix<f64> {
        if let Some(b) = self.blocks.borrow().get(&(i, j)) {
            return b.clone();
        }
        let dag = self.f.dag();
        let q = self.f.q();
        let mut stack = vec![(i, j)];
        while let Some(&(a, b)) = stack.last() {
            let mut cache = self.blocks.borrow_mut();
            if cache.contains_key(&(a, b)) {
                stack.pop();
                continue;
            }
            let nb = dag.neighbors(a);
            let missing: Vec<(usize, usize)> = nb
                .iter()
                .map(|&n| (n.max(b), n.min(b)))
                .filter(|e| !cache.contains_key(e))
                .collect();
            if !missing.is_empty() {
                stack.extend(missing);
                continue;
            }
            let nf = self.f.node(a);
            let mut v = if a == b {
                nf.f.clone()
            } else {
                DMatrix::zeros(q, q)
            };
            for (l, &n) in nb.iter().enumerate() {
                // C̃_{n,b}
                let c = if n >= b {
                    cache[&(n, b)].clone()
                } else {
                    cache[&(b, n)].transpose()
                };
                v += nf.b.columns(l * q, q) * c;
            }
            if a == b {
                let t = v.transpose();
                v = (&v + t) * 0.5;
            }
            cache.insert((a, b), v);
            stack.pop();
        }
        self.blocks.borrow()[&(i, j)].clone()
    }

    fn locate(&self, v: &Point) -> Result<Located> {
        if let Some(&p) = self.lookup.get(&key(v)) {
            return Ok(Located::Reference(p));
        }
        let (nf, nb) = query_factors_with_index(self.f, &self.index, v)?;
        Ok(Located::Free(nf, nb))
    }

    /// `C̃_{N, t}` for a neighbor list and a reference position `t`.
    fn stack_column(&self, nb: &[usize], t: usize) -> DMatrix<f64> {
        let q = self.f.q();
        let mut out = DMatrix::zeros(nb.len() * q, q);
        for (l, &n) in nb.iter().enumerate() {
            out.view_mut((l * q, 0), (q, q))
                .copy_from(&self.reference_block(n, t));
        }
        out
    }

    /// NNGP cross-covariance `C̃(v1, v2)` between two arbitrary locations.
    pub fn cov(&self, v1: &Point, v2: &Point) -> Result<DMatrix<f64>> {
        let q = self.f.q();
        let l1 = self.locate(v1)?;
        let l2 = self.locate(v2)?;
        Ok(match (l1, l2) {
            (Located::Reference(i), Located::Reference(j)) => self.reference_block(i, j),
            (Located::Free(nf, nb), Located::Reference(j)) => &nf.b * self.stack_column(&nb, j),
            (Located::Reference(i), Located::Free(nf, nb)) => {
                (&nf.b * self.stack_column(&nb, i)).transpose()
            }
            (Located::Free(n1, nb1), Located::Free(n2, nb2)) => {
                let mut cnn = DMatrix::zeros(nb1.len() * q, nb2.len() * q);
                for (a, &x) in nb1.iter().enumerate() {
                    for (b, &y) in nb2.iter().enumerate() {
                        cnn.view_mut((a * q, b * q), (q, q))
                            .copy_from(&self.reference_block(x, y));
                    }
                }
                let mut c = &n1.b * cnn * n2.b.transpose();
                if key(v1) == key(v2) {
                    c += &n1.f;
                }
                c
            }
        })
    }
}

/// `C̃(v1, v2)` for a single pair; build a [`CovarianceCache`] to amortize
/// repeated evaluations.
pub fn nngp_cov(f: &NngpFactors, v1: &Point, v2: &Point) -> Result<DMatrix<f64>> {
    CovarianceCache::new(f).cov(v1, v2)
}

/// Dense `C̃_S` (position order) by the row recursion
/// `C̃_{i,j} = B_i C̃_{N(i),j}`. Cost `O(k² m q³)`.
pub fn dense_nngp_covariance(f: &NngpFactors) -> DMatrix<f64> {
    let k = f.len();
    let q = f.q();
    let dag = f.dag();
    let mut c = DMatrix::zeros(k * q, k * q);
    let mut v = DMatrix::zeros(q, q);
    for i in 0..k {
        let nb = dag.neighbors(i);
        let nf = f.node(i);
        for j in 0..=i {
            if i == j {
                v.copy_from(&nf.f);
            } else {
                v.fill(0.0);
            }
            // n < i, so row n is complete; column j ≤ i is filled for rows
            // < i and for row i up to j − 1 via symmetry below
            for (l, &n) in nb.iter().enumerate() {
                for w in 0..q {
                    for s in 0..q {
                        let cnj = c[(n * q + s, j * q + w)];
                        for u in 0..q {
                            v[(u, w)] += nf.b[(u, l * q + s)] * cnj;
                        }
                    }
                }
            }
            for u in 0..q {
                for w in 0..q {
                    let x = if i == j { 0.5 * (v[(u, w)] + v[(w, u)]) } else { v[(u, w)] };
                    c[(i * q + u, j * q + w)] = x;
                    c[(j * q + w, i * q + u)] = x;
                }
            }
        }
    }
    c
}
