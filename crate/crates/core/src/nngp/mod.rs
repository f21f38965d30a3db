//! Core NNGP mathematics: conditional factors `B_i`, `F_i`, the sparse
//! precision `B′F⁻¹B`, exact log-densities, the induced process covariance
//! and the Kullback-Leibler diagnostic against the parent process.

mod covariance;
mod kl;
mod precision;

pub use covariance::{dense_nngp_covariance, nngp_cov, CovarianceCache};
pub use kl::kl_divergence;
pub use precision::{assemble_precision, SparsePrecision};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cov::CrossCovariance;
use crate::error::{Error, Result};
use crate::geo::{dist, NeighborDag, NeighborIndex, NodeRef, Point};
use crate::par::{map_indexed, try_map_indexed, Execution};

/// Covariance between nodes of a [`NeighborDag`] (reference or query).
///
/// Implementations must add the diagonal jitter whenever `a == b` so that
/// every conditional solve sees the same jittered parent covariance.
pub trait BlockCovariance: Sync {
    fn block_dim(&self) -> usize;

    /// Writes the `q×q` block `Cov(a, b)` into `out` at `(r0, c0)`.
    fn write_block(&self, a: NodeRef, b: NodeRef, out: &mut DMatrix<f64>, r0: usize, c0: usize);
}

/// Covariance of the latent process `w` under a cross-covariance.
pub struct LatentCovariance<'a> {
    pub dag: &'a NeighborDag,
    pub cross: &'a CrossCovariance,
    jitter: f64,
}

impl<'a> LatentCovariance<'a> {
    pub fn new(dag: &'a NeighborDag, cross: &'a CrossCovariance) -> Self {
        Self {
            dag,
            cross,
            jitter: cross.jitter(),
        }
    }
}

impl BlockCovariance for LatentCovariance<'_> {
    fn block_dim(&self) -> usize {
        self.cross.q()
    }

    fn write_block(&self, a: NodeRef, b: NodeRef, out: &mut DMatrix<f64>, r0: usize, c0: usize) {
        let d = dist(self.dag.node_coord(a), self.dag.node_coord(b));
        self.cross.write_cov(d, out, r0, c0);
        if a == b {
            for i in 0..self.cross.q() {
                out[(r0 + i, c0 + i)] += self.jitter;
            }
        }
    }
}

/// Conditional factors of one node: `w(s) | w_N(s) ~ N(B w_N(s), F)`.
#[derive(Clone, Debug)]
pub struct NodeFactor {
    /// `q × |N| q`
    pub b: DMatrix<f64>,
    /// `q × q`
    pub f: DMatrix<f64>,
    pub f_inv: DMatrix<f64>,
    pub log_det_f: f64,
}

impl NodeFactor {
    /// Block of `B` multiplying the `l`-th neighbor.
    pub fn b_block(&self, l: usize) -> DMatrix<f64> {
        let q = self.f.nrows();
        self.b.columns(l * q, q).into_owned()
    }
}

/// NNGP factors for every reference node (by position) and every attached
/// query node.
#[derive(Clone, Debug)]
pub struct NngpFactors {
    dag: Arc<NeighborDag>,
    q: usize,
    reference: Vec<NodeFactor>,
    queries: Vec<NodeFactor>,
    cross: Option<CrossCovariance>,
}

impl NngpFactors {
    pub fn dag(&self) -> &Arc<NeighborDag> {
        &self.dag
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    pub fn node(&self, pos: usize) -> &NodeFactor {
        &self.reference[pos]
    }

    pub fn query(&self, j: usize) -> &NodeFactor {
        &self.queries[j]
    }

    pub fn factor(&self, node: NodeRef) -> &NodeFactor {
        match node {
            NodeRef::Reference(p) => &self.reference[p],
            NodeRef::Query(j) => &self.queries[j],
        }
    }

    /// The latent cross-covariance the factors were built from, if any.
    pub fn cross(&self) -> Option<&CrossCovariance> {
        self.cross.as_ref()
    }

    /// `log det C̃_S = Σ_i log det F_i`.
    pub fn log_det(&self) -> f64 {
        self.reference.iter().map(|f| f.log_det_f).sum()
    }
}

pub(crate) fn node_factor<C: BlockCovariance + ?Sized>(
    cov: &C,
    node: NodeRef,
    neighbors: &[usize],
    label: usize,
) -> Result<NodeFactor> {
    let q = cov.block_dim();
    let r = neighbors.len();
    let mut c_ii = DMatrix::zeros(q, q);
    cov.write_block(node, node, &mut c_ii, 0, 0);
    let (b, f) = if r == 0 {
        (DMatrix::zeros(q, 0), c_ii)
    } else {
        let mut c_nn = DMatrix::zeros(r * q, r * q);
        let mut c_ni = DMatrix::zeros(r * q, q);
        for a in 0..r {
            let na = NodeRef::Reference(neighbors[a]);
            for bi in 0..=a {
                cov.write_block(na, NodeRef::Reference(neighbors[bi]), &mut c_nn, a * q, bi * q);
                if bi != a {
                    for u in 0..q {
                        for v in 0..q {
                            c_nn[(bi * q + v, a * q + u)] = c_nn[(a * q + u, bi * q + v)];
                        }
                    }
                }
            }
            cov.write_block(na, node, &mut c_ni, a * q, 0);
        }
        let chol = c_nn
            .cholesky()
            .ok_or(Error::SingularNeighborCovariance(label))?;
        let sol = chol.solve(&c_ni);
        let mut f = c_ii - c_ni.transpose() * &sol;
        let ft = f.transpose();
        f = (f + ft) * 0.5;
        (sol.transpose(), f)
    };
    let chol_f = f
        .clone()
        .cholesky()
        .ok_or(Error::SingularNeighborCovariance(label))?;
    let log_det_f = 2.0 * chol_f.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let f_inv = chol_f.inverse();
    Ok(NodeFactor {
        b,
        f,
        f_inv,
        log_det_f,
    })
}

/// Computes factors for every reference and query node of `dag` under an
/// arbitrary block covariance.
pub fn compute_factors_with<C: BlockCovariance + ?Sized>(
    dag: &Arc<NeighborDag>,
    cov: &C,
    exec: Execution,
) -> Result<NngpFactors> {
    let reference = try_map_indexed(exec, dag.len(), |i| {
        node_factor(cov, NodeRef::Reference(i), dag.neighbors(i), dag.id_of(i))
    })?;
    let queries = try_map_indexed(exec, dag.num_queries(), |j| {
        node_factor(cov, NodeRef::Query(j), dag.query_neighbors(j), j)
    })?;
    Ok(NngpFactors {
        dag: Arc::clone(dag),
        q: cov.block_dim(),
        reference,
        queries,
        cross: None,
    })
}

/// Computes the latent-process factors `B_i = C_{i,N} C_N⁻¹` and
/// `F_i = C_ii − C_{i,N} C_N⁻¹ C_{N,i}` through Cholesky solves.
pub fn compute_factors(
    dag: &Arc<NeighborDag>,
    cross: &CrossCovariance,
    exec: Execution,
) -> Result<NngpFactors> {
    cross.validate()?;
    let cov = LatentCovariance::new(dag, cross);
    let mut f = compute_factors_with(dag, &cov, exec)?;
    f.cross = Some(cross.clone());
    Ok(f)
}

/// `w_N` gathered from a position-ordered vector with `q` entries per node.
pub(crate) fn gather(w: &[f64], neighbors: &[usize], q: usize) -> DVector<f64> {
    let mut out = DVector::zeros(neighbors.len() * q);
    for (l, &p) in neighbors.iter().enumerate() {
        for a in 0..q {
            out[l * q + a] = w[p * q + a];
        }
    }
    out
}

fn node_log_density(f: &NodeFactor, w_node: &[f64], w_n: &DVector<f64>) -> f64 {
    let q = f.f.nrows();
    let mut e = DVector::from_column_slice(w_node);
    if w_n.len() > 0 {
        e -= &f.b * w_n;
    }
    let quad = (e.transpose() * &f.f_inv * &e)[(0, 0)];
    -0.5 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + f.log_det_f + quad)
}

/// Per-node log conditional densities of `w_S` (position order).
pub fn log_density_terms(f: &NngpFactors, w_s: &[f64], exec: Execution) -> Result<Vec<f64>> {
    let q = f.q;
    let k = f.len();
    if w_s.len() != k * q {
        return Err(Error::DimensionMismatch {
            context: "w_S",
            expected: k * q,
            got: w_s.len(),
        });
    }
    let dag = &f.dag;
    Ok(map_indexed(exec, k, |i| {
        let wn = gather(w_s, dag.neighbors(i), q);
        node_log_density(&f.reference[i], &w_s[i * q..(i + 1) * q], &wn)
    }))
}

/// `log N(w_S | 0, C̃_S) = Σ_i log N(w(s_i) | B_i w_N(s_i), F_i)`.
///
/// Terms are summed in position order so the result does not depend on the
/// thread count.
pub fn log_density(f: &NngpFactors, w_s: &[f64], exec: Execution) -> Result<f64> {
    Ok(log_density_terms(f, w_s, exec)?.iter().sum())
}

/// `log N(w_U | B_U w_S, F_U)` for the attached queries.
pub fn log_density_queries(
    f: &NngpFactors,
    w_s: &[f64],
    w_u: &[f64],
    exec: Execution,
) -> Result<f64> {
    let q = f.q;
    let nq = f.queries.len();
    if w_u.len() != nq * q || w_s.len() != f.len() * q {
        return Err(Error::DimensionMismatch {
            context: "w_U",
            expected: nq * q,
            got: w_u.len(),
        });
    }
    let dag = &f.dag;
    let terms = map_indexed(exec, nq, |j| {
        let wn = gather(w_s, dag.query_neighbors(j), q);
        node_log_density(&f.queries[j], &w_u[j * q..(j + 1) * q], &wn)
    });
    Ok(terms.iter().sum())
}

/// Lazily built exact-NN index over the reference coordinates.
pub(crate) fn reference_index(dag: &NeighborDag) -> NeighborIndex {
    NeighborIndex::new(dag.coords())
}

/// Factors `(B_u, F_u)` and neighbor positions for a location outside the
/// reference set, conditioned on its `m` nearest reference locations.
pub fn query_factors(f: &NngpFactors, u: &Point) -> Result<(NodeFactor, Vec<usize>)> {
    let index = reference_index(&f.dag);
    query_factors_with_index(f, &index, u)
}

pub(crate) fn query_factors_with_index(
    f: &NngpFactors,
    index: &NeighborIndex,
    u: &Point,
) -> Result<(NodeFactor, Vec<usize>)> {
    let cross = f.cross.as_ref().ok_or_else(|| {
        Error::Validation("query factors need latent factors built from a cross-covariance".into())
    })?;
    let dag = &f.dag;
    let ids: Vec<usize> = (0..dag.len()).map(|p| dag.id_of(p)).collect();
    let m = dag.m().min(dag.len());
    let list = index.nearest_with_ids(u, m, &ids, |_| true);
    if let Some(&(d2, p)) = list.first() {
        if d2 == 0.0 {
            return Err(Error::QueryOnReference(dag.id_of(p)));
        }
    }
    let neighbors: Vec<usize> = list.into_iter().map(|(_, p)| p).collect();
    let cov = PointCovariance {
        dag,
        cross,
        point: *u,
        jitter: cross.jitter(),
    };
    let nf = node_factor(&cov, NodeRef::Query(usize::MAX), &neighbors, usize::MAX)?;
    Ok((nf, neighbors))
}

/// Latent covariance where `NodeRef::Query(usize::MAX)` denotes a free point.
struct PointCovariance<'a> {
    dag: &'a NeighborDag,
    cross: &'a CrossCovariance,
    point: Point,
    jitter: f64,
}

impl PointCovariance<'_> {
    fn coord(&self, n: NodeRef) -> &Point {
        match n {
            NodeRef::Query(usize::MAX) => &self.point,
            other => self.dag.node_coord(other),
        }
    }
}

impl BlockCovariance for PointCovariance<'_> {
    fn block_dim(&self) -> usize {
        self.cross.q()
    }

    fn write_block(&self, a: NodeRef, b: NodeRef, out: &mut DMatrix<f64>, r0: usize, c0: usize) {
        let d = dist(self.coord(a), self.coord(b));
        self.cross.write_cov(d, out, r0, c0);
        if a == b {
            for i in 0..self.cross.q() {
                out[(r0 + i, c0 + i)] += self.jitter;
            }
        }
    }
}

#[cfg(test)]
mod tests;
