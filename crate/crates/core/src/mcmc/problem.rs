use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geo::{
    build_neighbor_dag, order_locations, LocationSet, NeighborDag, NeighborScheme, NodeRef,
    OrderStrategy, Point,
};
use crate::model::{validate, BetaPrior, Dataset, ModelSpec, PriorSpec, ValidationReport};
use crate::par::Execution;

/// Where the NNGP reference set comes from.
#[derive(Clone, Debug, Default)]
pub enum ReferenceSet {
    /// `S = T`: the observed locations.
    #[default]
    Observed,
    /// A separate set (for example a grid). Observed locations outside it
    /// hang off the DAG as query nodes.
    Locations(LocationSet),
}

#[derive(Clone, Debug)]
pub struct NngpConfig {
    pub m: usize,
    pub scheme: NeighborScheme,
    pub ordering: OrderStrategy,
    pub reference: ReferenceSet,
}

impl Default for NngpConfig {
    fn default() -> Self {
        Self {
            m: 10,
            scheme: NeighborScheme::Nearest,
            ordering: OrderStrategy::ByCoordSum,
            reference: ReferenceSet::Observed,
        }
    }
}

impl NngpConfig {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            ..Self::default()
        }
    }
}

fn key(p: &Point) -> (u64, u64) {
    ((p[0] + 0.0).to_bits(), (p[1] + 0.0).to_bits())
}

/// A validated model bound to its data and neighbor DAG.
#[derive(Clone, Debug)]
pub struct Problem {
    pub data: Dataset,
    pub spec: ModelSpec,
    pub priors: PriorSpec,
    pub report: ValidationReport,
    /// `n × q`
    pub z: DMatrix<f64>,
    pub dag: Arc<NeighborDag>,
    /// Node of each observation.
    pub obs_node: Vec<NodeRef>,
    /// Observation at each reference position, if any.
    pub ref_obs: Vec<Option<usize>>,
    /// Observation behind each query node.
    pub query_obs: Vec<usize>,
    pub(crate) xr: Vec<f64>,
    pub(crate) zr: Vec<f64>,
    pub(crate) xtx: DMatrix<f64>,
    pub(crate) beta_prec: DMatrix<f64>,
    pub(crate) beta_prec_mean: DVector<f64>,
}

impl Problem {
    pub fn new(
        data: Dataset,
        spec: ModelSpec,
        priors: PriorSpec,
        nngp: &NngpConfig,
        exec: Execution,
    ) -> Result<Self> {
        let reference = match &nngp.reference {
            ReferenceSet::Observed => data.locations.clone(),
            ReferenceSet::Locations(l) => l.clone(),
        };
        let report = validate(&spec, &priors, &data, reference.len(), nngp.m)?;
        let z = spec.z_matrix(&data)?;
        let ordering = order_locations(&reference, nngp.ordering);
        let mut dag = build_neighbor_dag(&reference, &ordering, nngp.m.max(1), nngp.scheme, exec)?;
        let n = data.n();
        let k = dag.len();
        let mut obs_node = Vec::with_capacity(n);
        let mut ref_obs = vec![None; k];
        let mut query_obs = Vec::new();
        let mut query_pts = Vec::new();
        match &nngp.reference {
            ReferenceSet::Observed => {
                for o in 0..n {
                    let p = dag.position_of(o);
                    obs_node.push(NodeRef::Reference(p));
                    ref_obs[p] = Some(o);
                }
            }
            ReferenceSet::Locations(_) => {
                let lookup: HashMap<(u64, u64), usize> =
                    (0..k).map(|p| (key(dag.coord(p)), p)).collect();
                for o in 0..n {
                    let pt = data.locations.point(o);
                    match lookup.get(&key(pt)) {
                        Some(&p) => {
                            obs_node.push(NodeRef::Reference(p));
                            ref_obs[p] = Some(o);
                        }
                        None => {
                            obs_node.push(NodeRef::Query(query_obs.len()));
                            query_obs.push(o);
                            query_pts.push(*pt);
                        }
                    }
                }
                dag.attach_queries(&query_pts, exec)?;
            }
        }
        let p = data.p();
        let q = z.ncols();
        let xr: Vec<f64> = (0..n).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| data.x[(i, j)]).collect();
        let zr: Vec<f64> = (0..n).flat_map(|i| (0..q).map(move |j| (i, j))).map(|(i, j)| z[(i, j)]).collect();
        let xtx = data.x.transpose() * &data.x;
        let (beta_prec, beta_prec_mean) = match &priors.beta {
            BetaPrior::Flat => (DMatrix::zeros(p, p), DVector::zeros(p)),
            BetaPrior::Normal { mean, cov } => {
                let inv = cov
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Validation("beta prior covariance must be positive definite".into()))?
                    .inverse();
                let pm = &inv * mean;
                (inv, pm)
            }
        };
        Ok(Self {
            data,
            spec,
            priors,
            report,
            z,
            dag: Arc::new(dag),
            obs_node,
            ref_obs,
            query_obs,
            xr,
            zr,
            xtx,
            beta_prec,
            beta_prec_mean,
        })
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn p(&self) -> usize {
        self.data.p()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    /// Number of reference nodes.
    pub fn k(&self) -> usize {
        self.dag.len()
    }

    /// Length of the latent vector over reference and query nodes.
    pub fn w_len(&self) -> usize {
        (self.dag.len() + self.dag.num_queries()) * self.q()
    }

    /// True when every observation is a reference node and vice versa.
    pub fn s_equals_t(&self) -> bool {
        self.query_obs.is_empty() && self.ref_obs.iter().all(Option::is_some)
    }

    /// Offset of a node's block in the latent vector.
    pub fn node_index(&self, node: NodeRef) -> usize {
        let q = self.q();
        match node {
            NodeRef::Reference(p) => p * q,
            NodeRef::Query(j) => (self.dag.len() + j) * q,
        }
    }

    pub fn x_row(&self, o: usize) -> &[f64] {
        let p = self.p();
        &self.xr[o * p..(o + 1) * p]
    }

    pub fn z_row(&self, o: usize) -> &[f64] {
        let q = self.q();
        &self.zr[o * q..(o + 1) * q]
    }

    /// `X β`
    pub fn x_beta(&self, beta: &DVector<f64>) -> Vec<f64> {
        (0..self.n())
            .map(|o| self.x_row(o).iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `z(t)′ w(t)` at each observation.
    pub fn z_w(&self, w: &[f64]) -> Vec<f64> {
        let q = self.q();
        (0..self.n())
            .map(|o| {
                let at = self.node_index(self.obs_node[o]);
                self.z_row(o).iter().zip(&w[at..at + q]).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Latent values at each observation (`n × q`, row-major).
    pub fn w_at_observations(&self, w: &[f64]) -> Vec<f64> {
        let q = self.q();
        let mut out = Vec::with_capacity(self.n() * q);
        for o in 0..self.n() {
            let at = self.node_index(self.obs_node[o]);
            out.extend_from_slice(&w[at..at + q]);
        }
        out
    }

    /// `Σ_i log N(y_i | x_i′β + z_i′w, τ²)`.
    pub fn conditional_log_lik(&self, beta: &DVector<f64>, tau2: f64, w: &[f64]) -> f64 {
        let xb = self.x_beta(beta);
        let zw = if self.q() > 0 { self.z_w(w) } else { vec![0.0; self.n()] };
        let rss: f64 = (0..self.n())
            .map(|o| (self.data.y[o] - xb[o] - zw[o]).powi(2))
            .sum();
        -0.5 * (self.n() as f64 * (2.0 * std::f64::consts::PI * tau2).ln() + rss / tau2)
    }
}
