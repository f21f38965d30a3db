use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};

use super::{LatentPoint, FREE};
use crate::cov::ThetaParams;
use crate::error::{Error, Result};
use crate::geo::{LocationSet, NeighborIndex};
use crate::mcmc::updates::{posterior_precision, zt_dinv};
use crate::mcmc::Problem;
use crate::nngp::{assemble_precision, compute_factors, node_factor};
use crate::par::{try_map_indexed, Execution};
use crate::sparse::SparseCholesky;

/// Plug-in kriging of the latent signal `z(t)′w(t)` at fixed `(β, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kriged {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Full conditional covariance, when computed jointly.
    pub cov: Option<DMatrix<f64>>,
}

/// Conditions each new location separately on `y` through the NNGP built on
/// `S = T`: `E = B_t E[w_N | y]`, `Var = F_t + B_t Var(w_N | y) B_t′`.
pub fn krige_latent(
    problem: &Problem,
    beta: &DVector<f64>,
    theta: &ThetaParams,
    locations: &LocationSet,
    z_new: &DMatrix<f64>,
    exec: Execution,
) -> Result<Kriged> {
    if !problem.s_equals_t() {
        return Err(Error::Validation("latent kriging needs S = T".into()));
    }
    let q = problem.q();
    if q == 0 {
        return Err(Error::Validation("latent kriging needs a spatial model".into()));
    }
    let f = compute_factors(&problem.dag, &theta.cross, exec)?;
    let prec = assemble_precision(&f, exec);
    let post = SparseCholesky::factor(&posterior_precision(problem, &prec, theta.tau2))?;
    let xb = problem.x_beta(beta);
    let r: Vec<f64> = problem.data.y.iter().zip(&xb).map(|(y, m)| y - m).collect();
    let mu = post.solve(&zt_dinv(problem, &r, theta.tau2));
    let dim = mu.len();
    let columns: Mutex<HashMap<usize, Vec<f64>>> = Mutex::new(HashMap::new());
    let column = |c: usize| -> Vec<f64> {
        if let Some(v) = columns.lock().expect("cache lock").get(&c) {
            return v.clone();
        }
        let mut e = vec![0.0; dim];
        e[c] = 1.0;
        let v = post.solve(&e);
        columns.lock().expect("cache lock").insert(c, v.clone());
        v
    };

    let dag = &problem.dag;
    let index = NeighborIndex::new(dag.coords());
    let ids: Vec<usize> = (0..dag.len()).map(|p| dag.id_of(p)).collect();
    let m = dag.m().min(dag.len());
    let out = try_map_indexed(exec, locations.len(), |j| -> Result<(f64, f64)> {
        let pt = *locations.point(j);
        let z: Vec<f64> = z_new.row(j).iter().copied().collect();
        let near = index.nearest_with_ids(&pt, m, &ids, |_| true);
        let (mean_w, var_w) = match near.first() {
            Some(&(d2, p)) if d2 == 0.0 => {
                let mean = DVector::from_column_slice(&mu[p * q..(p + 1) * q]);
                let mut v = DMatrix::zeros(q, q);
                for a in 0..q {
                    let col = column(p * q + a);
                    for b in 0..q {
                        v[(b, a)] = col[p * q + b];
                    }
                }
                (mean, v)
            }
            _ => {
                let nb: Vec<usize> = near.iter().map(|&(_, p)| p).collect();
                let cov = LatentPoint { problem, cross: &theta.cross, point: pt };
                let nf = node_factor(&cov, FREE, &nb, j)?;
                let idx: Vec<usize> = nb.iter().flat_map(|&p| p * q..(p + 1) * q).collect();
                let mu_n = DVector::from_iterator(idx.len(), idx.iter().map(|&i| mu[i]));
                let mut v_nn = DMatrix::zeros(idx.len(), idx.len());
                for (a, &ia) in idx.iter().enumerate() {
                    let col = column(ia);
                    for (b, &ib) in idx.iter().enumerate() {
                        v_nn[(b, a)] = col[ib];
                    }
                }
                (&nf.b * mu_n, &nf.f + &nf.b * v_nn * nf.b.transpose())
            }
        };
        let zv = DVector::from_column_slice(&z);
        Ok((zv.dot(&mean_w), (zv.transpose() * var_w * &zv)[(0, 0)]))
    })?;
    Ok(Kriged {
        mean: out.iter().map(|o| o.0).collect(),
        var: out.iter().map(|o| o.1).collect(),
        cov: None,
    })
}
