//! Full-conditional updates for the latent-process samplers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::problem::Problem;
use super::rng::{inverse_gamma, mvn_from_precision, normal, normal_vec, substream};
use crate::error::{Error, Result};
use crate::model::ChainState;
use crate::nngp::{NngpFactors, SparsePrecision};
use crate::par::{map_indexed, Execution};
use crate::sparse::{SparseCholesky, SymmetricCsc};

/// Identifies the substream family of one iteration.
#[derive(Clone, Copy, Debug)]
pub struct StreamKey {
    pub seed: u64,
    pub chain: usize,
    pub iteration: usize,
}

/// Conjugate draw of `β` from precision `P₀ + XtWX` and linear term
/// `P₀μ₀ + XtWr`.
pub(crate) fn draw_beta<R: Rng + ?Sized>(
    rng: &mut R,
    problem: &Problem,
    xtwx: &DMatrix<f64>,
    xtwr: &DVector<f64>,
) -> Result<DVector<f64>> {
    let prec = &problem.beta_prec + xtwx;
    let lin = &problem.beta_prec_mean + xtwr;
    mvn_from_precision(rng, prec, &lin).ok_or(Error::SingularDesign)
}

/// `β | w, τ², y ~ N(V(V_β⁻¹μ_β + X′(y − Zw)/τ²), V)` with
/// `V = (V_β⁻¹ + X′X/τ²)⁻¹`.
pub fn update_beta<R: Rng + ?Sized>(rng: &mut R, problem: &Problem, state: &mut ChainState) -> Result<()> {
    let tau2 = state.theta.tau2;
    let n = problem.n();
    let zw = if problem.q() > 0 {
        problem.z_w(&state.w)
    } else {
        vec![0.0; n]
    };
    let p = problem.p();
    let mut xtr = DVector::zeros(p);
    for o in 0..n {
        let r = problem.data.y[o] - zw[o];
        for (j, x) in problem.x_row(o).iter().enumerate() {
            xtr[j] += x * r;
        }
    }
    state.beta = draw_beta(rng, problem, &(&problem.xtx / tau2), &(xtr / tau2))?;
    Ok(())
}

/// `τ² | · ~ IG(a + n/2, b + ½ Σ (y − Xβ − Zw)²)`.
pub fn update_tau2<R: Rng + ?Sized>(rng: &mut R, problem: &Problem, state: &mut ChainState) {
    let n = problem.n();
    let xb = problem.x_beta(&state.beta);
    let zw = if problem.q() > 0 {
        problem.z_w(&state.w)
    } else {
        vec![0.0; n]
    };
    let rss: f64 = (0..n)
        .map(|o| (problem.data.y[o] - xb[o] - zw[o]).powi(2))
        .sum();
    let prior = problem.priors.tau2;
    state.theta.tau2 = inverse_gamma(rng, prior.shape + 0.5 * n as f64, prior.scale + 0.5 * rss);
}

/// Residual `y − x′β` at each observation.
fn data_residual(problem: &Problem, state: &ChainState) -> Vec<f64> {
    let xb = problem.x_beta(&state.beta);
    problem.data.y.iter().zip(&xb).map(|(y, m)| y - m).collect()
}

/// One systematic Gibbs scan over the reference nodes in DAG order.
///
/// The conditional of `w(s_i)` combines its own observation (if any), its
/// prior factor `N(B_i w_N(i), F_i)`, and one term per dependent node
/// `t ∈ U(s_i)` through `a_{t,i} = w(t) − Σ_{s ∈ N(t), s ≠ s_i} B_{t,s} w(s)`.
pub fn update_w_reference<R: Rng + ?Sized>(
    rng: &mut R,
    problem: &Problem,
    factors: &NngpFactors,
    state: &mut ChainState,
) {
    let resid = data_residual(problem, state);
    let tau2 = state.theta.tau2;
    let dag = &problem.dag;
    let q = problem.q();
    let w = &mut state.w;
    if q == 1 {
        for i in 0..dag.len() {
            let fi = factors.node(i);
            let finv = fi.f_inv[(0, 0)];
            let mut bw = 0.0;
            for (l, &n) in dag.neighbors(i).iter().enumerate() {
                bw += fi.b[(0, l)] * w[n];
            }
            let mut prec = finv;
            let mut lin = finv * bw;
            if let Some(o) = problem.ref_obs[i] {
                let z = problem.zr[o];
                prec += z * z / tau2;
                lin += z * resid[o] / tau2;
            }
            for &t in dag.reverse(i) {
                let ft = factors.factor(t);
                let nb = dag.node_neighbors(t);
                let mut a = w[problem.node_index(t)];
                let mut bti = 0.0;
                for (l, &n) in nb.iter().enumerate() {
                    if n == i {
                        bti = ft.b[(0, l)];
                    } else {
                        a -= ft.b[(0, l)] * w[n];
                    }
                }
                let ftinv = ft.f_inv[(0, 0)];
                prec += bti * bti * ftinv;
                lin += bti * ftinv * a;
            }
            w[i] = lin / prec + normal(rng) / prec.sqrt();
        }
        return;
    }
    for i in 0..dag.len() {
        let fi = factors.node(i);
        let mut bw = DVector::zeros(q);
        for (l, &n) in dag.neighbors(i).iter().enumerate() {
            bw += fi.b.columns(l * q, q) * DVector::from_column_slice(&w[n * q..(n + 1) * q]);
        }
        let mut prec = fi.f_inv.clone();
        let mut lin = &fi.f_inv * bw;
        if let Some(o) = problem.ref_obs[i] {
            let z = DVector::from_column_slice(problem.z_row(o));
            prec += &z * z.transpose() / tau2;
            lin += &z * (resid[o] / tau2);
        }
        for &t in dag.reverse(i) {
            let ft = factors.factor(t);
            let nb = dag.node_neighbors(t);
            let at = problem.node_index(t);
            let mut a = DVector::from_column_slice(&w[at..at + q]);
            let mut slot = 0;
            for (l, &n) in nb.iter().enumerate() {
                if n == i {
                    slot = l;
                } else {
                    a -= ft.b.columns(l * q, q) * DVector::from_column_slice(&w[n * q..(n + 1) * q]);
                }
            }
            let bti = ft.b.columns(slot * q, q);
            let tmp = bti.transpose() * &ft.f_inv;
            prec += &tmp * bti;
            lin += tmp * a;
        }
        let draw = mvn_from_precision(rng, prec, &lin).expect("conditional precision is positive definite");
        w[i * q..(i + 1) * q].copy_from_slice(draw.as_slice());
    }
}

/// Independent conjugate draws of `w` at the query nodes (observed
/// locations outside `S`). Each location uses its own substream.
pub fn update_w_query(
    problem: &Problem,
    factors: &NngpFactors,
    state: &mut ChainState,
    key: StreamKey,
    exec: Execution,
) {
    let nq = problem.dag.num_queries();
    if nq == 0 {
        return;
    }
    let resid = data_residual(problem, state);
    let tau2 = state.theta.tau2;
    let q = problem.q();
    let k = problem.k();
    let w = &state.w;
    let dag = &problem.dag;
    let draws = map_indexed(exec, nq, |j| {
        let mut rng = substream(key.seed, key.chain, key.iteration, j);
        let ft = factors.query(j);
        let mut bw = DVector::zeros(q);
        for (l, &n) in dag.query_neighbors(j).iter().enumerate() {
            bw += ft.b.columns(l * q, q) * DVector::from_column_slice(&w[n * q..(n + 1) * q]);
        }
        let o = problem.query_obs[j];
        let z = DVector::from_column_slice(problem.z_row(o));
        let prec = &ft.f_inv + &z * z.transpose() / tau2;
        let lin = &ft.f_inv * bw + &z * (resid[o] / tau2);
        mvn_from_precision(&mut rng, prec, &lin).expect("conditional precision is positive definite")
    });
    for (j, d) in draws.into_iter().enumerate() {
        state.w[(k + j) * q..(k + j + 1) * q].copy_from_slice(d.as_slice());
    }
}

/// `V_S⁻¹ = Z′D⁻¹Z + C̃_S⁻¹` as a scalar sparse matrix (requires `S = T`).
pub(crate) fn posterior_precision(problem: &Problem, precision: &SparsePrecision, tau2: f64) -> SymmetricCsc {
    let q = problem.q();
    let mut trip = precision.lower_triplets();
    for (p, o) in problem.ref_obs.iter().enumerate() {
        if let Some(o) = *o {
            let z = problem.z_row(o);
            for a in 0..q {
                for b in 0..=a {
                    trip.push((p * q + a, p * q + b, z[a] * z[b] / tau2));
                }
            }
        }
    }
    SymmetricCsc::from_lower_triplets(problem.k() * q, &trip)
}

/// `Z′D⁻¹ r` arranged by reference node.
pub(crate) fn zt_dinv(problem: &Problem, r: &[f64], tau2: f64) -> Vec<f64> {
    let q = problem.q();
    let mut out = vec![0.0; problem.k() * q];
    for (p, o) in problem.ref_obs.iter().enumerate() {
        if let Some(o) = *o {
            for (a, z) in problem.z_row(o).iter().enumerate() {
                out[p * q + a] += z * r[o] / tau2;
            }
        }
    }
    out
}

/// Joint draw `w_S ~ N(V_S Z′D⁻¹(y − Xβ), V_S)` from a sparse Cholesky
/// factor of `V_S⁻¹` in DAG order.
pub(crate) fn draw_w_joint<R: Rng + ?Sized>(
    rng: &mut R,
    problem: &Problem,
    precision: &SparsePrecision,
    beta: &DVector<f64>,
    tau2: f64,
) -> Result<Vec<f64>> {
    let v_inv = posterior_precision(problem, precision, tau2);
    let chol = SparseCholesky::factor(&v_inv)?;
    let xb = problem.x_beta(beta);
    let r: Vec<f64> = problem.data.y.iter().zip(&xb).map(|(y, m)| y - m).collect();
    let mut mean = zt_dinv(problem, &r, tau2);
    chol.solve_lower_in_place(&mut mean);
    let z = normal_vec(rng, mean.len());
    // L′ w = L⁻¹ b + ε gives mean V b and covariance V
    for (m, e) in mean.iter_mut().zip(z.iter()) {
        *m += e;
    }
    chol.solve_upper_in_place(&mut mean);
    Ok(mean)
}

/// Block update of `w_S` (requires `S = T`).
pub fn update_w_block<R: Rng + ?Sized>(
    rng: &mut R,
    problem: &Problem,
    precision: &SparsePrecision,
    state: &mut ChainState,
) -> Result<()> {
    if !problem.s_equals_t() {
        return Err(Error::Validation(
            "the block algorithm requires the reference set to equal the observed locations".into(),
        ));
    }
    state.w = draw_w_joint(rng, problem, precision, &state.beta, state.theta.tau2)?;
    Ok(())
}
