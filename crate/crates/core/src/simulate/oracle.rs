use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::cov::{CrossCovariance, ThetaParams};
use crate::error::{Error, Result};
use crate::geo::{LocationSet, Point};
use crate::mcmc::rng::normal;
use crate::mcmc::{run_marginal_chains, Algorithm, MarginalModel, MarginalStats, PosteriorSamples, Problem, SamplerConfig};
use crate::par::Execution;
use crate::predict::Kriged;

/// Largest `n` the dense oracle accepts.
pub const ORACLE_CAP: usize = 5000;

fn check_cap(n: usize) -> Result<()> {
    if n > ORACLE_CAP {
        Err(Error::OracleTooLarge { n, cap: ORACLE_CAP })
    } else {
        Ok(())
    }
}

/// `log N(w | 0, C)` with the jittered dense covariance.
pub fn dense_log_density(cross: &CrossCovariance, locs: &[Point], w: &[f64]) -> Result<f64> {
    check_cap(locs.len())?;
    let c = cross.cov_matrix_jittered(locs);
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("dense covariance".into()))?;
    let v = DVector::from_column_slice(w);
    let z = chol.l().solve_lower_triangular(&v).expect("triangular solve");
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(-0.5 * (w.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared()))
}

/// Full Gaussian-process likelihood `y ~ N(Xβ, Z C Z′ + τ² I)` evaluated
/// densely.
pub struct DenseOracle<'a> {
    problem: &'a Problem,
    /// `n × nq` block-diagonal latent design.
    zb: DMatrix<f64>,
}

impl<'a> DenseOracle<'a> {
    pub fn new(problem: &'a Problem) -> Result<Self> {
        check_cap(problem.n())?;
        let (n, q) = (problem.n(), problem.q());
        let mut zb = DMatrix::zeros(n, n * q);
        for i in 0..n {
            for a in 0..q {
                zb[(i, i * q + a)] = problem.z[(i, a)];
            }
        }
        Ok(Self { problem, zb })
    }

    fn latent_cov(&self, cross: &CrossCovariance) -> DMatrix<f64> {
        cross.cov_matrix_jittered(self.problem.data.locations.coords())
    }

    /// `Z C Z′ + τ² I` and the latent covariance `C`.
    fn sigma(&self, theta: &ThetaParams) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.problem.n();
        let q = self.problem.q();
        let c = self.latent_cov(&theta.cross);
        let z = &self.problem.z;
        let mut s = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let mut v = 0.0;
                for a in 0..q {
                    for b in 0..q {
                        v += z[(i, a)] * c[(i * q + a, j * q + b)] * z[(j, b)];
                    }
                }
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
            s[(j, j)] += theta.tau2;
        }
        (s, c)
    }
}

impl MarginalModel for DenseOracle<'_> {
    fn problem(&self) -> &Problem {
        self.problem
    }

    fn stats(&self, theta: &ThetaParams, _exec: Execution) -> Result<MarginalStats> {
        let pr = self.problem;
        let n = pr.n();
        let sigma = if pr.q() == 0 {
            DMatrix::identity(n, n) * theta.tau2
        } else {
            self.sigma(theta).0
        };
        let chol = sigma
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("dense marginal covariance".into()))?;
        let l = chol.l();
        let y = DVector::from_column_slice(&pr.data.y);
        let ly = l.solve_lower_triangular(&y).expect("triangular solve");
        let lx = l.solve_lower_triangular(&pr.data.x).expect("triangular solve");
        Ok(MarginalStats {
            n,
            log_det: l.diagonal().iter().map(|d| 2.0 * d.ln()).sum(),
            yty: ly.norm_squared(),
            xty: lx.transpose() * &ly,
            xtx: lx.transpose() * &lx,
        })
    }

    /// `w | y, β, θ ~ N(C Z′Σ⁻¹r, C − C Z′Σ⁻¹ Z C)`, written in node order.
    fn draw_w(
        &self,
        theta: &ThetaParams,
        beta: &DVector<f64>,
        rng: &mut ChaCha8Rng,
        _exec: Execution,
    ) -> Result<Option<Vec<f64>>> {
        let pr = self.problem;
        if !pr.s_equals_t() || pr.q() == 0 {
            return Ok(None);
        }
        let (sigma, c) = self.sigma(theta);
        let chol = sigma
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("dense marginal covariance".into()))?;
        let r = DVector::from_column_slice(&pr.data.y) - &pr.data.x * beta;
        let czt = &c * self.zb.transpose();
        let mean = &czt * chol.solve(&r);
        let mut v = &c - &czt * chol.solve(&czt.transpose());
        v = (&v + v.transpose()) * 0.5;
        let dim = v.nrows();
        let eps = 1e-10 * (v.trace() / dim as f64).abs().max(f64::MIN_POSITIVE);
        for i in 0..dim {
            v[(i, i)] += eps;
        }
        let l = v
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("dense conditional covariance of w".into()))?
            .l();
        let e = DVector::from_iterator(dim, (0..dim).map(|_| normal(rng)));
        let w_obs = mean + l * e;
        let q = pr.q();
        let mut w = vec![0.0; dim];
        for (p, o) in pr.ref_obs.iter().enumerate() {
            let o = o.expect("S = T");
            w[p * q..(p + 1) * q].copy_from_slice(&w_obs.as_slice()[o * q..(o + 1) * q]);
        }
        Ok(Some(w))
    }
}

/// Metropolis-within-Gibbs on the dense full-GP marginal likelihood.
pub fn oracle_posterior(problem: &Problem, config: &SamplerConfig) -> Result<PosteriorSamples> {
    let oracle = DenseOracle::new(problem)?;
    run_marginal_chains(&oracle, config, Algorithm::Marginal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KrigeMode {
    /// Each new location on its own; variances only.
    Independent,
    /// Full conditional covariance across new locations.
    Joint,
}

/// Dense kriging of the latent signal `z(t)′w(t)` given `y` at fixed `(β, θ)`.
pub fn oracle_krige(
    problem: &Problem,
    beta: &DVector<f64>,
    theta: &ThetaParams,
    locations: &LocationSet,
    z_new: &DMatrix<f64>,
    mode: KrigeMode,
) -> Result<Kriged> {
    check_cap(problem.n() + locations.len())?;
    let oracle = DenseOracle::new(problem)?;
    let (sigma, _) = oracle.sigma(theta);
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("dense marginal covariance".into()))?;
    let r = DVector::from_column_slice(&problem.data.y) - &problem.data.x * beta;
    let alpha = chol.solve(&r);
    let cross = &theta.cross;
    let q = cross.q();
    let t = locations.len();
    // Z_t (t × tq) block rows
    let mut zt = DMatrix::zeros(t, t * q);
    for j in 0..t {
        for a in 0..q {
            zt[(j, j * q + a)] = z_new[(j, a)];
        }
    }
    let c_ty = &zt * cross.cov_matrix(locations.coords(), problem.data.locations.coords()) * oracle.zb.transpose();
    let mean = &c_ty * alpha;
    let sol = chol.solve(&c_ty.transpose());
    let eps = cross.jitter();
    let c0 = cross.cross_cov_at(0.0) + DMatrix::identity(q, q) * eps;
    let var: Vec<f64> = (0..t)
        .map(|j| {
            let z = z_new.row(j).transpose();
            (z.transpose() * &c0 * &z)[(0, 0)] - c_ty.row(j).dot(&sol.column(j).transpose())
        })
        .collect();
    let cov = match mode {
        KrigeMode::Independent => None,
        KrigeMode::Joint => {
            let c_tt = &zt * cross.cov_matrix_jittered(locations.coords()) * zt.transpose();
            Some(c_tt - &c_ty * &sol)
        }
    };
    Ok(Kriged {
        mean: mean.iter().copied().collect(),
        var,
        cov,
    })
}
