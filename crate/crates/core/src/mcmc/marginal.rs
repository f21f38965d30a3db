//! Likelihoods with the latent process integrated out, reduced to the
//! sufficient statistics needed for conjugate `β` draws and Metropolis
//! steps on `(θ, τ²)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::problem::Problem;
use super::updates::{draw_w_joint, posterior_precision, zt_dinv};
use crate::cov::ThetaParams;
use crate::error::{Error, Result};
use crate::geo::{dist, NodeRef};
use crate::nngp::{assemble_precision, compute_factors, compute_factors_with, BlockCovariance, NngpFactors};
use crate::par::{map_indexed, Execution};
use crate::sparse::SparseCholesky;

/// `log det Σ`, `y′Σ⁻¹y`, `X′Σ⁻¹y` and `X′Σ⁻¹X` of a Gaussian likelihood
/// `y ~ N(Xβ, Σ)`.
#[derive(Clone, Debug)]
pub struct MarginalStats {
    pub n: usize,
    pub log_det: f64,
    pub yty: f64,
    pub xty: DVector<f64>,
    pub xtx: DMatrix<f64>,
}

impl MarginalStats {
    pub fn log_lik(&self, beta: &DVector<f64>) -> f64 {
        let quad = self.yty - 2.0 * beta.dot(&self.xty) + (beta.transpose() * &self.xtx * beta)[(0, 0)];
        -0.5 * (self.n as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + quad)
    }
}

/// A likelihood for `y` with `w` integrated out.
pub trait MarginalModel: Sync {
    fn problem(&self) -> &Problem;

    fn stats(&self, theta: &ThetaParams, exec: Execution) -> Result<MarginalStats>;

    /// Composition draw of `w` given `(θ, β)`, if the model supports it.
    fn draw_w(
        &self,
        _theta: &ThetaParams,
        _beta: &DVector<f64>,
        _rng: &mut ChaCha8Rng,
        _exec: Execution,
    ) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

fn require_s_equals_t(problem: &Problem, what: &str) -> Result<()> {
    if problem.s_equals_t() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "the {what} algorithm requires the reference set to equal the observed locations"
        )))
    }
}

/// Covariance of the response process `z(s)′C(s, s′)z(s′) + τ² δ(s, s′)`
/// over the reference nodes (`S = T`) and attached queries.
pub struct ResponseCovariance<'a> {
    pub problem: &'a Problem,
    pub theta: &'a ThetaParams,
    /// Latent design rows of the query nodes.
    pub query_z: &'a [Vec<f64>],
}

impl ResponseCovariance<'_> {
    fn z_of(&self, node: NodeRef) -> &[f64] {
        match node {
            NodeRef::Reference(p) => self
                .problem
                .z_row(self.problem.ref_obs[p].expect("response covariance needs S = T")),
            NodeRef::Query(j) => &self.query_z[j],
        }
    }
}

impl BlockCovariance for ResponseCovariance<'_> {
    fn block_dim(&self) -> usize {
        1
    }

    fn write_block(&self, a: NodeRef, b: NodeRef, out: &mut DMatrix<f64>, r0: usize, c0: usize) {
        let dag = &self.problem.dag;
        let cross = &self.theta.cross;
        let d = dist(dag.node_coord(a), dag.node_coord(b));
        let (za, zb) = (self.z_of(a), self.z_of(b));
        let q = cross.q();
        let v = if q == 1 {
            za[0] * zb[0] * cross.sigma2() * cross.kernels()[0].correlation(d)
        } else {
            let c = cross.cross_cov_at(d);
            let mut s = 0.0;
            for i in 0..q {
                for j in 0..q {
                    s += za[i] * c[(i, j)] * zb[j];
                }
            }
            s
        };
        out[(r0, c0)] = if a == b {
            v + self.theta.tau2 + cross.jitter()
        } else {
            v
        };
    }
}

/// NNGP applied directly to `y`: `y ~ N(Xβ, Σ̃)` where `Σ̃` is the NNGP
/// derived from the response covariance.
pub struct ResponseModel<'a> {
    problem: &'a Problem,
}

impl<'a> ResponseModel<'a> {
    pub fn new(problem: &'a Problem) -> Result<Self> {
        require_s_equals_t(problem, "response")?;
        Ok(Self { problem })
    }

    /// Factors of the response NNGP (reference nodes only).
    pub fn factors(&self, theta: &ThetaParams, exec: Execution) -> Result<NngpFactors> {
        let cov = ResponseCovariance {
            problem: self.problem,
            theta,
            query_z: &[],
        };
        compute_factors_with(&self.problem.dag, &cov, exec)
    }
}

impl MarginalModel for ResponseModel<'_> {
    fn problem(&self) -> &Problem {
        self.problem
    }

    fn stats(&self, theta: &ThetaParams, exec: Execution) -> Result<MarginalStats> {
        let f = self.factors(theta, exec)?;
        let pr = self.problem;
        let dag = &pr.dag;
        let p = pr.p();
        let k = pr.k();
        // whitened residual design rows (x̃_i, ỹ_i) / √F_i
        let rows = map_indexed(exec, k, |i| {
            let nf = f.node(i);
            let o = pr.ref_obs[i].expect("S = T");
            let mut yt = pr.data.y[o];
            let mut xt: Vec<f64> = pr.x_row(o).to_vec();
            for (l, &nb) in dag.neighbors(i).iter().enumerate() {
                let on = pr.ref_obs[nb].expect("S = T");
                let b = nf.b[(0, l)];
                yt -= b * pr.data.y[on];
                for (x, xn) in xt.iter_mut().zip(pr.x_row(on)) {
                    *x -= b * xn;
                }
            }
            let s = nf.f_inv[(0, 0)].sqrt();
            (yt * s, xt.into_iter().map(|v| v * s).collect::<Vec<f64>>(), nf.log_det_f)
        });
        let mut st = MarginalStats {
            n: k,
            log_det: 0.0,
            yty: 0.0,
            xty: DVector::zeros(p),
            xtx: DMatrix::zeros(p, p),
        };
        for (yt, xt, ld) in rows {
            st.log_det += ld;
            st.yty += yt * yt;
            for a in 0..p {
                st.xty[a] += xt[a] * yt;
                for b in 0..p {
                    st.xtx[(a, b)] += xt[a] * xt[b];
                }
            }
        }
        Ok(st)
    }
}

/// Latent NNGP with `w` integrated out: `y ~ N(Xβ, Z C̃_S Z′ + τ² I)`,
/// evaluated through `V_S⁻¹ = Z′D⁻¹Z + C̃_S⁻¹`, the Woodbury identity and
/// the matrix determinant lemma.
pub struct MarginalNngpModel<'a> {
    problem: &'a Problem,
}

impl<'a> MarginalNngpModel<'a> {
    pub fn new(problem: &'a Problem) -> Result<Self> {
        require_s_equals_t(problem, "marginal")?;
        Ok(Self { problem })
    }
}

impl MarginalModel for MarginalNngpModel<'_> {
    fn problem(&self) -> &Problem {
        self.problem
    }

    fn stats(&self, theta: &ThetaParams, exec: Execution) -> Result<MarginalStats> {
        let pr = self.problem;
        let tau2 = theta.tau2;
        let f = compute_factors(&pr.dag, &theta.cross, exec)?;
        let prec = assemble_precision(&f, exec);
        let chol = SparseCholesky::factor(&posterior_precision(pr, &prec, tau2))?;
        let n = pr.n();
        let p = pr.p();
        let log_det = chol.log_det() + f.log_det() + n as f64 * tau2.ln();
        // g_v = L⁻¹ Z′ v / τ²; then v′Σ⁻¹u = v′u/τ² − g_v′ g_u
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
        cols.push(pr.data.y.clone());
        for j in 0..p {
            cols.push(pr.data.x.column(j).iter().copied().collect());
        }
        let gs: Vec<Vec<f64>> = map_indexed(exec, p + 1, |c| {
            let mut g = zt_dinv(pr, &cols[c], tau2);
            chol.solve_lower_in_place(&mut g);
            g
        });
        let inner = |a: usize, b: usize| -> f64 {
            let direct: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum::<f64>() / tau2;
            let corr: f64 = gs[a].iter().zip(&gs[b]).map(|(x, y)| x * y).sum();
            direct - corr
        };
        let yty = inner(0, 0);
        let xty = DVector::from_fn(p, |j, _| inner(j + 1, 0));
        let mut xtx = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..=a {
                let v = inner(a + 1, b + 1);
                xtx[(a, b)] = v;
                xtx[(b, a)] = v;
            }
        }
        Ok(MarginalStats {
            n,
            log_det,
            yty,
            xty,
            xtx,
        })
    }

    fn draw_w(
        &self,
        theta: &ThetaParams,
        beta: &DVector<f64>,
        rng: &mut ChaCha8Rng,
        exec: Execution,
    ) -> Result<Option<Vec<f64>>> {
        let f = compute_factors(&self.problem.dag, &theta.cross, exec)?;
        let prec = assemble_precision(&f, exec);
        draw_w_joint(rng, self.problem, &prec, beta, theta.tau2).map(Some)
    }
}

/// Uniform draw helper shared by the Metropolis steps.
pub(crate) fn log_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>().ln()
}
