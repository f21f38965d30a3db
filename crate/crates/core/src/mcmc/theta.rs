//! Unconstrained parameterization of the covariance parameters for
//! random-walk Metropolis.
//!
//! Variances move on the log scale, uniform-bounded parameters on the logit
//! scale of their prior interval. For `q > 1` the free parameters are
//! `log A_ii` and the raw off-diagonal entries of `A`, while the prior is
//! placed on `K = AA′`.

use nalgebra::DMatrix;

use crate::cov::{CrossCovariance, Kernel, ThetaParams};
use crate::error::{Error, Result};
use crate::model::{
    log_prior_cross, KernelFamily, PriorSpec, SmoothnessPrior, UniformPrior, VariancePrior,
};

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn to_unit(u: &UniformPrior, x: f64) -> f64 {
    let s = (x - u.lo) / (u.hi - u.lo);
    (s / (1.0 - s)).ln()
}

fn from_unit(u: &UniformPrior, t: f64) -> f64 {
    u.lo + (u.hi - u.lo) * sigmoid(t)
}

/// `log |dx/dt|` for the logit map.
fn unit_log_jac(u: &UniformPrior, t: f64) -> f64 {
    let s = sigmoid(t);
    (u.hi - u.lo).ln() + s.ln() + (1.0 - s).ln()
}

/// Maps `(cross-covariance[, τ²])` to and from ℝ^d.
#[derive(Clone, Debug)]
pub struct ThetaCodec {
    q: usize,
    family: KernelFamily,
    priors: PriorSpec,
    include_tau2: bool,
}

impl ThetaCodec {
    pub fn new(q: usize, family: KernelFamily, priors: &PriorSpec, include_tau2: bool) -> Self {
        Self {
            q,
            family,
            priors: priors.clone(),
            include_tau2,
        }
    }

    fn nu_free(&self) -> bool {
        self.family == KernelFamily::Matern && matches!(self.priors.nu, SmoothnessPrior::Uniform(_))
    }

    fn n_variance(&self) -> usize {
        self.q * (self.q + 1) / 2
    }

    pub fn dim(&self) -> usize {
        let per = 1
            + usize::from(self.nu_free())
            + usize::from(self.family == KernelFamily::DampedCosine);
        self.n_variance() + self.q * per + usize::from(self.include_tau2)
    }

    pub fn includes_tau2(&self) -> bool {
        self.include_tau2
    }

    /// Labels of the transformed coordinates.
    pub fn names(&self) -> Vec<String> {
        let q = self.q;
        let suffix = |b: usize| if q == 1 { String::new() } else { format!("_{}", b + 1) };
        let mut out = Vec::new();
        if q == 1 {
            out.push("log_sigma2".to_string());
        } else {
            for i in 0..q {
                for j in 0..=i {
                    out.push(if i == j {
                        format!("log_A_{}{}", i + 1, j + 1)
                    } else {
                        format!("A_{}{}", i + 1, j + 1)
                    });
                }
            }
        }
        for b in 0..q {
            out.push(format!("logit_phi{}", suffix(b)));
            if self.nu_free() {
                out.push(format!("logit_nu{}", suffix(b)));
            }
            if self.family == KernelFamily::DampedCosine {
                out.push(format!("logit_a{}", suffix(b)));
            }
        }
        if self.include_tau2 {
            out.push("log_tau2".into());
        }
        out
    }

    pub fn encode(&self, theta: &ThetaParams) -> Vec<f64> {
        let q = self.q;
        let a = theta.cross.a();
        let mut t = Vec::with_capacity(self.dim());
        if q == 1 {
            t.push(theta.cross.sigma2().ln());
        } else {
            for i in 0..q {
                for j in 0..=i {
                    t.push(if i == j { a[(i, i)].ln() } else { a[(i, j)] });
                }
            }
        }
        for (b, k) in theta.cross.kernels().iter().enumerate() {
            t.push(to_unit(&self.priors.phi_prior(b), k.phi()));
            if let (true, SmoothnessPrior::Uniform(u), Kernel::Matern { nu, .. }) =
                (self.nu_free(), self.priors.nu, k)
            {
                t.push(to_unit(&u, *nu));
            }
            if let Kernel::DampedCosine { range, .. } = k {
                t.push(to_unit(&self.priors.range, *range));
            }
        }
        if self.include_tau2 {
            t.push(theta.tau2.ln());
        }
        t
    }

    /// Natural-scale parameters; `tau2` supplies `τ²` when it is not part
    /// of the transformed vector. Fails when the kernel is invalid (for the
    /// damped cosine, `a φ > 1`).
    pub fn decode(&self, t: &[f64], tau2: f64) -> Result<ThetaParams> {
        if t.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "transformed theta",
                expected: self.dim(),
                got: t.len(),
            });
        }
        let q = self.q;
        let mut at = 0;
        let mut a = DMatrix::zeros(q, q);
        if q == 1 {
            a[(0, 0)] = (0.5 * t[0]).exp();
            at = 1;
        } else {
            for i in 0..q {
                for j in 0..=i {
                    a[(i, j)] = if i == j { t[at].exp() } else { t[at] };
                    at += 1;
                }
            }
        }
        let mut kernels = Vec::with_capacity(q);
        for b in 0..q {
            let phi = from_unit(&self.priors.phi_prior(b), t[at]);
            at += 1;
            let nu = match self.priors.nu {
                SmoothnessPrior::Fixed(v) => v,
                SmoothnessPrior::Uniform(u) => {
                    if self.nu_free() {
                        at += 1;
                        from_unit(&u, t[at - 1])
                    } else {
                        0.5
                    }
                }
            };
            let range = if self.family == KernelFamily::DampedCosine {
                at += 1;
                from_unit(&self.priors.range, t[at - 1])
            } else {
                0.0
            };
            kernels.push(self.family.build(phi, nu, range)?);
        }
        let tau2 = if self.include_tau2 { t[at].exp() } else { tau2 };
        let cross = CrossCovariance::new(a, kernels)?;
        Ok(ThetaParams { cross, tau2 })
    }

    /// `log |d(natural)/dt|`, with `K = AA′` as the natural variance
    /// parameter when `q > 1`.
    pub fn log_jacobian(&self, t: &[f64]) -> f64 {
        let q = self.q;
        let mut lj = 0.0;
        let mut at = 0;
        if q == 1 {
            // σ² = e^t
            lj += t[0];
            at = 1;
        } else {
            // |dK/dA| = 2^q ∏ A_ii^{q−i+1}, times ∏ A_ii for A_ii = e^t
            lj += q as f64 * std::f64::consts::LN_2;
            for i in 0..q {
                for j in 0..=i {
                    if i == j {
                        lj += (q - i) as f64 * t[at] + t[at];
                    }
                    at += 1;
                }
            }
        }
        for b in 0..q {
            lj += unit_log_jac(&self.priors.phi_prior(b), t[at]);
            at += 1;
            if self.nu_free() {
                if let SmoothnessPrior::Uniform(u) = self.priors.nu {
                    lj += unit_log_jac(&u, t[at]);
                }
                at += 1;
            }
            if self.family == KernelFamily::DampedCosine {
                lj += unit_log_jac(&self.priors.range, t[at]);
                at += 1;
            }
        }
        if self.include_tau2 {
            lj += t[at];
        }
        lj
    }

    /// Log prior density of the transformed vector (prior on the natural
    /// scale plus the log Jacobian). `−∞` when decoding fails.
    pub fn log_prior(&self, t: &[f64], tau2: f64) -> f64 {
        let Ok(theta) = self.decode(t, tau2) else {
            return f64::NEG_INFINITY;
        };
        let mut lp = log_prior_cross(&theta.cross, &self.priors) + self.log_jacobian(t);
        if self.include_tau2 {
            lp += self.priors.tau2.ln_pdf(theta.tau2);
        }
        lp
    }

    /// Variance prior mean used for default initial values.
    pub fn variance_guess(&self, fallback: f64) -> DMatrix<f64> {
        match &self.priors.variance {
            VariancePrior::InverseWishart { df, scale } if *df > self.q as f64 + 1.0 => {
                scale / (df - self.q as f64 - 1.0)
            }
            _ => DMatrix::identity(self.q, self.q) * fallback,
        }
    }
}
