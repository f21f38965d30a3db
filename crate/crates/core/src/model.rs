//! Hierarchical spatial regression: designs, priors, chain state and the
//! flat parameter layout used for storage.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::cov::{CrossCovariance, Kernel, ThetaParams};
use crate::error::{Error, Result};
use crate::geo::LocationSet;

/// Observed data: locations (ids `0..n`), response and fixed-effect design.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub locations: LocationSet,
    pub y: Vec<f64>,
    /// `n × p`
    pub x: DMatrix<f64>,
}

impl Dataset {
    pub fn new(locations: LocationSet, y: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let d = Self { locations, y, x };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        let n = self.locations.len();
        if self.y.len() != n {
            return Err(Error::DimensionMismatch {
                context: "response y",
                expected: n,
                got: self.y.len(),
            });
        }
        if self.x.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "design X rows",
                expected: n,
                got: self.x.nrows(),
            });
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("y[{i}] is not finite")));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("X has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` of the dataset, with ids renumbered `0..idx.len()`.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let coords = idx.iter().map(|&i| *self.locations.point(i)).collect();
        let y = idx.iter().map(|&i| self.y[i]).collect();
        let x = self.x.select_rows(idx);
        Dataset::new(LocationSet::new(coords)?, y, x)
    }
}

/// How the latent design `Z` relates to `X`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ModelMode {
    /// Spatially varying intercept: `q = 1`, `Z = 1`.
    #[default]
    Svi,
    /// Spatially varying coefficients: `q = p`, `Z = X`.
    Svc,
    /// No latent process.
    NonSpatial,
    /// User-supplied `Z`.
    Custom,
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svi" => Ok(Self::Svi),
            "svc" => Ok(Self::Svc),
            "non_spatial" => Ok(Self::NonSpatial),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Validation(format!("unknown model mode '{other}'"))),
        }
    }
}

/// Correlation family shared by all latent components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelFamily {
    #[default]
    Exponential,
    Matern,
    DampedCosine,
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(Self::Exponential),
            "matern" => Ok(Self::Matern),
            "damped_cosine" => Ok(Self::DampedCosine),
            other => Err(Error::Validation(format!("unknown kernel family '{other}'"))),
        }
    }
}

impl KernelFamily {
    pub fn build(self, phi: f64, nu: f64, range: f64) -> Result<Kernel> {
        match self {
            Self::Exponential => Kernel::exponential(phi),
            Self::Matern => Kernel::matern(phi, nu),
            Self::DampedCosine => Kernel::damped_cosine(phi, range),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub mode: ModelMode,
    pub kernel: KernelFamily,
    /// `n × q`, required only in custom mode.
    pub z: Option<DMatrix<f64>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            mode: ModelMode::Svi,
            kernel: KernelFamily::Exponential,
            z: None,
        }
    }
}

impl ModelSpec {
    pub fn svi(kernel: KernelFamily) -> Self {
        Self {
            mode: ModelMode::Svi,
            kernel,
            z: None,
        }
    }

    pub fn svc(kernel: KernelFamily) -> Self {
        Self {
            mode: ModelMode::Svc,
            kernel,
            z: None,
        }
    }

    pub fn non_spatial() -> Self {
        Self {
            mode: ModelMode::NonSpatial,
            kernel: KernelFamily::Exponential,
            z: None,
        }
    }

    /// Latent dimension for a dataset with `p` fixed effects.
    pub fn q(&self, p: usize) -> usize {
        match self.mode {
            ModelMode::Svi => 1,
            ModelMode::Svc => p,
            ModelMode::NonSpatial => 0,
            ModelMode::Custom => self.z.as_ref().map_or(0, |z| z.ncols()),
        }
    }

    /// The `n × q` latent design.
    pub fn z_matrix(&self, data: &Dataset) -> Result<DMatrix<f64>> {
        let n = data.n();
        match self.mode {
            ModelMode::Svi => {
                if let Some(z) = &self.z {
                    if z.ncols() != 1 || z.iter().any(|&v| v != 1.0) {
                        return Err(Error::Validation("svi requires Z = 1".into()));
                    }
                }
                Ok(DMatrix::from_element(n, 1, 1.0))
            }
            ModelMode::Svc => {
                if let Some(z) = &self.z {
                    if *z != data.x {
                        return Err(Error::Validation("svc requires Z = X".into()));
                    }
                }
                Ok(data.x.clone())
            }
            ModelMode::NonSpatial => Ok(DMatrix::zeros(n, 0)),
            ModelMode::Custom => {
                let z = self
                    .z
                    .as_ref()
                    .ok_or_else(|| Error::Validation("custom mode requires a Z design".into()))?;
                if z.nrows() != n {
                    return Err(Error::DimensionMismatch {
                        context: "design Z rows",
                        expected: n,
                        got: z.nrows(),
                    });
                }
                if z.ncols() == 0 || z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation("Z must have finite entries and q >= 1".into()));
                }
                Ok(z.clone())
            }
        }
    }
}

/// `IG(shape, scale)` with density `b^a / Γ(a) x^{−a−1} e^{−b/x}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        let (a, b) = (self.shape, self.scale);
        a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
    }

    fn check(&self, what: &str) -> Result<()> {
        if !(self.shape > 0.0 && self.scale > 0.0) || !self.shape.is_finite() || !self.scale.is_finite() {
            return Err(Error::Validation(format!(
                "{what} inverse-gamma prior needs positive shape and scale"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformPrior {
    pub lo: f64,
    pub hi: f64,
}

impl UniformPrior {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if self.contains(x) {
            -(self.hi - self.lo).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn check(&self, what: &str, positive: bool) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Validation(format!(
                "{what} uniform prior needs lo < hi, got ({}, {})",
                self.lo, self.hi
            )));
        }
        if positive && self.lo < 0.0 {
            return Err(Error::Validation(format!("{what} uniform prior must lie in (0, inf)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BetaPrior {
    Flat,
    Normal { mean: DVector<f64>, cov: DMatrix<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum VariancePrior {
    /// On `σ²` (q = 1).
    InverseGamma(InverseGamma),
    /// On `K = AA′`; mean `scale / (df − q − 1)`.
    InverseWishart { df: f64, scale: DMatrix<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmoothnessPrior {
    Fixed(f64),
    Uniform(UniformPrior),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    pub beta: BetaPrior,
    pub tau2: InverseGamma,
    pub variance: VariancePrior,
    /// One entry applied to every component, or one per component.
    pub phi: Vec<UniformPrior>,
    /// Matérn smoothness.
    pub nu: SmoothnessPrior,
    /// Damped-cosine range `a`; support is further restricted to `a φ ≤ 1`.
    pub range: UniformPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            beta: BetaPrior::Flat,
            tau2: InverseGamma::new(2.0, 0.1),
            variance: VariancePrior::InverseGamma(InverseGamma::new(2.0, 1.0)),
            phi: vec![UniformPrior::new(3.0, 30.0)],
            nu: SmoothnessPrior::Fixed(0.5),
            range: UniformPrior::new(0.01, 0.5),
        }
    }
}

impl PriorSpec {
    /// Defaults for latent dimension `q`: `IW(q + 1, I)` on `AA′` when `q > 1`.
    pub fn for_q(q: usize) -> Self {
        let mut p = Self::default();
        if q > 1 {
            p.variance = VariancePrior::InverseWishart {
                df: q as f64 + 1.0,
                scale: DMatrix::identity(q, q),
            };
        }
        p
    }

    pub fn phi_prior(&self, b: usize) -> UniformPrior {
        if self.phi.len() == 1 {
            self.phi[0]
        } else {
            self.phi[b]
        }
    }
}

/// `log Γ_q(a)`.
fn ln_multigamma(q: usize, a: f64) -> f64 {
    let qf = q as f64;
    qf * (qf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..q).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

/// Log density of `IW(df, scale)` at `k`.
pub fn inverse_wishart_ln_pdf(df: f64, scale: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let q = k.nrows();
    let Some(ck) = k.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let Some(cs) = scale.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let ld = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld_k = ld(&ck.l());
    let ld_s = ld(&cs.l());
    let tr = (ck.solve(scale)).trace();
    let qf = q as f64;
    0.5 * df * ld_s
        - 0.5 * df * qf * std::f64::consts::LN_2
        - ln_multigamma(q, df / 2.0)
        - 0.5 * (df + qf + 1.0) * ld_k
        - 0.5 * tr
}

/// Report returned by [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub m: usize,
    pub mode: ModelMode,
}

/// Checks dimensions, prior legality and the mode contract.
pub fn validate(
    spec: &ModelSpec,
    priors: &PriorSpec,
    data: &Dataset,
    k: usize,
    m: usize,
) -> Result<ValidationReport> {
    data.check()?;
    let p = data.p();
    let z = spec.z_matrix(data)?;
    let q = z.ncols();
    if p == 0 {
        return Err(Error::Validation("X must have at least one column".into()));
    }
    match &priors.beta {
        BetaPrior::Flat => {}
        BetaPrior::Normal { mean, cov } => {
            if mean.len() != p || cov.nrows() != p || cov.ncols() != p {
                return Err(Error::DimensionMismatch {
                    context: "beta prior",
                    expected: p,
                    got: mean.len(),
                });
            }
            if cov.clone().cholesky().is_none() {
                return Err(Error::Validation("beta prior covariance must be positive definite".into()));
            }
        }
    }
    priors.tau2.check("tau^2")?;
    if q > 0 {
        match &priors.variance {
            VariancePrior::InverseGamma(ig) => {
                if q != 1 {
                    return Err(Error::Validation(
                        "q > 1 needs an inverse-Wishart prior on AA'".into(),
                    ));
                }
                ig.check("sigma^2")?;
            }
            VariancePrior::InverseWishart { df, scale } => {
                if scale.nrows() != q || scale.ncols() != q {
                    return Err(Error::DimensionMismatch {
                        context: "inverse-Wishart scale",
                        expected: q,
                        got: scale.nrows(),
                    });
                }
                if !(*df > q as f64 - 1.0) {
                    return Err(Error::Validation(format!(
                        "inverse-Wishart df must exceed q - 1 = {}",
                        q - 1
                    )));
                }
                if scale.clone().cholesky().is_none() {
                    return Err(Error::Validation("inverse-Wishart scale must be positive definite".into()));
                }
            }
        }
        if priors.phi.len() != 1 && priors.phi.len() != q {
            return Err(Error::DimensionMismatch {
                context: "phi priors",
                expected: q,
                got: priors.phi.len(),
            });
        }
        for u in &priors.phi {
            u.check("phi", true)?;
        }
        if spec.kernel == KernelFamily::Matern {
            match priors.nu {
                SmoothnessPrior::Fixed(v) if !(v > 0.0) => {
                    return Err(Error::Validation("fixed nu must be positive".into()));
                }
                SmoothnessPrior::Uniform(u) => u.check("nu", true)?,
                _ => {}
            }
        }
        if spec.kernel == KernelFamily::DampedCosine {
            priors.range.check("range a", true)?;
            let any_valid = (0..q).all(|b| priors.phi_prior(b).lo * priors.range.lo < 1.0);
            if !any_valid {
                return Err(Error::Validation("range and phi priors leave no a*phi <= 1 support".into()));
            }
        }
        if m == 0 {
            return Err(Error::Validation("neighbor count m must be at least 1".into()));
        }
        if k == 0 {
            return Err(Error::EmptyLocations);
        }
    }
    Ok(ValidationReport {
        n: data.n(),
        p,
        q,
        k,
        m,
        mode: spec.mode,
    })
}

/// One state of the Markov chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub beta: DVector<f64>,
    /// Cross-covariance plus `τ²`; `None` only for the non-spatial model.
    pub theta: ThetaParams,
    /// Latent process over reference then query nodes, `q` entries each.
    pub w: Vec<f64>,
}

/// Column layout of a packed parameter row.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub p: usize,
    pub q: usize,
    pub family: KernelFamily,
}

impl ParamLayout {
    pub fn new(p: usize, q: usize, family: KernelFamily) -> Self {
        Self { p, q, family }
    }

    fn suffix(&self, b: usize) -> String {
        if self.q == 1 {
            String::new()
        } else {
            format!("_{}", b + 1)
        }
    }

    /// Column names: `beta_j`, `tau2`, then the covariance parameters.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.p).map(|j| format!("beta_{j}")).collect();
        out.push("tau2".into());
        if self.q == 0 {
            return out;
        }
        if self.q == 1 {
            out.push("sigma2".into());
        } else {
            for i in 0..self.q {
                for j in 0..=i {
                    out.push(format!("A_{}{}", i + 1, j + 1));
                }
            }
        }
        for b in 0..self.q {
            out.push(format!("phi{}", self.suffix(b)));
        }
        match self.family {
            KernelFamily::Exponential => {}
            KernelFamily::Matern => {
                for b in 0..self.q {
                    out.push(format!("nu{}", self.suffix(b)));
                }
            }
            KernelFamily::DampedCosine => {
                for b in 0..self.q {
                    out.push(format!("a{}", self.suffix(b)));
                }
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.names().len()
    }

    /// Index of a named column.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }

    /// Packs the non-latent parameters of `state` into one row.
    pub fn pack_params(&self, beta: &DVector<f64>, theta: &ThetaParams) -> Vec<f64> {
        let mut out: Vec<f64> = beta.iter().copied().collect();
        out.push(theta.tau2);
        if self.q == 0 {
            return out;
        }
        let cross = &theta.cross;
        if self.q == 1 {
            out.push(cross.sigma2());
        } else {
            for i in 0..self.q {
                for j in 0..=i {
                    out.push(cross.a()[(i, j)]);
                }
            }
        }
        out.extend(cross.kernels().iter().map(|k| k.phi()));
        match self.family {
            KernelFamily::Exponential => {}
            KernelFamily::Matern => out.extend(cross.kernels().iter().map(|k| match k {
                Kernel::Matern { nu, .. } => *nu,
                _ => 0.5,
            })),
            KernelFamily::DampedCosine => out.extend(cross.kernels().iter().map(|k| match k {
                Kernel::DampedCosine { range, .. } => *range,
                _ => f64::NAN,
            })),
        }
        out
    }

    /// Inverse of [`ParamLayout::pack_params`]. For `q = 0` a placeholder
    /// cross-covariance is returned alongside `τ²`.
    pub fn unpack_params(&self, row: &[f64]) -> Result<(DVector<f64>, ThetaParams)> {
        if row.len() < self.width() {
            return Err(Error::DimensionMismatch {
                context: "parameter row",
                expected: self.width(),
                got: row.len(),
            });
        }
        let beta = DVector::from_column_slice(&row[..self.p]);
        let tau2 = row[self.p];
        let mut at = self.p + 1;
        if self.q == 0 {
            let cross = CrossCovariance::univariate(1.0, Kernel::exponential(1.0)?)?;
            return Ok((beta, ThetaParams { cross, tau2 }));
        }
        let q = self.q;
        let mut a = DMatrix::zeros(q, q);
        if q == 1 {
            a[(0, 0)] = row[at].sqrt();
            at += 1;
        } else {
            for i in 0..q {
                for j in 0..=i {
                    a[(i, j)] = row[at];
                    at += 1;
                }
            }
        }
        let phis = &row[at..at + q];
        at += q;
        let extra = match self.family {
            KernelFamily::Exponential => None,
            _ => Some(&row[at..at + q]),
        };
        let kernels = (0..q)
            .map(|b| {
                let e = extra.map_or(0.5, |v| v[b]);
                self.family.build(phis[b], e, e)
            })
            .collect::<Result<Vec<_>>>()?;
        let cross = CrossCovariance::new(a, kernels)?;
        Ok((beta, ThetaParams { cross, tau2 }))
    }

    /// Packs parameters followed by `w`.
    pub fn pack(&self, state: &ChainState) -> Vec<f64> {
        let mut out = self.pack_params(&state.beta, &state.theta);
        out.extend_from_slice(&state.w);
        out
    }

    pub fn unpack(&self, row: &[f64]) -> Result<ChainState> {
        let (beta, theta) = self.unpack_params(row)?;
        Ok(ChainState {
            beta,
            theta,
            w: row[self.width()..].to_vec(),
        })
    }
}

/// Sum of log prior densities on the natural scale; `−∞` off the support.
pub fn log_prior(
    beta: &DVector<f64>,
    theta: &ThetaParams,
    q: usize,
    priors: &PriorSpec,
) -> f64 {
    let mut lp = 0.0;
    if let BetaPrior::Normal { mean, cov } = &priors.beta {
        let Some(ch) = cov.clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let d = beta - mean;
        let z = ch.l().solve_lower_triangular(&d).expect("triangular solve");
        let ld: f64 = ch.l().diagonal().iter().map(|v| v.ln()).sum();
        lp += -0.5 * z.norm_squared() - ld - 0.5 * beta.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    }
    lp += priors.tau2.ln_pdf(theta.tau2);
    if q == 0 {
        return lp;
    }
    lp += log_prior_cross(&theta.cross, priors);
    lp
}

/// Prior on the cross-covariance parameters alone.
pub fn log_prior_cross(cross: &CrossCovariance, priors: &PriorSpec) -> f64 {
    let mut lp = match &priors.variance {
        VariancePrior::InverseGamma(ig) => ig.ln_pdf(cross.sigma2()),
        VariancePrior::InverseWishart { df, scale } => {
            inverse_wishart_ln_pdf(*df, scale, &cross.marginal())
        }
    };
    for (b, k) in cross.kernels().iter().enumerate() {
        lp += priors.phi_prior(b).ln_pdf(k.phi());
        match *k {
            Kernel::Exponential { .. } => {}
            Kernel::Matern { nu, .. } => {
                if let SmoothnessPrior::Uniform(u) = priors.nu {
                    lp += u.ln_pdf(nu);
                }
            }
            Kernel::DampedCosine { phi, range } => {
                lp += priors.range.ln_pdf(range);
                if range * phi > 1.0 {
                    return f64::NEG_INFINITY;
                }
            }
        }
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn data(n: usize) -> Dataset {
        let coords = (0..n).map(|i| [i as f64, (i * i) as f64 * 0.1]).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        Dataset::new(LocationSet::new(coords).unwrap(), vec![0.0; n], x).unwrap()
    }

    #[test]
    fn svi_intercept_only_is_valid() {
        let mut d = data(5);
        d.x = DMatrix::from_element(5, 1, 1.0);
        let r = validate(&ModelSpec::default(), &PriorSpec::default(), &d, 5, 3).unwrap();
        assert_eq!((r.n, r.p, r.q, r.mode), (5, 1, 1, ModelMode::Svi));
    }

    #[test]
    fn svc_requires_z_equal_x() {
        let d = data(5);
        let mut spec = ModelSpec::svc(KernelFamily::Exponential);
        spec.z = Some(DMatrix::from_element(5, 2, 1.0));
        let mut pri = PriorSpec::default();
        pri.variance = VariancePrior::InverseWishart {
            df: 3.0,
            scale: DMatrix::identity(2, 2) * 0.1,
        };
        let err = validate(&spec, &pri, &d, 5, 2).unwrap_err();
        assert_eq!(err, Error::Validation("svc requires Z = X".into()));
        spec.z = Some(d.x.clone());
        assert_eq!(validate(&spec, &pri, &d, 5, 2).unwrap().q, 2);
    }

    #[test]
    fn bad_uniform_bounds_rejected() {
        let d = data(4);
        let mut pri = PriorSpec::default();
        pri.phi = vec![UniformPrior::new(30.0, 3.0)];
        assert!(matches!(
            validate(&ModelSpec::default(), &pri, &d, 4, 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn inverse_gamma_closed_form() {
        assert_relative_eq!(InverseGamma::new(2.0, 1.0).ln_pdf(1.0), -1.0, epsilon = 1e-14);
    }

    #[test]
    fn phi_outside_support_is_neg_infinity() {
        let pri = PriorSpec::default();
        let beta = DVector::zeros(2);
        let theta = |phi: f64| {
            ThetaParams::new(
                CrossCovariance::univariate(1.0, Kernel::exponential(phi).unwrap()).unwrap(),
                0.1,
            )
            .unwrap()
        };
        assert_eq!(log_prior(&beta, &theta(31.0), 1, &pri), f64::NEG_INFINITY);
        assert!(log_prior(&beta, &theta(12.0), 1, &pri).is_finite());
    }

    #[test]
    fn flat_beta_contributes_nothing() {
        let pri = PriorSpec::default();
        let theta = ThetaParams::new(
            CrossCovariance::univariate(1.0, Kernel::exponential(10.0).unwrap()).unwrap(),
            0.1,
        )
        .unwrap();
        let a = log_prior(&DVector::from_vec(vec![0.0, 0.0]), &theta, 1, &pri);
        let b = log_prior(&DVector::from_vec(vec![100.0, -7.0]), &theta, 1, &pri);
        assert_eq!(a, b);
    }

    #[test]
    fn damped_cosine_constraint() {
        let mut pri = PriorSpec::default();
        pri.phi = vec![UniformPrior::new(0.5, 30.0)];
        let c = |phi: f64, a: f64| {
            CrossCovariance::new(
                DMatrix::from_element(1, 1, 1.0),
                vec![Kernel::DampedCosine { phi, range: a }],
            )
        };
        assert!(log_prior_cross(&c(10.0, 0.099).unwrap(), &pri).is_finite());
        // a φ > 1 is not a valid kernel at all
        assert!(c(10.0, 0.2).is_err());
    }

    #[test]
    fn inverse_wishart_matches_inverse_gamma_at_q1() {
        // IW(ν, ψ) in one dimension is IG(ν/2, ψ/2)
        let k = DMatrix::from_element(1, 1, 0.7);
        let s = DMatrix::from_element(1, 1, 0.3);
        let iw = inverse_wishart_ln_pdf(5.0, &s, &k);
        let ig = InverseGamma::new(2.5, 0.15).ln_pdf(0.7);
        assert_relative_eq!(iw, ig, epsilon = 1e-12);
    }

    fn layout_state(q: usize, family: KernelFamily, vals: &[f64]) -> (ParamLayout, ChainState) {
        let layout = ParamLayout::new(2, q, family);
        let mut a = DMatrix::zeros(q, q);
        let mut it = vals.iter().cycle();
        for i in 0..q {
            for j in 0..=i {
                let v = *it.next().unwrap();
                a[(i, j)] = if i == j { v.abs() + 0.1 } else { v };
            }
        }
        let kernels = (0..q)
            .map(|b| {
                let phi = 1.0 + vals[b % vals.len()].abs();
                family.build(phi, 0.3 + b as f64, 0.5 / phi).unwrap()
            })
            .collect();
        let theta = ThetaParams::new(CrossCovariance::new(a, kernels).unwrap(), 0.2).unwrap();
        let state = ChainState {
            beta: DVector::from_vec(vec![vals[0], -vals[0]]),
            theta,
            w: vals.to_vec(),
        };
        (layout, state)
    }

    proptest! {
        #[test]
        fn pack_round_trip(
            q in 1usize..4,
            fam in 0usize..3,
            vals in proptest::collection::vec(-3.0f64..3.0, 1..8),
        ) {
            let family = [KernelFamily::Exponential, KernelFamily::Matern, KernelFamily::DampedCosine][fam];
            let (layout, state) = layout_state(q, family, &vals);
            let row = layout.pack(&state);
            prop_assert_eq!(row.len(), layout.width() + state.w.len());
            let back = layout.unpack(&row).unwrap();
            prop_assert_eq!(back, state);
        }

        #[test]
        fn log_prior_finite_on_support(phi in 0.1f64..40.0, s2 in 0.01f64..5.0, t2 in 0.01f64..5.0) {
            let pri = PriorSpec::default();
            let theta = ThetaParams::new(
                CrossCovariance::univariate(s2, Kernel::exponential(phi).unwrap()).unwrap(),
                t2,
            ).unwrap();
            let lp = log_prior(&DVector::zeros(1), &theta, 1, &pri);
            prop_assert_eq!(lp.is_finite(), phi > 3.0 && phi < 30.0);
        }
    }
}
