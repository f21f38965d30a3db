//! Isotropic correlation kernels and the coregionalized cross-covariance
//! `C(s, t) = A · diag(ρ_b(‖s − t‖)) · A′`.

mod bessel;

pub use bessel::bessel_k;

use nalgebra::DMatrix;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::geo::{dist, Point};

/// Relative diagonal jitter added to every self-covariance block.
pub const JITTER: f64 = 1e-10;

/// Isotropic correlation family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// `exp(−φ d)`
    Exponential { phi: f64 },
    /// `(φd)^ν K_ν(φd) / (2^{ν−1} Γ(ν))`
    Matern { phi: f64, nu: f64 },
    /// `exp(−d / a) cos(φ d)`, valid on the plane for `a ≤ 1/φ`.
    DampedCosine { phi: f64, range: f64 },
}

impl Kernel {
    pub fn exponential(phi: f64) -> Result<Self> {
        let k = Kernel::Exponential { phi };
        k.validate()?;
        Ok(k)
    }

    pub fn matern(phi: f64, nu: f64) -> Result<Self> {
        let k = Kernel::Matern { phi, nu };
        k.validate()?;
        Ok(k)
    }

    pub fn damped_cosine(phi: f64, range: f64) -> Result<Self> {
        let k = Kernel::DampedCosine { phi, range };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidKernel(msg));
        let phi = self.phi();
        if !(phi > 0.0) || !phi.is_finite() {
            return bad(format!("decay phi must be positive, got {phi}"));
        }
        match *self {
            Kernel::Exponential { .. } => Ok(()),
            Kernel::Matern { nu, .. } => {
                if !(nu > 0.0) || !nu.is_finite() {
                    bad(format!("smoothness nu must be positive, got {nu}"))
                } else {
                    Ok(())
                }
            }
            Kernel::DampedCosine { phi, range } => {
                if !(range > 0.0) || !range.is_finite() {
                    bad(format!("range a must be positive, got {range}"))
                } else if range * phi > 1.0 {
                    bad(format!("damped cosine needs a <= 1/phi, got a = {range}, phi = {phi}"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn phi(&self) -> f64 {
        match *self {
            Kernel::Exponential { phi }
            | Kernel::Matern { phi, .. }
            | Kernel::DampedCosine { phi, .. } => phi,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Kernel::Exponential { .. } => "exponential",
            Kernel::Matern { .. } => "matern",
            Kernel::DampedCosine { .. } => "damped_cosine",
        }
    }

    /// Correlation at distance `d ≥ 0`. Parameters are assumed valid.
    #[inline]
    pub fn correlation(&self, d: f64) -> f64 {
        match *self {
            Kernel::Exponential { phi } => (-phi * d).exp(),
            Kernel::Matern { phi, nu } => matern(phi * d, nu),
            Kernel::DampedCosine { phi, range } => (-d / range).exp() * (phi * d).cos(),
        }
    }
}

/// Matérn correlation at scaled distance `x = φ d`. Half-integer orders up
/// to 5/2 use their closed forms.
fn matern(x: f64, nu: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        (-x).exp()
    } else if nu == 1.5 {
        (1.0 + x) * (-x).exp()
    } else if nu == 2.5 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        matern_bessel(x, nu)
    }
}

/// Matérn correlation through the general Bessel path.
pub(crate) fn matern_bessel(x: f64, nu: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let k = bessel_k(nu, x);
    if k == 0.0 {
        return 0.0;
    }
    // x^ν K_ν(x) / (2^{ν−1} Γ(ν)), in logs to avoid overflow of x^ν for large ν
    let log = nu * x.ln() + k.ln() - (nu - 1.0) * std::f64::consts::LN_2 - gamma(nu).ln();
    log.exp().min(1.0)
}

/// Checked correlation evaluation.
pub fn correlation(kernel: &Kernel, distance: f64) -> Result<f64> {
    kernel.validate()?;
    if !(distance >= 0.0) {
        return Err(Error::Validation(format!(
            "distance must be nonnegative, got {distance}"
        )));
    }
    Ok(kernel.correlation(distance))
}

/// q-variate cross-covariance `A Γ(φ) A′` with lower-triangular `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCovariance {
    a: DMatrix<f64>,
    kernels: Vec<Kernel>,
}

impl CrossCovariance {
    pub fn new(a: DMatrix<f64>, kernels: Vec<Kernel>) -> Result<Self> {
        let cc = Self { a, kernels };
        cc.validate()?;
        Ok(cc)
    }

    /// Univariate covariance `σ² ρ(d)`.
    pub fn univariate(sigma2: f64, kernel: Kernel) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidCrossCovariance(format!(
                "sigma^2 must be positive, got {sigma2}"
            )));
        }
        Self::new(DMatrix::from_element(1, 1, sigma2.sqrt()), vec![kernel])
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.a.nrows();
        let bad = |msg: String| Err(Error::InvalidCrossCovariance(msg));
        if q == 0 || self.a.ncols() != q {
            return bad(format!("A must be square and non-empty, got {}x{}", q, self.a.ncols()));
        }
        if self.kernels.len() != q {
            return bad(format!("expected {q} kernels, got {}", self.kernels.len()));
        }
        for i in 0..q {
            if !(self.a[(i, i)] > 0.0) || !self.a[(i, i)].is_finite() {
                return bad(format!("diagonal of A must be positive (entry {i})"));
            }
            for j in (i + 1)..q {
                if self.a[(i, j)] != 0.0 {
                    return bad("A must be lower triangular".into());
                }
            }
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return bad("A has non-finite entries".into());
        }
        for k in &self.kernels {
            k.validate()?;
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    /// `A A′ = C(s, s)`.
    pub fn marginal(&self) -> DMatrix<f64> {
        &self.a * self.a.transpose()
    }

    /// For q = 1, the marginal variance `σ² = A²`.
    pub fn sigma2(&self) -> f64 {
        self.a[(0, 0)] * self.a[(0, 0)]
    }

    /// Diagonal jitter: `1e-10 · tr(AA′) / q`.
    pub fn jitter(&self) -> f64 {
        let tr: f64 = (0..self.q())
            .map(|i| self.a.row(i).iter().map(|v| v * v).sum::<f64>())
            .sum();
        JITTER * tr / self.q() as f64
    }

    /// `C(s, t)` as a q×q matrix, without jitter.
    pub fn cross_cov(&self, s: &Point, t: &Point) -> DMatrix<f64> {
        self.cross_cov_at(dist(s, t))
    }

    /// `A · diag(ρ_b(d)) · A′`.
    pub fn cross_cov_at(&self, d: f64) -> DMatrix<f64> {
        let q = self.q();
        let mut out = DMatrix::zeros(q, q);
        self.write_cov(d, &mut out, 0, 0);
        out
    }

    /// Writes `C` at distance `d` into `out[r0.., c0..]`.
    #[inline]
    pub fn write_cov(&self, d: f64, out: &mut DMatrix<f64>, r0: usize, c0: usize) {
        let q = self.q();
        if q == 1 {
            out[(r0, c0)] = self.a[(0, 0)] * self.a[(0, 0)] * self.kernels[0].correlation(d);
            return;
        }
        let rho: Vec<f64> = self.kernels.iter().map(|k| k.correlation(d)).collect();
        for i in 0..q {
            for j in 0..q {
                // A is lower triangular: only b ≤ min(i, j) contributes
                let mut v = 0.0;
                for (b, r) in rho.iter().enumerate().take(i.min(j) + 1) {
                    v += self.a[(i, b)] * r * self.a[(j, b)];
                }
                out[(r0 + i, c0 + j)] = v;
            }
        }
    }

    /// Dense block matrix with block `(i, j) = C(a_i, b_j)`, without jitter.
    pub fn cov_matrix(&self, locs_a: &[Point], locs_b: &[Point]) -> DMatrix<f64> {
        let q = self.q();
        let mut out = DMatrix::zeros(locs_a.len() * q, locs_b.len() * q);
        for (i, a) in locs_a.iter().enumerate() {
            for (j, b) in locs_b.iter().enumerate() {
                self.write_cov(dist(a, b), &mut out, i * q, j * q);
            }
        }
        out
    }

    /// Symmetric kernel matrix of one location set with the jitter policy
    /// applied to the diagonal.
    pub fn cov_matrix_jittered(&self, locs: &[Point]) -> DMatrix<f64> {
        let mut c = self.cov_matrix(locs, locs);
        let eps = self.jitter();
        for i in 0..c.nrows() {
            c[(i, i)] += eps;
        }
        c
    }
}

/// Full covariance parameter vector: cross-covariance plus the noise
/// variance of the (univariate) response.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams {
    pub cross: CrossCovariance,
    pub tau2: f64,
}

impl ThetaParams {
    pub fn new(cross: CrossCovariance, tau2: f64) -> Result<Self> {
        if !(tau2 > 0.0) || !tau2.is_finite() {
            return Err(Error::Validation(format!("tau^2 must be positive, got {tau2}")));
        }
        Ok(Self { cross, tau2 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_distance_is_one() {
        assert_eq!(correlation(&Kernel::exponential(12.0).unwrap(), 0.0).unwrap(), 1.0);
        assert_eq!(Kernel::matern(3.0, 1.3).unwrap().correlation(0.0), 1.0);
        assert_eq!(Kernel::damped_cosine(10.0, 0.099).unwrap().correlation(0.0), 1.0);
    }

    #[test]
    fn half_order_matern_is_exponential() {
        let v = correlation(&Kernel::matern(2.0, 0.5).unwrap(), 0.5).unwrap();
        assert_relative_eq!(v, 0.367_879_4, epsilon = 1e-7);
    }

    #[test]
    fn damped_cosine_goes_negative() {
        let k = Kernel::damped_cosine(10.0, 0.099).unwrap();
        let d = std::f64::consts::PI / 10.0;
        let v = k.correlation(d);
        assert!(v < 0.0);
        assert_relative_eq!(v, -(-d / 0.099).exp(), max_relative = 1e-12);
    }

    #[test]
    fn matern_reference_values() {
        // 40-digit reference values
        for &(nu, phi, d, expect) in &[
            (1.3, 2.0, 0.7, 0.541_293_739_531_293_03),
            (0.3, 5.0, 0.05, 0.602_060_465_251_432_83),
            (2.0, 1.0, 3.0, 0.276_797_063_122_839_17),
        ] {
            let v = Kernel::matern(phi, nu).unwrap().correlation(d);
            assert_relative_eq!(v, expect, max_relative = 1e-10);
        }
    }

    #[test]
    fn closed_forms_match_bessel_path() {
        for &nu in &[1.5, 2.5] {
            for &x in &[0.01, 0.4, 1.0, 3.0, 9.0] {
                assert_relative_eq!(matern(x, nu), matern_bessel(x, nu), max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(Kernel::exponential(0.0).is_err());
        assert!(Kernel::matern(1.0, -0.5).is_err());
        assert!(Kernel::damped_cosine(10.0, 0.2).is_err());
        assert!(correlation(&Kernel::Exponential { phi: 1.0 }, -1.0).is_err());
        let lower = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let ks = vec![Kernel::Exponential { phi: 1.0 }; 2];
        assert!(CrossCovariance::new(lower, ks).is_err());
    }

    #[test]
    fn identity_cross_covariance() {
        let cc = CrossCovariance::new(DMatrix::identity(2, 2), vec![Kernel::Exponential { phi: 3.0 }; 2])
            .unwrap();
        let c = cc.cross_cov(&[0.2, 0.4], &[0.2, 0.4]);
        assert_eq!(c, DMatrix::identity(2, 2));
        let uni = CrossCovariance::univariate(1.0, Kernel::Exponential { phi: 12.0 }).unwrap();
        assert_eq!(uni.cross_cov(&[0.0, 0.0], &[0.0, 0.0])[(0, 0)], 1.0);
    }

    #[test]
    fn single_location_matrix() {
        let cc = CrossCovariance::univariate(2.5, Kernel::Exponential { phi: 1.0 }).unwrap();
        let c = cc.cov_matrix(&[[0.3, 0.3]], &[[0.3, 0.3]]);
        assert_relative_eq!(c[(0, 0)], 2.5, max_relative = 1e-15);
    }

    #[test]
    fn rectangular_matches_elementwise_loop() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, -0.4, 0.7]);
        let cc = CrossCovariance::new(
            a,
            vec![Kernel::Exponential { phi: 2.0 }, Kernel::Matern { phi: 4.0, nu: 1.1 }],
        )
        .unwrap();
        let la = [[0.0, 0.0], [0.1, 0.5], [0.9, 0.2], [0.4, 0.4], [0.3, 0.8]];
        let lb = [[0.5, 0.5], [0.2, 0.1], [0.7, 0.9]];
        let big = cc.cov_matrix(&la, &lb);
        for (i, s) in la.iter().enumerate() {
            for (j, t) in lb.iter().enumerate() {
                let block = cc.cross_cov(s, t);
                for r in 0..2 {
                    for c in 0..2 {
                        assert_eq!(big[(2 * i + r, 2 * j + c)], block[(r, c)]);
                    }
                }
            }
        }
    }

    #[test]
    fn exponential_matrix_is_pd() {
        let cc = CrossCovariance::univariate(1.0, Kernel::Exponential { phi: 3.0 }).unwrap();
        let locs = [[0.0, 0.0], [0.3, 0.1], [0.5, 0.9]];
        let c = cc.cov_matrix_jittered(&locs);
        assert!(c.clone().cholesky().is_some());
        let eig = c.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
    }

    fn lower_tri(q: usize, vals: &[f64]) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(q, q);
        let mut it = vals.iter();
        for i in 0..q {
            for j in 0..=i {
                let v = *it.next().unwrap();
                a[(i, j)] = if i == j { v.abs() + 0.1 } else { v };
            }
        }
        a
    }

    proptest! {
        #[test]
        fn matern_half_equals_exponential(phi in 0.1f64..30.0, d in 0.0f64..10.0) {
            let e = Kernel::Exponential { phi }.correlation(d);
            let m = matern_bessel(phi * d, 0.5);
            prop_assert!((e - m).abs() < 1e-12);
        }

        #[test]
        fn correlation_is_continuous(phi in 0.5f64..20.0, nu in 0.1f64..2.0, d in 0.0f64..3.0) {
            let h = 1e-9;
            for k in [Kernel::Exponential { phi }, Kernel::Matern { phi, nu },
                      Kernel::DampedCosine { phi, range: 0.9 / phi }] {
                let jump = (k.correlation(d + h) - k.correlation(d)).abs();
                prop_assert!(jump < 1e-4, "{:?} jumps by {} at {}", k, jump, d);
            }
        }

        #[test]
        fn cross_cov_is_a_rho_a(vals in proptest::collection::vec(-2.0f64..2.0, 3),
                                s in proptest::array::uniform2(0.0f64..1.0),
                                t in proptest::array::uniform2(0.0f64..1.0)) {
            let a = lower_tri(2, &vals);
            let ks = vec![Kernel::Exponential { phi: 2.0 }, Kernel::Matern { phi: 5.0, nu: 0.8 }];
            let cc = CrossCovariance::new(a.clone(), ks.clone()).unwrap();
            let d = dist(&s, &t);
            let rho = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
                ks.iter().map(|k| k.correlation(d)).collect()));
            let expect = &a * rho * a.transpose();
            let got = cc.cross_cov(&s, &t);
            prop_assert!((got - expect).amax() < 1e-12);
            let same = cc.cross_cov(&s, &s);
            prop_assert!((same.clone() - same.transpose()).amax() == 0.0);
        }

        #[test]
        fn cov_matrix_symmetric(pts in proptest::collection::vec(proptest::array::uniform2(0.0f64..1.0), 2..8)) {
            let cc = CrossCovariance::new(lower_tri(2, &[1.0, 0.3, 0.5]),
                vec![Kernel::Exponential { phi: 3.0 }, Kernel::Exponential { phi: 6.0 }]).unwrap();
            let c = cc.cov_matrix(&pts, &pts);
            prop_assert!((c.clone() - c.transpose()).amax() < 1e-12);
        }
    }
}
