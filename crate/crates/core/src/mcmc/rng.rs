//! Counter-based random streams.
//!
//! Each chain owns a ChaCha stream keyed by the run seed. Work that may run
//! on several threads (per-location draws) gets its own substream keyed by
//! `(seed, chain, iteration, location)`, so the draws do not depend on the
//! thread schedule.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Main stream of chain `chain`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Substream for one location at one iteration of one chain.
pub fn substream(seed: u64, chain: usize, iteration: usize, location: usize) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed ^ 0x5DEE_CE66_D1CE_4E5B) ^ chain as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(iteration as u64);
    rng.set_word_pos((location as u128) << 20);
    rng
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// Draw from `Gamma(shape, rate)`.
pub fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng)
}

/// Draw from `IG(shape, scale)`.
pub fn inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    1.0 / gamma(rng, shape, scale)
}

/// Draw from `N(P⁻¹ b, P⁻¹)` given the precision `P` (small, dense).
/// Returns `None` when `P` is not positive definite.
pub fn mvn_from_precision<R: Rng + ?Sized>(
    rng: &mut R,
    precision: DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = b.len();
    let chol = precision.cholesky()?;
    let mean = chol.solve(b);
    let z = normal_vec(rng, n);
    let dev = chol.l().tr_solve_lower_triangular(&z)?;
    Some(mean + dev)
}

/// Draw from `N(mean, C)` via the lower Cholesky factor of `C`.
pub fn mvn_from_chol<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
) -> DVector<f64> {
    let z = normal_vec(rng, mean.len());
    mean + l * z
}
