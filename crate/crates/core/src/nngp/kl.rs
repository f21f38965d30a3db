use super::{dense_nngp_covariance, NngpFactors};
use crate::cov::CrossCovariance;
use crate::error::{Error, Result};

/// `KL(N(0, C̃_S) ‖ N(0, C_S))` with the dense parent covariance (jittered).
///
/// Dense in `k`: intended for diagnostics on small reference sets.
pub fn kl_divergence(f: &NngpFactors, cross: &CrossCovariance) -> Result<f64> {
    let dag = f.dag();
    let parent = cross.cov_matrix_jittered(dag.coords());
    let dim = parent.nrows();
    let chol = parent
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("parent covariance".into()))?;
    let log_det_parent = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let approx = dense_nngp_covariance(f);
    let trace = chol.solve(&approx).trace();
    let kl = 0.5 * (trace - dim as f64 + log_det_parent - f.log_det());
    Ok(kl.max(0.0))
}
