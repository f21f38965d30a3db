//! Posterior summaries: quantiles, effective sample size and Monte Carlo
//! standard errors.

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Effective sample size of one chain by Geyer's initial positive
/// sequence estimator.
pub fn ess(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(chain);
    let c0 = chain.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let acov = |lag: usize| -> f64 {
        (0..n - lag).map(|i| (chain[i] - m) * (chain[i + lag] - m)).sum::<f64>() / n as f64
    };
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while 2 * t + 1 < n {
        let g = (acov(2 * t) + acov(2 * t + 1)) / c0;
        if g <= 0.0 {
            break;
        }
        // initial monotone sequence
        let g = g.min(prev);
        sum_pairs += g;
        prev = g;
        t += 1;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64 * (n as f64).log10().max(1.0))
}

/// Summed effective sample size over chains.
pub fn ess_chains(chains: &[Vec<f64>]) -> f64 {
    chains.iter().filter(|c| !c.is_empty()).map(|c| ess(c)).sum()
}

/// Posterior summary of one scalar quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: f64,
    /// Monte Carlo standard error of the median.
    pub mcse_median: f64,
}

impl ParamSummary {
    pub fn from_chains(name: &str, chains: &[Vec<f64>]) -> Self {
        let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        let mut sorted = pooled.clone();
        sorted.sort_by(f64::total_cmp);
        let sd = variance(&pooled).sqrt();
        let e = ess_chains(chains).max(1.0);
        Self {
            name: name.to_string(),
            mean: mean(&pooled),
            sd,
            median: quantile_sorted(&sorted, 0.5),
            q025: quantile_sorted(&sorted, 0.025),
            q975: quantile_sorted(&sorted, 0.975),
            ess: e,
            // asymptotic sd of a normal median is √(π/2) σ / √n
            mcse_median: (std::f64::consts::PI / 2.0).sqrt() * sd / e.sqrt(),
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }

    /// `|median_a − median_b| / √(se_a² + se_b²)`.
    pub fn z_distance(&self, other: &ParamSummary) -> f64 {
        let se = (self.mcse_median.powi(2) + other.mcse_median.powi(2)).sqrt();
        (self.median - other.median).abs() / se
    }
}
