//! Model comparison and holdout scores: DIC, Gelfand-Ghosh G/P/D, RMSPE,
//! interval coverage and width.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::cov::ThetaParams;
use crate::error::{Error, Result};
use crate::mcmc::{mean, Algorithm, MarginalModel, MarginalNngpModel, PosteriorSamples, Problem, ResponseModel};
use crate::par::Execution;
use crate::predict::{predict, LocationSummary, PredictionRequest};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dic {
    pub p_d: f64,
    pub dic: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
}

/// DIC from per-draw deviances and the deviance at the posterior mean.
pub fn dic_from(deviances: &[f64], deviance_at_mean: f64) -> Dic {
    let mean_deviance = mean(deviances);
    let p_d = mean_deviance - deviance_at_mean;
    Dic {
        p_d,
        dic: mean_deviance + p_d,
        mean_deviance,
        deviance_at_mean,
    }
}

/// Posterior means of `(β, θ)` and of `w` when stored.
pub fn posterior_means(samples: &PosteriorSamples) -> Result<Option<(DVector<f64>, ThetaParams, Option<Vec<f64>>)>> {
    let rows: Vec<&Vec<f64>> = samples.chains.iter().flat_map(|c| &c.params).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let width = rows[0].len();
    let avg: Vec<f64> = (0..width).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
    let (beta, theta) = samples.layout.unpack_params(&avg)?;
    let ws: Vec<&Vec<f64>> = samples.chains.iter().flat_map(|c| &c.w).collect();
    let w = if ws.len() == rows.len() && !ws.is_empty() {
        let len = ws[0].len();
        Some((0..len).map(|i| ws.iter().map(|w| w[i]).sum::<f64>() / ws.len() as f64).collect())
    } else {
        None
    };
    Ok(Some((beta, theta, w)))
}

fn stored_deviances(samples: &PosteriorSamples) -> Vec<f64> {
    samples.chains.iter().flat_map(|c| c.log_lik.iter().map(|l| -2.0 * l)).collect()
}

/// DIC for samples from [`crate::mcmc::run_chains`]. Latent algorithms use
/// the deviance conditional on `w`; the response and marginal algorithms use
/// the marginal deviance. Returns `None` when there are no stored draws.
pub fn dic(problem: &Problem, samples: &PosteriorSamples, exec: Execution) -> Result<Option<Dic>> {
    let Some((beta, theta, w)) = posterior_means(samples)? else {
        return Ok(None);
    };
    let ll = if problem.q() == 0 {
        problem.conditional_log_lik(&beta, theta.tau2, &[])
    } else {
        match samples.algorithm {
            Algorithm::Sequential | Algorithm::Block => {
                let w = w.ok_or_else(|| Error::Validation("conditional DIC needs stored w draws".into()))?;
                problem.conditional_log_lik(&beta, theta.tau2, &w)
            }
            Algorithm::Response => ResponseModel::new(problem)?.stats(&theta, exec)?.log_lik(&beta),
            Algorithm::Marginal => MarginalNngpModel::new(problem)?.stats(&theta, exec)?.log_lik(&beta),
        }
    };
    Ok(Some(dic_from(&stored_deviances(samples), -2.0 * ll)))
}

/// DIC for samples drawn under an arbitrary marginal likelihood.
pub fn dic_marginal<M: MarginalModel + ?Sized>(
    model: &M,
    samples: &PosteriorSamples,
    exec: Execution,
) -> Result<Option<Dic>> {
    let Some((beta, theta, _)) = posterior_means(samples)? else {
        return Ok(None);
    };
    let ll = if model.problem().q() == 0 {
        model.problem().conditional_log_lik(&beta, theta.tau2, &[])
    } else {
        model.stats(&theta, exec)?.log_lik(&beta)
    };
    Ok(Some(dic_from(&stored_deviances(samples), -2.0 * ll)))
}

/// Gelfand-Ghosh posterior predictive loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gpd {
    pub g: f64,
    pub p: f64,
    pub d: f64,
}

/// `G = Σ (yᵢ − E y_rep,i)²`, `P = Σ Var y_rep,i`, `D = G + P` from an
/// `n × draws` replicate matrix.
pub fn gpd(y: &[f64], replicates: &DMatrix<f64>) -> Result<Gpd> {
    if replicates.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "replicate rows",
            expected: y.len(),
            got: replicates.nrows(),
        });
    }
    let draws = replicates.ncols() as f64;
    let (mut g, mut p) = (0.0, 0.0);
    for (i, yi) in y.iter().enumerate() {
        let row = replicates.row(i);
        let m = row.sum() / draws;
        g += (yi - m).powi(2);
        p += row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / draws;
    }
    Ok(Gpd { g, p, d: g + p })
}

/// Replicates at the observed locations through [`predict`], then G/P/D.
pub fn gpd_for(problem: &Problem, samples: &PosteriorSamples, seed: u64, exec: Execution) -> Result<Option<Gpd>> {
    if samples.num_draws() == 0 {
        return Ok(None);
    }
    let req = PredictionRequest {
        locations: problem.data.locations.clone(),
        x: problem.data.x.clone(),
        z: Some(problem.z.clone()),
        keep_draws: true,
        seed,
        exec,
    };
    let reps = predict(problem, samples, &req)?.draws.expect("draws requested");
    gpd(&problem.data.y, &reps).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoldoutScores {
    pub rmspe: f64,
    /// Percent of truths inside the 95% interval.
    pub coverage: f64,
    pub width: f64,
    pub pmse: f64,
}

/// Scores predictive medians and 95% intervals against held-out truth;
/// both inputs are keyed by id.
pub fn holdout_scores(pred: &[(usize, LocationSummary)], truth: &[(usize, f64)]) -> Result<HoldoutScores> {
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} predictions but {} held-out values",
            pred.len(),
            truth.len()
        )));
    }
    let lookup: std::collections::HashMap<usize, f64> = truth.iter().copied().collect();
    let n = pred.len() as f64;
    let (mut se, mut inside, mut width) = (0.0, 0usize, 0.0);
    for (id, s) in pred {
        let y = *lookup
            .get(id)
            .ok_or_else(|| Error::Validation(format!("prediction id {id} has no held-out value")))?;
        se += (s.q50 - y).powi(2);
        if s.q025 <= y && y <= s.q975 {
            inside += 1;
        }
        width += s.q975 - s.q025;
    }
    let pmse = se / n;
    Ok(HoldoutScores {
        rmspe: pmse.sqrt(),
        coverage: 100.0 * inside as f64 / n,
        width: width / n,
        pmse,
    })
}

/// Everything reported for one fitted run; missing pieces are `NaN`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitReport {
    pub p_d: f64,
    pub dic: f64,
    pub g: f64,
    pub p: f64,
    pub d: f64,
    pub rmspe: f64,
    pub coverage: f64,
    pub width: f64,
    pub pmse: f64,
    pub seconds: f64,
    pub sec_per_iter: f64,
}

impl Default for FitReport {
    fn default() -> Self {
        Self {
            p_d: f64::NAN,
            dic: f64::NAN,
            g: f64::NAN,
            p: f64::NAN,
            d: f64::NAN,
            rmspe: f64::NAN,
            coverage: f64::NAN,
            width: f64::NAN,
            pmse: f64::NAN,
            seconds: f64::NAN,
            sec_per_iter: f64::NAN,
        }
    }
}

impl FitReport {
    pub fn with_dic(mut self, d: Option<Dic>) -> Self {
        if let Some(d) = d {
            self.p_d = d.p_d;
            self.dic = d.dic;
        }
        self
    }

    pub fn with_gpd(mut self, g: Option<Gpd>) -> Self {
        if let Some(g) = g {
            self.g = g.g;
            self.p = g.p;
            self.d = g.d;
        }
        self
    }

    pub fn with_holdout(mut self, h: HoldoutScores) -> Self {
        self.rmspe = h.rmspe;
        self.coverage = h.coverage;
        self.width = h.width;
        self.pmse = h.pmse;
        self
    }

    /// Wall-clock totals from the per-iteration timings of every chain.
    pub fn with_timing(mut self, samples: &PosteriorSamples) -> Self {
        let all: Vec<f64> = samples.chains.iter().flat_map(|c| c.iter_seconds.iter().copied()).collect();
        self.seconds = all.iter().sum();
        self.sec_per_iter = if all.is_empty() { f64::NAN } else { mean(&all) };
        self
    }

    pub const CSV_HEADER: &'static str = "run_id,pD,DIC,G,P,D,RMSPE,coverage,width,PMSE,seconds,sec_per_iter";

    pub fn csv_row(&self, run_id: &str) -> String {
        let vals = [
            self.p_d,
            self.dic,
            self.g,
            self.p,
            self.d,
            self.rmspe,
            self.coverage,
            self.width,
            self.pmse,
            self.seconds,
            self.sec_per_iter,
        ];
        let mut s = run_id.to_string();
        for v in vals {
            s.push(',');
            s.push_str(&fmt_num(v));
        }
        s
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

impl fmt::Display for FitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("pD", self.p_d),
            ("DIC", self.dic),
            ("G", self.g),
            ("P", self.p),
            ("D", self.d),
            ("RMSPE", self.rmspe),
            ("95% CI cover %", self.coverage),
            ("95% CI width", self.width),
            ("PMSE", self.pmse),
            ("time (s)", self.seconds),
            ("s / iteration", self.sec_per_iter),
        ];
        for (name, v) in rows {
            if v.is_nan() {
                writeln!(f, "{name:<16} NA")?;
            } else {
                writeln!(f, "{name:<16} {v:.4}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocationSet;
    use crate::mcmc::rng::{chain_rng, normal};
    use crate::mcmc::{run_chains, NngpConfig, SamplerConfig};
    use crate::model::{Dataset, ModelSpec, PriorSpec};
    use rand::Rng;
    use statrs::distribution::{Continuous, Normal};

    fn summary(q50: f64, q025: f64, q975: f64) -> LocationSummary {
        LocationSummary { q50, q025, q975, mean: q50 }
    }

    #[test]
    fn single_repeated_draw_has_zero_pd() {
        let d = dic_from(&[12.5; 10], 12.5);
        assert_eq!(d.p_d, 0.0);
        assert_eq!(d.dic, 12.5);
    }

    #[test]
    fn gpd_of_exact_replicates_is_zero() {
        let y = [1.0, 2.0, -3.0];
        let reps = DMatrix::from_fn(3, 5, |i, _| y[i]);
        assert_eq!(gpd(&y, &reps).unwrap(), Gpd { g: 0.0, p: 0.0, d: 0.0 });
    }

    #[test]
    fn gpd_penalty_is_the_replicate_spread() {
        let y = [0.0, 0.0];
        // each row is ±1 around 0: variance 1
        let reps = DMatrix::from_fn(2, 4, |_, g| if g % 2 == 0 { 1.0 } else { -1.0 });
        let r = gpd(&y, &reps).unwrap();
        assert_eq!(r.g, 0.0);
        assert_eq!(r.p, 2.0);
        assert_eq!(r.d, r.g + r.p);
    }

    #[test]
    fn holdout_hand_example() {
        let pred = [
            (0, summary(1.0, 0.0, 2.0)),
            (1, summary(2.0, 1.5, 2.5)),
            (2, summary(0.0, -1.0, 3.0)),
        ];
        let truth = [(2, 1.0), (0, 1.5), (1, 3.0)];
        let h = holdout_scores(&pred, &truth).unwrap();
        // errors 0.5, 1, 1 → mse 2.25/3 = 0.75
        assert!((h.pmse - 0.75).abs() < 1e-15);
        assert!((h.rmspe - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((h.coverage - 200.0 / 3.0).abs() < 1e-12);
        assert!((h.width - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn infinite_intervals_cover_everything() {
        let pred = [(0, summary(0.0, f64::NEG_INFINITY, f64::INFINITY)), (1, summary(0.0, f64::NEG_INFINITY, f64::INFINITY))];
        let h = holdout_scores(&pred, &[(0, 5.0), (1, -1e9)]).unwrap();
        assert_eq!(h.coverage, 100.0);
        let perfect = holdout_scores(&[(0, summary(5.0, 4.0, 6.0))], &[(0, 5.0)]).unwrap();
        assert_eq!(perfect.rmspe, 0.0);
    }

    #[test]
    fn holdout_id_mismatch_errors() {
        let pred = [(0, summary(0.0, -1.0, 1.0))];
        assert!(holdout_scores(&pred, &[(1, 0.0)]).is_err());
        assert!(holdout_scores(&pred, &[]).is_err());
    }

    fn linear_problem(n: usize) -> Problem {
        let mut rng = chain_rng(31, 0);
        let pts: Vec<_> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let y: Vec<f64> = (0..n).map(|i| 2.0 - x[(i, 1)] + 0.7 * normal(&mut rng)).collect();
        let d = Dataset::new(LocationSet::new(pts).unwrap(), y, x).unwrap();
        Problem::new(d, ModelSpec::non_spatial(), PriorSpec::default(), &NngpConfig::default(), Execution::Sequential).unwrap()
    }

    #[test]
    fn non_spatial_dic_matches_direct_formula() {
        let pr = linear_problem(150);
        let cfg = SamplerConfig { iterations: 3000, burn_in: 500, chains: 2, exec: Execution::Sequential, ..SamplerConfig::default() };
        let s = run_chains(&pr, &cfg).unwrap();
        let dev = |beta: &DVector<f64>, tau2: f64| -> f64 {
            let nd = Normal::new(0.0, tau2.sqrt()).unwrap();
            (0..150)
                .map(|i| {
                    let mu = pr.data.x[(i, 0)] * beta[0] + pr.data.x[(i, 1)] * beta[1];
                    -2.0 * nd.pdf(pr.data.y[i] - mu).ln()
                })
                .sum()
        };
        let draws = s.draws().unwrap();
        let devs: Vec<f64> = draws.iter().map(|(b, t, _)| dev(b, t.tau2)).collect();
        let mb = draws.iter().fold(DVector::zeros(2), |a, (b, _, _)| a + b) / draws.len() as f64;
        let mt = draws.iter().map(|(_, t, _)| t.tau2).sum::<f64>() / draws.len() as f64;
        let oracle = dic_from(&devs, dev(&mb, mt));
        let ours = dic(&pr, &s, Execution::Sequential).unwrap().unwrap();
        assert!((ours.dic - oracle.dic).abs() < 1e-6 * oracle.dic.abs());
        assert!((ours.p_d - oracle.p_d).abs() < 1e-6);
        // three parameters: β₀, β₁, τ²
        assert!((ours.p_d - 3.0).abs() < 0.6, "pD {}", ours.p_d);
    }

    #[test]
    fn non_spatial_gpd_matches_conjugate_moments() {
        let n = 150;
        let pr = linear_problem(n);
        let cfg = SamplerConfig { iterations: 6000, burn_in: 500, chains: 2, exec: Execution::Sequential, ..SamplerConfig::default() };
        let s = run_chains(&pr, &cfg).unwrap();
        let g = gpd_for(&pr, &s, 3, Execution::Sequential).unwrap().unwrap();
        let x = &pr.data.x;
        let y = DVector::from_column_slice(&pr.data.y);
        let xtx = x.transpose() * x;
        let bhat = xtx.clone().try_inverse().unwrap() * x.transpose() * &y;
        let rss = (&y - x * &bhat).norm_squared();
        // flat β, IG(2, 0.1) on τ²
        let (a, b) = (2.0 + (n as f64 - 2.0) / 2.0, 0.1 + rss / 2.0);
        let e_tau2 = b / (a - 1.0);
        let p_exact = e_tau2 * (n as f64 + 2.0);
        assert!((g.g - rss).abs() / rss < 0.02, "G {} vs {}", g.g, rss);
        assert!((g.p - p_exact).abs() / p_exact < 0.03, "P {} vs {}", g.p, p_exact);
        assert_eq!(g.d, g.g + g.p);
    }

    #[test]
    fn empty_samples_give_empty_report() {
        let pr = linear_problem(20);
        let cfg = SamplerConfig { iterations: 10, burn_in: 10, chains: 1, exec: Execution::Sequential, ..SamplerConfig::default() };
        let s = run_chains(&pr, &cfg).unwrap();
        assert!(dic(&pr, &s, Execution::Sequential).unwrap().is_none());
        assert!(gpd_for(&pr, &s, 1, Execution::Sequential).unwrap().is_none());
        let r = FitReport::default().with_timing(&s);
        assert!(r.dic.is_nan());
        assert!(r.csv_row("x").starts_with("x,NA,NA"));
        assert_eq!(FitReport::CSV_HEADER.split(',').count(), r.csv_row("x").split(',').count());
    }
}
