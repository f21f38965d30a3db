//! Samplers: sequential latent Gibbs, block-update Gibbs, and the response
//! and marginalized NNGP samplers, plus adaptation and summaries.

mod adapt;
mod marginal;
mod problem;
pub mod rng;
mod summary;
mod theta;
pub(crate) mod updates;

pub use adapt::{Adaptation, Blocking, MetropolisConfig, ProposalShape};
pub use marginal::{
    MarginalModel, MarginalNngpModel, MarginalStats, ResponseCovariance, ResponseModel,
};
pub use problem::{NngpConfig, Problem, ReferenceSet};
pub use summary::{ess, ess_chains, mean, quantile, quantile_sorted, variance, ParamSummary};
pub use theta::ThetaCodec;
pub use updates::{
    update_beta, update_tau2, update_w_block, update_w_query, update_w_reference, StreamKey,
};

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::cov::{CrossCovariance, ThetaParams};
use crate::error::{Error, Result};
use crate::model::{ChainState, KernelFamily, ParamLayout, SmoothnessPrior};
use crate::nngp::{assemble_precision, compute_factors, log_density, log_density_queries, NngpFactors, SparsePrecision};
use crate::par::{map_indexed, Execution};
use marginal::log_uniform;
use rng::{chain_rng, normal, normal_vec};

/// Fitting algorithm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Algorithm {
    /// Latent `w` updated node by node in DAG order.
    #[default]
    Sequential,
    /// Latent `w_S` drawn jointly from a sparse Cholesky factor.
    Block,
    /// NNGP placed directly on `y`; no latent process.
    Response,
    /// Latent NNGP with `w` integrated out; `w` recovered by composition.
    Marginal,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "block" => Ok(Self::Block),
            "response" => Ok(Self::Response),
            "marginal" => Ok(Self::Marginal),
            other => Err(Error::Validation(format!("unknown algorithm '{other}'"))),
        }
    }
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::Block => "block",
            Self::Response => "response",
            Self::Marginal => "marginal",
        }
    }

    /// True when stored draws carry latent `w`.
    pub fn has_latent(self) -> bool {
        !matches!(self, Self::Response)
    }
}

/// Optional starting values; unspecified parts get data-driven defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InitialValues {
    pub beta: Option<DVector<f64>>,
    pub theta: Option<ThetaParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    pub metropolis: MetropolisConfig,
    /// Keep `w` with each stored draw.
    pub store_w: bool,
    pub exec: Execution,
    pub initial: InitialValues,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Sequential,
            iterations: 2000,
            burn_in: 1000,
            thin: 1,
            chains: 3,
            seed: 1,
            metropolis: MetropolisConfig::default(),
            store_w: true,
            exec: Execution::Parallel,
            initial: InitialValues::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Validation("chains must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Validation("thin must be at least 1".into()));
        }
        if self.burn_in > self.iterations {
            return Err(Error::Validation(format!(
                "burn_in ({}) exceeds iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        let m = &self.metropolis;
        if !(0.0 < m.target_low && m.target_low < m.target_high && m.target_high < 1.0) {
            return Err(Error::Validation("acceptance band must satisfy 0 < low < high < 1".into()));
        }
        if !(m.initial_step > 0.0) {
            return Err(Error::Validation("initial Metropolis step must be positive".into()));
        }
        Ok(())
    }

    /// Stored draws per chain.
    pub fn stored_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Output of one chain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainSamples {
    /// Iteration index of each stored draw.
    pub iterations: Vec<usize>,
    /// One packed parameter row per stored draw.
    pub params: Vec<Vec<f64>>,
    /// Latent vectors (node order) per stored draw; empty when not kept.
    pub w: Vec<Vec<f64>>,
    /// Log-likelihood per stored draw: conditional on `w` for latent
    /// algorithms, marginal otherwise.
    pub log_lik: Vec<f64>,
    /// Fraction of Metropolis proposals accepted, per iteration.
    pub acceptance: Vec<f64>,
    /// Wall-clock seconds per iteration.
    pub iter_seconds: Vec<f64>,
    /// Proposal standard deviations after burn-in, transformed scale.
    pub step_sizes: Vec<f64>,
}

impl ChainSamples {
    /// Acceptance rate over post-burn-in iterations.
    pub fn acceptance_rate(&self, burn_in: usize) -> f64 {
        let tail = &self.acceptance[burn_in.min(self.acceptance.len())..];
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub algorithm: Algorithm,
    pub layout: ParamLayout,
    pub names: Vec<String>,
    pub burn_in: usize,
    pub chains: Vec<ChainSamples>,
}

impl PosteriorSamples {
    pub fn num_draws(&self) -> usize {
        self.chains.iter().map(|c| c.params.len()).sum()
    }

    /// Per-chain draws of a named column.
    pub fn column(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.chains.iter().map(|c| c.params.iter().map(|r| r[j]).collect()).collect())
    }

    /// Per-chain draws of a derived scalar.
    pub fn derived<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.params.iter().map(|r| f(r)).collect()).collect()
    }

    pub fn summary(&self, name: &str) -> Option<ParamSummary> {
        self.column(name).map(|c| ParamSummary::from_chains(name, &c))
    }

    pub fn summaries(&self) -> Vec<ParamSummary> {
        self.names.iter().filter_map(|n| self.summary(n)).collect()
    }

    /// All stored draws as `(β, θ, w)` in chain-major order.
    pub fn draws(&self) -> Result<Vec<(DVector<f64>, ThetaParams, Option<&[f64]>)>> {
        let mut out = Vec::with_capacity(self.num_draws());
        for c in &self.chains {
            for (g, row) in c.params.iter().enumerate() {
                let (beta, theta) = self.layout.unpack_params(row)?;
                out.push((beta, theta, c.w.get(g).map(|v| v.as_slice())));
            }
        }
        Ok(out)
    }
}

/// Ordinary least squares start for `β` and the residual variance.
fn ols_start(problem: &Problem) -> (DVector<f64>, f64) {
    let x = &problem.data.x;
    let y = DVector::from_column_slice(&problem.data.y);
    let beta = problem
        .xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&(x.transpose() * &y)))
        .unwrap_or_else(|| DVector::zeros(problem.p()));
    let r = &y - x * &beta;
    let n = problem.n() as f64;
    let v = (r.norm_squared() / (n - 1.0).max(1.0)).max(1e-6);
    (beta, v)
}

/// Default starting values: OLS `β`, the residual variance split evenly
/// between the latent process and the noise, mid-prior decay.
pub fn default_initial(problem: &Problem, init: &InitialValues) -> Result<ChainState> {
    let (beta_ols, v) = ols_start(problem);
    let beta = init.beta.clone().unwrap_or(beta_ols);
    let q = problem.q();
    let theta = match &init.theta {
        Some(t) => t.clone(),
        None => {
            let tau2 = 0.5 * v;
            let cross = if q == 0 {
                CrossCovariance::univariate(1.0, crate::cov::Kernel::exponential(1.0)?)?
            } else {
                let mut kernels = Vec::with_capacity(q);
                for b in 0..q {
                    let u = problem.priors.phi_prior(b);
                    let phi = (u.lo.max(1e-8) * u.hi).sqrt().clamp(u.lo + 1e-9 * (u.hi - u.lo), u.hi);
                    let nu = match problem.priors.nu {
                        SmoothnessPrior::Fixed(n) => n,
                        SmoothnessPrior::Uniform(u) => 0.5 * (u.lo + u.hi),
                    };
                    let r = problem.priors.range;
                    let range = (0.5 * (r.lo + r.hi)).min(0.5 / phi).max(r.lo + 1e-6 * (r.hi - r.lo));
                    kernels.push(problem.spec.kernel.build(phi, nu, range)?);
                }
                let a = DMatrix::identity(q, q) * (0.5 * v / q as f64).sqrt();
                CrossCovariance::new(a, kernels)?
            };
            ThetaParams { cross, tau2 }
        }
    };
    Ok(ChainState {
        beta,
        theta,
        w: vec![0.0; problem.w_len()],
    })
}

/// Moves the transformed start of chains after the first.
fn disperse(codec: &ThetaCodec, state: &mut ChainState, rng: &mut ChaCha8Rng, chain: usize) {
    if chain == 0 || codec.dim() == 0 {
        return;
    }
    let t = codec.encode(&state.theta);
    for _ in 0..20 {
        let cand: Vec<f64> = t.iter().map(|v| v + 0.3 * normal(rng)).collect();
        if codec.log_prior(&cand, state.theta.tau2).is_finite() {
            if let Ok(th) = codec.decode(&cand, state.theta.tau2) {
                state.theta = th;
                return;
            }
        }
    }
}

fn latent_log_target(problem: &Problem, f: &NngpFactors, w: &[f64], exec: Execution) -> Result<f64> {
    let k = problem.k() * problem.q();
    let mut lp = log_density(f, &w[..k], exec)?;
    if problem.dag.num_queries() > 0 {
        lp += log_density_queries(f, &w[..k], &w[k..], exec)?;
    }
    Ok(lp)
}

struct MhOutcome {
    accepted: usize,
    proposed: usize,
}

/// One Metropolis sweep over the transformed θ. `eval` returns the log
/// likelihood part of the target plus any per-proposal payload.
fn metropolis<T, F>(
    rng: &mut ChaCha8Rng,
    codec: &ThetaCodec,
    adapt: &mut Adaptation,
    t: &mut Vec<f64>,
    tau2: f64,
    current_ll: &mut f64,
    payload: &mut T,
    mut eval: F,
) -> MhOutcome
where
    F: FnMut(&ThetaParams) -> Option<(f64, T)>,
{
    let d = codec.dim();
    let mut out = MhOutcome {
        accepted: 0,
        proposed: 0,
    };
    let mut try_move = |cand: Vec<f64>, block: usize, rng: &mut ChaCha8Rng, t: &mut Vec<f64>, adapt: &mut Adaptation, current_ll: &mut f64, payload: &mut T| {
        let lp_new = codec.log_prior(&cand, tau2);
        let mut accepted = false;
        if lp_new.is_finite() {
            if let Ok(th) = codec.decode(&cand, tau2) {
                if let Some((ll, pay)) = eval(&th) {
                    let log_ratio = lp_new + ll - codec.log_prior(t, tau2) - *current_ll;
                    if log_uniform(rng) < log_ratio {
                        *t = cand;
                        *current_ll = ll;
                        *payload = pay;
                        accepted = true;
                    }
                }
            }
        }
        adapt.record(block, accepted);
        accepted
    };
    match adapt.blocking() {
        Blocking::Joint => {
            let z = normal_vec(rng, d);
            let step = adapt.joint_step(&z);
            let cand: Vec<f64> = t.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            out.proposed += 1;
            if try_move(cand, 0, rng, t, adapt, current_ll, payload) {
                out.accepted += 1;
            }
        }
        Blocking::Componentwise => {
            for j in 0..d {
                let mut cand = t.clone();
                cand[j] += adapt.coord_step(j) * normal(rng);
                out.proposed += 1;
                if try_move(cand, j, rng, t, adapt, current_ll, payload) {
                    out.accepted += 1;
                }
            }
        }
    }
    out
}

/// Metropolis acceptance log-ratio for a move between two log targets.
pub fn log_accept_ratio(log_target_from: f64, log_target_to: f64) -> f64 {
    log_target_to - log_target_from
}

fn store_due(config: &SamplerConfig, it: usize) -> bool {
    it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0
}

fn run_latent_chain(problem: &Problem, config: &SamplerConfig, chain: usize) -> Result<ChainSamples> {
    let exec = config.exec;
    let mut rng = chain_rng(config.seed, chain);
    let layout = ParamLayout::new(problem.p(), problem.q(), problem.spec.kernel);
    let mut state = default_initial(problem, &config.initial)?;
    let codec = ThetaCodec::new(problem.q(), problem.spec.kernel, &problem.priors, false);
    disperse(&codec, &mut state, &mut rng, chain);
    let mut adapt = Adaptation::new(&config.metropolis, codec.dim());
    let mut out = ChainSamples::default();
    let mut factors = compute_factors(&problem.dag, &state.theta.cross, exec)?;
    let mut precision: Option<SparsePrecision> = None;
    let block = config.algorithm == Algorithm::Block;
    if block && !problem.s_equals_t() {
        return Err(Error::Validation(
            "the block algorithm requires the reference set to equal the observed locations".into(),
        ));
    }
    for it in 0..config.iterations {
        if it == config.burn_in {
            adapt.freeze();
        }
        let start = Instant::now();
        update_beta(&mut rng, problem, &mut state)?;
        update_tau2(&mut rng, problem, &mut state);

        let mut t = codec.encode(&state.theta);
        let mut ll = latent_log_target(problem, &factors, &state.w, exec)?;
        let w = &state.w;
        let mut new_factors: Option<NngpFactors> = None;
        let res = metropolis(
            &mut rng,
            &codec,
            &mut adapt,
            &mut t,
            state.theta.tau2,
            &mut ll,
            &mut new_factors,
            |th| {
                let f = compute_factors(&problem.dag, &th.cross, exec).ok()?;
                let l = latent_log_target(problem, &f, w, exec).ok()?;
                Some((l, Some(f)))
            },
        );
        if let Some(f) = new_factors {
            factors = f;
            precision = None;
            state.theta = codec.decode(&t, state.theta.tau2)?;
        }

        if block {
            if precision.is_none() {
                precision = Some(assemble_precision(&factors, exec));
            }
            update_w_block(&mut rng, problem, precision.as_ref().expect("assembled"), &mut state)?;
        } else {
            update_w_reference(&mut rng, problem, &factors, &mut state);
            update_w_query(
                problem,
                &factors,
                &mut state,
                StreamKey {
                    seed: config.seed,
                    chain,
                    iteration: it,
                },
                exec,
            );
        }
        adapt.observe(&codec.encode(&state.theta), it, config.burn_in);
        out.acceptance.push(res.accepted as f64 / res.proposed.max(1) as f64);
        if store_due(config, it) {
            out.iterations.push(it);
            out.params.push(layout.pack_params(&state.beta, &state.theta));
            out.log_lik
                .push(problem.conditional_log_lik(&state.beta, state.theta.tau2, &state.w));
            if config.store_w {
                out.w.push(state.w.clone());
            }
        }
        out.iter_seconds.push(start.elapsed().as_secs_f64());
    }
    out.step_sizes = adapt.step_sizes();
    Ok(out)
}

fn run_non_spatial_chain(problem: &Problem, config: &SamplerConfig, chain: usize) -> Result<ChainSamples> {
    let mut rng = chain_rng(config.seed, chain);
    let layout = ParamLayout::new(problem.p(), 0, KernelFamily::Exponential);
    let mut state = default_initial(problem, &config.initial)?;
    let mut out = ChainSamples::default();
    for it in 0..config.iterations {
        let start = Instant::now();
        update_beta(&mut rng, problem, &mut state)?;
        update_tau2(&mut rng, problem, &mut state);
        out.acceptance.push(1.0);
        if store_due(config, it) {
            out.iterations.push(it);
            out.params.push(layout.pack_params(&state.beta, &state.theta));
            out.log_lik
                .push(problem.conditional_log_lik(&state.beta, state.theta.tau2, &[]));
        }
        out.iter_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Gibbs on `β` plus Metropolis on `(θ, τ²)` for a marginal likelihood.
pub fn run_marginal_chain<M: MarginalModel + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    chain: usize,
) -> Result<ChainSamples> {
    let problem = model.problem();
    let exec = config.exec;
    let mut rng = chain_rng(config.seed, chain);
    let layout = ParamLayout::new(problem.p(), problem.q(), problem.spec.kernel);
    let mut state = default_initial(problem, &config.initial)?;
    state.w.clear();
    let codec = ThetaCodec::new(problem.q(), problem.spec.kernel, &problem.priors, true);
    disperse(&codec, &mut state, &mut rng, chain);
    let mut adapt = Adaptation::new(&config.metropolis, codec.dim());
    let mut stats = model.stats(&state.theta, exec)?;
    let mut out = ChainSamples::default();
    for it in 0..config.iterations {
        if it == config.burn_in {
            adapt.freeze();
        }
        let start = Instant::now();
        state.beta = updates::draw_beta(&mut rng, problem, &stats.xtx, &stats.xty)?;
        let mut t = codec.encode(&state.theta);
        let mut ll = stats.log_lik(&state.beta);
        let beta = state.beta.clone();
        let mut new_stats: Option<MarginalStats> = None;
        let res = metropolis(
            &mut rng,
            &codec,
            &mut adapt,
            &mut t,
            state.theta.tau2,
            &mut ll,
            &mut new_stats,
            |th| {
                let s = model.stats(th, exec).ok()?;
                let l = s.log_lik(&beta);
                l.is_finite().then_some((l, Some(s)))
            },
        );
        if let Some(s) = new_stats {
            stats = s;
            state.theta = codec.decode(&t, state.theta.tau2)?;
        }
        adapt.observe(&t, it, config.burn_in);
        out.acceptance.push(res.accepted as f64 / res.proposed.max(1) as f64);
        if store_due(config, it) {
            out.iterations.push(it);
            out.params.push(layout.pack_params(&state.beta, &state.theta));
            out.log_lik.push(ll);
            if config.store_w {
                if let Some(w) = model.draw_w(&state.theta, &state.beta, &mut rng, exec)? {
                    out.w.push(w);
                }
            }
        }
        out.iter_seconds.push(start.elapsed().as_secs_f64());
    }
    out.step_sizes = adapt.step_sizes();
    Ok(out)
}

fn collect(
    problem: &Problem,
    config: &SamplerConfig,
    algorithm: Algorithm,
    chains: Vec<Result<ChainSamples>>,
) -> Result<PosteriorSamples> {
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    let layout = ParamLayout::new(problem.p(), problem.q(), problem.spec.kernel);
    Ok(PosteriorSamples {
        algorithm,
        names: layout.names(),
        layout,
        burn_in: config.burn_in,
        chains,
    })
}

/// Runs a marginal-likelihood model over all chains (chains in parallel).
pub fn run_marginal_chains<M: MarginalModel + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    algorithm: Algorithm,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let chains = map_indexed(config.exec, config.chains, |c| run_marginal_chain(model, config, c));
    collect(model.problem(), config, algorithm, chains)
}

/// Runs `config.chains` independent chains of `config.algorithm`.
pub fn run_chains(problem: &Problem, config: &SamplerConfig) -> Result<PosteriorSamples> {
    config.validate()?;
    if problem.q() == 0 {
        let chains = map_indexed(config.exec, config.chains, |c| {
            run_non_spatial_chain(problem, config, c)
        });
        return collect(problem, config, config.algorithm, chains);
    }
    match config.algorithm {
        Algorithm::Sequential | Algorithm::Block => {
            let chains = map_indexed(config.exec, config.chains, |c| run_latent_chain(problem, config, c));
            collect(problem, config, config.algorithm, chains)
        }
        Algorithm::Response => {
            let model = ResponseModel::new(problem)?;
            run_marginal_chains(&model, config, Algorithm::Response)
        }
        Algorithm::Marginal => {
            let model = MarginalNngpModel::new(problem)?;
            run_marginal_chains(&model, config, Algorithm::Marginal)
        }
    }
}

/// Runs a single chain (index `chain`) of `config.algorithm`.
pub fn run_chain(problem: &Problem, config: &SamplerConfig, chain: usize) -> Result<ChainSamples> {
    config.validate()?;
    if problem.q() == 0 {
        return run_non_spatial_chain(problem, config, chain);
    }
    match config.algorithm {
        Algorithm::Sequential | Algorithm::Block => run_latent_chain(problem, config, chain),
        Algorithm::Response => run_marginal_chain(&ResponseModel::new(problem)?, config, chain),
        Algorithm::Marginal => run_marginal_chain(&MarginalNngpModel::new(problem)?, config, chain),
    }
}
