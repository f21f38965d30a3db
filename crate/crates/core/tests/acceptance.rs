//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `NNGP_ACCEPTANCE_ONLY=4,5` runs a subset. `NNGP_ACCEPTANCE_STRICT=1` turns
//! any FAIL into a nonzero exit status.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use nngp::cov::{CrossCovariance, Kernel, ThetaParams};
use nngp::geo::{
    build_neighbor_dag, order_locations, LocationSet, NeighborScheme, OrderStrategy, Point,
};
use nngp::mcmc::rng::{chain_rng, normal};
use nngp::mcmc::{
    ess_chains, run_chain, run_chains, Algorithm, NngpConfig, ParamSummary, PosteriorSamples, Problem,
    SamplerConfig,
};
use nngp::metrics::{dic, holdout_scores};
use nngp::model::{Dataset, KernelFamily, ModelMode, ModelSpec, PriorSpec, UniformPrior, VariancePrior};
use nngp::nngp::{
    assemble_precision, compute_factors, dense_nngp_covariance, kl_divergence, log_density, log_density_terms,
    nngp_cov,
};
use nngp::par::Execution;
use nngp::predict::{krige_latent, predict, PredictionRequest};
use nngp::simulate::{
    gen_dataset, oracle_krige, oracle_posterior, split_indices, FieldSampler, KrigeMode, LocationLaw,
    SimRecipe,
};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), AtomicOrdering::Relaxed) + layout.size();
            PEAK.fetch_max(now, AtomicOrdering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), AtomicOrdering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Resets the peak to the current level and returns that level.
fn reset_peak() -> usize {
    let now = CURRENT.load(AtomicOrdering::Relaxed);
    PEAK.store(now, AtomicOrdering::Relaxed);
    now
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

const EXEC: Execution = Execution::Parallel;

fn exp_cross(sigma2: f64, phi: f64) -> CrossCovariance {
    CrossCovariance::univariate(sigma2, Kernel::Exponential { phi }).unwrap()
}

fn uniform_points(n: usize, seed: u64, x: (f64, f64), y: (f64, f64)) -> Vec<Point> {
    let mut rng = chain_rng(seed, 0);
    (0..n).map(|_| [rng.random_range(x.0..x.1), rng.random_range(y.0..y.1)]).collect()
}

fn dag_for(points: &[Point], m: usize, scheme: NeighborScheme) -> Arc<nngp::geo::NeighborDag> {
    let locs = LocationSet::new(points.to_vec()).unwrap();
    let ord = order_locations(&locs, OrderStrategy::ByCoordSum);
    Arc::new(build_neighbor_dag(&locs, &ord, m, scheme, EXEC).unwrap())
}

fn dense_mvn_log_density(c: &DMatrix<f64>, w: &[f64]) -> f64 {
    let ch = c.clone().cholesky().expect("dense covariance");
    let z = ch.l().solve_lower_triangular(&DVector::from_column_slice(w)).unwrap();
    let ld: f64 = ch.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (w.len() as f64 * (2.0 * std::f64::consts::PI).ln() + ld + z.norm_squared())
}

fn random_kernel(rng: &mut impl Rng) -> Kernel {
    match rng.random_range(0..3) {
        0 => Kernel::Exponential { phi: rng.random_range(1.0..20.0) },
        1 => Kernel::matern(rng.random_range(1.0..15.0), rng.random_range(0.3..2.5)).unwrap(),
        _ => {
            let phi = rng.random_range(1.0..10.0);
            Kernel::damped_cosine(phi, rng.random_range(0.02..1.0 / phi)).unwrap()
        }
    }
}

fn c1() -> Outcome {
    let start = Instant::now();
    let mut rng = chain_rng(101, 0);
    let (mut worst_ld, mut worst_kl) = (0.0f64, 0.0f64);
    let (mut t_ld, mut t_kl) = (0.0, 0.0);
    for trial in 0..20 {
        let k = 200;
        let pts = uniform_points(k, 1000 + trial, (0.0, 1.0), (0.0, 1.0));
        let cross = CrossCovariance::univariate(rng.random_range(0.2..3.0), random_kernel(&mut rng)).unwrap();
        let dag = dag_for(&pts, k - 1, NeighborScheme::Nearest);
        let f = compute_factors(&dag, &cross, EXEC).unwrap();
        let c = cross.cov_matrix_jittered(dag.coords());
        let l = c.clone().cholesky().expect("dense covariance").l();
        let w: Vec<f64> = (&l * DVector::from_fn(k, |_, _| normal(&mut rng))).as_slice().to_vec();
        let t0 = Instant::now();
        let a = log_density(&f, &w, EXEC).unwrap();
        let b = dense_mvn_log_density(&c, &w);
        worst_ld = worst_ld.max((a - b).abs());
        t_ld += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        worst_kl = worst_kl.max(kl_divergence(&f, &cross).unwrap());
        t_kl += t0.elapsed().as_secs_f64();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_ld < 1e-8 && worst_kl < 1e-8 && secs < 10.0,
        format!("max |log density diff| {worst_ld:.2e}, max KL {worst_kl:.2e}, {secs:.1} s ({t_ld:.1} s densities, {t_kl:.1} s KL)"),
    )
}

fn c2() -> Outcome {
    let mut rng = chain_rng(102, 0);
    let (mut worst_prec, mut worst_ld) = (0.0f64, 0.0f64);
    let mut sparsity_ok = true;
    for trial in 0..30 {
        let k = rng.random_range(20..=100);
        let m = rng.random_range(1..=10);
        let pts = uniform_points(k, 2000 + trial, (0.0, 1.0), (0.0, 1.0));
        let cross = CrossCovariance::univariate(rng.random_range(0.2..3.0), random_kernel(&mut rng)).unwrap();
        let dag = dag_for(&pts, m, NeighborScheme::Nearest);
        let f = compute_factors(&dag, &cross, EXEC).unwrap();
        let prec = assemble_precision(&f, EXEC);
        // (I − B)′ F⁻¹ (I − B) from the factors
        let mut ib = DMatrix::<f64>::identity(k, k);
        let mut finv = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            for (l, &j) in dag.neighbors(i).iter().enumerate() {
                ib[(i, j)] -= f.node(i).b[(0, l)];
            }
            finv[(i, i)] = f.node(i).f_inv[(0, 0)];
        }
        let dense = ib.transpose() * finv * &ib;
        let got = prec.to_dense();
        worst_prec = worst_prec.max((&got - &dense).amax() / dense.amax().max(1.0));
        sparsity_ok &= prec.nnz_offdiag_blocks() <= k * m * (m + 1) / 2;
        let ld_dense = -2.0 * got.cholesky().unwrap().l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ld_mat = {
            let c = dense_nngp_covariance(&f);
            2.0 * c.cholesky().unwrap().l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
        };
        worst_ld = worst_ld.max((f.log_det() - ld_dense).abs()).max((f.log_det() - ld_mat).abs());
    }
    outcome(
        worst_prec < 1e-10 && worst_ld < 1e-8 && sparsity_ok,
        format!("max precision diff {worst_prec:.2e}, max log det diff {worst_ld:.2e}, sparsity bound held: {sparsity_ok}"),
    )
}

fn c3() -> Outcome {
    let mut rng = chain_rng(103, 0);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let k = rng.random_range(10..=60);
        let m = rng.random_range(1..=8);
        let pts = uniform_points(k, 3000 + trial, (0.0, 1.0), (0.0, 1.0));
        let cross = CrossCovariance::univariate(rng.random_range(0.2..3.0), random_kernel(&mut rng)).unwrap();
        let dag = dag_for(&pts, m, NeighborScheme::Nearest);
        let leaves: Vec<usize> = (0..k).filter(|&p| dag.reverse(p).is_empty()).collect();
        let pos = leaves[rng.random_range(0..leaves.len())];
        let w: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let f = compute_factors(&dag, &cross, EXEC).unwrap();
        let terms = log_density_terms(&f, &w, EXEC).unwrap();
        let full: f64 = terms.iter().sum();
        let reduced_dag = Arc::new(dag.without_leaf(pos).unwrap());
        let f2 = compute_factors(&reduced_dag, &cross, EXEC).unwrap();
        let mut w2 = w.clone();
        w2.remove(pos);
        let reduced = log_density(&f2, &w2, EXEC).unwrap();
        worst = worst.max((full - reduced - terms[pos]).abs());
    }
    outcome(worst < 1e-10, format!("max |change − node term| {worst:.2e} over 50 DAGs"))
}

fn config(alg: Algorithm, iterations: usize, burn_in: usize, chains: usize, seed: u64) -> SamplerConfig {
    SamplerConfig { algorithm: alg, iterations, burn_in, chains, seed, exec: EXEC, ..SamplerConfig::default() }
}

fn compare(a: &PosteriorSamples, b: &PosteriorSamples, names: &[&str]) -> (f64, String) {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for n in names {
        let (sa, sb) = (a.summary(n).unwrap(), b.summary(n).unwrap());
        let z = sa.z_distance(&sb);
        worst = worst.max(z);
        parts.push(format!("{n} {:.3}/{:.3} z={z:.2}", sa.median, sb.median));
    }
    (worst, parts.join(", "))
}

const SHARED: [&str; 5] = ["beta_0", "beta_1", "sigma2", "tau2", "phi"];

fn svi_problem(data: Dataset, m: usize, priors: PriorSpec) -> Problem {
    Problem::new(data, ModelSpec::default(), priors, &NngpConfig::with_m(m), EXEC).unwrap()
}

fn c4() -> Outcome {
    let sim = gen_dataset(&SimRecipe::unit_square(200, 4)).unwrap();
    let pr = svi_problem(sim.data, 10, PriorSpec::default());
    let nngp = run_chains(&pr, &SamplerConfig { store_w: false, ..config(Algorithm::Sequential, 8000, 2000, 3, 41) }).unwrap();
    let oracle = oracle_posterior(&pr, &SamplerConfig { store_w: false, ..config(Algorithm::Marginal, 5000, 1500, 3, 42) }).unwrap();
    let (worst, detail) = compare(&nngp, &oracle, &SHARED);
    outcome(worst < 3.0, format!("NNGP/oracle medians: {detail}"))
}

struct Replica {
    rmspe10: f64,
    rmspe25: Option<f64>,
    detail: String,
    pass5: bool,
}

fn replica_fit(train: &Dataset, test: &Dataset, m: usize, iterations: usize, burn_in: usize, chains: usize) -> nngp::metrics::HoldoutScores {
    let pr = svi_problem(train.clone(), m, PriorSpec::default());
    let cfg = SamplerConfig { thin: 2, ..config(Algorithm::Sequential, iterations, burn_in, chains, 50 + m as u64) };
    let s = run_chains(&pr, &cfg).unwrap();
    let req = PredictionRequest { seed: 7, exec: EXEC, ..PredictionRequest::new(test.locations.clone(), test.x.clone()) };
    let pred = predict(&pr, &s, &req).unwrap();
    let keyed: Vec<_> = pred.summaries.into_iter().enumerate().collect();
    let truth: Vec<_> = test.y.iter().copied().enumerate().collect();
    holdout_scores(&keyed, &truth).unwrap()
}

fn replica(with_m25: bool) -> Replica {
    let sim = gen_dataset(&SimRecipe::unit_square(2500, 5)).unwrap();
    let (tr, te) = split_indices(2500, 2000, 5).unwrap();
    let train = sim.data.subset(&tr).unwrap();
    let test = sim.data.subset(&te).unwrap();
    let h = replica_fit(&train, &test, 10, 5000, 2000, 3);
    let pass5 = (h.rmspe - 1.2).abs() <= 0.12
        && (93.0..=99.5).contains(&h.coverage)
        && (h.width - 2.12).abs() <= 0.15 * 2.12;
    let rmspe25 = with_m25.then(|| replica_fit(&train, &test, 25, 3000, 1200, 2).rmspe);
    Replica {
        rmspe10: h.rmspe,
        rmspe25,
        detail: format!("RMSPE {:.3} (target 1.2 ± 10%), coverage {:.1}% (93 to 99.5), width {:.3} (2.12 ± 15%)", h.rmspe, h.coverage, h.width),
        pass5,
    }
}

fn c5(r: &Replica) -> Outcome {
    outcome(r.pass5, r.detail.clone())
}

fn c6(r: &Replica) -> Outcome {
    let r25 = r.rmspe25.expect("m = 25 fit");
    let rel = (r.rmspe10 - r25).abs() / r25;
    outcome(rel <= 0.02, format!("RMSPE m=10 {:.4}, m=25 {:.4}, relative gap {:.2}%", r.rmspe10, r25, 100.0 * rel))
}

fn c7() -> Outcome {
    let recipe = SimRecipe {
        law: LocationLaw::Uniform { x: (0.0, 5.0), y: (0.0, 1.0) },
        cross: exp_cross(1.0, 6.0),
        ..SimRecipe::unit_square(2500, 7)
    };
    let sim = gen_dataset(&recipe).unwrap();
    let fits: Vec<(&str, PosteriorSamples)> = [("by_x", OrderStrategy::ByX), ("by_y", OrderStrategy::ByY), ("by_coord_sum", OrderStrategy::ByCoordSum)]
        .into_iter()
        .map(|(name, ord)| {
            let cfg = NngpConfig { ordering: ord, ..NngpConfig::with_m(10) };
            let pr = Problem::new(sim.data.clone(), ModelSpec::default(), PriorSpec::default(), &cfg, EXEC).unwrap();
            let s = run_chains(&pr, &SamplerConfig { store_w: false, ..config(Algorithm::Response, 4000, 1500, 2, 70) }).unwrap();
            (name, s)
        })
        .collect();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            let (w, _) = compare(&fits[i].1, &fits[j].1, &["sigma2", "tau2", "phi"]);
            worst = worst.max(w);
            parts.push(format!("{}~{} max z {w:.2}", fits[i].0, fits[j].0));
        }
    }
    let med: Vec<String> = fits
        .iter()
        .map(|(n, s)| {
            format!(
                "{n}: sigma2 {:.3} tau2 {:.3} phi {:.2}",
                s.summary("sigma2").unwrap().median,
                s.summary("tau2").unwrap().median,
                s.summary("phi").unwrap().median
            )
        })
        .collect();
    outcome(worst < 3.0, format!("{}; {}", parts.join(", "), med.join("; ")))
}

fn c8() -> Outcome {
    let pts = uniform_points(100, 8, (0.0, 1.0), (0.0, 1.0));
    let cross = CrossCovariance::univariate(1.0, Kernel::damped_cosine(10.0, 0.099).unwrap()).unwrap();
    let kl = |m: usize, scheme: NeighborScheme| {
        let dag = dag_for(&pts, m, scheme);
        kl_divergence(&compute_factors(&dag, &cross, EXEC).unwrap(), &cross).unwrap()
    };
    let ms: Vec<usize> = (1..=10).map(|i| 5 * i).collect();
    let near: Vec<f64> = ms.iter().map(|&m| kl(m, NeighborScheme::Nearest)).collect();
    let alt: Vec<f64> = ms.iter().map(|&m| kl(m, NeighborScheme::SteinAlt)).collect();
    let full = kl(99, NeighborScheme::Nearest);
    let dominated = near.iter().zip(&alt).all(|(a, b)| a <= b);
    let pass = near[9] < near[0] && dominated && full < 1e-8;
    outcome(
        pass,
        format!(
            "KL(5) {:.3e}, KL(50) {:.3e}, nearest <= alt at every m: {dominated}, KL(99) {full:.2e}",
            near[0], near[9]
        ),
    )
}

fn wave_priors() -> PriorSpec {
    PriorSpec {
        phi: vec![UniformPrior::new(0.5, 30.0)],
        range: UniformPrior::new(0.01, 0.5),
        ..PriorSpec::default()
    }
}

fn c9() -> Outcome {
    let mut recipe = SimRecipe {
        cross: CrossCovariance::univariate(1.0, Kernel::damped_cosine(10.0, 0.099).unwrap()).unwrap(),
        ..SimRecipe::unit_square(500, 9)
    };
    let sim = match gen_dataset(&recipe) {
        Ok(s) => s,
        Err(_) => {
            recipe.sampler = FieldSampler::Nngp { m: 60 };
            gen_dataset(&recipe).unwrap()
        }
    };
    let spec = ModelSpec::svi(KernelFamily::DampedCosine);
    let pr = Problem::new(sim.data, spec, wave_priors(), &NngpConfig::with_m(20), EXEC).unwrap();
    let s = run_chains(&pr, &SamplerConfig { store_w: false, ..config(Algorithm::Response, 8000, 3000, 3, 90) }).unwrap();
    let truth = [("sigma2", 1.0), ("phi", 10.0), ("a", 0.099), ("tau2", 0.1)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, v) in truth {
        let sm = s.summary(n).unwrap();
        let ok = sm.covers(v);
        pass &= ok;
        parts.push(format!("{n} {:.3} ({:.3}, {:.3}){}", sm.median, sm.q025, sm.q975, if ok { "" } else { " MISSES" }));
    }
    let a = s.summary("a").unwrap().median;
    pass &= (0.06..=0.15).contains(&a);
    outcome(pass, parts.join(", "))
}

fn lag_profile(f: &nngp::nngp::NngpFactors, from: Point, lags: &[f64]) -> Vec<f64> {
    lags.iter().map(|&h| nngp_cov(f, &from, &[from[0] + h, from[1]]).unwrap()[(0, 0)]).collect()
}

fn c10() -> Outcome {
    let cross = exp_cross(1.0, 2.0);
    let recipe = SimRecipe {
        n: 100,
        law: LocationLaw::TwoCluster,
        cross: cross.clone(),
        beta: vec![1.0],
        tau2: 0.01,
        ..SimRecipe::unit_square(100, 10)
    };
    let sim = gen_dataset(&recipe).unwrap();
    let t_dag = dag_for(sim.data.locations.coords(), 10, NeighborScheme::Nearest);
    let f_t = compute_factors(&t_dag, &cross, EXEC).unwrap();
    let mid = [1.5, 0.5];
    let gap_profile = lag_profile(&f_t, mid, &[0.05, 0.1, 0.25]);
    let gap_at = gap_profile[2];

    let grid = LocationSet::grid(14, 7, (0.0, 3.0), (0.0, 1.0)).unwrap();
    let g_dag = dag_for(grid.coords(), 10, NeighborScheme::Nearest);
    let f_g = compute_factors(&g_dag, &cross, EXEC).unwrap();
    let lags: Vec<f64> = (0..=15).map(|i| 0.1 * i as f64).collect();
    let deviation = |lags: &[f64]| {
        let mut worst = 0.0f64;
        for from in [[0.5, 0.5], mid] {
            for (h, v) in lags.iter().zip(lag_profile(&f_g, from, lags)) {
                worst = worst.max((v - (-2.0 * h).exp()).abs());
            }
        }
        worst
    };
    let grid_err = deviation(&lags);
    // below the grid spacing the off-grid conditional variance shows up
    let fine_err = deviation(&[0.01, 0.05]);

    let pr = Problem::new(sim.data.clone(), ModelSpec::default(), PriorSpec::default(), &NngpConfig::with_m(10), EXEC).unwrap();
    let theta = ThetaParams::new(cross.clone(), 0.01).unwrap();
    let beta = DVector::from_vec(vec![1.0]);
    let surface = LocationSet::grid(31, 11, (0.0, 3.0), (0.0, 1.0)).unwrap();
    let z = DMatrix::from_element(surface.len(), 1, 1.0);
    let o = oracle_krige(&pr, &beta, &theta, &surface, &z, KrigeMode::Independent).unwrap();
    let nn = krige_latent(&pr, &beta, &theta, &surface, &z, EXEC).unwrap();
    let rms = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    let rms_mean = rms(&o.mean, &nn.mean);
    let rms_var = rms(&o.var, &nn.var);
    outcome(
        gap_at < 0.1 && grid_err <= 0.1 && rms_mean <= 0.05 && rms_var <= 0.05,
        format!(
            "gap-midpoint covariance at lags 0.05, 0.1, 0.25: {:.3}, {:.3}, {gap_at:.3}; grid reference max deviation {grid_err:.3} over lags 0 to 1.5 step 0.1 ({fine_err:.3} at lags 0.01, 0.05); m = 10 kriging RMS mean {rms_mean:.4}, variance {rms_var:.4}",
            gap_profile[0], gap_profile[1]
        ),
    )
}

fn c11() -> Outcome {
    let sizes = [500usize, 1000, 2000, 4000, 8000];
    let m = 10;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ratios = Vec::new();
    for &n in &sizes {
        let recipe = SimRecipe { sampler: FieldSampler::Nngp { m: 15 }, ..SimRecipe::unit_square(n, 11) };
        let data = gen_dataset(&recipe).unwrap().data;
        let base = reset_peak();
        let pr = Problem::new(data, ModelSpec::default(), PriorSpec::default(), &NngpConfig::with_m(m), Execution::Sequential).unwrap();
        let cfg = SamplerConfig { store_w: false, ..config(Algorithm::Sequential, 40, 40, 1, 110) };
        let cfg = SamplerConfig { exec: Execution::Sequential, ..cfg };
        let chain = run_chain(&pr, &cfg, 0).unwrap();
        let peak = PEAK.load(AtomicOrdering::Relaxed) - base;
        drop(pr);
        let mut t = chain.iter_seconds[10..].to_vec();
        t.sort_by(f64::total_cmp);
        let med = t[t.len() / 2];
        xs.push((n as f64).ln());
        ys.push(med.ln());
        ratios.push(peak as f64 / (8.0 * (2 * n) as f64 * (m * m) as f64));
    }
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    let growth = ratios[ratios.len() - 1] / ratios[0];
    outcome(
        (slope - 1.0).abs() <= 0.15 && max_ratio <= 4.0 && growth <= 1.5,
        format!(
            "log-log slope {slope:.3}; peak memory / (8 (n+k) m^2 bytes) {} (growth x{growth:.2})",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c12() -> Outcome {
    let sim = gen_dataset(&SimRecipe::unit_square(200, 12)).unwrap();
    let pr = svi_problem(sim.data, 10, PriorSpec::default());
    let algs = [Algorithm::Sequential, Algorithm::Block, Algorithm::Response, Algorithm::Marginal];
    let fits: Vec<PosteriorSamples> = algs
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let cfg = SamplerConfig { store_w: a == Algorithm::Sequential || a == Algorithm::Marginal, thin: 2, ..config(a, 8000, 2000, 3, 120 + i as u64) };
            run_chains(&pr, &cfg).unwrap()
        })
        .collect();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for i in 0..4 {
        for j in i + 1..4 {
            let (w, _) = compare(&fits[i], &fits[j], &SHARED);
            worst = worst.max(w);
            parts.push(format!("{}~{} {w:.2}", algs[i].name(), algs[j].name()));
        }
    }
    // latent means: sequential vs composition draws of the marginal sampler
    let wz = w_mean_z(&fits[0], &fits[3]);
    let n_over = wz.iter().filter(|&&z| z >= 3.0).count();
    let max_wz = wz.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst < 3.0 && n_over == 0,
        format!(
            "max z over shared parameters: {}; w means: max z {max_wz:.2}, {n_over} of {} locations at z >= 3",
            parts.join(", "),
            wz.len()
        ),
    )
}

/// Per-location `|mean_a − mean_b| / √(se_a² + se_b²)` of stored `w`.
fn w_mean_z(a: &PosteriorSamples, b: &PosteriorSamples) -> Vec<f64> {
    let len = a.chains[0].w[0].len();
    (0..len)
        .map(|i| {
            let stats = |s: &PosteriorSamples| {
                let chains: Vec<Vec<f64>> = s.chains.iter().map(|c| c.w.iter().map(|w| w[i]).collect()).collect();
                let sm = ParamSummary::from_chains("w", &chains);
                let ess = ess_chains(&chains).max(1.0);
                (sm.mean, sm.sd * sm.sd / ess)
            };
            let (ma, va) = stats(a);
            let (mb, vb) = stats(b);
            (ma - mb).abs() / (va + vb).sqrt()
        })
        .collect()
}

fn c13() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let priors = PriorSpec {
        tau2: nngp::model::InverseGamma::new(2.0, 0.1),
        variance: VariancePrior::InverseGamma(nngp::model::InverseGamma::new(2.0, 0.1)),
        phi: vec![UniformPrior::new(3.0, 300.0)],
        ..PriorSpec::default()
    };
    let mut cell = 0u64;
    for sigma2 in [0.1, 0.5] {
        for range in [0.2, 0.5, 1.0] {
            cell += 1;
            let recipe = SimRecipe { cross: exp_cross(sigma2, 3.0 / range), ..SimRecipe::unit_square(500, 130 + cell) };
            let sim = gen_dataset(&recipe).unwrap();
            let pr = svi_problem(sim.data, 10, priors.clone());
            let nn = run_chains(&pr, &SamplerConfig { store_w: false, ..config(Algorithm::Sequential, 6000, 2000, 3, 131) }).unwrap();
            let or = oracle_posterior(&pr, &SamplerConfig { store_w: false, ..config(Algorithm::Marginal, 2500, 800, 2, 132) }).unwrap();
            let eff = |s: &PosteriorSamples| {
                let phi = s.layout.index_of("phi").unwrap();
                ParamSummary::from_chains("range", &s.derived(|r| 3.0 / r[phi]))
            };
            let (a, b) = (eff(&nn), eff(&or));
            let overlap = a.q025 <= b.q975 && b.q025 <= a.q975;
            pass &= overlap;
            parts.push(format!(
                "s2={sigma2} r={range}: NNGP ({:.2}, {:.2}) oracle ({:.2}, {:.2})",
                a.q025, a.q975, b.q025, b.q975
            ));
        }
    }
    outcome(pass, parts.join("; "))
}

fn c14() -> Outcome {
    let cross = CrossCovariance::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.8]),
        vec![Kernel::Exponential { phi: 6.0 }, Kernel::Exponential { phi: 4.0 }],
    )
    .unwrap();
    let recipe = SimRecipe { cross, mode: ModelMode::Svc, ..SimRecipe::unit_square(1000, 14) };
    let sim = gen_dataset(&recipe).unwrap();
    let fit = |spec: ModelSpec, seed: u64| {
        let q = spec.q(2);
        let pr = Problem::new(sim.data.clone(), spec, PriorSpec::for_q(q), &NngpConfig::with_m(10), EXEC).unwrap();
        let s = run_chains(&pr, &SamplerConfig { thin: 5, ..config(Algorithm::Sequential, 3000, 1000, 2, seed) }).unwrap();
        dic(&pr, &s, EXEC).unwrap().unwrap()
    };
    let svc = fit(ModelSpec::svc(KernelFamily::Exponential), 141);
    let svi = fit(ModelSpec::svi(KernelFamily::Exponential), 142);
    let flat = fit(ModelSpec::non_spatial(), 143);
    outcome(
        svc.dic < svi.dic && svi.dic < flat.dic,
        format!(
            "DIC svc {:.1} (pD {:.1}), svi {:.1} (pD {:.1}), non-spatial {:.1} (pD {:.1})",
            svc.dic, svc.p_d, svi.dic, svi.p_d, flat.dic, flat.p_d
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("NNGP_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let names = [
        "",
        "exactness at full conditioning",
        "sparse precision correctness",
        "marginalization of leaf nodes",
        "sampler vs dense oracle",
        "unit-square replica holdout scores",
        "RMSPE plateau in m",
        "ordering robustness",
        "KL curves for a wave kernel",
        "wave-kernel recovery",
        "gap behavior",
        "linear scaling and memory",
        "cross-algorithm agreement",
        "slow-decay sweep",
        "SVC model ordering",
    ];
    let mut failures = 0;
    let mut replica_cache: Option<Replica> = None;
    for i in 1..=14 {
        if !want(i) {
            continue;
        }
        let start = Instant::now();
        let o = match i {
            1 => c1(),
            2 => c2(),
            3 => c3(),
            4 => c4(),
            5 | 6 => {
                if replica_cache.is_none() {
                    replica_cache = Some(replica(want(6)));
                }
                let r = replica_cache.as_ref().unwrap();
                if i == 5 {
                    c5(r)
                } else {
                    c6(r)
                }
            }
            7 => c7(),
            8 => c8(),
            9 => c9(),
            10 => c10(),
            11 => c11(),
            12 => c12(),
            13 => c13(),
            _ => c14(),
        };
        if !o.pass {
            failures += 1;
        }
        println!(
            "{} criterion {i:>2} ({}): {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            names[i],
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failures} failing");
    if failures > 0 && std::env::var("NNGP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
