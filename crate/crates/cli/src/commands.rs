use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::bail;
use log::info;

use nngp::cov::CrossCovariance;
use nngp::geo::{build_neighbor_dag, order_locations, LocationSet, NeighborScheme, OrderStrategy};
use nngp::mcmc::{run_chain, run_chains, Algorithm, NngpConfig, PosteriorSamples, Problem, ReferenceSet, SamplerConfig};
use nngp::metrics::{dic, gpd_for, holdout_scores, FitReport};
use nngp::model::{ModelSpec, ParamLayout};
use nngp::nngp::{compute_factors, kl_divergence};
use nngp::predict::{predict, PredictionRequest};
use nngp::simulate::{gen_dataset, sample_locations, split_indices, FieldSampler, LocationLaw, SimRecipe};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{self, Table};

/// Writes `data.csv` (and `holdout.csv`) plus the generating truth.
pub fn simulate(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let recipe = cfg.sim_recipe()?;
    let sim = gen_dataset(&recipe)?;
    let dir = cfg.run_dir("simulate")?;
    let n = sim.data.n();
    let p = sim.data.p();
    let q = sim.z.ncols();
    let full = Table {
        ids: (0..n as i64).collect(),
        coords: sim.data.locations.coords().to_vec(),
        covariates: (1..p).map(|j| format!("x{j}")).collect(),
        x: (0..n).map(|i| (1..p).map(|j| sim.data.x[(i, j)]).collect()).collect(),
        y: Some(sim.data.y.clone()),
    };
    let pick = |idx: &[usize]| Table {
        ids: idx.iter().map(|&i| full.ids[i]).collect(),
        coords: idx.iter().map(|&i| full.coords[i]).collect(),
        covariates: full.covariates.clone(),
        x: idx.iter().map(|&i| full.x[i].clone()).collect(),
        y: full.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect()),
    };
    let holdout = cfg.simulate.holdout;
    if holdout > 0 {
        let (train, test) = split_indices(n, n - holdout, recipe.seed)?;
        io::write_table(&dir.join("data.csv"), &pick(&train))?;
        io::write_table(&dir.join("holdout.csv"), &pick(&test))?;
    } else {
        io::write_table(&dir.join("data.csv"), &full)?;
    }

    let signal = sim.signal();
    let mut w = io::create(&dir.join("truth.csv"))?;
    let mut head = vec!["id".to_string(), "signal".into()];
    head.extend((0..q).map(|b| format!("w_{b}")));
    writeln!(w, "{}", head.join(","))?;
    for i in 0..n {
        write!(w, "{i},{}", signal[i])?;
        for b in 0..q {
            write!(w, ",{}", sim.w[i * q + b])?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    let mut w = io::create(&dir.join("truth_params.csv"))?;
    writeln!(w, "name,value")?;
    for (j, b) in recipe.beta.iter().enumerate() {
        writeln!(w, "beta_{j},{b}")?;
    }
    writeln!(w, "tau2,{}", recipe.tau2)?;
    if q > 0 {
        let k = recipe.cross.marginal();
        for a in 0..q {
            for b in 0..=a {
                writeln!(w, "K_{a}{b},{}", k[(a, b)])?;
            }
        }
        for (b, kern) in recipe.cross.kernels().iter().enumerate() {
            writeln!(w, "phi_{b},{}", kern.phi())?;
        }
    }
    w.flush()?;
    info!("simulated {n} locations into {}", dir.display());
    Ok(dir)
}

fn reference(cfg: &RunConfig, t: &Table) -> anyhow::Result<ReferenceSet> {
    match cfg.nngp.reference.as_str() {
        "observed" => Ok(ReferenceSet::Observed),
        "grid" => {
            let [nx, ny] = cfg
                .nngp
                .grid
                .ok_or_else(|| CliError::validation("reference = \"grid\" needs grid = [nx, ny]"))?;
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for c in &t.coords {
                for d in 0..2 {
                    lo[d] = lo[d].min(c[d]);
                    hi[d] = hi[d].max(c[d]);
                }
            }
            Ok(ReferenceSet::Locations(LocationSet::grid(nx, ny, (lo[0], hi[0]), (lo[1], hi[1]))?))
        }
        "file" => {
            let p = cfg.require(&cfg.nngp.reference_path, "reference_path")?;
            let r = io::read_table(&p, false)?;
            Ok(ReferenceSet::Locations(LocationSet::new(r.coords)?))
        }
        other => bail!(CliError::validation(format!("unknown reference policy '{other}'"))),
    }
}

fn build_problem(cfg: &RunConfig) -> anyhow::Result<Problem> {
    let path = cfg.require(&cfg.data.path, "path")?;
    let table = io::read_table(&path, true)?;
    let data = table.dataset(cfg.model.intercept)?;
    let spec = cfg.model_spec()?;
    let p = data.p();
    let q = spec.q(p);
    let priors = cfg.priors(p, q)?;
    let nngp = cfg.nngp_config(reference(cfg, &table)?)?;
    Ok(Problem::new(data, spec, priors, &nngp, cfg.exec())?)
}

fn layout(problem: &Problem) -> ParamLayout {
    ParamLayout::new(problem.p(), problem.q(), problem.spec.kernel)
}

fn load_samples(cfg: &RunConfig, problem: &Problem) -> anyhow::Result<PosteriorSamples> {
    let path = cfg.require(&cfg.data.samples, "samples")?;
    let sampler = cfg.sampler()?;
    io::read_samples(&path, sampler.algorithm, layout(problem), sampler.burn_in)
}

fn write_report(dir: &Path, run_id: &str, report: &FitReport) -> anyhow::Result<()> {
    let mut w = io::create(&dir.join("report.csv"))?;
    writeln!(w, "{}", FitReport::CSV_HEADER)?;
    writeln!(w, "{}", report.csv_row(run_id))?;
    w.flush()?;
    std::fs::write(dir.join("report.txt"), report.to_string())
        .map_err(|e| CliError::io(format!("cannot write report: {e}")))?;
    Ok(())
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Runs the sampler and writes samples, summaries, timings and a report.
pub fn fit(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let sampler = cfg.sampler()?;
    let problem = build_problem(cfg)?;
    let dir = cfg.run_dir("fit")?;
    info!(
        "fitting n = {}, k = {}, q = {} with the {} algorithm",
        problem.n(),
        problem.k(),
        problem.q(),
        sampler.algorithm.name()
    );
    let samples = run_chains(&problem, &sampler)?;
    io::write_samples(&dir.join("samples.csv"), &samples)?;

    let mut w = io::create(&dir.join("summary.csv"))?;
    writeln!(w, "name,mean,sd,median,q025,q975,ess,mcse_median")?;
    if samples.num_draws() > 0 {
        for s in samples.summaries() {
            writeln!(w, "{},{},{},{},{},{},{},{}", s.name, s.mean, s.sd, s.median, s.q025, s.q975, s.ess, s.mcse_median)?;
        }
    }
    w.flush()?;

    let mut w = io::create(&dir.join("timing.csv"))?;
    writeln!(w, "chain,iteration,seconds,acceptance")?;
    for (c, chain) in samples.chains.iter().enumerate() {
        for (i, (t, a)) in chain.iter_seconds.iter().zip(&chain.acceptance).enumerate() {
            writeln!(w, "{c},{i},{t},{a}")?;
        }
    }
    w.flush()?;

    let d = if samples.num_draws() > 0 { dic(&problem, &samples, cfg.exec())? } else { None };
    let report = FitReport::default().with_dic(d).with_timing(&samples);
    write_report(&dir, &run_name(&dir), &report)?;
    info!("wrote {} draws to {}", samples.num_draws(), dir.display());
    Ok(dir)
}

fn request(cfg: &RunConfig, t: &Table, p: usize, seed: u64) -> anyhow::Result<PredictionRequest> {
    let x = t.design(cfg.model.intercept);
    if x.ncols() != p {
        bail!(CliError::validation(format!(
            "prediction locations carry {} covariate columns, the fitted design has {}",
            x.ncols(),
            p
        )));
    }
    Ok(PredictionRequest {
        seed,
        exec: cfg.exec(),
        keep_draws: cfg.predict.keep_draws,
        ..PredictionRequest::new(t.locations()?, x)
    })
}

/// Posterior predictive summaries at `new_locations`.
pub fn predict_cmd(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let problem = build_problem(cfg)?;
    let samples = load_samples(cfg, &problem)?;
    let new_path = cfg.require(&cfg.data.new_locations, "new_locations")?;
    let new = io::read_table(&new_path, false)?;
    let dir = cfg.run_dir("predict")?;
    let req = request(cfg, &new, problem.p(), cfg.seed())?;
    let pred = predict(&problem, &samples, &req)?;
    io::write_predictions(&dir.join("predictions.csv"), &new.ids, &pred.summaries)?;
    if let Some(d) = &pred.draws {
        let head = std::iter::once("id".to_string()).chain((0..d.ncols()).map(|j| format!("draw_{j}"))).collect::<Vec<_>>();
        io::write_matrix_rows(&dir.join("predictive_draws.csv"), &head.join(","), &new.ids, d)?;
    }
    info!("predicted {} locations into {}", new.len(), dir.display());
    Ok(dir)
}

/// DIC, GPD and, with a holdout file, predictive scores.
pub fn metrics(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let problem = build_problem(cfg)?;
    let samples = load_samples(cfg, &problem)?;
    let dir = cfg.run_dir("metrics")?;
    let mut report = FitReport::default();
    if samples.num_draws() > 0 {
        report = report
            .with_dic(dic(&problem, &samples, cfg.exec())?)
            .with_gpd(gpd_for(&problem, &samples, cfg.seed(), cfg.exec())?);
        if let Some(h) = &cfg.data.holdout {
            let test = io::read_table(&cfg.resolve(h), true)?;
            let req = request(cfg, &test, problem.p(), cfg.seed())?;
            let pred = predict(&problem, &samples, &req)?;
            io::write_predictions(&dir.join("holdout_predictions.csv"), &test.ids, &pred.summaries)?;
            let keyed: Vec<_> = pred.summaries.into_iter().enumerate().collect();
            let truth: Vec<_> = test.y.as_deref().unwrap_or_default().iter().copied().enumerate().collect();
            report = report.with_holdout(holdout_scores(&keyed, &truth)?);
        }
    }
    write_report(&dir, &run_name(&dir), &report)?;
    info!("metrics written to {}", dir.display());
    Ok(dir)
}

/// KL divergence of the NNGP from its parent over a sweep of `m`.
pub fn kl(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let k = &cfg.kl;
    if k.m.is_empty() || k.m.contains(&0) {
        bail!(CliError::validation("kl.m must be a non-empty list of positive sizes"));
    }
    let kern = k.kernel.parse::<nngp::model::KernelFamily>()?.build(k.phi, k.nu, k.range)?;
    let cross = CrossCovariance::univariate(k.sigma2, kern)?;
    let locs = sample_locations(&LocationLaw::Uniform { x: (0.0, 1.0), y: (0.0, 1.0) }, k.n, cfg.seed())?;
    let order = order_locations(&locs, k.ordering.parse::<OrderStrategy>()?);
    let dir = cfg.run_dir("kl")?;
    let mut w = io::create(&dir.join("kl.csv"))?;
    writeln!(w, "m,scheme,kl")?;
    for scheme in &k.schemes {
        let s: NeighborScheme = scheme.parse()?;
        for &m in &k.m {
            let dag = Arc::new(build_neighbor_dag(&locs, &order, m, s, cfg.exec())?);
            let f = compute_factors(&dag, &cross, cfg.exec())?;
            writeln!(w, "{m},{scheme},{}", kl_divergence(&f, &cross)?)?;
        }
    }
    w.flush()?;
    Ok(dir)
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Per-iteration wall time over a sweep of `n`.
pub fn bench(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let b = &cfg.bench;
    if b.n.len() < 2 || b.iterations <= b.warmup {
        bail!(CliError::validation("bench needs at least two sizes and iterations > warmup"));
    }
    let algorithms = b.algorithms.iter().map(|a| a.parse::<Algorithm>()).collect::<Result<Vec<_>, _>>()?;
    let dir = cfg.run_dir("bench")?;
    let mut out = io::create(&dir.join("bench.csv"))?;
    writeln!(out, "n,m,algorithm,sec_per_iter")?;
    let mut slopes = Vec::new();
    for alg in algorithms {
        let mut times = Vec::new();
        for &n in &b.n {
            let recipe = SimRecipe {
                sampler: FieldSampler::Nngp { m: 15 },
                ..SimRecipe::unit_square(n, cfg.seed())
            };
            let data = gen_dataset(&recipe)?.data;
            let problem = Problem::new(
                data,
                ModelSpec::default(),
                cfg.priors(2, 1)?,
                &NngpConfig { m: b.m, ..cfg.nngp_config(ReferenceSet::Observed)? },
                cfg.exec(),
            )?;
            let sc = SamplerConfig {
                algorithm: alg,
                iterations: b.iterations,
                burn_in: b.iterations,
                chains: 1,
                store_w: false,
                seed: cfg.seed(),
                exec: cfg.exec(),
                ..SamplerConfig::default()
            };
            let start = Instant::now();
            let chain = run_chain(&problem, &sc, 0)?;
            let mut t = chain.iter_seconds[b.warmup..].to_vec();
            t.sort_by(f64::total_cmp);
            let med = t[t.len() / 2];
            info!("{} n = {n}: {med:.3e} s/iter ({:.1} s total)", alg.name(), start.elapsed().as_secs_f64());
            writeln!(out, "{n},{},{},{med}", b.m, alg.name())?;
            times.push(med);
        }
        let ns: Vec<f64> = b.n.iter().map(|&n| n as f64).collect();
        slopes.push((alg, log_log_slope(&ns, &times)));
    }
    out.flush()?;
    let mut w = io::create(&dir.join("slope.csv"))?;
    writeln!(w, "algorithm,slope")?;
    for (alg, s) in &slopes {
        writeln!(w, "{},{s}", alg.name())?;
        println!("{}: log-log slope {s:.3}", alg.name());
    }
    w.flush()?;
    Ok(dir)
}
