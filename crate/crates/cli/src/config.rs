//! Run configuration: a TOML file with one section per concern.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use nngp::cov::{CrossCovariance, Kernel};
use nngp::mcmc::{Algorithm, Blocking, MetropolisConfig, NngpConfig, ReferenceSet, SamplerConfig};
use nngp::model::{
    BetaPrior, InverseGamma, KernelFamily, ModelMode, ModelSpec, PriorSpec, SmoothnessPrior, UniformPrior,
    VariancePrior,
};
use nngp::par::Execution;
use nngp::simulate::{FieldSampler, LocationLaw, SimRecipe};

use crate::error::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    /// Name of the subdirectory under `output_dir`; defaults to `<command>-<seed>`.
    pub run_id: Option<String>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub priors: PriorSection,
    #[serde(default)]
    pub nngp: NngpSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub kl: KlSection,
    #[serde(default)]
    pub bench: BenchSection,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training data CSV.
    pub path: Option<PathBuf>,
    /// Held-out CSV scored by `metrics`.
    pub holdout: Option<PathBuf>,
    /// Samples CSV written by `fit`.
    pub samples: Option<PathBuf>,
    /// Locations to predict at, same layout as the data CSV (`y_obs` optional).
    pub new_locations: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n: usize,
    /// `uniform`, `two_cluster` or `grid`.
    pub law: String,
    pub domain_x: [f64; 2],
    pub domain_y: [f64; 2],
    pub grid: Option<[usize; 2]>,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub tau2: f64,
    pub kernel: String,
    pub phi: f64,
    pub nu: f64,
    pub range: f64,
    pub mode: String,
    /// Lower-triangular `A` (rows) for multivariate latent fields.
    pub a: Option<Vec<Vec<f64>>>,
    /// Per-component decays for multivariate latent fields.
    pub phis: Option<Vec<f64>>,
    /// `dense` or `nngp`.
    pub field: String,
    pub field_m: usize,
    /// Rows moved to `holdout.csv`.
    pub holdout: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n: 500,
            law: "uniform".into(),
            domain_x: [0.0, 1.0],
            domain_y: [0.0, 1.0],
            grid: None,
            beta: vec![1.0, 5.0],
            sigma2: 1.0,
            tau2: 0.1,
            kernel: "exponential".into(),
            phi: 12.0,
            nu: 0.5,
            range: 0.1,
            mode: "svi".into(),
            a: None,
            phis: None,
            field: "dense".into(),
            field_m: 15,
            holdout: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `svi`, `svc` or `non_spatial`.
    pub mode: String,
    pub kernel: String,
    /// Prepend a column of ones to the covariates.
    pub intercept: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            mode: "svi".into(),
            kernel: "exponential".into(),
            intercept: true,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub beta_mean: Option<Vec<f64>>,
    pub beta_var: Option<f64>,
    /// `[shape, scale]`
    pub tau2: Option<[f64; 2]>,
    /// `[shape, scale]`, univariate latent fields.
    pub sigma2: Option<[f64; 2]>,
    /// Inverse-Wishart degrees of freedom and scale multiple of I.
    pub iw_df: Option<f64>,
    pub iw_scale: Option<f64>,
    /// Uniform bounds on every φ.
    pub phi: Option<[f64; 2]>,
    /// Fixed Matérn smoothness.
    pub nu: Option<f64>,
    /// Uniform bounds on the Matérn smoothness; overrides `nu`.
    pub nu_bounds: Option<[f64; 2]>,
    /// Uniform bounds on the damped-cosine range.
    pub range: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NngpSection {
    pub m: usize,
    pub scheme: String,
    pub ordering: String,
    /// `observed`, `grid` or `file`.
    pub reference: String,
    pub grid: Option<[usize; 2]>,
    pub reference_path: Option<PathBuf>,
}

impl Default for NngpSection {
    fn default() -> Self {
        Self {
            m: 10,
            scheme: "nearest".into(),
            ordering: "by_coord_sum".into(),
            reference: "observed".into(),
            grid: None,
            reference_path: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub algorithm: String,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub store_w: bool,
    pub step: f64,
    pub blocking: String,
    pub target: [f64; 2],
    pub adapt_interval: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let m = MetropolisConfig::default();
        Self {
            algorithm: "sequential".into(),
            iterations: 2000,
            burn_in: 1000,
            thin: 1,
            chains: 3,
            store_w: true,
            step: m.initial_step,
            blocking: "joint".into(),
            target: [m.target_low, m.target_high],
            adapt_interval: m.adapt_interval,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Also write every predictive draw.
    pub keep_draws: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlSection {
    pub n: usize,
    pub sigma2: f64,
    pub kernel: String,
    pub phi: f64,
    pub nu: f64,
    pub range: f64,
    pub m: Vec<usize>,
    pub schemes: Vec<String>,
    pub ordering: String,
}

impl Default for KlSection {
    fn default() -> Self {
        Self {
            n: 100,
            sigma2: 1.0,
            kernel: "damped_cosine".into(),
            phi: 10.0,
            nu: 0.5,
            range: 0.099,
            m: (1..=10).map(|i| 5 * i).collect(),
            schemes: vec!["nearest".into(), "stein_alt".into()],
            ordering: "by_coord_sum".into(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub n: Vec<usize>,
    pub m: usize,
    pub algorithms: Vec<String>,
    pub iterations: usize,
    /// Leading iterations left out of the timing.
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            n: vec![500, 1000, 2000, 4000],
            m: 10,
            algorithms: vec!["sequential".into()],
            iterations: 30,
            warmup: 5,
        }
    }
}

fn family(name: &str) -> anyhow::Result<KernelFamily> {
    Ok(name.parse::<KernelFamily>()?)
}

fn kernel(family_name: &str, phi: f64, nu: f64, range: f64) -> anyhow::Result<Kernel> {
    Ok(family(family_name)?.build(phi, nu, range)?)
}

fn bounds(name: &str, b: [f64; 2]) -> anyhow::Result<UniformPrior> {
    if !(b[0] > 0.0 && b[0] < b[1] && b[1].is_finite()) {
        bail!(CliError::validation(format!("{name} bounds must satisfy 0 < lo < hi, got {b:?}")));
    }
    Ok(UniformPrior::new(b[0], b[1]))
}

fn inverse_gamma(name: &str, v: [f64; 2]) -> anyhow::Result<InverseGamma> {
    if !(v[0] > 0.0 && v[1] > 0.0) {
        bail!(CliError::validation(format!("{name} shape and scale must be positive, got {v:?}")));
    }
    Ok(InverseGamma::new(v[0], v[1]))
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Applies `NNGP_OUTPUT_DIR` and `NNGP_THREADS`.
    pub fn apply_env(&mut self) -> anyhow::Result<()> {
        if let Ok(dir) = std::env::var("NNGP_OUTPUT_DIR") {
            self.output_dir = Some(PathBuf::from(dir));
        }
        if let Ok(t) = std::env::var("NNGP_THREADS") {
            let n = t
                .parse()
                .map_err(|_| CliError::validation(format!("NNGP_THREADS must be a positive integer, got '{t}'")))?;
            self.threads = Some(n);
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn require(&self, p: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
        match p {
            Some(p) => Ok(self.resolve(p)),
            None => bail!(CliError::validation(format!("config is missing [data] {what}"))),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    pub fn exec(&self) -> Execution {
        if self.threads == Some(1) {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    pub fn run_dir(&self, command: &str) -> anyhow::Result<PathBuf> {
        let root = self.output_dir.clone().unwrap_or_else(|| PathBuf::from("nngp-output"));
        let root = self.resolve(&root);
        let id = self.run_id.clone().unwrap_or_else(|| format!("{command}-{}", self.seed()));
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            bail!(CliError::validation(format!("run_id '{id}' is not a plain directory name")));
        }
        let dir = root.join(id);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn model_spec(&self) -> anyhow::Result<ModelSpec> {
        let mode: ModelMode = self.model.mode.parse()?;
        let fam = family(&self.model.kernel)?;
        Ok(match mode {
            ModelMode::Svi => ModelSpec::svi(fam),
            ModelMode::Svc => ModelSpec::svc(fam),
            ModelMode::NonSpatial => ModelSpec::non_spatial(),
            ModelMode::Custom => {
                bail!(CliError::validation("model mode 'custom' is not available from the command line"))
            }
        })
    }

    pub fn priors(&self, p: usize, q: usize) -> anyhow::Result<PriorSpec> {
        let s = &self.priors;
        let mut pr = PriorSpec::for_q(q);
        match (&s.beta_mean, s.beta_var) {
            (None, None) => {}
            (mean, Some(var)) => {
                if !(var > 0.0) {
                    bail!(CliError::validation("beta_var must be positive"));
                }
                let mean = mean.clone().unwrap_or_else(|| vec![0.0; p]);
                if mean.len() != p {
                    bail!(CliError::validation(format!("beta_mean has {} entries, the design has {p}", mean.len())));
                }
                pr.beta = BetaPrior::Normal {
                    mean: DVector::from_vec(mean),
                    cov: DMatrix::identity(p, p) * var,
                };
            }
            (Some(_), None) => bail!(CliError::validation("beta_mean needs beta_var")),
        }
        if let Some(v) = s.tau2 {
            pr.tau2 = inverse_gamma("tau2", v)?;
        }
        if q == 1 {
            if let Some(v) = s.sigma2 {
                pr.variance = VariancePrior::InverseGamma(inverse_gamma("sigma2", v)?);
            }
        } else if q > 1 {
            let df = s.iw_df.unwrap_or(q as f64 + 1.0);
            let scale = s.iw_scale.unwrap_or(1.0);
            if !(df > q as f64 - 1.0 && scale > 0.0) {
                bail!(CliError::validation(format!("inverse-Wishart needs df > {} and a positive scale", q - 1)));
            }
            pr.variance = VariancePrior::InverseWishart {
                df,
                scale: DMatrix::identity(q, q) * scale,
            };
        }
        if let Some(b) = s.phi {
            pr.phi = vec![bounds("phi", b)?];
        }
        if let Some(b) = s.nu_bounds {
            pr.nu = SmoothnessPrior::Uniform(bounds("nu", b)?);
        } else if let Some(nu) = s.nu {
            if !(nu > 0.0) {
                bail!(CliError::validation("nu must be positive"));
            }
            pr.nu = SmoothnessPrior::Fixed(nu);
        }
        if let Some(b) = s.range {
            pr.range = bounds("range", b)?;
        }
        Ok(pr)
    }

    pub fn nngp_config(&self, reference: ReferenceSet) -> anyhow::Result<NngpConfig> {
        Ok(NngpConfig {
            m: self.nngp.m,
            scheme: self.nngp.scheme.parse()?,
            ordering: self.nngp.ordering.parse()?,
            reference,
        })
    }

    pub fn sampler(&self) -> anyhow::Result<SamplerConfig> {
        let s = &self.sampler;
        let algorithm: Algorithm = s.algorithm.parse()?;
        let blocking: Blocking = s.blocking.parse()?;
        if s.chains == 0 || s.thin == 0 {
            bail!(CliError::validation("chains and thin must be at least 1"));
        }
        if s.burn_in > s.iterations {
            bail!(CliError::validation(format!(
                "burn_in ({}) exceeds iterations ({})",
                s.burn_in, s.iterations
            )));
        }
        if !(s.step > 0.0 && 0.0 < s.target[0] && s.target[0] < s.target[1] && s.target[1] < 1.0) {
            bail!(CliError::validation("step must be positive and target a sub-interval of (0, 1)"));
        }
        Ok(SamplerConfig {
            algorithm,
            iterations: s.iterations,
            burn_in: s.burn_in,
            thin: s.thin,
            chains: s.chains,
            seed: self.seed(),
            metropolis: MetropolisConfig {
                initial_step: s.step,
                target_low: s.target[0],
                target_high: s.target[1],
                blocking,
                adapt_interval: s.adapt_interval.max(1),
                ..MetropolisConfig::default()
            },
            store_w: s.store_w && algorithm.has_latent(),
            exec: self.exec(),
            ..SamplerConfig::default()
        })
    }

    pub fn sim_recipe(&self) -> anyhow::Result<SimRecipe> {
        let s = &self.simulate;
        let (dx, dy) = ((s.domain_x[0], s.domain_x[1]), (s.domain_y[0], s.domain_y[1]));
        let law = match s.law.as_str() {
            "uniform" => LocationLaw::Uniform { x: dx, y: dy },
            "two_cluster" => LocationLaw::TwoCluster,
            "grid" => {
                let [nx, ny] = s.grid.context("law = \"grid\" needs grid = [nx, ny]").map_err(|e| CliError::validation(e.to_string()))?;
                LocationLaw::Grid { nx, ny, x: dx, y: dy }
            }
            other => bail!(CliError::validation(format!("unknown location law '{other}'"))),
        };
        let mode: ModelMode = s.mode.parse()?;
        let q = match mode {
            ModelMode::Svi => 1,
            ModelMode::Svc => s.beta.len(),
            ModelMode::NonSpatial => 0,
            ModelMode::Custom => bail!(CliError::validation("cannot simulate custom-mode data")),
        };
        let cross = if q <= 1 {
            CrossCovariance::univariate(s.sigma2, kernel(&s.kernel, s.phi, s.nu, s.range)?)?
        } else {
            let a = match &s.a {
                Some(rows) => {
                    if rows.len() != q || rows.iter().any(|r| r.len() != q) {
                        bail!(CliError::validation(format!("simulate.a must be {q} x {q}")));
                    }
                    DMatrix::from_fn(q, q, |i, j| rows[i][j])
                }
                None => DMatrix::identity(q, q) * s.sigma2.sqrt(),
            };
            let phis = s.phis.clone().unwrap_or_else(|| vec![s.phi; q]);
            if phis.len() != q {
                bail!(CliError::validation(format!("simulate.phis needs {q} entries")));
            }
            let kernels = phis.iter().map(|&p| kernel(&s.kernel, p, s.nu, s.range)).collect::<anyhow::Result<_>>()?;
            CrossCovariance::new(a, kernels)?
        };
        let sampler = match s.field.as_str() {
            "dense" => FieldSampler::Dense,
            "nngp" => FieldSampler::Nngp { m: s.field_m },
            other => bail!(CliError::validation(format!("unknown field sampler '{other}'"))),
        };
        if s.holdout >= s.n {
            bail!(CliError::validation("simulate.holdout must leave at least one training row"));
        }
        Ok(SimRecipe {
            n: s.n,
            law,
            cross,
            beta: s.beta.clone(),
            tau2: s.tau2,
            mode,
            sampler,
            seed: self.seed(),
        })
    }
}
