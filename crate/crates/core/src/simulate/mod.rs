//! Synthetic data and the dense full-GP oracle.

mod oracle;

pub use oracle::{dense_log_density, oracle_krige, oracle_posterior, DenseOracle, KrigeMode, ORACLE_CAP};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::cov::{CrossCovariance, Kernel};
use crate::error::{Error, Result};
use crate::geo::{build_neighbor_dag, order_locations, LocationSet, NeighborScheme, OrderStrategy, Point};
use crate::mcmc::rng::{chain_rng, normal, splitmix};
use crate::model::{Dataset, ModelMode};
use crate::nngp::compute_factors;
use crate::par::Execution;

/// How locations are scattered.
#[derive(Clone, Debug, PartialEq)]
pub enum LocationLaw {
    Uniform { x: (f64, f64), y: (f64, f64) },
    /// Half in `[0,1]×[0,1]`, half in `[2,3]×[0,1]`.
    TwoCluster,
    /// Regular `nx × ny` grid; `n` must equal `nx·ny`.
    Grid { nx: usize, ny: usize, x: (f64, f64), y: (f64, f64) },
}

/// How the latent field is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldSampler {
    /// Exact draw through a dense Cholesky factor.
    Dense,
    /// Sequential draw from an NNGP with `m` neighbors; for sizes where a
    /// dense factor is out of reach.
    Nngp { m: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimRecipe {
    pub n: usize,
    pub law: LocationLaw,
    pub cross: CrossCovariance,
    /// Intercept first; the remaining covariates are iid `N(0, 1)`.
    pub beta: Vec<f64>,
    /// Noise variance; zero gives noiseless data.
    pub tau2: f64,
    /// `Svi` (`Z = 1`), `Svc` (`Z = X`) or `NonSpatial` (`Z` empty).
    pub mode: ModelMode,
    pub sampler: FieldSampler,
    pub seed: u64,
}

impl SimRecipe {
    /// Unit square, `β = (1, 5)`, `σ² = 1`, `τ² = 0.1`, exponential `φ = 12`.
    pub fn unit_square(n: usize, seed: u64) -> Self {
        Self {
            n,
            law: LocationLaw::Uniform { x: (0.0, 1.0), y: (0.0, 1.0) },
            cross: CrossCovariance::univariate(1.0, Kernel::Exponential { phi: 12.0 }).expect("valid kernel"),
            beta: vec![1.0, 5.0],
            tau2: 0.1,
            mode: ModelMode::Svi,
            sampler: FieldSampler::Dense,
            seed,
        }
    }

    fn q(&self) -> usize {
        match self.mode {
            ModelMode::Svi => 1,
            ModelMode::Svc => self.beta.len(),
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::EmptyLocations);
        }
        if self.beta.is_empty() {
            return Err(Error::Validation("beta needs at least an intercept".into()));
        }
        if !(self.tau2 >= 0.0) || !self.tau2.is_finite() {
            return Err(Error::Validation(format!("tau^2 must be non-negative, got {}", self.tau2)));
        }
        if self.mode == ModelMode::Custom {
            return Err(Error::Validation("simulation supports svi, svc and non-spatial modes".into()));
        }
        let q = self.q();
        if q > 0 && self.cross.q() != q {
            return Err(Error::DimensionMismatch {
                context: "simulation cross-covariance dimension",
                expected: q,
                got: self.cross.q(),
            });
        }
        self.cross.validate()
    }
}

/// A simulated dataset with its generating latent field.
#[derive(Clone, Debug, PartialEq)]
pub struct SimData {
    pub data: Dataset,
    /// `n × q`
    pub z: DMatrix<f64>,
    /// Location-major latent draw (`q` values per location).
    pub w: Vec<f64>,
}

impl SimData {
    /// `z(s)′w(s)` at each location.
    pub fn signal(&self) -> Vec<f64> {
        let q = self.z.ncols();
        (0..self.data.n())
            .map(|i| (0..q).map(|a| self.z[(i, a)] * self.w[i * q + a]).sum())
            .collect()
    }
}

pub fn sample_locations(law: &LocationLaw, n: usize, seed: u64) -> Result<LocationSet> {
    let mut rng = chain_rng(seed, 0);
    let pts: Vec<Point> = match law {
        LocationLaw::Uniform { x, y } => (0..n)
            .map(|_| [rng.random_range(x.0..x.1), rng.random_range(y.0..y.1)])
            .collect(),
        LocationLaw::TwoCluster => (0..n)
            .map(|i| {
                let dx = if i < n / 2 { 0.0 } else { 2.0 };
                [dx + rng.random::<f64>(), rng.random::<f64>()]
            })
            .collect(),
        LocationLaw::Grid { nx, ny, x, y } => {
            if nx * ny != n {
                return Err(Error::DimensionMismatch { context: "grid size", expected: n, got: nx * ny });
            }
            return LocationSet::grid(*nx, *ny, *x, *y);
        }
    };
    LocationSet::new(pts)
}

/// One draw of `w ~ N(0, C)` over `locs` through a dense Cholesky factor of
/// the jittered covariance.
pub fn sample_gp(cross: &CrossCovariance, locs: &[Point], seed: u64) -> Result<Vec<f64>> {
    let c = cross.cov_matrix_jittered(locs);
    let l = c.cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite(
            "dense covariance is not positive definite after jitter (wave kernels over many points often are not); \
             use the NNGP field sampler"
                .into(),
        )
    })?;
    let mut rng = chain_rng(seed, 1);
    let e = nalgebra::DVector::from_iterator(locs.len() * cross.q(), (0..locs.len() * cross.q()).map(|_| normal(&mut rng)));
    Ok((l.l() * e).iter().copied().collect())
}

/// Draw from the NNGP built on `locs` (in coordinate-sum order), returned in
/// the original location order.
pub fn sample_nngp(cross: &CrossCovariance, locs: &LocationSet, m: usize, seed: u64) -> Result<Vec<f64>> {
    let ordering = order_locations(locs, OrderStrategy::ByCoordSum);
    let dag = std::sync::Arc::new(build_neighbor_dag(locs, &ordering, m, NeighborScheme::Nearest, Execution::Parallel)?);
    let f = compute_factors(&dag, cross, Execution::Parallel)?;
    let q = cross.q();
    let mut rng = chain_rng(seed, 1);
    let mut w_pos = vec![0.0; dag.len() * q];
    for p in 0..dag.len() {
        let nf = f.node(p);
        let nb = dag.neighbors(p);
        let mut mean = nalgebra::DVector::zeros(q);
        for (l, &j) in nb.iter().enumerate() {
            mean += nf.b_block(l) * nalgebra::DVector::from_column_slice(&w_pos[j * q..(j + 1) * q]);
        }
        let l = nf.f.clone().cholesky().ok_or(Error::SingularNeighborCovariance(dag.id_of(p)))?.l();
        let e = nalgebra::DVector::from_iterator(q, (0..q).map(|_| normal(&mut rng)));
        let v = mean + l * e;
        w_pos[p * q..(p + 1) * q].copy_from_slice(v.as_slice());
    }
    let mut w = vec![0.0; w_pos.len()];
    for p in 0..dag.len() {
        let id = dag.id_of(p);
        w[id * q..(id + 1) * q].copy_from_slice(&w_pos[p * q..(p + 1) * q]);
    }
    Ok(w)
}

/// `y = Xβ + Zw + ε` under the recipe.
pub fn gen_dataset(recipe: &SimRecipe) -> Result<SimData> {
    recipe.validate()?;
    let n = recipe.n;
    let seed = recipe.seed;
    let locations = sample_locations(&recipe.law, n, splitmix(seed))?;
    let p = recipe.beta.len();
    let mut rng = chain_rng(seed, 2);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let mut x = x;
    for i in 0..n {
        for j in 1..p {
            x[(i, j)] = normal(&mut rng);
        }
    }
    let q = recipe.q();
    let z = match recipe.mode {
        ModelMode::Svi => DMatrix::from_element(n, 1, 1.0),
        ModelMode::Svc => x.clone(),
        _ => DMatrix::zeros(n, 0),
    };
    let w = match (q, recipe.sampler) {
        (0, _) => Vec::new(),
        (_, FieldSampler::Dense) => sample_gp(&recipe.cross, locations.coords(), splitmix(seed ^ 1))?,
        (_, FieldSampler::Nngp { m }) => sample_nngp(&recipe.cross, &locations, m, splitmix(seed ^ 1))?,
    };
    let mut noise = chain_rng(seed, 3);
    let sd = recipe.tau2.sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let xb: f64 = (0..p).map(|j| x[(i, j)] * recipe.beta[j]).sum();
            let zw: f64 = (0..q).map(|a| z[(i, a)] * w[i * q + a]).sum();
            let e = if sd > 0.0 { sd * normal(&mut noise) } else { 0.0 };
            xb + zw + e
        })
        .collect();
    Ok(SimData { data: Dataset::new(locations, y, x)?, z, w })
}

/// Seeded uniform split into `n_train` training and `n − n_train` holdout
/// indices, each sorted.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_train > n {
        return Err(Error::Validation(format!("cannot train on {n_train} of {n} points")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut chain_rng(seed, 4));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
