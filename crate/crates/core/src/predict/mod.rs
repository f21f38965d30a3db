//! Posterior predictive draws at new locations.
//!
//! One predictive draw is made per stored posterior draw. Locations are
//! treated independently given each draw; correlated kriging lives in
//! [`crate::simulate`].

use nalgebra::{DMatrix, DVector};

use crate::cov::{CrossCovariance, ThetaParams};
use crate::error::{Error, Result};
use crate::geo::{dist, LocationSet, NeighborIndex, NodeRef, Point};
use crate::mcmc::rng::{normal, substream};
use crate::mcmc::{mean, quantile_sorted, Algorithm, PosteriorSamples, Problem};
use crate::model::ModelMode;
use crate::nngp::{node_factor, BlockCovariance, NodeFactor};
use crate::par::{try_map_indexed, Execution};

mod krige;

pub use krige::{krige_latent, Kriged};

const FREE: NodeRef = NodeRef::Query(usize::MAX);

#[derive(Clone, Debug)]
pub struct PredictionRequest {
    pub locations: LocationSet,
    /// `n_new × p`
    pub x: DMatrix<f64>,
    /// `n_new × q`; derived from the model mode when absent.
    pub z: Option<DMatrix<f64>>,
    /// Keep the full `n_new × draws` matrix.
    pub keep_draws: bool,
    pub seed: u64,
    pub exec: Execution,
}

impl PredictionRequest {
    pub fn new(locations: LocationSet, x: DMatrix<f64>) -> Self {
        Self {
            locations,
            x,
            z: None,
            keep_draws: false,
            seed: 1,
            exec: Execution::Parallel,
        }
    }

    fn z_matrix(&self, problem: &Problem) -> Result<DMatrix<f64>> {
        let n = self.locations.len();
        let z = match (problem.spec.mode, &self.z) {
            (_, Some(z)) => z.clone(),
            (ModelMode::Svi, None) => DMatrix::from_element(n, 1, 1.0),
            (ModelMode::Svc, None) => self.x.clone(),
            (ModelMode::NonSpatial, None) => DMatrix::zeros(n, 0),
            (ModelMode::Custom, None) => {
                return Err(Error::Validation("custom mode prediction needs Z at the new locations".into()))
            }
        };
        check_dim("prediction Z rows", n, z.nrows())?;
        check_dim("prediction Z columns", problem.q(), z.ncols())?;
        Ok(z)
    }
}

fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}

/// Predictive summary at one location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationSummary {
    pub q50: f64,
    pub q025: f64,
    pub q975: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub summaries: Vec<LocationSummary>,
    /// `n_new × draws`, when requested.
    pub draws: Option<DMatrix<f64>>,
}

impl Prediction {
    pub fn medians(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.q50).collect()
    }
}

/// Where a new location sits relative to the fitted model.
enum Site {
    /// Coincides with a node carrying a stored `w` at this offset.
    Stored(usize),
    /// Conditioned on these reference positions.
    Free(Vec<usize>),
}

/// Latent covariance between reference nodes and one free point.
struct LatentPoint<'a> {
    problem: &'a Problem,
    cross: &'a CrossCovariance,
    point: Point,
}

impl LatentPoint<'_> {
    fn coord(&self, n: NodeRef) -> &Point {
        if n == FREE {
            &self.point
        } else {
            self.problem.dag.node_coord(n)
        }
    }
}

impl BlockCovariance for LatentPoint<'_> {
    fn block_dim(&self) -> usize {
        self.cross.q()
    }

    fn write_block(&self, a: NodeRef, b: NodeRef, out: &mut DMatrix<f64>, r0: usize, c0: usize) {
        self.cross.write_cov(dist(self.coord(a), self.coord(b)), out, r0, c0);
        if a == b {
            for i in 0..self.cross.q() {
                out[(r0 + i, c0 + i)] += self.cross.jitter();
            }
        }
    }
}

/// Response covariance `z′Cz + τ²δ` between observed nodes and one free point.
struct ResponsePoint<'a> {
    problem: &'a Problem,
    theta: &'a ThetaParams,
    point: Point,
    z: &'a [f64],
}

impl ResponsePoint<'_> {
    fn at(&self, n: NodeRef) -> (&Point, &[f64]) {
        if n == FREE {
            (&self.point, self.z)
        } else {
            let dag = &self.problem.dag;
            let o = match n {
                NodeRef::Reference(p) => self.problem.ref_obs[p].expect("response prediction needs S = T"),
                NodeRef::Query(_) => unreachable!("response prediction conditions on reference nodes"),
            };
            (dag.node_coord(n), self.problem.z_row(o))
        }
    }
}

impl BlockCovariance for ResponsePoint<'_> {
    fn block_dim(&self) -> usize {
        1
    }

    fn write_block(&self, a: NodeRef, b: NodeRef, out: &mut DMatrix<f64>, r0: usize, c0: usize) {
        let (pa, za) = self.at(a);
        let (pb, zb) = self.at(b);
        let c = self.theta.cross.cross_cov_at(dist(pa, pb));
        let q = za.len();
        let mut v = 0.0;
        for i in 0..q {
            for j in 0..q {
                v += za[i] * c[(i, j)] * zb[j];
            }
        }
        if a == b {
            v += self.theta.tau2 + self.theta.cross.jitter();
        }
        out[(r0, c0)] = v;
    }
}

/// Draws `y(t)` at each requested location for every stored posterior draw.
pub fn predict(problem: &Problem, samples: &PosteriorSamples, req: &PredictionRequest) -> Result<Prediction> {
    let n_new = req.locations.len();
    check_dim("prediction X rows", n_new, req.x.nrows())?;
    check_dim("prediction X columns", problem.p(), req.x.ncols())?;
    let z = req.z_matrix(problem)?;
    let q = problem.q();
    let latent = samples.algorithm.has_latent() && q > 0;
    if samples.algorithm == Algorithm::Response && !problem.s_equals_t() {
        return Err(Error::Validation("response prediction needs S = T".into()));
    }
    let draws = samples.draws()?;
    if latent && draws.iter().any(|d| d.2.is_none()) {
        return Err(Error::Validation("latent prediction needs stored w draws".into()));
    }
    // (chain, index within chain) for each flattened draw
    let coords: Vec<(usize, usize)> = samples
        .chains
        .iter()
        .enumerate()
        .flat_map(|(c, ch)| (0..ch.params.len()).map(move |g| (c, g)))
        .collect();

    let dag = &problem.dag;
    let index = NeighborIndex::new(dag.coords());
    let ids: Vec<usize> = (0..dag.len()).map(|p| dag.id_of(p)).collect();
    let m = dag.m().min(dag.len());
    let observed = NeighborIndex::new(problem.data.locations.coords());
    let obs_ids: Vec<usize> = (0..problem.n()).collect();

    let site_of = |pt: &Point| -> Site {
        let near = index.nearest_with_ids(pt, m, &ids, |_| true);
        if latent {
            if let Some(&(d2, p)) = near.first() {
                if d2 == 0.0 {
                    return Site::Stored(p * q);
                }
            }
            if let Some(&(d2, o)) = observed.nearest_with_ids(pt, 1, &obs_ids, |_| true).first() {
                if d2 == 0.0 {
                    return Site::Stored(problem.node_index(problem.obs_node[o]));
                }
            }
        }
        Site::Free(near.into_iter().map(|(_, p)| p).collect())
    };

    let per_location = try_map_indexed(req.exec, n_new, |j| -> Result<Vec<f64>> {
        let pt = *req.locations.point(j);
        let x_t = req.x.row(j).transpose();
        let z_t: Vec<f64> = z.row(j).iter().copied().collect();
        let site = site_of(&pt);
        let mut out = Vec::with_capacity(draws.len());
        for (g, (beta, theta, w)) in draws.iter().enumerate() {
            let (chain, within) = coords[g];
            let mut rng = substream(req.seed, chain, within, j);
            let xb = x_t.dot(beta);
            let sd = theta.tau2.sqrt();
            let y = if q == 0 {
                xb + sd * normal(&mut rng)
            } else if latent {
                let w = w.expect("checked above");
                let w_t: Vec<f64> = match &site {
                    Site::Stored(at) => w[*at..*at + q].to_vec(),
                    Site::Free(nb) => {
                        let cov = LatentPoint { problem, cross: &theta.cross, point: pt };
                        let f = node_factor(&cov, FREE, nb, j)?;
                        draw_conditional(&f, &gather(w, nb, q), &mut rng)
                    }
                };
                xb + z_t.iter().zip(&w_t).map(|(a, b)| a * b).sum::<f64>() + sd * normal(&mut rng)
            } else {
                let nb = match &site {
                    Site::Free(nb) => nb,
                    Site::Stored(_) => unreachable!("response sites are always free"),
                };
                let cov = ResponsePoint { problem, theta, point: pt, z: &z_t };
                let f = node_factor(&cov, FREE, nb, j)?;
                let resid = DVector::from_iterator(
                    nb.len(),
                    nb.iter().map(|&p| {
                        let o = problem.ref_obs[p].expect("S = T");
                        let xo: f64 = problem.x_row(o).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                        problem.data.y[o] - xo
                    }),
                );
                xb + draw_conditional(&f, &resid, &mut rng)[0]
            };
            out.push(y);
        }
        Ok(out)
    })?;

    let summaries = per_location
        .iter()
        .map(|d| {
            let mut s = d.clone();
            s.sort_by(f64::total_cmp);
            LocationSummary {
                q50: quantile_sorted(&s, 0.5),
                q025: quantile_sorted(&s, 0.025),
                q975: quantile_sorted(&s, 0.975),
                mean: mean(d),
            }
        })
        .collect();
    let draws = req
        .keep_draws
        .then(|| DMatrix::from_fn(n_new, draws.len(), |j, g| per_location[j][g]));
    Ok(Prediction { summaries, draws })
}

fn gather(w: &[f64], nb: &[usize], q: usize) -> DVector<f64> {
    DVector::from_iterator(nb.len() * q, nb.iter().flat_map(|&p| w[p * q..(p + 1) * q].iter().copied()))
}

/// `B v + L e` with `F = L L′`.
fn draw_conditional(f: &NodeFactor, v: &DVector<f64>, rng: &mut impl rand::Rng) -> Vec<f64> {
    let q = f.f.nrows();
    let mut mean = if f.b.ncols() == 0 { DVector::zeros(q) } else { &f.b * v };
    let l = f
        .f
        .clone()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::from_diagonal(&f.f.diagonal().map(|d| d.max(0.0).sqrt())));
    let e = DVector::from_iterator(q, (0..q).map(|_| normal(rng)));
    mean += l * e;
    mean.iter().copied().collect()
}
