//! Random-walk proposal scales tuned during burn-in.
//!
//! The log of a global (joint blocking) or per-coordinate (componentwise
//! blocking) multiplier follows a Robbins-Monro recursion towards the middle
//! of the target acceptance band. Periodically the proposal shape is reset
//! from the empirical spread of the burn-in draws. Everything is frozen once
//! burn-in ends.

use nalgebra::{DMatrix, DVector};

/// How θ coordinates are grouped into Metropolis blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Blocking {
    #[default]
    Joint,
    Componentwise,
}

impl std::str::FromStr for Blocking {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "componentwise" => Ok(Self::Componentwise),
            other => Err(crate::Error::Validation(format!("unknown blocking '{other}'"))),
        }
    }
}

/// Shape of the joint proposal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProposalShape {
    /// Independent coordinates with empirical scales.
    #[default]
    Diagonal,
    /// Full empirical covariance of the burn-in draws.
    Covariance,
}

impl std::str::FromStr for ProposalShape {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "diagonal" => Ok(Self::Diagonal),
            "covariance" => Ok(Self::Covariance),
            other => Err(crate::Error::Validation(format!("unknown proposal shape '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetropolisConfig {
    pub initial_step: f64,
    pub target_low: f64,
    pub target_high: f64,
    pub blocking: Blocking,
    pub shape: ProposalShape,
    /// Iterations between proposal-shape refreshes during burn-in.
    pub adapt_interval: usize,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            target_low: 0.25,
            target_high: 0.45,
            blocking: Blocking::Joint,
            shape: ProposalShape::Diagonal,
            adapt_interval: 50,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adaptation {
    cfg: MetropolisConfig,
    dim: usize,
    log_scale: Vec<f64>,
    /// Lower-triangular proposal shape.
    shape: DMatrix<f64>,
    n_seen: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    steps: usize,
    frozen: bool,
}

impl Adaptation {
    pub fn new(cfg: &MetropolisConfig, dim: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            dim,
            log_scale: vec![0.0; if cfg.blocking == Blocking::Joint { 1 } else { dim }],
            shape: DMatrix::identity(dim, dim) * cfg.initial_step,
            n_seen: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            steps: 0,
            frozen: false,
        }
    }

    pub fn blocking(&self) -> Blocking {
        self.cfg.blocking
    }

    pub fn target(&self) -> f64 {
        0.5 * (self.cfg.target_low + self.cfg.target_high)
    }

    /// Proposal increment for the joint block from standard normals `z`.
    pub fn joint_step(&self, z: &DVector<f64>) -> DVector<f64> {
        (&self.shape * z) * self.log_scale[0].exp()
    }

    /// Proposal standard deviation of coordinate `j` (componentwise).
    pub fn coord_step(&self, j: usize) -> f64 {
        let ls = if self.log_scale.len() == 1 {
            self.log_scale[0]
        } else {
            self.log_scale[j]
        };
        self.shape[(j, j)] * ls.exp()
    }

    /// Current per-coordinate proposal standard deviations.
    pub fn step_sizes(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|j| {
                let row = self.shape.row(j);
                let sd = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ls = if self.log_scale.len() == 1 {
                    self.log_scale[0]
                } else {
                    self.log_scale[j]
                };
                sd * ls.exp()
            })
            .collect()
    }

    /// Records an accept/reject outcome for block `block` (0 when joint).
    pub fn record(&mut self, block: usize, accepted: bool) {
        if self.frozen {
            return;
        }
        let gain = ((self.steps / self.log_scale.len()) as f64 + 1.0).powf(-0.6);
        let a = if accepted { 1.0 } else { 0.0 };
        self.log_scale[block] = (self.log_scale[block] + gain * (a - self.target())).clamp(-12.0, 6.0);
        self.steps += 1;
    }

    /// Feeds the post-update state of one burn-in iteration.
    pub fn observe(&mut self, t: &[f64], iteration: usize, burn_in: usize) {
        if self.frozen {
            return;
        }
        self.n_seen += 1;
        let x = DVector::from_column_slice(t);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n_seen as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
        let interval = self.cfg.adapt_interval.max(1);
        // leave the last quarter of burn-in to settle the multiplier
        if (iteration + 1) % interval == 0 && self.n_seen >= 2 * interval && iteration < burn_in * 3 / 4 {
            self.refresh_shape();
        }
    }

    fn refresh_shape(&mut self) {
        let d = self.dim;
        let cov = &self.m2 / (self.n_seen - 1) as f64;
        let base = 2.38 / (d as f64).sqrt();
        let new_shape = match (self.cfg.shape, self.cfg.blocking) {
            (ProposalShape::Covariance, Blocking::Joint) => {
                let reg = &cov + DMatrix::identity(d, d) * 1e-8;
                reg.cholesky().map(|c| c.l() * base)
            }
            _ => None,
        };
        self.shape = new_shape.unwrap_or_else(|| {
            let scale = if self.cfg.blocking == Blocking::Joint { base } else { 2.38 };
            DMatrix::from_diagonal(&DVector::from_fn(d, |j, _| {
                (cov[(j, j)].max(1e-12).sqrt() * scale).clamp(1e-5, 5.0)
            }))
        });
        for l in &mut self.log_scale {
            *l = 0.0;
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::rng::{chain_rng, normal, normal_vec};
    use rand::Rng;

    /// RW Metropolis on a standard normal with a badly scaled start.
    fn run(blocking: Blocking) -> f64 {
        let cfg = MetropolisConfig {
            initial_step: 20.0,
            blocking,
            ..MetropolisConfig::default()
        };
        let mut ad = Adaptation::new(&cfg, 2);
        let mut rng = chain_rng(11, 0);
        let lp = |x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1] / 4.0);
        let mut x = vec![0.0, 0.0];
        let (burn, total) = (4000, 10000);
        let mut acc = 0usize;
        let mut tries = 0usize;
        for it in 0..total {
            if it == burn {
                ad.freeze();
            }
            match blocking {
                Blocking::Joint => {
                    let z = normal_vec(&mut rng, 2);
                    let step = ad.joint_step(&z);
                    let y = vec![x[0] + step[0], x[1] + step[1]];
                    let ok = rng.random::<f64>().ln() < lp(&y) - lp(&x);
                    if ok {
                        x = y;
                    }
                    ad.record(0, ok);
                    if it >= burn {
                        acc += ok as usize;
                        tries += 1;
                    }
                }
                Blocking::Componentwise => {
                    for j in 0..2 {
                        let mut y = x.clone();
                        y[j] += ad.coord_step(j) * normal(&mut rng);
                        let ok = rng.random::<f64>().ln() < lp(&y) - lp(&x);
                        if ok {
                            x = y;
                        }
                        ad.record(j, ok);
                        if it >= burn {
                            acc += ok as usize;
                            tries += 1;
                        }
                    }
                }
            }
            ad.observe(&x, it, burn);
        }
        acc as f64 / tries as f64
    }

    #[test]
    fn joint_adaptation_reaches_band() {
        let r = run(Blocking::Joint);
        assert!((0.25..=0.45).contains(&r), "{r}");
    }

    #[test]
    fn componentwise_adaptation_reaches_band() {
        let r = run(Blocking::Componentwise);
        assert!((0.25..=0.45).contains(&r), "{r}");
    }

    #[test]
    fn frozen_scales_do_not_move() {
        let mut ad = Adaptation::new(&MetropolisConfig::default(), 3);
        ad.freeze();
        let before = ad.step_sizes();
        ad.record(0, true);
        ad.observe(&[1.0, 2.0, 3.0], 10, 100);
        assert_eq!(before, ad.step_sizes());
    }
}
