//! Euler-Maruyama for the n-particle system
//! `dY^i = V(m^n_t, Y^i) dt + sqrt(2) sigma dB^i`, reference flows for the limit law,
//! and synchronous couplings between the two.
//!
//! Cost per step is `O(n)` for drifts that see the measure only through its mean and
//! `O(n^2)` for generic drifts, which evaluate `V` against the whole cloud per particle.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::Drift;
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::{EmpiricalMeasure, GaussianMeasure};
use crate::rng::{self, StreamRng, AUX_REPLICA_BASE};
use crate::table::fmt_float;

/// Coordinates beyond this magnitude abort a run.
pub const DIVERGENCE_BOUND: f64 = 1e8;

/// Replica id of the independent population behind [`run_mckean_reference`].
pub const REFERENCE_REPLICA: u64 = AUX_REPLICA_BASE + 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitLaw {
    /// iid draws from `N(mean, cov)`.
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    /// Explicit starting points, one per particle.
    Points { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub init: InitLaw,
}

impl SimConfig {
    /// One-dimensional config with Gaussian initial law `N(mean, var)`.
    pub fn scalar(n: usize, sigma: f64, dt: f64, t_end: f64, seed: u64, mean: f64, var: f64) -> Self {
        Self {
            n,
            d: 1,
            sigma,
            dt,
            t_end,
            seed,
            init: InitLaw::Gaussian {
                mean: vec![mean],
                cov: vec![vec![var]],
            },
        }
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config("t_end must be nonnegative".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be nonnegative".into()));
        }
        let steps = (self.t_end / self.dt).round();
        if (steps * self.dt - self.t_end).abs() > 1e-9 * self.t_end.max(1.0) {
            return Err(Error::Config(format!(
                "t_end {} is not a multiple of dt {}",
                self.t_end, self.dt
            )));
        }
        match &self.init {
            InitLaw::Gaussian { .. } => {
                self.initial_gaussian()?;
            }
            InitLaw::Points { points } => {
                if points.len() != self.n {
                    return Err(Error::DimensionMismatch {
                        expected: self.n,
                        got: points.len(),
                    });
                }
                if let Some(p) = points.iter().find(|p| p.len() != self.d) {
                    return Err(Error::DimensionMismatch {
                        expected: self.d,
                        got: p.len(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| k as f64 * self.dt).collect()
    }

    /// The initial law when it is Gaussian.
    pub fn initial_gaussian(&self) -> Result<Option<GaussianMeasure>> {
        match &self.init {
            InitLaw::Gaussian { mean, cov } => {
                if mean.len() != self.d {
                    return Err(Error::DimensionMismatch {
                        expected: self.d,
                        got: mean.len(),
                    });
                }
                let cov = linalg::matrix_from_rows(cov)?;
                Ok(Some(GaussianMeasure::new(DVector::from_vec(mean.clone()), cov)?))
            }
            InitLaw::Points { .. } => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<EmpiricalMeasure>,
}

impl Trajectory {
    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.states.last().expect("a trajectory holds the initial state")
    }

    /// CSV dump with header `t,particle,dim0,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.states[0].dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "particle".to_string()];
        header.extend((0..d).map(|c| format!("dim{c}")));
        w.write_record(&header)?;
        for (t, state) in self.times.iter().zip(&self.states) {
            for (i, x) in state.iter().enumerate() {
                let mut row = vec![fmt_float(*t), i.to_string()];
                row.extend(x.iter().map(|v| fmt_float(*v)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Particle cloud with one keyed noise stream per particle.
struct Cloud {
    state: EmpiricalMeasure,
    rngs: Vec<StreamRng>,
    /// `-1` for the antithetic member of a pair.
    sign: f64,
}

impl Cloud {
    fn start(cfg: &SimConfig, replica: u64, sign: f64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let mut rngs: Vec<StreamRng> = (0..cfg.n as u64).map(|i| rng::stream(cfg.seed, replica, i)).collect();
        let mut points = vec![0.0; cfg.n * d];
        match &cfg.init {
            InitLaw::Gaussian { .. } => {
                let law = cfg.initial_gaussian()?.expect("gaussian init");
                let sqrt = law.cov_sqrt();
                let mut z = vec![0.0; d];
                for (x, r) in points.chunks_exact_mut(d).zip(rngs.iter_mut()) {
                    rng::fill_normal(r, &mut z);
                    for i in 0..d {
                        x[i] = law.mean()[i] + sign * (0..d).map(|j| sqrt[(i, j)] * z[j]).sum::<f64>();
                    }
                }
            }
            InitLaw::Points { points: given } => {
                for (x, p) in points.chunks_exact_mut(d).zip(given) {
                    x.copy_from_slice(p);
                }
            }
        }
        Ok(Self {
            state: EmpiricalMeasure::new(d, points)?,
            rngs,
            sign,
        })
    }

    /// Scaled Brownian increments `sign * sigma * sqrt(2 dt) * xi` for every coordinate.
    fn noise(&mut self, cfg: &SimConfig, out: &mut [f64]) {
        if cfg.sigma == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let scale = self.sign * cfg.sigma * (2.0 * cfg.dt).sqrt();
        for (chunk, r) in out.chunks_exact_mut(cfg.d).zip(self.rngs.iter_mut()) {
            for v in chunk {
                *v = scale * rng::normal(r);
            }
        }
    }
}

/// Initial positions of `cfg.n` particles and their noise streams, keyed by `replica`.
pub(crate) fn start_cloud(cfg: &SimConfig, replica: u64) -> Result<(EmpiricalMeasure, Vec<StreamRng>)> {
    let c = Cloud::start(cfg, replica, 1.0)?;
    Ok((c.state, c.rngs))
}

pub(crate) fn check_finite(points: &[f64], step: usize) -> Result<()> {
    if points.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
        return Err(Error::Divergence { step });
    }
    Ok(())
}

/// Runs one replica, handing the state at every step `k = 0..=steps` to `observe`.
/// Returns the terminal measure.
pub fn simulate_observed(
    drift: &dyn Drift,
    cfg: &SimConfig,
    replica: u64,
    antithetic: bool,
    mut observe: impl FnMut(usize, &EmpiricalMeasure),
) -> Result<EmpiricalMeasure> {
    if drift.dim() != cfg.d {
        return Err(Error::DimensionMismatch {
            expected: drift.dim(),
            got: cfg.d,
        });
    }
    let mut cloud = Cloud::start(cfg, replica, if antithetic { -1.0 } else { 1.0 })?;
    let len = cfg.n * cfg.d;
    let mut v = vec![0.0; len];
    let mut dw = vec![0.0; len];
    observe(0, &cloud.state);
    for k in 1..=cfg.steps() {
        drift.eval_batch(&cloud.state, cloud.state.points(), &mut v);
        cloud.noise(cfg, &mut dw);
        let x = cloud.state.points_mut();
        for i in 0..len {
            x[i] += v[i] * cfg.dt + dw[i];
        }
        check_finite(x, k)?;
        observe(k, &cloud.state);
    }
    Ok(cloud.state)
}

pub fn run_replica(drift: &dyn Drift, cfg: &SimConfig, replica: u64) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(cfg.steps() + 1);
    simulate_observed(drift, cfg, replica, false, |_, mu| states.push(mu.clone()))?;
    Ok(Trajectory {
        dt: cfg.dt,
        times: cfg.times(),
        states,
    })
}

/// The particle system of `cfg` (replica 0).
pub fn run_particles(drift: &dyn Drift, cfg: &SimConfig) -> Result<Trajectory> {
    run_replica(drift, cfg, 0)
}

pub fn run_terminal(drift: &dyn Drift, cfg: &SimConfig, replica: u64, antithetic: bool) -> Result<EmpiricalMeasure> {
    simulate_observed(drift, cfg, replica, antithetic, |_, _| {})
}

/// Maps every replica's terminal measure through `summary`, in replica order.
///
/// With `antithetic`, replicas `2r` and `2r + 1` share noise streams with opposite signs
/// (initial deviations from a Gaussian mean are mirrored too), so consecutive entries
/// form a pair whose average has lower variance than either member.
pub fn map_terminal<T: Send>(
    drift: &dyn Drift,
    cfg: &SimConfig,
    replicas: usize,
    antithetic: bool,
    summary: impl Fn(&EmpiricalMeasure) -> T + Sync,
) -> Result<Vec<T>> {
    if antithetic && !replicas.is_multiple_of(2) {
        return Err(Error::Config("antithetic runs need an even replica count".into()));
    }
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let (id, flip) = if antithetic { ((r / 2) as u64, r % 2 == 1) } else { (r as u64, false) };
            run_terminal(drift, cfg, id, flip).map(|mu| summary(&mu))
        })
        .collect()
}

/// Large independent population standing in for the limit law `mu_t`.
pub fn run_mckean_reference(drift: &dyn Drift, cfg: &SimConfig, n_ref: usize) -> Result<Trajectory> {
    run_replica(drift, &cfg.with_n(n_ref), REFERENCE_REPLICA)
}

/// The limit law on the Euler time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceFlow {
    pub dt: f64,
    measures: Vec<EmpiricalMeasure>,
    gaussians: Option<Vec<GaussianMeasure>>,
}

impl ReferenceFlow {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            dt: traj.dt,
            measures: traj.states.clone(),
            gaussians: None,
        }
    }

    /// The same measure at every step.
    pub fn frozen(mu: EmpiricalMeasure, dt: f64, steps: usize) -> Self {
        Self {
            dt,
            measures: vec![mu; steps + 1],
            gaussians: None,
        }
    }

    /// Exact law of the Euler scheme for the limit equation when the drift is
    /// `A x + c(mean)` and the initial law is Gaussian:
    /// `m' = m + dt V(delta_m, m)`, `S' = (I + dt A) S (I + dt A)^T + 2 sigma^2 dt I`.
    /// Each step's measure is a tensor Gauss-Hermite rule with `nodes_per_dim` nodes.
    pub fn discrete_gaussian(drift: &dyn Drift, cfg: &SimConfig, nodes_per_dim: usize) -> Result<Self> {
        let a = drift
            .mean_affine()
            .ok_or(Error::MissingCapability("mean-affine drift"))?
            .clone();
        let init = cfg
            .initial_gaussian()?
            .ok_or_else(|| Error::Config("exact reference flow needs a Gaussian initial law".into()))?;
        cfg.validate()?;
        let d = cfg.d;
        let step_matrix = DMatrix::identity(d, d) + &a * cfg.dt;
        let noise = DMatrix::identity(d, d) * (2.0 * cfg.sigma * cfg.sigma * cfg.dt);
        let mut mean = init.mean().clone();
        let mut cov = init.cov().clone();
        let mut gaussians = Vec::with_capacity(cfg.steps() + 1);
        let mut measures = Vec::with_capacity(cfg.steps() + 1);
        let mut v = vec![0.0; d];
        for k in 0..=cfg.steps() {
            let g = GaussianMeasure::new(mean.clone(), linalg::symmetrize(&cov))?;
            measures.push(g.quadrature(nodes_per_dim));
            gaussians.push(g);
            if k == cfg.steps() {
                break;
            }
            drift.eval(&EmpiricalMeasure::dirac(mean.as_slice()), mean.as_slice(), &mut v);
            mean += DVector::from_column_slice(&v) * cfg.dt;
            cov = &step_matrix * cov * step_matrix.transpose() + &noise;
        }
        Ok(Self {
            dt: cfg.dt,
            measures,
            gaussians: Some(gaussians),
        })
    }

    pub fn len(&self) -> usize {
        self.measures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measures.is_empty()
    }

    pub fn measure(&self, step: usize) -> &EmpiricalMeasure {
        &self.measures[step]
    }

    pub fn gaussian(&self, step: usize) -> Option<&GaussianMeasure> {
        self.gaussians.as_ref().map(|g| &g[step])
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.measures.last().expect("nonempty flow")
    }

    pub(crate) fn check_grid(&self, cfg: &SimConfig) -> Result<()> {
        if (self.dt - cfg.dt).abs() > 1e-12 * cfg.dt {
            return Err(Error::Config(format!("reference flow dt {} differs from {}", self.dt, cfg.dt)));
        }
        if self.len() < cfg.steps() + 1 {
            return Err(Error::InsufficientData {
                needed: cfg.steps() + 1,
                got: self.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingReport {
    pub n: usize,
    pub replicas: usize,
    /// Replica average of `(1/n) sum_i sup_t |Y^i_t - Xbar^i_t|^2`.
    pub sup_gap_sq_per_particle: f64,
    pub stderr: f64,
    /// Replica average of `(1/n) sum_i |Y^i_t - Xbar^i_t|^2` on the time grid.
    pub per_time_gaps: Vec<f64>,
}

fn coupled_replica(drift: &dyn Drift, cfg: &SimConfig, flow: &ReferenceFlow, replica: u64) -> Result<(f64, Vec<f64>)> {
    let mut cloud = Cloud::start(cfg, replica, 1.0)?;
    let (n, d) = (cfg.n, cfg.d);
    let len = n * d;
    let mut free = cloud.state.points().to_vec();
    let mut vy = vec![0.0; len];
    let mut vx = vec![0.0; len];
    let mut dw = vec![0.0; len];
    let mut sup = vec![0.0; n];
    let mut per_time = Vec::with_capacity(cfg.steps() + 1);
    per_time.push(0.0);
    for k in 1..=cfg.steps() {
        drift.eval_batch(&cloud.state, cloud.state.points(), &mut vy);
        drift.eval_batch(flow.measure(k - 1), &free, &mut vx);
        cloud.noise(cfg, &mut dw);
        let y = cloud.state.points_mut();
        for i in 0..len {
            y[i] += vy[i] * cfg.dt + dw[i];
            free[i] += vx[i] * cfg.dt + dw[i];
        }
        check_finite(y, k)?;
        check_finite(&free, k)?;
        let mut total = 0.0;
        for (i, s) in sup.iter_mut().enumerate() {
            let g: f64 = (0..d).map(|c| (y[i * d + c] - free[i * d + c]).powi(2)).sum();
            *s = f64::max(*s, g);
            total += g;
        }
        per_time.push(total / n as f64);
    }
    Ok((sup.iter().sum::<f64>() / n as f64, per_time))
}

/// Drives the interacting system and `n` independent copies of the limit equation
/// (drift evaluated against `flow`) with the same initial points and noise.
pub fn run_synchronous_coupling(
    drift: &dyn Drift,
    cfg: &SimConfig,
    flow: &ReferenceFlow,
    replicas: usize,
) -> Result<CouplingReport> {
    if replicas < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: replicas,
        });
    }
    flow.check_grid(cfg)?;
    let runs: Vec<(f64, Vec<f64>)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| coupled_replica(drift, cfg, flow, r))
        .collect::<Result<_>>()?;
    let sups: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let (mean, stderr) = mean_stderr(&sups);
    let steps = cfg.steps() + 1;
    let per_time_gaps = (0..steps)
        .map(|k| runs.iter().map(|r| r.1[k]).sum::<f64>() / replicas as f64)
        .collect();
    Ok(CouplingReport {
        n: cfg.n,
        replicas,
        sup_gap_sq_per_particle: mean,
        stderr,
        per_time_gaps,
    })
}

/// Sample mean and its standard error.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
