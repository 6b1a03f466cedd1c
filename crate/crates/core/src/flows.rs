//! Linearized flows: the spatial derivative `J_t = grad_x X_t` along one path and the
//! measure derivative `grad_W X_t(y)` realized on a particle ensemble.
//!
//! Both are stepped with explicit Euler on the same grid as the positions, so the
//! tangent flow is the exact derivative of the Euler map `x -> X_k`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::drift::{check_quadratic_form, Drift, GaussianPairs};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::EmpiricalMeasure;
use crate::rng::{self, StreamRng, AUX_REPLICA_BASE};
use crate::simulate::{self, ReferenceFlow, SimConfig};
use crate::table::{fmt_float, Table};

const TANGENT_REPLICA: u64 = AUX_REPLICA_BASE + 8;
const LAW_REPLICA: u64 = AUX_REPLICA_BASE + 5;
const POINT_Y_REPLICA: u64 = AUX_REPLICA_BASE + 6;
const POINT_X_REPLICA: u64 = AUX_REPLICA_BASE + 7;

pub const MIN_ENSEMBLE: usize = 100;
/// Allowed excess of `|J_t| e^{lambda t}` over one.
pub const TANGENT_SLACK: f64 = 1e-6;
/// Largest accepted ratio of the Lions-flow RMS at the horizon to its running peak.
pub const LIONS_DECAY_THRESHOLD: f64 = 0.05;

const PRECONDITION_SAMPLES: usize = 1000;
const PRECONDITION_SEED: u64 = 0x000d_eca7;

#[derive(Debug, Clone, PartialEq)]
pub struct TangentFlow {
    pub dt: f64,
    pub times: Vec<f64>,
    pub base_path: Vec<Vec<f64>>,
    pub jacobian: Vec<DMatrix<f64>>,
}

fn noise_scale(cfg: &SimConfig) -> f64 {
    cfg.sigma * (2.0 * cfg.dt).sqrt()
}

fn add_noise(r: &mut StreamRng, scale: f64, x: &mut [f64]) {
    if scale == 0.0 {
        return;
    }
    for v in x {
        *v += scale * rng::normal(r);
    }
}

/// Steps `X` against the measures of `mu_flow` together with `J' = grad_x V(mu_t, X_t) J`.
/// The noise is keyed by `cfg.seed` alone, so two calls with different `x0` share it.
pub fn simulate_tangent(drift: &dyn Drift, cfg: &SimConfig, mu_flow: &ReferenceFlow, x0: &[f64]) -> Result<TangentFlow> {
    if !drift.has_xgrad() {
        return Err(Error::MissingCapability("xgrad"));
    }
    let d = drift.dim();
    if x0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
    }
    cfg.validate()?;
    mu_flow.check_grid(cfg)?;
    let steps = cfg.steps();
    let scale = noise_scale(cfg);
    let mut r = rng::stream(cfg.seed, TANGENT_REPLICA, 0);
    let mut x = x0.to_vec();
    let mut j = DMatrix::identity(d, d);
    let mut base_path = Vec::with_capacity(steps + 1);
    let mut jacobian = Vec::with_capacity(steps + 1);
    let mut v = vec![0.0; d];
    base_path.push(x.clone());
    jacobian.push(j.clone());
    for k in 0..steps {
        let mu = mu_flow.measure(k);
        let g = drift.xgrad(mu, &x).ok_or(Error::MissingCapability("xgrad"))?;
        drift.eval(mu, &x, &mut v);
        j += g * &j * cfg.dt;
        for i in 0..d {
            x[i] += v[i] * cfg.dt;
        }
        add_noise(&mut r, scale, &mut x);
        simulate::check_finite(&x, k + 1)?;
        base_path.push(x.clone());
        jacobian.push(j.clone());
    }
    Ok(TangentFlow {
        dt: cfg.dt,
        times: cfg.times(),
        base_path,
        jacobian,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentFdReport {
    pub h: f64,
    /// `max_{k, i} |(X_k^{x + h e_i} - X_k^x)/h - J_k e_i| / |J_k e_i|`.
    pub max_rel_error: f64,
}

/// Forward differences of same-noise paths against the tangent flow, every direction
/// and every step.
pub fn check_tangent_fd(drift: &dyn Drift, cfg: &SimConfig, mu_flow: &ReferenceFlow, x0: &[f64], h: f64) -> Result<TangentFdReport> {
    if !(h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let base = simulate_tangent(drift, cfg, mu_flow, x0)?;
    let d = x0.len();
    let mut max_rel_error: f64 = 0.0;
    for i in 0..d {
        let mut shifted = x0.to_vec();
        shifted[i] += h;
        let bumped = simulate_tangent(drift, cfg, mu_flow, &shifted)?;
        for k in 1..base.base_path.len() {
            let col = base.jacobian[k].column(i);
            let mut err = 0.0;
            for c in 0..d {
                let fd = (bumped.base_path[k][c] - base.base_path[k][c]) / h;
                err += (fd - col[c]).powi(2);
            }
            max_rel_error = max_rel_error.max(err.sqrt() / col.norm().max(f64::MIN_POSITIVE));
        }
    }
    Ok(TangentFdReport { h, max_rel_error })
}

/// Ensemble realization of the measure-derivative flows started from zero.
///
/// Matrices are `d x d`; the per-copy law-level matrices are summarized at every step
/// by their ensemble mean and mean squared Frobenius norm, and kept in full at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct LionsFlow {
    pub ensemble_size: usize,
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
    pub dt: f64,
    pub times: Vec<f64>,
    /// `grad_W X_t^{x0}(y)`.
    pub xi_point: Vec<DMatrix<f64>>,
    /// Ensemble mean of `grad_W X_t(y)`.
    pub xi_law_mean: Vec<DMatrix<f64>>,
    /// Ensemble mean of `|grad_W X_t(y)|_F^2`.
    pub xi_law_mean_square: Vec<f64>,
    pub xi_law_terminal: Vec<DMatrix<f64>>,
    /// Ensemble mean of `grad_x X_t^y`.
    pub tangent_mean: Vec<DMatrix<f64>>,
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    (0..d * d).map(|k| m[(k / d, k % d)]).collect()
}

fn unflat(d: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, v)
}

/// `out += s * a b` for row-major `d x d` blocks.
fn gemm_acc(d: usize, s: f64, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..d {
        for k in 0..d {
            let aik = s * a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
}

fn block_mean(d: usize, blocks: &[f64]) -> Vec<f64> {
    let dd = d * d;
    let m = blocks.len() / dd;
    let mut out = vec![0.0; dd];
    for b in blocks.chunks_exact(dd) {
        out.iter_mut().zip(b).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

/// `(1/M) sum_j W(mu, x, Y_j) J_j + W(mu, x, X_j) zeta_j`.
fn cross_term(drift: &dyn Drift, mu: &EmpiricalMeasure, x: &[f64], ys: &[f64], jy: &[f64], xs: &[f64], zeta: &[f64]) -> Result<Vec<f64>> {
    let d = drift.dim();
    let dd = d * d;
    let m = ys.len() / d;
    let mut out = vec![0.0; dd];
    for j in 0..m {
        let w = drift.wgrad(mu, x, &ys[j * d..(j + 1) * d]).ok_or(Error::MissingCapability("wgrad"))?;
        gemm_acc(d, 1.0 / m as f64, &flat(&w), &jy[j * dd..(j + 1) * dd], &mut out);
        let w = drift.wgrad(mu, x, &xs[j * d..(j + 1) * d]).ok_or(Error::MissingCapability("wgrad"))?;
        gemm_acc(d, 1.0 / m as f64, &flat(&w), &zeta[j * dd..(j + 1) * dd], &mut out);
    }
    Ok(out)
}

/// Simulates `M` copies of `X_t` (the law level, started from `cfg.init`), `M` copies of
/// `X_t^y` with their tangent flows, one path `X_t^{x0}`, and the coupled Euler systems
///
/// ```text
/// zeta_i' = grad_x V(mu, X_i) zeta_i + (1/M) sum_j [W(mu, X_i, Y_j) J_j + W(mu, X_i, X_j) zeta_j]
/// xi'     = grad_x V(mu, X^{x0}) xi  + (1/M) sum_j [W(mu, X^{x0}, Y_j) J_j + W(mu, X^{x0}, X_j) zeta_j]
/// ```
///
/// where `mu` is the empirical law of the `X_i`. The `1/M` averages include `j = i`,
/// which biases the law-level flow by `O(1/M)`. Mean-affine drifts cost `O(M)` per step,
/// others `O(M^2)`.
pub fn simulate_lions(drift: &dyn Drift, cfg: &SimConfig, x0: &[f64], y: &[f64], ensemble: usize) -> Result<LionsFlow> {
    if !drift.has_wgrad() {
        return Err(Error::MissingCapability("wgrad"));
    }
    if !drift.has_xgrad() {
        return Err(Error::MissingCapability("xgrad"));
    }
    if ensemble < MIN_ENSEMBLE {
        return Err(Error::OutOfRange {
            what: "ensemble size",
            value: ensemble.to_string(),
            range: format!(">= {MIN_ENSEMBLE}"),
        });
    }
    let d = drift.dim();
    for p in [x0, y] {
        if p.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: p.len() });
        }
    }
    let law_cfg = cfg.with_n(ensemble);
    law_cfg.validate()?;
    if law_cfg.d != d {
        return Err(Error::DimensionMismatch { expected: d, got: law_cfg.d });
    }
    let dd = d * d;
    let steps = cfg.steps();
    let scale = noise_scale(cfg);
    let dt = cfg.dt;

    let (mut law, mut law_rngs) = simulate::start_cloud(&law_cfg, LAW_REPLICA)?;
    let mut ys: Vec<f64> = y.repeat(ensemble);
    let mut y_rngs: Vec<StreamRng> = (0..ensemble as u64).map(|j| rng::stream(cfg.seed, POINT_Y_REPLICA, j)).collect();
    let mut xp = x0.to_vec();
    let mut xp_rng = rng::stream(cfg.seed, POINT_X_REPLICA, 0);

    let identity = flat(&DMatrix::identity(d, d));
    let mut jy: Vec<f64> = identity.repeat(ensemble);
    let mut zeta = vec![0.0; ensemble * dd];
    let mut xi = vec![0.0; dd];

    let mut flow = LionsFlow {
        ensemble_size: ensemble,
        x0: x0.to_vec(),
        y: y.to_vec(),
        dt,
        times: cfg.times(),
        xi_point: Vec::with_capacity(steps + 1),
        xi_law_mean: Vec::with_capacity(steps + 1),
        xi_law_mean_square: Vec::with_capacity(steps + 1),
        xi_law_terminal: Vec::new(),
        tangent_mean: Vec::with_capacity(steps + 1),
    };
    let record = |flow: &mut LionsFlow, xi: &[f64], zeta: &[f64], jy: &[f64]| {
        flow.xi_point.push(unflat(d, xi));
        flow.xi_law_mean.push(unflat(d, &block_mean(d, zeta)));
        flow.xi_law_mean_square.push(zeta.iter().map(|v| v * v).sum::<f64>() / ensemble as f64);
        flow.tangent_mean.push(unflat(d, &block_mean(d, jy)));
    };
    record(&mut flow, &xi, &zeta, &jy);

    let mut vx = vec![0.0; ensemble * d];
    let mut vy = vec![0.0; ensemble * d];
    let mut vp = vec![0.0; d];
    let mut dz = vec![0.0; ensemble * dd];
    let mut dj = vec![0.0; ensemble * dd];
    let mut dxi = vec![0.0; dd];
    for k in 0..steps {
        drift.eval_batch(&law, law.points(), &mut vx);
        drift.eval_batch(&law, &ys, &mut vy);
        drift.eval(&law, &xp, &mut vp);
        let xs = law.points();

        dz.iter_mut().chain(dj.iter_mut()).chain(dxi.iter_mut()).for_each(|v| *v = 0.0);
        if let Some(a) = drift.mean_affine() {
            // grad_x V = A everywhere and W depends on the measure only
            let a = flat(a);
            let w = drift.wgrad(&law, &xp, &xp).ok_or(Error::MissingCapability("wgrad"))?;
            let mut avg = block_mean(d, &jy);
            avg.iter_mut().zip(block_mean(d, &zeta)).for_each(|(s, z)| *s += z);
            let mut cross = vec![0.0; dd];
            gemm_acc(d, 1.0, &flat(&w), &avg, &mut cross);
            for i in 0..ensemble {
                let r = i * dd..(i + 1) * dd;
                gemm_acc(d, 1.0, &a, &zeta[r.clone()], &mut dz[r.clone()]);
                dz[r.clone()].iter_mut().zip(&cross).for_each(|(o, c)| *o += c);
                gemm_acc(d, 1.0, &a, &jy[r.clone()], &mut dj[r]);
            }
            gemm_acc(d, 1.0, &a, &xi, &mut dxi);
            dxi.iter_mut().zip(&cross).for_each(|(o, c)| *o += c);
        } else {
            let (law_ref, ys_ref, jy_ref, zeta_ref) = (&law, &ys, &jy, &zeta);
            dz.par_chunks_mut(dd)
                .zip(dj.par_chunks_mut(dd))
                .enumerate()
                .try_for_each(|(i, (dzi, dji))| -> Result<()> {
                    let xi_pos = &xs[i * d..(i + 1) * d];
                    let g = flat(&drift.xgrad(law_ref, xi_pos).ok_or(Error::MissingCapability("xgrad"))?);
                    gemm_acc(d, 1.0, &g, &zeta_ref[i * dd..(i + 1) * dd], dzi);
                    let c = cross_term(drift, law_ref, xi_pos, ys_ref, jy_ref, xs, zeta_ref)?;
                    dzi.iter_mut().zip(&c).for_each(|(o, c)| *o += c);
                    let gy = flat(&drift.xgrad(law_ref, &ys_ref[i * d..(i + 1) * d]).ok_or(Error::MissingCapability("xgrad"))?);
                    gemm_acc(d, 1.0, &gy, &jy_ref[i * dd..(i + 1) * dd], dji);
                    Ok(())
                })?;
            let g = flat(&drift.xgrad(&law, &xp).ok_or(Error::MissingCapability("xgrad"))?);
            gemm_acc(d, 1.0, &g, &xi, &mut dxi);
            let c = cross_term(drift, &law, &xp, &ys, &jy, xs, &zeta)?;
            dxi.iter_mut().zip(&c).for_each(|(o, c)| *o += c);
        }
        zeta.iter_mut().zip(&dz).for_each(|(z, v)| *z += dt * v);
        jy.iter_mut().zip(&dj).for_each(|(j, v)| *j += dt * v);
        xi.iter_mut().zip(&dxi).for_each(|(x, v)| *x += dt * v);

        {
            let pts = law.points_mut();
            pts.par_chunks_mut(d)
                .zip(vx.par_chunks(d))
                .zip(law_rngs.par_iter_mut())
                .for_each(|((x, v), r)| {
                    x.iter_mut().zip(v).for_each(|(x, v)| *x += v * dt);
                    add_noise(r, scale, x);
                });
            simulate::check_finite(pts, k + 1)?;
        }
        ys.par_chunks_mut(d)
            .zip(vy.par_chunks(d))
            .zip(y_rngs.par_iter_mut())
            .for_each(|((x, v), r)| {
                x.iter_mut().zip(v).for_each(|(x, v)| *x += v * dt);
                add_noise(r, scale, x);
            });
        simulate::check_finite(&ys, k + 1)?;
        xp.iter_mut().zip(&vp).for_each(|(x, v)| *x += v * dt);
        add_noise(&mut xp_rng, scale, &mut xp);
        simulate::check_finite(&xp, k + 1)?;

        record(&mut flow, &xi, &zeta, &jy);
    }
    flow.xi_law_terminal = zeta.chunks_exact(dd).map(|b| unflat(d, b)).collect();
    Ok(flow)
}

/// A recorded flow handed to [`check_decay`].
#[derive(Debug, Clone, Copy)]
pub enum FlowRecord<'a> {
    Tangent(&'a TangentFlow),
    Lions(&'a LionsFlow),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    /// Tangent: `max_t |J_t|`. Lions: running peak of the ensemble RMS up to the horizon.
    pub peak: f64,
    /// The same quantity at the horizon.
    pub tail: f64,
    /// Tangent: `max_t |J_t| e^{lambda t}`. Lions: `tail / peak`.
    pub ratio: f64,
    pub pass: bool,
}

fn horizon_index(times: &[f64], dt: f64, horizon: f64) -> Result<usize> {
    let last = *times.last().unwrap_or(&0.0);
    if !(horizon >= 0.0) || horizon > last + 1e-9 * dt.max(1.0) {
        return Err(Error::OutOfRange {
            what: "horizon",
            value: horizon.to_string(),
            range: format!("[0, {last}]"),
        });
    }
    Ok(((horizon / dt).round() as usize).min(times.len() - 1))
}

/// Checks `|J_t| <= e^{-lambda t}` (operator norm, up to [`TANGENT_SLACK`]) on `[0, horizon]`,
/// or that the Lions-flow ensemble RMS at the horizon is at most [`LIONS_DECAY_THRESHOLD`]
/// of its running peak. Refuses drifts whose sampled quadratic form fails at `lambda`.
pub fn check_decay(drift: &dyn Drift, lambda: f64, horizon: f64, flows: FlowRecord<'_>) -> Result<DecayReport> {
    let pairs = GaussianPairs::independent(drift.dim());
    let form = check_quadratic_form(drift, &pairs, lambda, PRECONDITION_SAMPLES, PRECONDITION_SEED)?;
    if !form.pass {
        return Err(Error::Precondition(format!(
            "quadratic form {} exceeds -lambda E|Y|^2 = {} at lambda = {lambda}",
            form.form, form.bound
        )));
    }
    match flows {
        FlowRecord::Tangent(t) => {
            let end = horizon_index(&t.times, t.dt, horizon)?;
            let mut peak: f64 = 0.0;
            let mut ratio: f64 = 0.0;
            for k in 0..=end {
                let norm = linalg::op_norm(&t.jacobian[k]);
                peak = peak.max(norm);
                ratio = ratio.max(norm * (lambda * t.times[k]).exp());
            }
            Ok(DecayReport {
                peak,
                tail: linalg::op_norm(&t.jacobian[end]),
                ratio,
                pass: ratio <= 1.0 + TANGENT_SLACK,
            })
        }
        FlowRecord::Lions(l) => {
            let end = horizon_index(&l.times, l.dt, horizon)?;
            let peak = l.xi_law_mean_square[..=end].iter().fold(0.0f64, |m, v| m.max(v.sqrt()));
            let tail = l.xi_law_mean_square[end].sqrt();
            let ratio = if peak > 0.0 { tail / peak } else { 0.0 };
            Ok(DecayReport {
                peak,
                tail,
                ratio,
                pass: ratio <= LIONS_DECAY_THRESHOLD,
            })
        }
    }
}

/// Rows `t,quantity,value` with quantities `tangent_norm`, or `lions_rms` and
/// `lions_point_norm`.
pub fn decay_table(flows: FlowRecord<'_>) -> Table {
    let mut t = Table::new(&["t", "quantity", "value"]);
    match flows {
        FlowRecord::Tangent(f) => {
            for (time, j) in f.times.iter().zip(&f.jacobian) {
                t.push(vec![fmt_float(*time), "tangent_norm".into(), fmt_float(linalg::op_norm(j))]);
            }
        }
        FlowRecord::Lions(f) => {
            for k in 0..f.times.len() {
                t.push(vec![fmt_float(f.times[k]), "lions_rms".into(), fmt_float(f.xi_law_mean_square[k].sqrt())]);
                t.push(vec![fmt_float(f.times[k]), "lions_point_norm".into(), fmt_float(f.xi_point[k].norm())]);
            }
        }
    }
    t
}

pub fn write_decay_csv<W: Write>(flows: FlowRecord<'_>, out: W) -> Result<()> {
    decay_table(flows).write(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{make_family, ModelFamily, Nonlinearity, PairKernel, Potential};

    fn linear(a: f64, b: f64) -> crate::DriftModel {
        make_family(&ModelFamily::linear_scalar(a, b, 0.0)).unwrap()
    }

    fn frozen(cfg: &SimConfig) -> ReferenceFlow {
        ReferenceFlow::frozen(EmpiricalMeasure::from_scalars(&[0.3]).unwrap(), cfg.dt, cfg.steps())
    }

    #[test]
    fn tangent_of_linear_drift_is_exponential() {
        let v = linear(-1.0, 0.0);
        let cfg = SimConfig::scalar(1, 1.0, 1e-4, 1.0, 3, 0.0, 1.0);
        let t = simulate_tangent(&*v, &cfg, &frozen(&cfg), &[0.5]).unwrap();
        assert_eq!(t.jacobian[0][(0, 0)], 1.0);
        let j = t.jacobian.last().unwrap()[(0, 0)];
        assert!((j - (-1f64).exp()).abs() < 1e-4, "{j}");
        assert!((j - 0.367879).abs() < 1e-4);
    }

    #[test]
    fn tangent_without_drift_is_identity() {
        let v = make_family(&ModelFamily::PairwiseKernel {
            dim: 2,
            phi: PairKernel::Difference { matrix: vec![vec![0.0; 2]; 2] },
        })
        .unwrap();
        let mut cfg = SimConfig::scalar(1, 0.0, 0.01, 1.0, 3, 0.0, 1.0);
        cfg.d = 2;
        cfg.init = simulate::InitLaw::Points { points: vec![vec![0.0, 0.0]] };
        let flow = ReferenceFlow::frozen(EmpiricalMeasure::from_points(&[vec![0.0, 1.0]]).unwrap(), 0.01, 100);
        let t = simulate_tangent(&*v, &cfg, &flow, &[0.2, -0.4]).unwrap();
        assert!(t.jacobian.iter().all(|j| *j == DMatrix::identity(2, 2)));
        assert_eq!(t.base_path.last().unwrap(), &vec![0.2, -0.4]);
    }

    #[test]
    fn tangent_matches_finite_differences() {
        let cfg = SimConfig::scalar(1, 1.0, 1e-3, 1.0, 11, 0.0, 1.0);
        let families = [
            ModelFamily::mean_nonlinearity_scalar(-1.0, Nonlinearity::Tanh { scale: 0.2 }),
            ModelFamily::PairwiseKernel { dim: 1, phi: PairKernel::SinDiff { scale: 0.5 } },
            ModelFamily::LangevinGradient {
                dim: 1,
                confinement: Potential::LogCosh { scale: 1.0 },
                interaction: Potential::Quadratic { curvature: 0.5 },
                mean_penalty: Potential::Zero,
            },
        ];
        let mu = EmpiricalMeasure::from_scalars(&[-0.4, 0.1, 0.9]).unwrap();
        let flow = ReferenceFlow::frozen(mu, cfg.dt, cfg.steps());
        for f in &families {
            let v = make_family(f).unwrap();
            let r = check_tangent_fd(&*v, &cfg, &flow, &[0.7], 1e-4).unwrap();
            assert!(r.max_rel_error <= 1e-3, "{f:?}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn lions_flow_matches_linear_closed_form() {
        let v = linear(-1.0, 0.5);
        let cfg = SimConfig::scalar(1, 1.0, 1e-3, 1.0, 5, 0.0, 0.25);
        let l = simulate_lions(&*v, &cfg, &[0.3], &[1.0], 400).unwrap();
        let zeta = (-0.5f64).exp() - (-1f64).exp();
        assert!((zeta - 0.238651).abs() < 1e-6);
        let got = l.xi_law_mean.last().unwrap()[(0, 0)];
        assert!((got - zeta).abs() / zeta < 5.0 / 20.0);
        // the Euler recursion zeta_{k+1} = (1 + (A+B)dt) zeta_k + B dt (1 + A dt)^k is exact here
        let (a, b, dt): (f64, f64, f64) = (-1.0, 0.5, 1e-3);
        let mut z = 0.0;
        for k in 0..1000 {
            z = (1.0 + (a + b) * dt) * z + b * dt * (1.0 + a * dt).powi(k);
        }
        assert!((got - z).abs() < 1e-12);
        assert!((l.xi_point.last().unwrap()[(0, 0)] - z).abs() < 1e-12);
        // chain rule for the limit mean: grad_x X + grad_W X = e^{(A+B)t}
        let total = l.tangent_mean.last().unwrap()[(0, 0)] + got;
        assert!((total - (-0.5f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn lions_flow_vanishes_without_measure_dependence() {
        let v = linear(-1.0, 0.0);
        let cfg = SimConfig::scalar(1, 1.0, 1e-2, 1.0, 5, 0.0, 0.25);
        let l = simulate_lions(&*v, &cfg, &[0.3], &[1.0], 100).unwrap();
        assert!(l.xi_point.iter().chain(&l.xi_law_mean).all(|m| m[(0, 0)] == 0.0));
    }

    #[test]
    fn lions_flow_starts_at_zero_and_grows_linearly() {
        let v = make_family(&ModelFamily::PairwiseKernel { dim: 1, phi: PairKernel::SinDiff { scale: 0.5 } }).unwrap();
        let cfg = SimConfig::scalar(1, 1.0, 1e-3, 0.02, 5, 0.0, 0.25);
        let l = simulate_lions(&*v, &cfg, &[0.3], &[1.0], 100).unwrap();
        assert_eq!(l.xi_law_mean_square[0], 0.0);
        assert_eq!(l.xi_point[0][(0, 0)], 0.0);
        let early = l.xi_law_mean_square[10].sqrt();
        let late = l.xi_law_mean_square[20].sqrt();
        assert!(early > 0.0 && early < 0.02);
        assert!((late / early - 2.0).abs() < 0.2, "{}", late / early);
    }

    #[test]
    fn lions_flow_is_consistent_in_ensemble_size() {
        let v = make_family(&ModelFamily::PairwiseKernel { dim: 1, phi: PairKernel::SinDiff { scale: 0.5 } }).unwrap();
        let cfg = SimConfig::scalar(1, 1.0, 1e-2, 1.0, 9, 0.0, 0.25);
        let m = 200;
        let small = simulate_lions(&*v, &cfg, &[0.3], &[1.0], m).unwrap();
        let large = simulate_lions(&*v, &cfg, &[0.3], &[1.0], 2 * m).unwrap();
        let (a, b) = (small.xi_law_mean.last().unwrap()[(0, 0)], large.xi_law_mean.last().unwrap()[(0, 0)]);
        assert!((a - b).abs() / b.abs() <= 3.0 / (m as f64).sqrt(), "{a} {b}");
    }

    #[test]
    fn lions_flow_requires_ensemble_and_capabilities() {
        let v = linear(-1.0, 0.5);
        let cfg = SimConfig::scalar(1, 1.0, 1e-2, 1.0, 5, 0.0, 0.25);
        assert!(matches!(simulate_lions(&*v, &cfg, &[0.0], &[0.0], 99), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn decay_of_linear_flows() {
        let v = linear(-1.0, 0.5);
        let cfg = SimConfig::scalar(1, 1.0, 1e-3, 10.0, 5, 0.0, 0.25);
        let l = simulate_lions(&*v, &cfg, &[0.0], &[1.0], 100).unwrap();
        let r = check_decay(&*v, 0.5, 10.0, FlowRecord::Lions(&l)).unwrap();
        assert!(r.pass, "{r:?}");
        // peak of e^{-t/2} - e^{-t} is 1/4 at t = 2 ln 2
        assert!((r.peak - 0.25).abs() < 1e-3);
        let tail = (-5f64).exp() - (-10f64).exp();
        assert!((r.tail - tail).abs() / tail < 0.02);

        let t = simulate_tangent(&*linear(-1.0, 0.0), &cfg, &frozen(&cfg), &[0.0]).unwrap();
        let r = check_decay(&*linear(-1.0, 0.0), 1.0, 10.0, FlowRecord::Tangent(&t)).unwrap();
        assert!(r.pass && r.ratio <= 1.0, "{r:?}");
    }

    #[test]
    fn decay_refuses_anti_monotone_drift() {
        let v = linear(1.0, 0.0);
        let cfg = SimConfig::scalar(1, 1.0, 1e-2, 1.0, 5, 0.0, 0.25);
        let t = simulate_tangent(&*v, &cfg, &frozen(&cfg), &[0.0]).unwrap();
        assert!(matches!(check_decay(&*v, 0.5, 1.0, FlowRecord::Tangent(&t)), Err(Error::Precondition(_))));
    }

    #[test]
    fn decay_table_layout() {
        let cfg = SimConfig::scalar(1, 1.0, 0.5, 1.0, 5, 0.0, 0.25);
        let t = simulate_tangent(&*linear(-1.0, 0.0), &cfg, &frozen(&cfg), &[0.0]).unwrap();
        let csv = decay_table(FlowRecord::Tangent(&t)).to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,quantity,value");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].contains(",tangent_norm,"));
    }
}
