//! Exact Gaussian laws for the linear mean-field model `V = b0 + A x + B mean(mu)`.
//!
//! The n-particle law started from iid Gaussians stays exchangeable Gaussian, so it is
//! described by a common mean, a within-particle block `V` and a cross-particle block
//! `C`. The covariance splits into the mean mode `E = V + (n-1) C`, driven by `A + B`,
//! and `n - 1` orthogonal modes `D = V - C`, driven by `A` alone:
//!
//! ```text
//! E' = (A+B) E + E (A+B)^T + 2 sigma^2 I,     D' = A D + D A^T + 2 sigma^2 I.
//! ```
//!
//! The limit covariance solves the same equation as `D`, and both are integrated by the
//! same RK4 code, which keeps the tiny `O(1/n)` differences free of integration noise.

use nalgebra::{DMatrix, DVector};

use crate::drift::ModelFamily;
use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};
use crate::measure::GaussianMeasure;
use crate::table::{fmt_float, Table};

/// Largest RK4 step used by the oracle.
pub const ODE_DT: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b0: DVector<f64>,
    pub sigma: f64,
}

impl LinearModel {
    pub fn scalar(a: f64, b: f64, b0: f64, sigma: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            b0: DVector::from_element(1, b0),
            sigma,
        }
    }

    pub fn from_family(family: &ModelFamily, sigma: f64) -> Result<Self> {
        match family {
            ModelFamily::LinearMeanField { a, b, b0 } => {
                let a = linalg::matrix_from_rows(a)?;
                let b = linalg::matrix_from_rows(b)?;
                let d = a.nrows();
                if !a.is_square() || b.shape() != (d, d) || b0.len() != d {
                    return Err(Error::Config("linear mean field: inconsistent shapes".into()));
                }
                if !(sigma > 0.0) {
                    return Err(Error::Config("the oracle needs sigma > 0".into()));
                }
                Ok(Self {
                    a,
                    b,
                    b0: DVector::from_vec(b0.clone()),
                    sigma,
                })
            }
            _ => Err(Error::Config("the Gaussian oracle needs the linear_mean_field family".into())),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn mean_drift(&self) -> DMatrix<f64> {
        &self.a + &self.b
    }

    fn noise(&self) -> f64 {
        2.0 * self.sigma * self.sigma
    }
}

/// Exchangeable Gaussian law of `n` particles in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub n: usize,
    pub d: usize,
    pub mean: DVector<f64>,
    pub var_block: DMatrix<f64>,
    pub cov_block: DMatrix<f64>,
}

impl GaussianState {
    /// `n` iid copies of `mu0`.
    pub fn iid(n: usize, mu0: &GaussianMeasure) -> Self {
        let d = mu0.dim();
        Self {
            n,
            d,
            mean: mu0.mean().clone(),
            var_block: mu0.cov().clone(),
            cov_block: DMatrix::zeros(d, d),
        }
    }

    /// `V - C`, the covariance of each orthogonal mode.
    pub fn orthogonal_block(&self) -> DMatrix<f64> {
        &self.var_block - &self.cov_block
    }

    /// `V + (n - 1) C`, `n` times the covariance of the particle average.
    pub fn mean_mode_block(&self) -> DMatrix<f64> {
        &self.var_block + &self.cov_block * (self.n as f64 - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        linalg::check_symmetric(&self.var_block, linalg::SYMMETRY_TOL)?;
        linalg::check_symmetric(&self.cov_block, linalg::SYMMETRY_TOL)?;
        for (what, m) in [("V - C", self.orthogonal_block()), ("V + (n-1) C", self.mean_mode_block())] {
            if self.n > 1 || what != "V - C" {
                let low = linalg::min_eigenvalue(&linalg::symmetrize(&m));
                if low < -PSD_TOL {
                    return Err(Error::InvalidCovariance(format!("{what} has eigenvalue {low}")));
                }
            }
        }
        Ok(())
    }

    /// The full `nd x nd` covariance; intended for small `n`.
    pub fn full_covariance(&self) -> DMatrix<f64> {
        block_matrix(self.n, &self.var_block, &self.cov_block)
    }
}

fn block_matrix(k: usize, diag: &DMatrix<f64>, off: &DMatrix<f64>) -> DMatrix<f64> {
    let d = diag.nrows();
    let mut m = DMatrix::zeros(k * d, k * d);
    for i in 0..k {
        for j in 0..k {
            let block = if i == j { diag } else { off };
            m.view_mut((i * d, j * d), (d, d)).copy_from(block);
        }
    }
    m
}

/// Law `mu_t` of the limit equation.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LimitState {
    pub fn from_gaussian(g: &GaussianMeasure) -> Self {
        Self {
            mean: g.mean().clone(),
            cov: g.cov().clone(),
        }
    }

    pub fn to_gaussian(&self) -> Result<GaussianMeasure> {
        GaussianMeasure::new(self.mean.clone(), linalg::symmetrize(&self.cov))
    }
}

fn lyapunov_rhs(a: &DMatrix<f64>, q: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = a * x + x * a.transpose();
    for i in 0..x.nrows() {
        r[(i, i)] += q;
    }
    r
}

/// One RK4 step of `X' = A X + X A^T + q I`.
fn lyapunov_step(a: &DMatrix<f64>, q: f64, x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let k1 = lyapunov_rhs(a, q, x);
    let k2 = lyapunov_rhs(a, q, &(x + &k1 * (h / 2.0)));
    let k3 = lyapunov_rhs(a, q, &(x + &k2 * (h / 2.0)));
    let k4 = lyapunov_rhs(a, q, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// One RK4 step of `m' = M m + c`.
fn affine_step(mm: &DMatrix<f64>, c: &DVector<f64>, m: &DVector<f64>, h: f64) -> DVector<f64> {
    let f = |v: &DVector<f64>| mm * v + c;
    let k1 = f(m);
    let k2 = f(&(m + &k1 * (h / 2.0)));
    let k3 = f(&(m + &k2 * (h / 2.0)));
    let k4 = f(&(m + &k3 * h));
    m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

fn substeps(t: f64) -> usize {
    ((t / ODE_DT) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// Joint state of the particle law and the limit law, advanced together.
#[derive(Debug, Clone)]
struct Coupled {
    mean: DVector<f64>,
    /// orthogonal modes of the particle law; equals the limit covariance
    orth: DMatrix<f64>,
    mean_mode: DMatrix<f64>,
    limit_mean: DVector<f64>,
    limit_cov: DMatrix<f64>,
}

impl Coupled {
    fn step(&mut self, model: &LinearModel, h: f64) {
        let ab = model.mean_drift();
        let q = model.noise();
        self.mean = affine_step(&ab, &model.b0, &self.mean, h);
        self.orth = lyapunov_step(&model.a, q, &self.orth, h);
        self.mean_mode = lyapunov_step(&ab, q, &self.mean_mode, h);
        self.limit_mean = affine_step(&ab, &model.b0, &self.limit_mean, h);
        self.limit_cov = lyapunov_step(&model.a, q, &self.limit_cov, h);
    }

    fn particle_state(&self, n: usize) -> GaussianState {
        let nf = n as f64;
        GaussianState {
            n,
            d: self.mean.len(),
            mean: self.mean.clone(),
            var_block: (&self.mean_mode + &self.orth * (nf - 1.0)) / nf,
            cov_block: (&self.mean_mode - &self.orth) / nf,
        }
    }

    fn limit_state(&self) -> LimitState {
        LimitState {
            mean: self.limit_mean.clone(),
            cov: self.limit_cov.clone(),
        }
    }
}

pub fn evolve_particle_law(model: &LinearModel, init: &GaussianState, t: f64) -> Result<GaussianState> {
    init.validate()?;
    check_time(t)?;
    let steps = substeps(t);
    let h = t / steps as f64;
    let ab = model.mean_drift();
    let q = model.noise();
    let mut mean = init.mean.clone();
    let mut orth = init.orthogonal_block();
    let mut mode = init.mean_mode_block();
    if t > 0.0 {
        for _ in 0..steps {
            mean = affine_step(&ab, &model.b0, &mean, h);
            orth = lyapunov_step(&model.a, q, &orth, h);
            mode = lyapunov_step(&ab, q, &mode, h);
        }
    }
    let nf = init.n as f64;
    Ok(GaussianState {
        n: init.n,
        d: init.d,
        mean,
        var_block: (&mode + &orth * (nf - 1.0)) / nf,
        cov_block: (&mode - &orth) / nf,
    })
}

pub fn evolve_limit_law(model: &LinearModel, init: &LimitState, t: f64) -> Result<LimitState> {
    check_time(t)?;
    let steps = substeps(t);
    let h = t / steps as f64;
    let ab = model.mean_drift();
    let mut mean = init.mean.clone();
    let mut cov = init.cov.clone();
    if t > 0.0 {
        for _ in 0..steps {
            mean = affine_step(&ab, &model.b0, &mean, h);
            cov = lyapunov_step(&model.a, model.noise(), &cov, h);
        }
    }
    Ok(LimitState { mean, cov })
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::OutOfRange {
            what: "time",
            value: t.to_string(),
            range: "[0, inf)".into(),
        });
    }
    Ok(())
}

fn check_level(state: &GaussianState, k: usize) -> Result<()> {
    if k == 0 || k > state.n {
        return Err(Error::OutOfRange {
            what: "k",
            value: k.to_string(),
            range: format!("[1, {}]", state.n),
        });
    }
    Ok(())
}

/// Joint law of the first `k` particles.
pub fn k_marginal(state: &GaussianState, k: usize) -> Result<GaussianMeasure> {
    check_level(state, k)?;
    let mean = DVector::from_iterator(k * state.d, (0..k).flat_map(|_| state.mean.iter().cloned()));
    GaussianMeasure::new(mean, block_matrix(k, &state.var_block, &state.cov_block))
}

/// `sum_i (lambda_i - 1 - ln lambda_i)` over the eigenvalues of `S^{-1} M`, computed from
/// `S^{-1/2} (M - S) S^{-1/2}` so that `M` close to `S` loses no digits.
fn relative_entropy_term(s_inv_sqrt: &DMatrix<f64>, m: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let x = s_inv_sqrt * (m - s) * s_inv_sqrt;
    linalg::eigenvalues(&linalg::symmetrize(&x))
        .into_iter()
        .map(|x| if x <= -1.0 { f64::INFINITY } else { linalg::entropy_gap(x) })
        .sum()
}

fn inverse_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = linalg::symmetrize(cov);
    let low = linalg::min_eigenvalue(&sym);
    if !(low > PSD_TOL) {
        return Err(Error::SingularCovariance);
    }
    Ok(linalg::psd_map(&sym, |l| 1.0 / l.sqrt()))
}

/// `H(pi^k || mu^{(x)k})` through the two eigenvalue groups of the exchangeable block
/// covariance: `V - C` with multiplicity `k - 1` and `V + (k-1) C` once.
pub fn marginal_entropy(state: &GaussianState, limit: &LimitState, k: usize) -> Result<f64> {
    check_level(state, k)?;
    let s = &limit.cov;
    let s_is = inverse_sqrt(s)?;
    let orth = state.orthogonal_block();
    let top = &orth + &state.cov_block * k as f64;
    let mut h = relative_entropy_term(&s_is, &top, s);
    if k > 1 {
        h += (k - 1) as f64 * relative_entropy_term(&s_is, &orth, s);
    }
    let delta = &s_is * (&state.mean - &limit.mean);
    Ok(0.5 * h + 0.5 * k as f64 * delta.norm_squared())
}

/// Integrand of the path entropy,
/// `(k / 4 sigma^2) E|V(mu_t, Y^1) - E[V(m^n_t, Y^1) | Y^1..Y^k]|^2`.
///
/// Gaussian conditioning gives `E[Y^j | Y^[k]] = m + C W^{-1} S` for `j > k`, with
/// `W = V + (k-1) C` and `S` the sum of centred tagged particles, so the gap equals
/// `B (m_mu - m) - (1/n) B K S` with `K = I + (n-k) C W^{-1}` and `Cov(S) = k W`.
pub fn path_entropy_rate(state: &GaussianState, limit: &LimitState, model: &LinearModel, k: usize) -> Result<f64> {
    check_level(state, k)?;
    let d = state.d;
    let kf = k as f64;
    let nf = state.n as f64;
    let w = &state.var_block + &state.cov_block * (kf - 1.0);
    let w_inv = linalg::symmetrize(&w)
        .try_inverse()
        .filter(|_| linalg::min_eigenvalue(&linalg::symmetrize(&w)) > PSD_TOL)
        .ok_or(Error::SingularCovariance)?;
    let kmat = DMatrix::identity(d, d) + &state.cov_block * &w_inv * (nf - kf);
    let bk = &model.b * kmat;
    let fluct = (&bk * (&w * kf) * bk.transpose()).trace() / (nf * nf);
    let bias = (&model.b * (&limit.mean - &state.mean)).norm_squared();
    Ok(kf / (4.0 * model.sigma * model.sigma) * (bias + fluct))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRow {
    pub n: usize,
    pub k: usize,
    pub t: f64,
    pub entropy: f64,
    /// `int_0^t path_entropy_rate`, trapezoidal on the RK4 grid.
    pub path_entropy: f64,
}

/// Marginal and path entropies for one `n`, every `k` in `k_grid` and every time in
/// `t_grid`, starting from `n` iid copies of `mu0`.
pub fn entropy_sweep(
    model: &LinearModel,
    mu0: &GaussianMeasure,
    n: usize,
    k_grid: &[usize],
    t_grid: &[f64],
) -> Result<Vec<EntropyRow>> {
    if let Some(&k) = k_grid.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::OutOfRange {
            what: "k",
            value: k.to_string(),
            range: format!("[1, {n}]"),
        });
    }
    let mut times: Vec<f64> = t_grid.to_vec();
    for &t in &times {
        check_time(t)?;
    }
    times.sort_by(f64::total_cmp);
    let mut state = Coupled {
        mean: mu0.mean().clone(),
        orth: mu0.cov().clone(),
        mean_mode: mu0.cov().clone(),
        limit_mean: mu0.mean().clone(),
        limit_cov: mu0.cov().clone(),
    };
    let rates = |s: &Coupled| -> Result<Vec<f64>> {
        let p = s.particle_state(n);
        let l = s.limit_state();
        k_grid.iter().map(|&k| path_entropy_rate(&p, &l, model, k)).collect()
    };
    let mut integral = vec![0.0; k_grid.len()];
    let mut prev_rates = rates(&state)?;
    let mut now = 0.0;
    let mut out = Vec::new();
    for &t in &times {
        if t > now {
            let steps = substeps(t - now);
            let h = (t - now) / steps as f64;
            for _ in 0..steps {
                state.step(model, h);
                let r = rates(&state)?;
                for i in 0..r.len() {
                    integral[i] += 0.5 * h * (prev_rates[i] + r[i]);
                }
                prev_rates = r;
            }
            now = t;
        }
        let p = state.particle_state(n);
        let l = state.limit_state();
        for (i, &k) in k_grid.iter().enumerate() {
            out.push(EntropyRow {
                n,
                k,
                t,
                entropy: marginal_entropy(&p, &l, k)?,
                path_entropy: integral[i],
            });
        }
    }
    // report in the caller's time order
    let mut ordered = Vec::with_capacity(out.len());
    for &t in t_grid {
        ordered.extend(out.iter().filter(|r| r.t == t).cloned());
    }
    ordered.dedup();
    Ok(ordered)
}

/// CSV with header `n,k,t,entropy,path_entropy`.
pub fn entropy_table(rows: &[EntropyRow]) -> Table {
    let mut t = Table::new(&["n", "k", "t", "entropy", "path_entropy"]);
    for r in rows {
        t.push(vec![
            r.n.to_string(),
            r.k.to_string(),
            fmt_float(r.t),
            fmt_float(r.entropy),
            fmt_float(r.path_entropy),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::kl_gaussian;
    use crate::rng;

    fn uit() -> LinearModel {
        LinearModel::scalar(-1.0, 0.5, 0.0, 1.0)
    }

    fn mu0() -> GaussianMeasure {
        GaussianMeasure::scalar(0.0, 0.25).unwrap()
    }

    fn at(model: &LinearModel, n: usize, t: f64) -> (GaussianState, LimitState) {
        let g = mu0();
        (
            evolve_particle_law(model, &GaussianState::iid(n, &g), t).unwrap(),
            evolve_limit_law(model, &LimitState::from_gaussian(&g), t).unwrap(),
        )
    }

    /// Brute-force RK4 on the full `nd x nd` system without the exchangeable reduction.
    fn full_matrix(model: &LinearModel, n: usize, mean0: &DVector<f64>, cov0: &DMatrix<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let d = model.dim();
        let mut m = DMatrix::zeros(n * d, n * d);
        let mut c = DVector::zeros(n * d);
        for i in 0..n {
            c.rows_mut(i * d, d).copy_from(&model.b0);
            for j in 0..n {
                let mut block = &model.b / n as f64;
                if i == j {
                    block += &model.a;
                }
                m.view_mut((i * d, j * d), (d, d)).copy_from(&block);
            }
        }
        let steps = 20_000;
        let h = t / steps as f64;
        let (mut mean, mut cov) = (mean0.clone(), cov0.clone());
        for _ in 0..steps {
            mean = affine_step(&m, &c, &mean, h);
            cov = lyapunov_step(&m, model.noise(), &cov, h);
        }
        (mean, cov)
    }

    #[test]
    fn decoupled_particles_keep_zero_cross_covariance() {
        let model = LinearModel::scalar(-1.0, 0.0, 0.0, 1.0);
        let start = GaussianState::iid(5, &GaussianMeasure::scalar(0.0, 0.0).unwrap());
        let s = evolve_particle_law(&model, &start, 1.0).unwrap();
        assert!(s.cov_block[(0, 0)].abs() < 1e-15);
        assert!((s.var_block[(0, 0)] - (1.0 - (-2f64).exp())).abs() < 1e-12);
        assert!((s.var_block[(0, 0)] - 0.864665).abs() < 1e-6);
    }

    #[test]
    fn reduction_matches_full_matrix_integration() {
        let model = uit();
        let (s, _) = at(&model, 2, 0.5);
        let (mean, cov) = full_matrix(&model, 2, &DVector::zeros(2), &(DMatrix::identity(2, 2) * 0.25), 0.5);
        assert!((s.full_covariance() - cov).amax() < 1e-8);
        assert!((mean[0] - s.mean[0]).abs() < 1e-12);

        // a two-dimensional, non-commuting case with drift and n = 5
        let model = LinearModel {
            a: DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, -0.2, -1.5]),
            b: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.2]),
            b0: DVector::from_vec(vec![0.3, -0.1]),
            sigma: 0.7,
        };
        let g = GaussianMeasure::new(DVector::from_vec(vec![1.0, -0.5]), DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap();
        let s = evolve_particle_law(&model, &GaussianState::iid(5, &g), 0.8).unwrap();
        let mean0 = DVector::from_iterator(10, (0..5).flat_map(|_| [1.0, -0.5]));
        let (mean, cov) = full_matrix(&model, 5, &mean0, &GaussianState::iid(5, &g).full_covariance(), 0.8);
        assert!((s.full_covariance() - cov).amax() < 1e-8);
        assert!((mean.rows(4, 2) - &s.mean).amax() < 1e-10);
    }

    #[test]
    fn closed_form_where_drifts_commute() {
        // scalar: E solves E' = 2(a+b) E + 2 s^2, D' = 2 a D + 2 s^2
        let (a, b, s2, v0) = (-1.0f64, 0.5f64, 1.0f64, 0.25f64);
        let n = 7;
        let t = 1.3;
        let ode = |r: f64| v0 * (2.0 * r * t).exp() + s2 / r * ((2.0 * r * t).exp() - 1.0);
        let (e, d) = (ode(a + b), ode(a));
        let (s, l) = at(&uit(), n, t);
        assert!((s.var_block[(0, 0)] - (e + (n as f64 - 1.0) * d) / n as f64).abs() < 1e-12);
        assert!((s.cov_block[(0, 0)] - (e - d) / n as f64).abs() < 1e-12);
        assert!((l.cov[(0, 0)] - d).abs() < 1e-12);
    }

    #[test]
    fn limit_law_examples() {
        let model = uit();
        let l = evolve_limit_law(&model, &LimitState { mean: DVector::from_element(1, 1.0), cov: DMatrix::zeros(1, 1) }, 2.0).unwrap();
        assert!((l.mean[0] - 0.367879).abs() < 1e-6);
        let quiet = LinearModel::scalar(-1.0, 0.5, 0.0, 0.0);
        let l = evolve_limit_law(&quiet, &LimitState { mean: DVector::zeros(1), cov: DMatrix::zeros(1, 1) }, 3.0).unwrap();
        assert_eq!(l.cov[(0, 0)], 0.0);
        let l = evolve_limit_law(&model, &LimitState { mean: DVector::zeros(1), cov: DMatrix::zeros(1, 1) }, 20.0).unwrap();
        assert!((l.cov[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_marginal_examples() {
        let (s, _) = at(&uit(), 2, 1.0);
        let one = k_marginal(&s, 1).unwrap();
        assert_eq!(one.cov()[(0, 0)], s.var_block[(0, 0)]);
        let full = k_marginal(&s, 2).unwrap();
        assert_eq!(full.cov(), &s.full_covariance());
        assert!(k_marginal(&s, 3).is_err());
        assert!(k_marginal(&s, 0).is_err());
    }

    #[test]
    fn entropy_vanishes_without_interaction() {
        let model = LinearModel::scalar(-1.0, 0.0, 0.3, 1.0);
        for t in [0.5, 2.0] {
            let (s, l) = at(&model, 10, t);
            for k in [1, 3, 10] {
                assert_eq!(marginal_entropy(&s, &l, k).unwrap(), 0.0);
                assert_eq!(path_entropy_rate(&s, &l, &model, k).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn entropy_matches_assembled_kl() {
        let model = uit();
        for (n, k) in [(2, 1), (2, 2), (5, 3), (8, 8)] {
            let (s, l) = at(&model, n, 1.0);
            let fast = marginal_entropy(&s, &l, k).unwrap();
            let brute = kl_gaussian(&k_marginal(&s, k).unwrap(), &l.to_gaussian().unwrap().product(k)).unwrap();
            assert!(fast > 0.0);
            assert!((fast - brute).abs() < 1e-10, "n={n} k={k}: {fast} vs {brute}");
        }
        // a shifted mean contributes the quadratic term
        let (mut s, l) = at(&model, 4, 1.0);
        s.mean[0] += 0.1;
        let fast = marginal_entropy(&s, &l, 2).unwrap();
        let brute = kl_gaussian(&k_marginal(&s, 2).unwrap(), &l.to_gaussian().unwrap().product(2)).unwrap();
        assert!((fast - brute).abs() < 1e-10);
    }

    #[test]
    fn entropy_needs_regular_limit() {
        let (s, mut l) = at(&uit(), 4, 1.0);
        l.cov[(0, 0)] = 0.0;
        assert_eq!(marginal_entropy(&s, &l, 1).unwrap_err(), Error::SingularCovariance);
    }

    #[test]
    fn entropy_is_nondecreasing_in_k() {
        let (s, l) = at(&uit(), 16, 1.0);
        let h: Vec<f64> = (1..=16).map(|k| marginal_entropy(&s, &l, k).unwrap()).collect();
        for w in h.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn sharp_rate_constant() {
        let model = uit();
        let scaled: Vec<f64> = [1_000usize, 10_000, 100_000, 1_000_000]
            .iter()
            .map(|&n| {
                let (s, l) = at(&model, n, 1.0);
                (n as f64).powi(2) * marginal_entropy(&s, &l, 1).unwrap()
            })
            .collect();
        assert!(scaled[3] > 0.0);
        assert!(((scaled[3] - scaled[2]) / scaled[3]).abs() < 1e-3, "{scaled:?}");
        assert!(((scaled[2] - scaled[1]) / scaled[2]).abs() < 1e-2, "{scaled:?}");
    }

    #[test]
    fn uniform_in_time_bound() {
        let rows = entropy_sweep(&uit(), &mu0(), 128, &[1], &[0.5, 1.0, 2.0, 5.0, 10.0, 20.0]).unwrap();
        let early = rows[..3].iter().map(|r| r.entropy).fold(0.0, f64::max);
        let all = rows.iter().map(|r| r.entropy).fold(0.0, f64::max);
        assert!(all <= 2.0 * early, "{all} vs {early}");
    }

    #[test]
    fn path_entropy_dominates_marginal_entropy() {
        for n in [4, 16, 64] {
            let rows = entropy_sweep(&uit(), &mu0(), n, &[1, 2, 4], &[0.5, 1.0, 2.0]).unwrap();
            for r in rows {
                assert!(r.path_entropy >= r.entropy, "{r:?}");
            }
        }
    }

    #[test]
    fn full_information_rate() {
        let model = uit();
        let (s, l) = at(&model, 6, 1.0);
        // with k = n the drift gap is B (m_mu - mean of all particles), whose variance is W_n / n
        let direct = 6.0 / 4.0 * 0.25 * s.mean_mode_block()[(0, 0)] / 6.0;
        assert!((path_entropy_rate(&s, &l, &model, 6).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn path_rate_matches_monte_carlo_conditioning() {
        let model = uit();
        let (s, l) = at(&model, 4, 1.0);
        let exact = path_entropy_rate(&s, &l, &model, 1).unwrap();
        // condition the full 4-dimensional Gaussian on its first coordinate
        let cov = s.full_covariance();
        let sqrt = cov.clone().cholesky().unwrap().l();
        let coef = cov.view((1, 0), (3, 1)) / cov[(0, 0)];
        let mut r = rng::stream(17, rng::AUX_REPLICA_BASE, 0);
        let draws = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        let mut z = [0.0; 4];
        for _ in 0..draws {
            rng::fill_normal(&mut r, &mut z);
            let y1 = s.mean[0] + sqrt[(0, 0)] * z[0];
            let rest: f64 = (0..3).map(|j| s.mean[0] + coef[j] * (y1 - s.mean[0])).sum();
            let cond_mean = (y1 + rest) / 4.0;
            let gap = 0.5 * (l.mean[0] - cond_mean);
            let v = gap * gap / 4.0;
            sum += v;
            sq += v * v;
        }
        let m = sum / draws as f64;
        let se = ((sq / draws as f64 - m * m) / draws as f64).sqrt();
        assert!((m - exact).abs() <= 4.0 * se, "{m} vs {exact} (se {se})");
    }

    #[test]
    fn sweep_rows_follow_requested_order() {
        let rows = entropy_sweep(&uit(), &mu0(), 8, &[1, 2], &[1.0, 0.5]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].t, rows[0].k), (1.0, 1));
        assert_eq!((rows[2].t, rows[2].k), (0.5, 1));
        let (s, l) = at(&uit(), 8, 0.5);
        assert!((rows[2].entropy - marginal_entropy(&s, &l, 1).unwrap()).abs() < 1e-15);
        let csv = entropy_table(&rows).to_csv_string();
        assert!(csv.starts_with("n,k,t,entropy,path_entropy\n8,1,"));
    }

    #[test]
    fn invalid_states_are_rejected() {
        let mut s = GaussianState::iid(3, &mu0());
        s.cov_block[(0, 0)] = 0.5;
        assert!(s.validate().is_err());
        assert!(evolve_particle_law(&uit(), &s, 1.0).is_err());
        assert!(LinearModel::from_family(&ModelFamily::mean_nonlinearity_scalar(-1.0, crate::drift::Nonlinearity::Zero), 1.0).is_err());
    }
}
