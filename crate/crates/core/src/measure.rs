//! Probability-measure primitives.
//!
//! [`EmpiricalMeasure`] is the workhorse: a point cloud in `R^d`, uniformly
//! weighted unless it was built as a mixture or a quadrature of a Gaussian.
//! [`GaussianMeasure`] carries a mean and a PSD covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL, SYMMETRY_TOL};
use crate::quadrature;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    /// `None` means uniform weights `1/len`.
    weights: Option<Vec<f64>>,
}

impl EmpiricalMeasure {
    /// Uniform measure on the rows of a flat `len * dim` buffer.
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len() % dim,
            });
        }
        Ok(Self {
            dim,
            points,
            weights: None,
        })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().ok_or(Error::EmptyMeasure)?.len();
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(dim, points.concat())
    }

    /// One-dimensional convenience constructor.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    pub fn dirac(x: &[f64]) -> Self {
        Self {
            dim: x.len(),
            points: x.to_vec(),
            weights: None,
        }
    }

    /// Weighted point cloud; weights must be nonnegative and are normalised to sum to one.
    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(dim, points)?;
        if weights.len() != m.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} atoms",
                weights.len(),
                m.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidWeights("weights sum to zero".into()));
        }
        m.weights = Some(weights.into_iter().map(|w| w / total).collect());
        Ok(m)
    }

    /// `(1 - h) * self + h * other`, kept exact as a weighted measure on the union of atoms.
    pub fn mixture(&self, other: &Self, h: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::OutOfRange {
                what: "mixture weight",
                value: h.to_string(),
                range: "[0, 1]".into(),
            });
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let mut weights: Vec<f64> = (0..self.len()).map(|i| (1.0 - h) * self.weight(i)).collect();
        weights.extend((0..other.len()).map(|i| h * other.weight(i)));
        Ok(Self {
            dim: self.dim,
            points,
            weights: Some(weights),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn into_points(self) -> Vec<f64> {
        self.points
    }

    pub fn points_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.len() as f64,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    /// Iterator over `(weight, point)`.
    pub fn atoms(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        self.iter().enumerate().map(|(i, p)| (self.weight(i), p))
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        match &self.weights {
            None => {
                for p in self.iter() {
                    for (a, b) in m.iter_mut().zip(p) {
                        *a += b;
                    }
                }
                let n = self.len() as f64;
                m.iter_mut().for_each(|a| *a /= n);
            }
            Some(w) => {
                for (p, &wi) in self.iter().zip(w) {
                    for (a, b) in m.iter_mut().zip(p) {
                        *a += wi * b;
                    }
                }
            }
        }
        m
    }

    /// `int |x|^p dmu`.
    pub fn moment(&self, p: f64) -> f64 {
        self.integrate(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p))
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms().map(|(w, x)| w * f(x)).sum()
    }

    /// Covariance matrix (population normalisation).
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let d = self.dim;
        let mut c = DMatrix::zeros(d, d);
        for (w, x) in self.atoms() {
            for i in 0..d {
                for j in 0..d {
                    c[(i, j)] += w * (x[i] - m[i]) * (x[j] - m[j]);
                }
            }
        }
        c
    }
}

/// Arithmetic (or weighted) mean of the atoms.
pub fn mean(mu: &EmpiricalMeasure) -> Vec<f64> {
    mu.mean()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        linalg::check_symmetric(&cov, SYMMETRY_TOL)?;
        if mean.is_empty() {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        let lmin = linalg::min_eigenvalue(&cov);
        if lmin < -PSD_TOL {
            return Err(Error::InvalidCovariance(format!("eigenvalue {lmin:e} < 0")));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Symmetric square root of the covariance.
    pub fn cov_sqrt(&self) -> DMatrix<f64> {
        linalg::psd_sqrt(&self.cov)
    }

    /// `k`-fold product measure.
    pub fn product(&self, k: usize) -> Self {
        let d = self.dim();
        let mut mean = DVector::zeros(k * d);
        let mut cov = DMatrix::zeros(k * d, k * d);
        for b in 0..k {
            mean.rows_mut(b * d, d).copy_from(&self.mean);
            cov.view_mut((b * d, b * d), (d, d)).copy_from(&self.cov);
        }
        Self { mean, cov }
    }

    pub fn sample_into(&self, sqrt: &DMatrix<f64>, rng: &mut StreamRng, out: &mut [f64]) {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
        for i in 0..d {
            out[i] = self.mean[i] + (0..d).map(|j| sqrt[(i, j)] * z[j]).sum::<f64>();
        }
    }

    /// `count` iid draws as a uniform empirical measure.
    pub fn sample(&self, count: usize, rng: &mut StreamRng) -> EmpiricalMeasure {
        let d = self.dim();
        let sqrt = self.cov_sqrt();
        let mut pts = vec![0.0; count * d];
        for chunk in pts.chunks_exact_mut(d) {
            self.sample_into(&sqrt, rng, chunk);
        }
        EmpiricalMeasure::new(d, pts).expect("count > 0")
    }

    /// Tensor Gauss-Hermite quadrature with `nodes_per_dim` nodes per axis, as a
    /// weighted measure. Reproduces all moments of total degree `< 2 * nodes_per_dim`.
    pub fn quadrature(&self, nodes_per_dim: usize) -> EmpiricalMeasure {
        let d = self.dim();
        let rule = quadrature::gauss_hermite_normal(nodes_per_dim);
        let sqrt = self.cov_sqrt();
        let total = nodes_per_dim.pow(d as u32);
        let mut points = Vec::with_capacity(total * d);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let z: Vec<f64> = idx.iter().map(|&i| rule.nodes[i]).collect();
            let w: f64 = idx.iter().map(|&i| rule.weights[i]).product();
            for i in 0..d {
                points.push(self.mean[i] + (0..d).map(|j| sqrt[(i, j)] * z[j]).sum::<f64>());
            }
            weights.push(w);
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < nodes_per_dim {
                    break;
                }
                *slot = 0;
            }
        }
        EmpiricalMeasure::weighted(d, points, weights).expect("quadrature weights are positive")
    }

    /// Density in one dimension.
    pub fn pdf_1d(&self, x: f64) -> f64 {
        let v = self.cov[(0, 0)];
        let z = x - self.mean[0];
        (-0.5 * z * z / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }
}

/// Exact `W_p^p` between one-dimensional measures via the quantile coupling.
/// Handles unequal atom counts and weights by merging the cumulative-weight grids.
pub fn wp_1d_pow(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    for m in [mu, nu] {
        if m.dim() != 1 {
            return Err(Error::UnsupportedDimension {
                supported: 1,
                got: m.dim(),
            });
        }
    }
    let sorted = |m: &EmpiricalMeasure| {
        let mut v: Vec<(f64, f64)> = m.atoms().map(|(w, x)| (x[0], w)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let a = sorted(mu);
    let b = sorted(nu);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    loop {
        let step = ra.min(rb);
        total += step * (a[i].0 - b[j].0).abs().powf(p);
        ra -= step;
        rb -= step;
        let a_done = ra <= 1e-15;
        let b_done = rb <= 1e-15;
        if a_done {
            i += 1;
            if i == a.len() {
                break;
            }
            ra += a[i].1;
        }
        if b_done {
            j += 1;
            if j == b.len() {
                break;
            }
            rb += b[j].1;
        }
    }
    Ok(total)
}

/// Exact 1-Wasserstein distance in one dimension.
pub fn w1_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    wp_1d_pow(mu, nu, 1.0)
}

/// Exact 2-Wasserstein distance in one dimension.
pub fn w2_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    Ok(wp_1d_pow(mu, nu, 2.0)?.sqrt())
}

/// Ground cost for the entropic solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundCost {
    /// `|x - y|`, giving a 1-Wasserstein estimate.
    Euclidean,
    /// `|x - y|^2`, giving a 2-Wasserstein estimate.
    SquaredEuclidean,
}

impl GroundCost {
    fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            GroundCost::Euclidean => sq.sqrt(),
            GroundCost::SquaredEuclidean => sq,
        }
    }

    fn exponent(self) -> f64 {
        match self {
            GroundCost::Euclidean => 1.0,
            GroundCost::SquaredEuclidean => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SinkhornOptions {
    /// L1 violation of the row marginals at which the final stage stops.
    pub tolerance: f64,
    /// Iteration budget of the final (target-regularization) stage.
    pub max_iterations: usize,
    /// Upper bound on atoms per side.
    pub max_atoms: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 10_000,
            max_atoms: 10_000,
        }
    }
}

/// Entropic optimal transport value `OT_eps(a, b)` (dual objective).
///
/// Log-domain Sinkhorn with geometric epsilon-scaling warm starts, finished by damped
/// Newton steps on the dual when plain Sinkhorn stalls at small regularization. Every
/// Sinkhorn sweep and every Newton step counts against `max_iterations`.
pub fn entropic_ot(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    cost: GroundCost,
    regularization: f64,
    opts: &SinkhornOptions,
) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if !(regularization > 0.0 && regularization.is_finite()) {
        return Err(Error::Domain("regularization must be positive".into()));
    }
    if mu.len() > opts.max_atoms || nu.len() > opts.max_atoms {
        return Err(Error::Domain(format!(
            "at most {} atoms per side supported",
            opts.max_atoms
        )));
    }
    let (n, m) = (mu.len(), nu.len());
    let mut c = vec![0.0; n * m];
    for (i, x) in mu.iter().enumerate() {
        for (j, y) in nu.iter().enumerate() {
            c[i * m + j] = cost.eval(x, y);
        }
    }
    let mut dual = Dual {
        n,
        m,
        c,
        a: mu.weights(),
        b: nu.weights(),
        log_a: mu.weights().iter().map(|w| w.ln()).collect(),
        log_b: nu.weights().iter().map(|w| w.ln()).collect(),
        f: vec![0.0; n],
        g: vec![0.0; m],
        eps: 0.0,
    };
    let cmax = dual.c.iter().cloned().fold(0.0, f64::max);

    let mut eps = cmax.max(regularization);
    while eps > regularization {
        dual.eps = eps;
        for it in 0..200 {
            dual.sweep();
            if it % 5 == 4 && dual.violation() < 1e-4 {
                break;
            }
        }
        eps *= 0.5;
    }
    dual.eps = regularization;
    let mut used = 0;
    let mut gap = f64::INFINITY;
    // a short Sinkhorn phase settles the potentials before Newton takes over
    while used < opts.max_iterations.min(100) {
        dual.sweep();
        used += 1;
        if used % 5 == 0 || used == opts.max_iterations {
            gap = dual.violation();
            if gap < opts.tolerance {
                return Ok(dual.value());
            }
        }
    }
    while used < opts.max_iterations {
        used += 1;
        if !dual.newton_step() {
            dual.sweep();
        }
        gap = dual.violation();
        if gap < opts.tolerance {
            return Ok(dual.value());
        }
    }
    Err(Error::IterationLimit {
        iterations: used,
        gap,
    })
}

/// `OT_eps(a, a)` through the averaged symmetric fixed point `f <- (f + T f) / 2`,
/// which converges far faster than the two-sided iteration on a self-transport problem.
pub fn entropic_ot_symmetric(mu: &EmpiricalMeasure, cost: GroundCost, regularization: f64, opts: &SinkhornOptions) -> Result<f64> {
    if !(regularization > 0.0 && regularization.is_finite()) {
        return Err(Error::Domain("regularization must be positive".into()));
    }
    if mu.len() > opts.max_atoms {
        return Err(Error::Domain(format!(
            "at most {} atoms per side supported",
            opts.max_atoms
        )));
    }
    let n = mu.len();
    let mut c = vec![0.0; n * n];
    for (i, x) in mu.iter().enumerate() {
        for (j, y) in mu.iter().enumerate() {
            c[i * n + j] = cost.eval(x, y);
        }
    }
    let mut dual = Dual {
        n,
        m: n,
        c,
        a: mu.weights(),
        b: mu.weights(),
        log_a: mu.weights().iter().map(|w| w.ln()).collect(),
        log_b: mu.weights().iter().map(|w| w.ln()).collect(),
        f: vec![0.0; n],
        g: vec![0.0; n],
        eps: 0.0,
    };
    let cmax = dual.c.iter().cloned().fold(0.0, f64::max);
    let mut eps = cmax.max(regularization);
    loop {
        let last = eps <= regularization;
        dual.eps = eps.max(regularization);
        let (limit, tol) = if last { (opts.max_iterations, opts.tolerance) } else { (200, 1e-4) };
        let mut gap = f64::INFINITY;
        for it in 0..limit {
            dual.symmetric_sweep();
            if it % 5 == 4 {
                dual.g.clone_from(&dual.f);
                gap = dual.violation();
                if gap < tol {
                    break;
                }
            }
        }
        if last {
            dual.g.clone_from(&dual.f);
            if gap >= tol {
                return Err(Error::IterationLimit { iterations: limit, gap });
            }
            return Ok(dual.value());
        }
        eps *= 0.5;
    }
}

/// Dual potentials of the entropic problem with plan
/// `P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)`.
struct Dual {
    n: usize,
    m: usize,
    c: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    eps: f64,
}

impl Dual {
    fn sweep(&mut self) {
        let (n, m, eps) = (self.n, self.m, self.eps);
        let mut col = vec![0.0; n];
        for j in 0..m {
            for i in 0..n {
                col[i] = self.log_a[i] + (self.f[i] - self.c[i * m + j]) / eps;
            }
            self.g[j] = -eps * logsumexp(&col);
        }
        let mut row = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                row[j] = self.log_b[j] + (self.g[j] - self.c[i * m + j]) / eps;
            }
            self.f[i] = -eps * logsumexp(&row);
        }
    }

    fn symmetric_sweep(&mut self) {
        let (n, eps) = (self.n, self.eps);
        let mut row = vec![0.0; n];
        let mut next = vec![0.0; n];
        for (i, out) in next.iter_mut().enumerate() {
            for j in 0..n {
                row[j] = self.log_a[j] + (self.f[j] - self.c[i * n + j]) / eps;
            }
            *out = 0.5 * (self.f[i] - eps * logsumexp(&row));
        }
        self.f = next;
    }

    fn plan_with(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut p = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                p[i * m + j] =
                    (self.log_a[i] + self.log_b[j] + (f[i] + g[j] - self.c[i * m + j]) / self.eps).exp();
            }
        }
        p
    }

    fn marginals(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n, self.m);
        let mut r = vec![0.0; n];
        let mut s = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                r[i] += p[i * m + j];
                s[j] += p[i * m + j];
            }
        }
        (r, s)
    }

    /// L1 violation of both marginals.
    fn violation(&self) -> f64 {
        let p = self.plan_with(&self.f, &self.g);
        let (r, s) = self.marginals(&p);
        r.iter().zip(&self.a).map(|(x, y)| (x - y).abs()).sum::<f64>()
            + s.iter().zip(&self.b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    fn objective(&self, f: &[f64], g: &[f64]) -> f64 {
        let p = self.plan_with(f, g);
        let mass: f64 = p.iter().sum();
        if !mass.is_finite() {
            return f64::NEG_INFINITY;
        }
        dot_slices(f, &self.a) + dot_slices(g, &self.b) - self.eps * (mass - 1.0)
    }

    fn value(&self) -> f64 {
        self.objective(&self.f, &self.g)
    }

    /// One damped Newton step on the concave dual; false if no ascent was found.
    fn newton_step(&mut self) -> bool {
        let (n, m, eps) = (self.n, self.m, self.eps);
        let p = self.plan_with(&self.f, &self.g);
        let (r, s) = self.marginals(&p);
        // gradient of the dual objective
        let rhs: Vec<f64> = self
            .a
            .iter()
            .zip(&r)
            .map(|(a, r)| a - r)
            .chain(self.b.iter().zip(&s).map(|(b, s)| b - s))
            .collect();
        // negative Hessian times eps: [[diag r, P], [P^T, diag s]]
        let apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let mut acc = r[i] * v[i];
                for j in 0..m {
                    acc += p[i * m + j] * v[n + j];
                }
                out[i] = acc;
            }
            for j in 0..m {
                out[n + j] = s[j] * v[n + j];
            }
            for i in 0..n {
                let vi = v[i];
                for j in 0..m {
                    out[n + j] += p[i * m + j] * vi;
                }
            }
        };
        let diag: Vec<f64> = r.iter().chain(&s).map(|d| d.max(1e-300)).collect();
        let mut step = pcg(&apply, &diag, &rhs, 1e-10, PCG_ITERATIONS.min(4 * (n + m).max(50)));
        step.iter_mut().for_each(|v| *v *= eps);

        let current = self.objective(&self.f, &self.g);
        let slope = dot_slices(&rhs, &step);
        let mut t = 1.0;
        for _ in 0..30 {
            let f: Vec<f64> = self.f.iter().zip(&step[..n]).map(|(f, d)| f + t * d).collect();
            let g: Vec<f64> = self.g.iter().zip(&step[n..]).map(|(g, d)| g + t * d).collect();
            let trial = self.objective(&f, &g);
            if trial.is_finite() && trial >= current + 1e-4 * t * slope {
                self.f = f;
                self.g = g;
                return true;
            }
            t *= 0.5;
        }
        false
    }
}

/// Inner solves are truncated; the line search keeps each step an ascent step.
const PCG_ITERATIONS: usize = 300;

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive semidefinite
/// operator with a consistent right-hand side.
fn pcg(apply: &dyn Fn(&[f64], &mut [f64]), diag: &[f64], rhs: &[f64], rtol: f64, max_iter: usize) -> Vec<f64> {
    let k = rhs.len();
    let mut x = vec![0.0; k];
    let mut res = rhs.to_vec();
    let mut z: Vec<f64> = res.iter().zip(diag).map(|(r, d)| r / d).collect();
    let mut dir = z.clone();
    let mut rz = dot_slices(&res, &z);
    let target = rtol * dot_slices(rhs, rhs).sqrt();
    let mut ad = vec![0.0; k];
    for _ in 0..max_iter {
        if dot_slices(&res, &res).sqrt() <= target {
            break;
        }
        apply(&dir, &mut ad);
        let curv = dot_slices(&dir, &ad);
        if !(curv > 0.0) {
            break;
        }
        let alpha = rz / curv;
        for i in 0..k {
            x[i] += alpha * dir[i];
            res[i] -= alpha * ad[i];
        }
        z = res.iter().zip(diag).map(|(r, d)| r / d).collect();
        let rz_new = dot_slices(&res, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..k {
            dir[i] = z[i] + beta * dir[i];
        }
    }
    x
}

fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Debiased Sinkhorn divergence `OT(a,b) - OT(a,a)/2 - OT(b,b)/2` raised to `1/p`.
pub fn sinkhorn_distance(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    cost: GroundCost,
    regularization: f64,
    opts: &SinkhornOptions,
) -> Result<f64> {
    let ab = entropic_ot(mu, nu, cost, regularization, opts)?;
    let aa = entropic_ot_symmetric(mu, cost, regularization, opts)?;
    let bb = entropic_ot_symmetric(nu, cost, regularization, opts)?;
    let div = (ab - 0.5 * aa - 0.5 * bb).max(0.0);
    Ok(div.powf(1.0 / cost.exponent()))
}

/// Entropic estimate of `W_2` in any dimension (debiased Sinkhorn divergence).
pub fn w2_sinkhorn(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, regularization: f64) -> Result<f64> {
    sinkhorn_distance(
        mu,
        nu,
        GroundCost::SquaredEuclidean,
        regularization,
        &SinkhornOptions::default(),
    )
}

/// Relative entropy `KL(p || q)` between Gaussians. Returns `+inf` if `p` is singular.
pub fn kl_gaussian(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    let d = p.dim();
    let q_chol = nalgebra::Cholesky::new(q.cov.clone()).ok_or(Error::SingularCovariance)?;
    let lq = q_chol.l();
    if lq.diagonal().iter().any(|&v| v <= 1e-300) {
        return Err(Error::SingularCovariance);
    }
    // Relative eigenvalues of L_q^{-1} Sigma_p L_q^{-T}.
    let linv = lq
        .clone()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::SingularCovariance)?;
    let rel = &linv * &p.cov * linv.transpose() - DMatrix::identity(d, d);
    let eigs = linalg::eigenvalues(&rel);
    if eigs.iter().any(|&x| x <= -1.0) {
        return Ok(f64::INFINITY);
    }
    let diff = &q.mean - &p.mean;
    let z = &linv * diff;
    let quad = z.dot(&z);
    let trace_part: f64 = eigs.iter().map(|&x| linalg::entropy_gap(x)).sum();
    Ok((0.5 * (trace_part + quad)).max(0.0))
}

/// Bures-Wasserstein distance between Gaussians.
pub fn w2_gaussian(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    let mean_sq = (&p.mean - &q.mean).norm_squared();
    let sq = linalg::psd_sqrt(&q.cov);
    let cross = linalg::psd_sqrt(&(&sq * &p.cov * &sq));
    let bures = (p.cov.trace() + q.cov.trace() - 2.0 * cross.trace()).max(0.0);
    Ok((mean_sq + bures).sqrt())
}

/// Draws a uniform index in `0..n`; shared by bootstrap loops.
pub(crate) fn random_index(rng: &mut StreamRng, n: usize) -> usize {
    rng.random_range(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn cloud(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(v).unwrap()
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean(&cloud(&[0.0, 2.0])), vec![1.0]);
        assert_eq!(mean(&EmpiricalMeasure::dirac(&[3.5, -1.0])), vec![3.5, -1.0]);
        let m = EmpiricalMeasure::from_points(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean(&m), vec![0.5, 0.5]);
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert_eq!(EmpiricalMeasure::new(1, vec![]), Err(Error::EmptyMeasure));
        assert!(EmpiricalMeasure::from_points(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(EmpiricalMeasure::weighted(1, vec![1.0, 2.0], vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn w1_examples() {
        // brute force over both pairings of {0,2} -> {1,3}: (1+1)/2 = 1 vs (3+1)/2 = 2
        let brute = f64::min((1.0 + 1.0) / 2.0, (3.0 + 1.0) / 2.0);
        assert_eq!(w1_1d(&cloud(&[0.0, 2.0]), &cloud(&[1.0, 3.0])).unwrap(), brute);
        let mu = cloud(&[0.3, -1.0, 4.0]);
        assert_eq!(w1_1d(&mu, &mu).unwrap(), 0.0);
        assert_eq!(w1_1d(&cloud(&[0.0]), &cloud(&[-2.5])).unwrap(), 2.5);
    }

    #[test]
    fn w1_rejects_higher_dimension() {
        let m = EmpiricalMeasure::dirac(&[0.0, 0.0]);
        assert!(matches!(
            w1_1d(&m, &m),
            Err(Error::UnsupportedDimension { supported: 1, got: 2 })
        ));
    }

    #[test]
    fn w1_unequal_counts_matches_quantile_integral() {
        // {0} vs {0, 1}: half the mass moves distance 1
        assert!((w1_1d(&cloud(&[0.0]), &cloud(&[0.0, 1.0])).unwrap() - 0.5).abs() < 1e-15);
        // {0,1,2} vs {0,3}: quantile functions differ by 0,(3-1) on [1/3,1/2] etc.
        // Q_mu = 0 on (0,1/3], 1 on (1/3,2/3], 2 on (2/3,1]; Q_nu = 0 on (0,1/2], 3 after.
        let expected = (1.0 / 6.0) * 1.0 + (1.0 / 6.0) * 2.0 + (1.0 / 3.0) * 1.0;
        let got = w1_1d(&cloud(&[0.0, 1.0, 2.0]), &cloud(&[0.0, 3.0])).unwrap();
        assert!((got - expected).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn w1_symmetric_and_triangle(
            a in prop::collection::vec(-5.0f64..5.0, 1..12),
            b in prop::collection::vec(-5.0f64..5.0, 1..12),
            c in prop::collection::vec(-5.0f64..5.0, 1..12),
        ) {
            let (a, b, c) = (cloud(&a), cloud(&b), cloud(&c));
            let ab = w1_1d(&a, &b).unwrap();
            let ba = w1_1d(&b, &a).unwrap();
            let ac = w1_1d(&a, &c).unwrap();
            let cb = w1_1d(&c, &b).unwrap();
            prop_assert!((ab - ba).abs() < 1e-10);
            prop_assert!(ab <= ac + cb + 1e-10);
        }

        #[test]
        fn kl_nonnegative_and_zero_on_diagonal(
            m1 in -3.0f64..3.0, m2 in -3.0f64..3.0,
            v1 in 0.1f64..4.0, v2 in 0.1f64..4.0, r in -0.9f64..0.9,
        ) {
            let cov = |v: f64| DMatrix::from_row_slice(2, 2, &[v, r * v, r * v, v]);
            let p = GaussianMeasure::new(DVector::from_vec(vec![m1, 0.0]), cov(v1)).unwrap();
            let q = GaussianMeasure::new(DVector::from_vec(vec![m2, 1.0]), cov(v2)).unwrap();
            prop_assert!(kl_gaussian(&p, &q).unwrap() >= -1e-10);
            prop_assert!(kl_gaussian(&p, &p).unwrap().abs() < 1e-10);
        }

        #[test]
        fn pinsker_holds_for_scalar_gaussians(
            m1 in -2.0f64..2.0, m2 in -2.0f64..2.0, v1 in 0.2f64..3.0, v2 in 0.2f64..3.0,
        ) {
            let p = GaussianMeasure::scalar(m1, v1).unwrap();
            let q = GaussianMeasure::scalar(m2, v2).unwrap();
            let rule = quadrature::gauss_legendre(64, 0.0, 1.0);
            // L1 distance by composite Gauss-Legendre over a wide window
            let (lo, hi) = (-12.0, 12.0);
            let panels = 200;
            let h = (hi - lo) / panels as f64;
            let mut l1 = 0.0;
            for k in 0..panels {
                let a = lo + k as f64 * h;
                l1 += h * rule.integrate(|s| (p.pdf_1d(a + s * h) - q.pdf_1d(a + s * h)).abs());
            }
            let kl = kl_gaussian(&p, &q).unwrap();
            prop_assert!(l1 * l1 <= 2.0 * kl + 1e-9);
        }
    }

    #[test]
    fn kl_examples() {
        let n = |m, v| GaussianMeasure::scalar(m, v).unwrap();
        assert!(kl_gaussian(&n(0.0, 1.0), &n(0.0, 1.0)).unwrap().abs() < 1e-15);
        assert!((kl_gaussian(&n(1.0, 1.0), &n(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_gaussian(&n(0.0, 2.0), &n(0.0, 1.0)).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.153426).abs() < 1e-6);
    }

    #[test]
    fn kl_singular_cases() {
        let n = |m, v| GaussianMeasure::scalar(m, v).unwrap();
        assert_eq!(kl_gaussian(&n(0.0, 1.0), &n(0.0, 0.0)), Err(Error::SingularCovariance));
        assert_eq!(kl_gaussian(&n(0.0, 0.0), &n(0.0, 1.0)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gaussian_rejects_non_psd() {
        assert!(GaussianMeasure::scalar(0.0, -1e-6).is_err());
        assert!(GaussianMeasure::scalar(0.0, -1e-13).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianMeasure::new(DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn w2_gaussian_examples() {
        let n = |m, v| GaussianMeasure::scalar(m, v).unwrap();
        assert!(w2_gaussian(&n(0.5, 2.0), &n(0.5, 2.0)).unwrap() < 1e-7);
        assert!((w2_gaussian(&n(0.0, 1.0), &n(3.0, 1.0)).unwrap() - 3.0).abs() < 1e-12);
        // (sigma_1 - sigma_2)^2 = (2 - 1)^2
        assert!((w2_gaussian(&n(0.0, 4.0), &n(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_matches_gaussian_moments() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let g = GaussianMeasure::new(DVector::from_vec(vec![1.0, -2.0]), cov.clone()).unwrap();
        let q = g.quadrature(3);
        assert_eq!(q.len(), 9);
        let m = q.mean();
        assert!((m[0] - 1.0).abs() < 1e-13 && (m[1] + 2.0).abs() < 1e-13);
        assert!((q.covariance() - cov).amax() < 1e-12);
    }

    #[test]
    fn mixture_is_exact() {
        let a = cloud(&[0.0, 2.0]);
        let b = cloud(&[10.0]);
        let mix = a.mixture(&b, 0.25).unwrap();
        assert!((mix.mean()[0] - (0.75 * 1.0 + 0.25 * 10.0)).abs() < 1e-15);
        assert!(a.mixture(&b, 1.5).is_err());
    }

    #[test]
    fn sinkhorn_identity_and_atoms() {
        let mut rng = stream(3, 0, 0);
        let mu = GaussianMeasure::standard(2).sample(20, &mut rng);
        assert!(w2_sinkhorn(&mu, &mu, 1e-2).unwrap() <= 1e-6);
        let a = EmpiricalMeasure::dirac(&[0.0, 0.0]);
        let b = EmpiricalMeasure::dirac(&[3.0, 4.0]);
        assert!((w2_sinkhorn(&a, &b, 1e-3).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_matches_exact_quantile_w2_in_1d() {
        let mut rng = stream(11, 0, 0);
        let mu = GaussianMeasure::scalar(0.0, 1.0).unwrap().sample(64, &mut rng);
        let nu = GaussianMeasure::scalar(0.7, 2.0).unwrap().sample(64, &mut rng);
        let exact = w2_1d(&mu, &nu).unwrap();
        let approx = w2_sinkhorn(&mu, &nu, 1e-3).unwrap();
        assert!(((approx - exact) / exact).abs() < 0.02, "exact {exact} sinkhorn {approx}");
    }

    #[test]
    fn symmetric_solver_matches_two_sided() {
        let mut rng = stream(21, 0, 0);
        let mu = GaussianMeasure::standard(3).sample(40, &mut rng);
        let opts = SinkhornOptions::default();
        for (cost, eps) in [(GroundCost::Euclidean, 0.05), (GroundCost::SquaredEuclidean, 0.01)] {
            let two = entropic_ot(&mu, &mu, cost, eps, &opts).unwrap();
            let one = entropic_ot_symmetric(&mu, cost, eps, &opts).unwrap();
            assert!((two - one).abs() <= 1e-8 * (1.0 + two.abs()), "{two} vs {one}");
        }
    }

    #[test]
    fn sinkhorn_monotone_in_regularization() {
        let mut rng = stream(5, 0, 0);
        let mu = GaussianMeasure::standard(2).sample(30, &mut rng);
        let nu = GaussianMeasure::new(DVector::from_vec(vec![0.5, 0.0]), DMatrix::identity(2, 2) * 1.5)
            .unwrap()
            .sample(25, &mut rng);
        let values: Vec<f64> = [1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0]
            .iter()
            .map(|&e| w2_sinkhorn(&mu, &nu, e).unwrap())
            .collect();
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{values:?}");
        }
    }

    #[test]
    fn sinkhorn_reports_iteration_limit() {
        let mut rng = stream(9, 0, 0);
        let mu = GaussianMeasure::standard(1).sample(40, &mut rng);
        let nu = GaussianMeasure::scalar(1.0, 1.0).unwrap().sample(40, &mut rng);
        let opts = SinkhornOptions {
            tolerance: 1e-14,
            max_iterations: 3,
            ..Default::default()
        };
        let err = entropic_ot(&mu, &nu, GroundCost::SquaredEuclidean, 1e-3, &opts).unwrap_err();
        match err {
            Error::IterationLimit { gap, .. } => assert!(gap.is_finite() && gap > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
