//! The Yule generator stopped at level `n`, its semigroup, and the hierarchy of linear
//! differential inequalities
//!
//! ```text
//! f'(k) <= a k (f(k+1) - f(k)) 1_{k<n} + (b/n^2) k^p + k R_t - c f(k),   k = 1..n.
//! ```
//!
//! Vectors are indexed from zero: entry `k - 1` holds level `k`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::quadrature;
use crate::rng;
use crate::table::{fmt_float, Table};

/// Upper bound on `a n dt` (and `c dt`) for the RK4 integrators.
pub const STEP_BUDGET: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YuleGenerator {
    pub n: usize,
    pub a: f64,
}

impl YuleGenerator {
    pub fn new(n: usize, a: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("the Yule cap n must be positive".into()));
        }
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::Config("the Yule rate must be nonnegative".into()));
        }
        Ok(Self { n, a })
    }

    /// `G phi(k) = a k (phi(k+1) - phi(k))` below the cap, zero at `k = n`.
    pub fn apply(&self, phi: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n - 1 {
            out[i] = self.a * (i + 1) as f64 * (phi[i + 1] - phi[i]);
        }
        out[n - 1] = 0.0;
    }

    fn steps_for(&self, t: f64, extra_rate: f64) -> usize {
        let rate = self.a * self.n as f64 + extra_rate;
        ((t * rate / STEP_BUDGET).ceil() as usize).max(1)
    }
}

/// `e^{tG} phi` by RK4 on `phi' = G phi`.
pub fn semigroup_apply(gen: &YuleGenerator, phi: &[f64], t: f64) -> Result<Vec<f64>> {
    if phi.len() != gen.n {
        return Err(Error::DimensionMismatch {
            expected: gen.n,
            got: phi.len(),
        });
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::OutOfRange {
            what: "time",
            value: t.to_string(),
            range: "[0, inf)".into(),
        });
    }
    let mut x = phi.to_vec();
    if t == 0.0 {
        return Ok(x);
    }
    let steps = gen.steps_for(t, 0.0);
    let h = t / steps as f64;
    let n = gen.n;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for _ in 0..steps {
        gen.apply(&x, &mut k1);
        axpy_into(&x, &k1, h / 2.0, &mut tmp);
        gen.apply(&tmp, &mut k2);
        axpy_into(&x, &k2, h / 2.0, &mut tmp);
        gen.apply(&tmp, &mut k3);
        axpy_into(&x, &k3, h, &mut tmp);
        gen.apply(&tmp, &mut k4);
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(x)
}

fn axpy_into(x: &[f64], y: &[f64], s: f64, out: &mut [f64]) {
    for i in 0..x.len() {
        out[i] = x[i] + s * y[i];
    }
}

/// `m_q(k) = k^q`.
pub fn power_vector(n: usize, q: f64) -> Vec<f64> {
    (1..=n).map(|k| (k as f64).powf(q)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub q: u32,
    /// `max_{k,t} e^{tG} m_q(k) / (8 e^{qat} k^q)`.
    pub max_ratio: f64,
    /// Number of `(k, t)` with `e^{tG} m_q(k) > 8 e^{qat} k^q`.
    pub violations: usize,
    /// For `q = 1`: number of `(k, t)` with `e^{tG} m_1(k) > e^{at} k (1 + 1e-9)`.
    pub uncapped_violations: usize,
    /// Random ordered pairs `phi >= psi` whose images were not ordered.
    pub order_violations: usize,
    pub max_violation: f64,
}

impl MomentReport {
    pub fn pass(&self) -> bool {
        self.violations == 0 && self.uncapped_violations == 0 && self.order_violations == 0
    }
}

const ORDER_PAIRS: usize = 5;

/// Checks `e^{tG} m_q <= 8 e^{qat} m_q` coordinatewise on `t_grid`, the sharper
/// `e^{tG} m_1 <= e^{at} m_1` when `q = 1`, and order preservation on random pairs.
pub fn check_moment_bounds(gen: &YuleGenerator, t_grid: &[f64], q: u32) -> Result<MomentReport> {
    if !(1..=3).contains(&q) {
        return Err(Error::OutOfRange {
            what: "q",
            value: q.to_string(),
            range: "{1, 2, 3}".into(),
        });
    }
    let n = gen.n;
    let m = power_vector(n, q as f64);
    let mut report = MomentReport {
        q,
        max_ratio: 0.0,
        violations: 0,
        uncapped_violations: 0,
        order_violations: 0,
        max_violation: 0.0,
    };
    for &t in t_grid {
        let image = semigroup_apply(gen, &m, t)?;
        let growth = (q as f64 * gen.a * t).exp();
        for k in 0..n {
            let bound = 8.0 * growth * m[k];
            report.max_ratio = report.max_ratio.max(image[k] / bound);
            if image[k] > bound {
                report.violations += 1;
                report.max_violation = report.max_violation.max(image[k] - bound);
            }
            if q == 1 && image[k] > (gen.a * t).exp() * m[k] * (1.0 + 1e-9) {
                report.uncapped_violations += 1;
            }
        }
    }
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    let mut r = rng::stream(u64::from(q), rng::AUX_REPLICA_BASE + 4, n as u64);
    for _ in 0..ORDER_PAIRS {
        let psi: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let phi: Vec<f64> = psi.iter().map(|p| p + r.random_range(0.0..1.0)).collect();
        let a = semigroup_apply(gen, &phi, t_max)?;
        let b = semigroup_apply(gen, &psi, t_max)?;
        if a.iter().zip(&b).any(|(x, y)| x < &(y - 1e-12)) {
            report.order_violations += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyState {
    pub f: Vec<f64>,
    pub t: f64,
}

impl HierarchyState {
    /// Levels where `f` decreases in `k` or is negative, with the offending values.
    pub fn monotonicity_violations(&self) -> Vec<(usize, f64)> {
        let mut bad = Vec::new();
        for (i, &v) in self.f.iter().enumerate() {
            if v < 0.0 || (i > 0 && v < self.f[i - 1]) {
                bad.push((i + 1, v));
            }
        }
        bad
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchyParams {
    pub b: f64,
    pub c: f64,
    pub p: u32,
}

/// Solves the equality version of the hierarchy from `f0` at time 0 up to `t_end`
/// with RK4; `r` is sampled at the RK4 stage times.
pub fn integrate_hierarchy(
    gen: &YuleGenerator,
    params: HierarchyParams,
    r: &dyn Fn(f64) -> f64,
    f0: &[f64],
    t_end: f64,
) -> Result<HierarchyState> {
    let n = gen.n;
    if f0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: f0.len(),
        });
    }
    if !matches!(params.p, 2 | 3) {
        return Err(Error::OutOfRange {
            what: "p",
            value: params.p.to_string(),
            range: "{2, 3}".into(),
        });
    }
    if params.b < 0.0 || params.c < 0.0 {
        return Err(Error::Config("b and c must be nonnegative".into()));
    }
    let start = HierarchyState { f: f0.to_vec(), t: 0.0 };
    if let Some((k, v)) = start.monotonicity_violations().first() {
        return Err(Error::Precondition(format!(
            "initial f must be nonnegative and nondecreasing in k; level {k} has {v}"
        )));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::OutOfRange {
            what: "horizon",
            value: t_end.to_string(),
            range: "[0, inf)".into(),
        });
    }
    let nn = (n * n) as f64;
    let source: Vec<f64> = power_vector(n, params.p as f64).iter().map(|m| params.b * m / nn).collect();
    let rhs = |t: f64, f: &[f64], out: &mut [f64]| {
        gen.apply(f, out);
        let rt = r(t);
        for i in 0..n {
            out[i] += source[i] + (i + 1) as f64 * rt - params.c * f[i];
        }
    };
    let mut f = f0.to_vec();
    if t_end > 0.0 {
        let steps = gen.steps_for(t_end, params.c);
        let h = t_end / steps as f64;
        let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for s in 0..steps {
            let t = s as f64 * h;
            rhs(t, &f, &mut k1);
            axpy_into(&f, &k1, h / 2.0, &mut tmp);
            rhs(t + h / 2.0, &tmp, &mut k2);
            axpy_into(&f, &k2, h / 2.0, &mut tmp);
            rhs(t + h / 2.0, &tmp, &mut k3);
            axpy_into(&f, &k3, h, &mut tmp);
            rhs(t + h, &tmp, &mut k4);
            for i in 0..n {
                f[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    Ok(HierarchyState { f, t: t_end })
}

/// Parameters of the Gronwall-type bound, with the solution started at time `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p: u32,
    pub c0: f64,
    pub s: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub rhs: Vec<f64>,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// `int_0^h e^{r u} du`, stable near `r = 0`.
fn exp_integral(r: f64, h: f64) -> f64 {
    let x = r * h;
    if x.abs() < 1e-8 {
        h * (1.0 + x / 2.0)
    } else {
        x.exp_m1() / r
    }
}

/// Evaluates
/// `2 C0 k^2/n^2 e^{(2a-c)(T-s)} + (8 b k^p / n^2) int_s^T e^{(ap-c)(t-s)} dt + k int_s^T e^{(a-c)(t-s)} R_t dt`
/// (the last integral by 32-node Gauss-Legendre) and compares it with `result` level by level.
pub fn check_lemma_bound(
    f_s: &[f64],
    result: &HierarchyState,
    params: &LemmaParams,
    r: &dyn Fn(f64) -> f64,
) -> Result<LemmaReport> {
    let n = f_s.len();
    if result.f.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: result.f.len(),
        });
    }
    let nn = (n * n) as f64;
    for (i, &v) in f_s.iter().enumerate() {
        let k = (i + 1) as f64;
        let cap = params.c0 * k * k / nn;
        if v > cap * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!(
                "f_s({}) = {v} exceeds C0 k^2/n^2 = {cap}",
                i + 1
            )));
        }
    }
    let (a, c, p) = (params.a, params.c, params.p as f64);
    let h = params.t_end - params.s;
    if h < 0.0 {
        return Err(Error::Config("the lemma needs s <= T".into()));
    }
    let initial = 2.0 * params.c0 * (2.0 * a - c).mul_add(h, 0.0).exp() / nn;
    let source = 8.0 * params.b / nn * exp_integral(a * p - c, h);
    let forcing = if h > 0.0 {
        quadrature::gauss_legendre(32, params.s, params.t_end).integrate(|t| ((a - c) * (t - params.s)).exp() * r(t))
    } else {
        0.0
    };
    let mut rhs = Vec::with_capacity(n);
    let mut ratios = Vec::with_capacity(n);
    let mut max_ratio: f64 = 0.0;
    for i in 0..n {
        let k = (i + 1) as f64;
        let bound = initial * k * k + source * k.powf(p) + k * forcing;
        let ratio = if bound > 0.0 {
            result.f[i] / bound
        } else if result.f[i] > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        max_ratio = max_ratio.max(ratio);
        rhs.push(bound);
        ratios.push(ratio);
    }
    Ok(LemmaReport { rhs, ratios, max_ratio })
}

/// Forcing term of a certification case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Forcing {
    Zero,
    /// `R_t = scale / n^2`.
    InverseSquare { scale: f64 },
}

impl Forcing {
    pub fn at(&self, n: usize) -> impl Fn(f64) -> f64 {
        let value = match *self {
            Forcing::Zero => 0.0,
            Forcing::InverseSquare { scale } => scale / (n * n) as f64,
        };
        move |_| value
    }

    pub fn label(&self) -> String {
        match self {
            Forcing::Zero => "0".into(),
            Forcing::InverseSquare { scale } => format!("{scale}/n^2"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyCase {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub p: u32,
    pub c0: f64,
    pub t_end: f64,
    pub forcing: Forcing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOutcome {
    pub case: CertifyCase,
    pub state: HierarchyState,
    pub report: LemmaReport,
}

/// Integrates the equality system from the extremal start `f_0(k) = C0 k^2/n^2` and
/// evaluates the lemma bound at the horizon.
pub fn certify(case: &CertifyCase) -> Result<CertifyOutcome> {
    let gen = YuleGenerator::new(case.n, case.a)?;
    let nn = (case.n * case.n) as f64;
    let f0: Vec<f64> = (1..=case.n).map(|k| case.c0 * (k * k) as f64 / nn).collect();
    let r = case.forcing.at(case.n);
    let state = integrate_hierarchy(&gen, HierarchyParams { b: case.b, c: case.c, p: case.p }, &r, &f0, case.t_end)?;
    let report = check_lemma_bound(
        &f0,
        &state,
        &LemmaParams {
            a: case.a,
            b: case.b,
            c: case.c,
            p: case.p,
            c0: case.c0,
            s: 0.0,
            t_end: case.t_end,
        },
        &r,
    )?;
    Ok(CertifyOutcome {
        case: case.clone(),
        state,
        report,
    })
}

/// CSV with header `k,f_T,lemma_rhs,ratio`.
pub fn lemma_table(outcome: &CertifyOutcome) -> Table {
    let mut t = Table::new(&["k", "f_T", "lemma_rhs", "ratio"]);
    for i in 0..outcome.state.f.len() {
        t.push(vec![
            (i + 1).to_string(),
            fmt_float(outcome.state.f[i]),
            fmt_float(outcome.report.rhs[i]),
            fmt_float(outcome.report.ratios[i]),
        ]);
    }
    t
}
