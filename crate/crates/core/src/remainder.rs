//! The second-order remainder
//!
//! ```text
//! R(nu) = int_0^1 int | iint d2V(s nu + (1-s) mu, x, y, z) d(nu - mu)(y) d(nu - mu)(z) |^2 dnu(x) ds
//! ```
//!
//! with `mu` a reference limit law, and the replica experiments built on it: the decay of
//! `E[R(m^n_T)]`, weak-chaos gaps of measure functionals, and the empirical quantization
//! rate in three dimensions.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::drift::{Drift, DriftModel};
use crate::error::{Error, Result};
use crate::measure::{self, EmpiricalMeasure, GaussianMeasure, GroundCost, SinkhornOptions};
use crate::quadrature::{self, Rule};
use crate::rng::{self, StreamRng, AUX_REPLICA_BASE};
use crate::simulate::{self, SimConfig};
use crate::table::{fmt_float, Table};

const MC_REPLICA: u64 = AUX_REPLICA_BASE + 9;

pub const DEFAULT_S_NODES: usize = 32;
pub const MIN_MC_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceLaw {
    Gaussian(GaussianMeasure),
    Empirical(EmpiricalMeasure),
}

impl ReferenceLaw {
    pub fn dim(&self) -> usize {
        match self {
            ReferenceLaw::Gaussian(g) => g.dim(),
            ReferenceLaw::Empirical(e) => e.dim(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            ReferenceLaw::Gaussian(g) => g.mean().as_slice().to_vec(),
            ReferenceLaw::Empirical(e) => e.mean(),
        }
    }

    /// `count` iid draws (resampling atoms by weight for an empirical law).
    fn draw(&self, count: usize, r: &mut StreamRng) -> EmpiricalMeasure {
        match self {
            ReferenceLaw::Gaussian(g) => g.sample(count, r),
            ReferenceLaw::Empirical(e) => {
                let cum: Vec<f64> = e
                    .weights()
                    .iter()
                    .scan(0.0, |acc, w| {
                        *acc += w;
                        Some(*acc)
                    })
                    .collect();
                let total = *cum.last().expect("nonempty");
                let mut pts = Vec::with_capacity(count * e.dim());
                for _ in 0..count {
                    let u = r.random::<f64>() * total;
                    let i = cum.partition_point(|c| *c <= u).min(e.len() - 1);
                    pts.extend_from_slice(e.point(i));
                }
                EmpiricalMeasure::new(e.dim(), pts).expect("count > 0")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemainderSpec {
    pub drift: DriftModel,
    pub reference: ReferenceLaw,
    /// Quadrature in `s` on `[0, 1]`.
    pub s_nodes: Rule,
    /// Draws of the reference law per measure integral on the Monte Carlo path.
    pub mc_samples: usize,
    pub seed: u64,
}

impl RemainderSpec {
    /// 32-node Gauss-Legendre in `s` and 4096 reference draws.
    pub fn new(drift: DriftModel, reference: ReferenceLaw) -> Result<Self> {
        let spec = Self {
            drift,
            reference,
            s_nodes: quadrature::gauss_legendre(DEFAULT_S_NODES, 0.0, 1.0),
            mc_samples: 4096,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.drift.has_flat2() {
            return Err(Error::MissingCapability("flat2"));
        }
        if self.reference.dim() != self.drift.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.drift.dim(),
                got: self.reference.dim(),
            });
        }
        if self.s_nodes.nodes.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("s nodes must lie in [0, 1]".into()));
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::OutOfRange {
                what: "mc_samples",
                value: self.mc_samples.to_string(),
                range: format!(">= {MIN_MC_SAMPLES}"),
            });
        }
        Ok(())
    }
}

/// `R(nu)`. Drifts of the form `A x + c(mean)` have `d2V = D^2 c(mean)[y, z]`, so the inner
/// integral is `D^2 c(s mean_nu + (1-s) mean_mu)[dm, dm]` with `dm = mean_nu - mean_mu`,
/// independent of `x`; those are evaluated exactly. Other drifts go through
/// [`eval_remainder_mc`].
pub fn eval_remainder(spec: &RemainderSpec, nu: &EmpiricalMeasure) -> Result<f64> {
    spec.validate()?;
    if nu.dim() != spec.drift.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.drift.dim(),
            got: nu.dim(),
        });
    }
    if spec.drift.mean_affine().is_some() {
        let m_nu = nu.mean();
        let m_mu = spec.reference.mean();
        let dm: Vec<f64> = m_nu.iter().zip(&m_mu).map(|(a, b)| a - b).collect();
        let origin = vec![0.0; dm.len()];
        let mut total = 0.0;
        for (s, w) in spec.s_nodes.nodes.iter().zip(&spec.s_nodes.weights) {
            let ms: Vec<f64> = m_nu.iter().zip(&m_mu).map(|(a, b)| s * a + (1.0 - s) * b).collect();
            let inner = spec
                .drift
                .flat2(&EmpiricalMeasure::dirac(&ms), &origin, &dm, &dm)
                .ok_or(Error::MissingCapability("flat2"))?;
            total += w * inner.iter().map(|v| v * v).sum::<f64>();
        }
        return Ok(total);
    }
    Ok(eval_remainder_mc(spec, nu, 1)?.0)
}

fn add_scaled(acc: &mut [f64], s: f64, v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, v)| *a += s * v);
}

/// One Monte Carlo evaluation with `mc_samples` draws `z_i` of the reference law, shared by
/// all four cross terms; the `(mu, mu)` term pairs `z_i` with `z_{i+1}`.
fn remainder_batch(spec: &RemainderSpec, nu: &EmpiricalMeasure, batch: u64) -> Result<f64> {
    let drift = &spec.drift;
    let mut r = rng::stream(spec.seed, MC_REPLICA, batch);
    let zs = spec.reference.draw(spec.mc_samples, &mut r);
    let m = zs.len();
    let d = nu.dim();
    let flat2 = |mu: &EmpiricalMeasure, x: &[f64], y: &[f64], z: &[f64]| drift.flat2(mu, x, y, z).ok_or(Error::MissingCapability("flat2"));
    let mut total = 0.0;
    for (s, w) in spec.s_nodes.nodes.iter().zip(&spec.s_nodes.weights) {
        let mix = nu.mixture(&zs, 1.0 - s)?;
        let per_x: Vec<f64> = (0..nu.len())
            .into_par_iter()
            .map(|xi| -> Result<f64> {
                let x = nu.point(xi);
                let mut inner = vec![0.0; d];
                for (wa, ya) in nu.atoms() {
                    for (wb, yb) in nu.atoms() {
                        add_scaled(&mut inner, wa * wb, &flat2(&mix, x, ya, yb)?);
                    }
                    for zi in zs.iter() {
                        add_scaled(&mut inner, -wa / m as f64, &flat2(&mix, x, ya, zi)?);
                        add_scaled(&mut inner, -wa / m as f64, &flat2(&mix, x, zi, ya)?);
                    }
                }
                for i in 0..m {
                    add_scaled(&mut inner, 1.0 / m as f64, &flat2(&mix, x, zs.point(i), zs.point((i + 1) % m))?);
                }
                Ok(nu.weight(xi) * inner.iter().map(|v| v * v).sum::<f64>())
            })
            .collect::<Result<_>>()?;
        total += w * per_x.iter().sum::<f64>();
    }
    Ok(total)
}

/// Monte Carlo evaluation of `R(nu)` for any drift with `flat2`: the mean over `batches`
/// independent draws of the reference sample, with its standard error (zero for one batch).
pub fn eval_remainder_mc(spec: &RemainderSpec, nu: &EmpiricalMeasure, batches: usize) -> Result<(f64, f64)> {
    spec.validate()?;
    if batches == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let values = (0..batches as u64).map(|b| remainder_batch(spec, nu, b)).collect::<Result<Vec<_>>>()?;
    if batches == 1 {
        return Ok((values[0], 0.0));
    }
    Ok(simulate::mean_stderr(&values))
}

/// One row of a replica experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub value: f64,
    pub stderr: f64,
}

/// CSV with header `n,value,stderr`.
pub fn scaling_table(rows: &[ScalingRow]) -> Table {
    let mut t = Table::new(&["n", "value", "stderr"]);
    for r in rows {
        t.push(vec![r.n.to_string(), fmt_float(r.value), fmt_float(r.stderr)]);
    }
    t
}

/// Mean and standard error of per-replica values; antithetic pairs are averaged first.
pub fn replica_summary(values: &[f64], antithetic: bool) -> (f64, f64) {
    if antithetic {
        let pairs: Vec<f64> = values.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        simulate::mean_stderr(&pairs)
    } else {
        simulate::mean_stderr(values)
    }
}

/// `E[R(m^n_T)]` over `replicas` runs of `dynamics` for each `n`.
pub fn remainder_scaling(
    spec: &RemainderSpec,
    dynamics: &dyn Drift,
    cfg: &SimConfig,
    n_grid: &[usize],
    replicas: usize,
    antithetic: bool,
) -> Result<Vec<ScalingRow>> {
    spec.validate()?;
    n_grid
        .iter()
        .map(|&n| {
            let values = simulate::map_terminal(dynamics, &cfg.with_n(n), replicas, antithetic, |mu| eval_remainder(spec, mu))?
                .into_iter()
                .collect::<Result<Vec<f64>>>()?;
            let (value, stderr) = replica_summary(&values, antithetic);
            Ok(ScalingRow { n, value, stderr })
        })
        .collect()
}

/// How a functional behaves at the reference law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionalTag {
    Generic,
    /// `grad_W Phi(mu_T, .) = 0`.
    FirstOrderVanishing,
    /// First and second measure derivatives vanish at `mu_T`.
    SecondOrderVanishing,
}

type MeasureFn = dyn Fn(&EmpiricalMeasure) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct WeakFunctional {
    pub eval: Arc<MeasureFn>,
    pub tag: FunctionalTag,
}

impl std::fmt::Debug for WeakFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeakFunctional").field("tag", &self.tag).finish_non_exhaustive()
    }
}

impl WeakFunctional {
    pub fn new(tag: FunctionalTag, eval: impl Fn(&EmpiricalMeasure) -> f64 + Send + Sync + 'static) -> Self {
        Self { eval: Arc::new(eval), tag }
    }

    /// `nu -> mean(nu)_coord`.
    pub fn mean_coordinate(coord: usize) -> Self {
        Self::new(FunctionalTag::Generic, move |nu| nu.mean()[coord])
    }

    /// `nu -> (mean(nu)_coord - center)^power`; vanishing to order `power - 1` at `center`.
    pub fn centered_mean_power(coord: usize, center: f64, power: i32) -> Self {
        let tag = match power {
            p if p >= 3 => FunctionalTag::SecondOrderVanishing,
            2 => FunctionalTag::FirstOrderVanishing,
            _ => FunctionalTag::Generic,
        };
        Self::new(tag, move |nu| (nu.mean()[coord] - center).powi(power))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(FunctionalTag::SecondOrderVanishing, move |_| c)
    }

    pub fn apply(&self, nu: &EmpiricalMeasure) -> f64 {
        (self.eval)(nu)
    }
}

/// `|E[Phi(m^n_T)] - Phi(mu_T)|` for several functionals from one replica sweep;
/// `oracle_values[j]` is `Phi_j(mu_T)`. Returns one table per functional.
pub fn weak_chaos_gaps(
    functionals: &[WeakFunctional],
    dynamics: &dyn Drift,
    cfg: &SimConfig,
    n_grid: &[usize],
    replicas: usize,
    oracle_values: &[f64],
    antithetic: bool,
) -> Result<Vec<Vec<ScalingRow>>> {
    if functionals.len() != oracle_values.len() {
        return Err(Error::DimensionMismatch {
            expected: functionals.len(),
            got: oracle_values.len(),
        });
    }
    let mut tables = vec![Vec::with_capacity(n_grid.len()); functionals.len()];
    for &n in n_grid {
        let per_replica = simulate::map_terminal(dynamics, &cfg.with_n(n), replicas, antithetic, |mu| {
            functionals.iter().map(|f| f.apply(mu)).collect::<Vec<f64>>()
        })?;
        for (j, oracle) in oracle_values.iter().enumerate() {
            let values: Vec<f64> = per_replica.iter().map(|v| v[j]).collect();
            let (mean, stderr) = replica_summary(&values, antithetic);
            tables[j].push(ScalingRow {
                n,
                value: (mean - oracle).abs(),
                stderr,
            });
        }
    }
    Ok(tables)
}

pub fn weak_chaos_gap(
    functional: &WeakFunctional,
    dynamics: &dyn Drift,
    cfg: &SimConfig,
    n_grid: &[usize],
    replicas: usize,
    oracle_value: f64,
    antithetic: bool,
) -> Result<Vec<ScalingRow>> {
    Ok(weak_chaos_gaps(std::slice::from_ref(functional), dynamics, cfg, n_grid, replicas, &[oracle_value], antithetic)?.remove(0))
}

#[derive(Debug, Clone, Copy)]
pub struct QuantizationOptions {
    pub regularization: f64,
    pub sinkhorn: SinkhornOptions,
    /// Reference sample size as a multiple of `n`.
    pub reference_factor: usize,
}

impl Default for QuantizationOptions {
    fn default() -> Self {
        Self {
            regularization: 0.05,
            sinkhorn: SinkhornOptions {
                tolerance: 1e-6,
                ..SinkhornOptions::default()
            },
            reference_factor: 10,
        }
    }
}

/// `E[W_1(m^n, gamma)]` for the standard Gaussian `gamma` in `R^3`, each replica comparing
/// `n` draws against a fresh `10 n`-draw reference through the debiased entropic cost.
pub fn quantization_demo(d: usize, n_grid: &[usize], replicas: usize, seed: u64, opts: &QuantizationOptions) -> Result<Vec<ScalingRow>> {
    if d != 3 {
        return Err(Error::UnsupportedDimension { supported: 3, got: d });
    }
    if replicas < 2 {
        return Err(Error::InsufficientData { needed: 2, got: replicas });
    }
    let gamma = GaussianMeasure::standard(d);
    n_grid
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Config("n must be positive".into()));
            }
            let values = (0..replicas as u64)
                .into_par_iter()
                .map(|r| {
                    let sample = gamma.sample(n, &mut rng::stream(seed, r, 2 * n as u64));
                    let reference = gamma.sample(opts.reference_factor * n, &mut rng::stream(seed, r, 2 * n as u64 + 1));
                    measure::sinkhorn_distance(&sample, &reference, GroundCost::Euclidean, opts.regularization, &opts.sinkhorn)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (value, stderr) = simulate::mean_stderr(&values);
            Ok(ScalingRow { n, value, stderr })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{make_family, ModelFamily, Nonlinearity, PairKernel};
    use proptest::prelude::*;

    fn sin_model() -> DriftModel {
        make_family(&ModelFamily::mean_nonlinearity_scalar(-1.0, Nonlinearity::Sin { scale: 1.0 })).unwrap()
    }

    fn tanh_model() -> DriftModel {
        make_family(&ModelFamily::mean_nonlinearity_scalar(-1.0, Nonlinearity::Tanh { scale: 0.2 })).unwrap()
    }

    fn gaussian_ref(mean: f64, var: f64) -> ReferenceLaw {
        ReferenceLaw::Gaussian(GaussianMeasure::scalar(mean, var).unwrap())
    }

    #[test]
    fn sine_example_closed_form() {
        let spec = RemainderSpec::new(sin_model(), gaussian_ref(0.0, 1.0)).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&[0.5, 1.5]).unwrap();
        let r = eval_remainder(&spec, &nu).unwrap();
        let exact = 0.5 - 2f64.sin() / 4.0;
        assert!((exact - 0.272676).abs() < 1e-6);
        assert!((r - exact).abs() <= 1e-10, "{r}");
    }

    #[test]
    fn pairwise_drift_has_no_remainder() {
        let v = make_family(&ModelFamily::PairwiseKernel { dim: 1, phi: PairKernel::SinDiff { scale: 1.0 } }).unwrap();
        let mut spec = RemainderSpec::new(v, gaussian_ref(0.0, 1.0)).unwrap();
        spec.mc_samples = 1000;
        spec.s_nodes = quadrature::gauss_legendre(4, 0.0, 1.0);
        let nu = EmpiricalMeasure::from_scalars(&[0.2, -1.0, 3.0]).unwrap();
        assert_eq!(eval_remainder(&spec, &nu).unwrap(), 0.0);
    }

    #[test]
    fn matched_mean_gives_zero() {
        let reference = EmpiricalMeasure::from_scalars(&[-1.0, 0.0, 2.0, 3.0]).unwrap();
        let spec = RemainderSpec::new(tanh_model(), ReferenceLaw::Empirical(reference)).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&[-1.0, 3.0]).unwrap();
        assert_eq!(eval_remainder(&spec, &nu).unwrap(), 0.0);
    }

    #[test]
    fn single_atom_is_finite() {
        let spec = RemainderSpec::new(tanh_model(), gaussian_ref(0.3, 1.0)).unwrap();
        let r = eval_remainder(&spec, &EmpiricalMeasure::dirac(&[1.7])).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }

    #[test]
    fn missing_flat2_is_refused() {
        #[derive(Debug)]
        struct Bare;
        impl Drift for Bare {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, _: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
                out[0] = -x[0];
            }
            fn has_flat1(&self) -> bool {
                false
            }
            fn has_flat2(&self) -> bool {
                false
            }
            fn has_wgrad(&self) -> bool {
                false
            }
            fn has_xgrad(&self) -> bool {
                false
            }
        }
        let err = RemainderSpec::new(DriftModel::new(Bare), gaussian_ref(0.0, 1.0)).unwrap_err();
        assert_eq!(err, Error::MissingCapability("flat2"));
    }

    #[test]
    fn monte_carlo_path_agrees_with_closed_form() {
        let mut spec = RemainderSpec::new(sin_model(), gaussian_ref(0.0, 1.0)).unwrap();
        spec.mc_samples = 1000;
        spec.s_nodes = quadrature::gauss_legendre(8, 0.0, 1.0);
        spec.seed = 4;
        let nu = EmpiricalMeasure::from_scalars(&[0.4, 1.1, 1.6]).unwrap();
        let exact = eval_remainder(&spec, &nu).unwrap();
        let (mc, se) = eval_remainder_mc(&spec, &nu, 8).unwrap();
        assert!(se > 0.0);
        assert!((mc - exact).abs() <= 4.0 * se, "{mc} vs {exact} (se {se})");
    }

    #[test]
    fn large_iid_sample_is_consistent() {
        let spec = RemainderSpec::new(tanh_model(), gaussian_ref(0.5, 1.0)).unwrap();
        let g = GaussianMeasure::scalar(0.5, 1.0).unwrap();
        let small = eval_remainder(&spec, &g.sample(100, &mut rng::stream(1, 0, 0))).unwrap();
        let large = eval_remainder(&spec, &g.sample(100_000, &mut rng::stream(1, 0, 1))).unwrap();
        assert!(large < 1e-10 && large < small, "{small} {large}");
    }

    #[test]
    fn remainder_scaling_of_pairwise_drift_is_zero() {
        let v = make_family(&ModelFamily::PairwiseKernel { dim: 1, phi: PairKernel::SinDiff { scale: 1.0 } }).unwrap();
        let mut spec = RemainderSpec::new(v.clone(), gaussian_ref(0.0, 1.0)).unwrap();
        spec.mc_samples = 1000;
        spec.s_nodes = quadrature::gauss_legendre(2, 0.0, 1.0);
        let cfg = SimConfig::scalar(4, 1.0, 0.1, 0.5, 2, 0.0, 1.0);
        let rows = remainder_scaling(&spec, &*v, &cfg, &[1, 2, 4], 2, false).unwrap();
        assert!(rows.iter().all(|r| r.value == 0.0));
    }

    #[test]
    fn constant_functional_has_no_gap() {
        let v = tanh_model();
        let cfg = SimConfig::scalar(4, 1.0, 0.1, 0.5, 2, 1.0, 0.25);
        let rows = weak_chaos_gap(&WeakFunctional::constant(2.5), &*v, &cfg, &[2, 4], 10, 2.5, true).unwrap();
        assert!(rows.iter().all(|r| r.value == 0.0 && r.stderr == 0.0));
        assert_eq!(WeakFunctional::centered_mean_power(0, 0.0, 4).tag, FunctionalTag::SecondOrderVanishing);
        assert_eq!(WeakFunctional::mean_coordinate(0).tag, FunctionalTag::Generic);
    }

    #[test]
    fn replica_summary_pairs_antithetic_members() {
        let (m, se) = replica_summary(&[1.0, -1.0, 3.0, -3.0], true);
        assert_eq!((m, se), (0.0, 0.0));
        let (m, _) = replica_summary(&[1.0, 2.0, 3.0], false);
        assert_eq!(m, 2.0);
    }

    #[test]
    fn quantization_of_single_point_is_large() {
        let rows = quantization_demo(3, &[1], 8, 3, &QuantizationOptions::default()).unwrap();
        assert!(rows[0].value > 0.5, "{rows:?}");
        assert!(quantization_demo(2, &[1], 8, 3, &QuantizationOptions::default()).is_err());
    }

    #[test]
    fn identical_clouds_are_at_distance_zero() {
        let g = GaussianMeasure::standard(3);
        let a = g.sample(20, &mut rng::stream(5, 0, 0));
        let opts = QuantizationOptions::default();
        let w = measure::sinkhorn_distance(&a, &a, GroundCost::Euclidean, opts.regularization, &opts.sinkhorn).unwrap();
        assert!(w.abs() < 1e-6);
    }

    #[test]
    fn scaling_table_layout() {
        let csv = scaling_table(&[ScalingRow { n: 4, value: 0.5, stderr: 0.25 }]).to_csv_string();
        assert_eq!(csv.lines().next(), Some("n,value,stderr"));
        assert!(csv.lines().nth(1).unwrap().starts_with("4,5.0000000000000000e-1,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn remainder_is_nonnegative(points in proptest::collection::vec(-3.0f64..3.0, 1..20), mean in -2.0f64..2.0) {
            let spec = RemainderSpec::new(sin_model(), gaussian_ref(mean, 1.0)).unwrap();
            let r = eval_remainder(&spec, &EmpiricalMeasure::from_scalars(&points).unwrap()).unwrap();
            prop_assert!(r >= 0.0);
        }

        // in one dimension |dm| <= W_1, so R <= sup|g''|^2 W_1^4
        #[test]
        fn one_dimensional_domination(points in proptest::collection::vec(-3.0f64..3.0, 1..30), seed in 0u64..1000) {
            let reference = GaussianMeasure::scalar(0.3, 1.0).unwrap().sample(500, &mut rng::stream(seed, 0, 0));
            let model = make_family(&ModelFamily::mean_nonlinearity_scalar(-1.0, Nonlinearity::Tanh { scale: 0.7 })).unwrap();
            let spec = RemainderSpec::new(model, ReferenceLaw::Empirical(reference.clone())).unwrap();
            let nu = EmpiricalMeasure::from_scalars(&points).unwrap();
            let r = eval_remainder(&spec, &nu).unwrap();
            let sup = Nonlinearity::Tanh { scale: 0.7 }.hessian_sup();
            let w1 = measure::w1_1d(&nu, &reference).unwrap();
            prop_assert!(r <= sup * sup * w1.powi(4) * (1.0 + 1e-9) + 1e-15);
        }
    }
}
