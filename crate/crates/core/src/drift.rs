//! Drift functionals `V(mu, x)` and their derivative stack.
//!
//! Conventions, for a drift with values in `R^d`:
//!
//! - `flat1(mu, x, y)` is the flat derivative `delta_m V(mu, x, y)`, normalised so that
//!   `flat1(mu, x, 0) = 0`.
//! - `flat2(mu, x, y, z)` is the second flat derivative, symmetric in `(y, z)`.
//! - `wgrad(mu, x, y)` is the Wasserstein gradient `grad_y flat1`, a `d x d` matrix with
//!   entry `(i, j) = d flat1_i / d y_j`.
//! - `xgrad(mu, x)` is the spatial Jacobian of `V`.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measure::{random_index, EmpiricalMeasure};
use crate::rng::{self, StreamRng, AUX_REPLICA_BASE};

pub trait Drift: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval(&self, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]);

    /// Drift at every row of `xs` against the same measure. The default is one
    /// [`Drift::eval`] per row; families that only see the mean override it to
    /// summarise `mu` once, which makes a particle step `O(n)` instead of `O(n^2)`.
    fn eval_batch(&self, mu: &EmpiricalMeasure, xs: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.eval(mu, x, o);
        }
    }

    fn flat1(&self, _mu: &EmpiricalMeasure, _x: &[f64], _y: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn flat2(&self, _mu: &EmpiricalMeasure, _x: &[f64], _y: &[f64], _z: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn wgrad(&self, _mu: &EmpiricalMeasure, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn xgrad(&self, _mu: &EmpiricalMeasure, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// If `V(mu, x) = A x + c(mean(mu))`, the matrix `A`. Such drifts depend on the
    /// measure only through its mean, their flat derivatives are (bi)linear in the
    /// measure arguments and their Wasserstein gradient is constant in `(x, y)`.
    fn mean_affine(&self) -> Option<&DMatrix<f64>> {
        None
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }

    /// Declared `sup |wgrad|_op`.
    fn wgrad_sup(&self) -> Option<f64> {
        None
    }

    fn has_flat1(&self) -> bool;
    fn has_flat2(&self) -> bool;
    fn has_wgrad(&self) -> bool;
    fn has_xgrad(&self) -> bool;
}

/// Shared, immutable handle on a drift.
#[derive(Clone)]
pub struct DriftModel(Arc<dyn Drift>);

impl DriftModel {
    pub fn new(drift: impl Drift + 'static) -> Self {
        Self(Arc::new(drift))
    }

    pub fn eval_vec(&self, mu: &EmpiricalMeasure, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval(mu, x, &mut out);
        out
    }
}

impl Deref for DriftModel {
    type Target = dyn Drift;
    fn deref(&self) -> &Self::Target {
        &*self.0
    }
}

impl fmt::Debug for DriftModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

// ---------------------------------------------------------------------------
// Building blocks

/// Smooth map `R^d -> R^d` applied to the mean (or to a kernel average).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    Zero,
    /// `scale * tanh(m_i)` componentwise.
    Tanh { scale: f64 },
    /// `scale * sin(m_i)` componentwise.
    Sin { scale: f64 },
    /// `offset + matrix * m`.
    Affine { offset: Vec<f64>, matrix: Vec<Vec<f64>> },
}

impl Nonlinearity {
    pub fn value(&self, m: &[f64]) -> Vec<f64> {
        match self {
            Nonlinearity::Zero => vec![0.0; m.len()],
            Nonlinearity::Tanh { scale } => m.iter().map(|v| scale * v.tanh()).collect(),
            Nonlinearity::Sin { scale } => m.iter().map(|v| scale * v.sin()).collect(),
            Nonlinearity::Affine { offset, matrix } => (0..m.len())
                .map(|i| offset[i] + matrix[i].iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
                .collect(),
        }
    }

    /// Jacobian, `(i, j) = d g_i / d m_j`.
    pub fn jacobian(&self, m: &[f64]) -> DMatrix<f64> {
        let d = m.len();
        match self {
            Nonlinearity::Zero => DMatrix::zeros(d, d),
            Nonlinearity::Tanh { scale } => DMatrix::from_diagonal(&DVector::from_iterator(
                d,
                m.iter().map(|v| scale * (1.0 - v.tanh().powi(2))),
            )),
            Nonlinearity::Sin { scale } => {
                DMatrix::from_diagonal(&DVector::from_iterator(d, m.iter().map(|v| scale * v.cos())))
            }
            Nonlinearity::Affine { matrix, .. } => DMatrix::from_fn(d, d, |i, j| matrix[i][j]),
        }
    }

    /// `sum_{jk} d^2 g_i / dm_j dm_k * u_j * v_k` for every component `i`.
    pub fn hessian_form(&self, m: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Nonlinearity::Zero | Nonlinearity::Affine { .. } => vec![0.0; m.len()],
            Nonlinearity::Tanh { scale } => m
                .iter()
                .zip(u.iter().zip(v))
                .map(|(x, (a, b))| {
                    let t = x.tanh();
                    scale * (-2.0 * t * (1.0 - t * t)) * a * b
                })
                .collect(),
            Nonlinearity::Sin { scale } => m
                .iter()
                .zip(u.iter().zip(v))
                .map(|(x, (a, b))| -scale * x.sin() * a * b)
                .collect(),
        }
    }

    pub fn jacobian_sup(&self, dim: usize) -> f64 {
        match self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Tanh { scale } | Nonlinearity::Sin { scale } => scale.abs(),
            Nonlinearity::Affine { matrix, .. } => {
                linalg::op_norm(&DMatrix::from_fn(dim, dim, |i, j| matrix[i][j]))
            }
        }
    }

    /// `sup |d^2 g_i|` over components (all built-ins are separable).
    pub fn hessian_sup(&self) -> f64 {
        match self {
            Nonlinearity::Zero | Nonlinearity::Affine { .. } => 0.0,
            // max of |2 tanh sech^2| is 4 / (3 sqrt 3)
            Nonlinearity::Tanh { scale } => scale.abs() * 4.0 / (3.0 * 3f64.sqrt()),
            Nonlinearity::Sin { scale } => scale.abs(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Nonlinearity::Zero => Ok(()),
            Nonlinearity::Tanh { scale } | Nonlinearity::Sin { scale } => finite(*scale, "scale"),
            Nonlinearity::Affine { offset, matrix } => {
                if offset.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: offset.len(),
                    });
                }
                let m = linalg::matrix_from_rows(matrix)?;
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: m.nrows(),
                    });
                }
                Ok(())
            }
        }
    }
}

/// Pairwise kernel `phi(x, y)` with values in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairKernel {
    /// `scale * sin(x_i - y_i)` componentwise.
    SinDiff { scale: f64 },
    /// `matrix * (y - x)`.
    Difference { matrix: Vec<Vec<f64>> },
    /// `strength * (y - x) * exp(-|x - y|^2 / (2 width^2))`.
    GaussianBump { strength: f64, width: f64 },
}

impl PairKernel {
    pub fn value(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match self {
            PairKernel::SinDiff { scale } => {
                for i in 0..x.len() {
                    out[i] = scale * (x[i] - y[i]).sin();
                }
            }
            PairKernel::Difference { matrix } => {
                for i in 0..x.len() {
                    out[i] = matrix[i].iter().enumerate().map(|(j, a)| a * (y[j] - x[j])).sum();
                }
            }
            PairKernel::GaussianBump { strength, width } => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let e = strength * (-r2 / (2.0 * width * width)).exp();
                for i in 0..x.len() {
                    out[i] = e * (y[i] - x[i]);
                }
            }
        }
    }

    /// `(i, j) = d phi_i / d y_j`.
    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let d = x.len();
        match self {
            PairKernel::SinDiff { scale } => DMatrix::from_diagonal(&DVector::from_iterator(
                d,
                (0..d).map(|i| -scale * (x[i] - y[i]).cos()),
            )),
            PairKernel::Difference { matrix } => DMatrix::from_fn(d, d, |i, j| matrix[i][j]),
            PairKernel::GaussianBump { strength, width } => {
                let w2 = width * width;
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let e = strength * (-r2 / (2.0 * w2)).exp();
                DMatrix::from_fn(d, d, |i, j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    e * (delta - (y[i] - x[i]) * (y[j] - x[j]) / w2)
                })
            }
        }
    }

    /// `(i, j) = d phi_i / d x_j`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        // every built-in kernel is a function of y - x
        -self.grad_y(x, y)
    }

    pub fn grad_y_sup(&self, dim: usize) -> f64 {
        match self {
            PairKernel::SinDiff { scale } => scale.abs(),
            PairKernel::Difference { matrix } => {
                linalg::op_norm(&DMatrix::from_fn(dim, dim, |i, j| matrix[i][j]))
            }
            // eigenvalues of e (I - u u^T / w^2) lie in e * [1 - r^2/w^2, 1]; the sup over r
            // of max(1, (r^2/w^2 - 1) e^{-r^2/2w^2}) is 1
            PairKernel::GaussianBump { strength, .. } => strength.abs(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            PairKernel::SinDiff { scale } => finite(*scale, "scale"),
            PairKernel::Difference { matrix } => {
                let m = linalg::matrix_from_rows(matrix)?;
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: m.nrows(),
                    });
                }
                Ok(())
            }
            PairKernel::GaussianBump { strength, width } => {
                finite(*strength, "strength")?;
                if !(*width > 0.0) {
                    return Err(Error::Config("gaussian bump width must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// Separable scalar potential `R^d -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `curvature * |x|^2 / 2`.
    Quadratic { curvature: f64 },
    /// `scale * sum_i log cosh(x_i)`.
    LogCosh { scale: f64 },
}

impl Potential {
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = self.d1(*v);
        }
    }

    fn d1(&self, v: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { curvature } => curvature * v,
            Potential::LogCosh { scale } => scale * v.tanh(),
        }
    }

    fn d2(&self, v: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { curvature } => *curvature,
            Potential::LogCosh { scale } => scale * (1.0 - v.tanh().powi(2)),
        }
    }

    fn d3(&self, v: f64) -> f64 {
        match self {
            Potential::Zero | Potential::Quadratic { .. } => 0.0,
            Potential::LogCosh { scale } => {
                let t = v.tanh();
                -2.0 * scale * t * (1.0 - t * t)
            }
        }
    }

    pub fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(x.len(), x.iter().map(|v| self.d2(*v))))
    }

    pub fn hessian_sup(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { curvature } => curvature.abs(),
            Potential::LogCosh { scale } => scale.abs(),
        }
    }

    /// Infimum of the Hessian's smallest eigenvalue.
    pub fn convexity(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { curvature } => *curvature,
            Potential::LogCosh { scale } => scale.min(0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Potential::Zero => Ok(()),
            Potential::Quadratic { curvature } => finite(*curvature, "curvature"),
            Potential::LogCosh { scale } => finite(*scale, "scale"),
        }
    }
}

fn finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be finite")))
    }
}

// ---------------------------------------------------------------------------
// Families

/// Serializable description of a built-in drift family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    /// `V = b0 + A x + B mean(mu)`.
    LinearMeanField {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        b0: Vec<f64>,
    },
    /// `V = A x + g(mean(mu))`.
    MeanNonlinearity { a: Vec<Vec<f64>>, g: Nonlinearity },
    /// `V = int phi(x, y) dmu(y)`.
    PairwiseKernel { dim: usize, phi: PairKernel },
    /// `V = A x + G(int h(x, y) dmu(y))`.
    KernelComposition {
        a: Vec<Vec<f64>>,
        outer: Nonlinearity,
        inner: PairKernel,
    },
    /// `V = -grad U(x) - int grad W(x - y) dmu(y) - grad g(mean(mu))`.
    LangevinGradient {
        dim: usize,
        confinement: Potential,
        interaction: Potential,
        mean_penalty: Potential,
    },
}

impl ModelFamily {
    pub fn linear_scalar(a: f64, b: f64, b0: f64) -> Self {
        ModelFamily::LinearMeanField {
            a: vec![vec![a]],
            b: vec![vec![b]],
            b0: vec![b0],
        }
    }

    pub fn mean_nonlinearity_scalar(a: f64, g: Nonlinearity) -> Self {
        ModelFamily::MeanNonlinearity { a: vec![vec![a]], g }
    }
}

/// Builds the drift of a family with every analytically available derivative slot.
pub fn make_family(spec: &ModelFamily) -> Result<DriftModel> {
    Ok(match spec {
        ModelFamily::LinearMeanField { a, b, b0 } => {
            let a = linalg::matrix_from_rows(a)?;
            let b = linalg::matrix_from_rows(b)?;
            let d = a.nrows();
            if !a.is_square() || b.shape() != (d, d) || b0.len() != d {
                return Err(Error::Config("linear mean field: A, B must be d x d and b0 length d".into()));
            }
            DriftModel::new(LinearMeanField {
                a,
                b,
                b0: DVector::from_vec(b0.clone()),
            })
        }
        ModelFamily::MeanNonlinearity { a, g } => {
            let a = linalg::matrix_from_rows(a)?;
            if !a.is_square() {
                return Err(Error::Config("mean nonlinearity: A must be square".into()));
            }
            g.validate(a.nrows())?;
            DriftModel::new(MeanNonlinearity { a, g: g.clone() })
        }
        ModelFamily::PairwiseKernel { dim, phi } => {
            if *dim == 0 {
                return Err(Error::Config("dim must be positive".into()));
            }
            phi.validate(*dim)?;
            DriftModel::new(PairwiseKernelDrift {
                dim: *dim,
                phi: phi.clone(),
            })
        }
        ModelFamily::KernelComposition { a, outer, inner } => {
            let a = linalg::matrix_from_rows(a)?;
            if !a.is_square() {
                return Err(Error::Config("kernel composition: A must be square".into()));
            }
            outer.validate(a.nrows())?;
            inner.validate(a.nrows())?;
            DriftModel::new(KernelComposition {
                a,
                outer: outer.clone(),
                inner: inner.clone(),
            })
        }
        ModelFamily::LangevinGradient {
            dim,
            confinement,
            interaction,
            mean_penalty,
        } => {
            if *dim == 0 {
                return Err(Error::Config("dim must be positive".into()));
            }
            confinement.validate()?;
            interaction.validate()?;
            mean_penalty.validate()?;
            DriftModel::new(LangevinGradient {
                dim: *dim,
                confinement: confinement.clone(),
                interaction: interaction.clone(),
                mean_penalty: mean_penalty.clone(),
            })
        }
    })
}

fn matvec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..x.len()).map(|j| m[(i, j)] * x[j]).sum();
    }
}

fn matvec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    matvec_into(m, x, &mut out);
    out
}

#[derive(Debug, Clone)]
pub struct LinearMeanField {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b0: DVector<f64>,
}

impl LinearMeanField {
    fn offset(&self, mean: &[f64]) -> Vec<f64> {
        let bm = matvec(&self.b, mean);
        bm.iter().zip(self.b0.iter()).map(|(a, b)| a + b).collect()
    }
}

impl Drift for LinearMeanField {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
        let c = self.offset(&mu.mean());
        matvec_into(&self.a, x, out);
        out.iter_mut().zip(&c).for_each(|(o, c)| *o += c);
    }

    fn eval_batch(&self, mu: &EmpiricalMeasure, xs: &[f64], out: &mut [f64]) {
        let c = self.offset(&mu.mean());
        affine_batch(&self.a, &c, xs, out);
    }

    fn flat1(&self, _mu: &EmpiricalMeasure, _x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        Some(matvec(&self.b, y))
    }

    fn flat2(&self, _mu: &EmpiricalMeasure, x: &[f64], _y: &[f64], _z: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; x.len()])
    }

    fn wgrad(&self, _mu: &EmpiricalMeasure, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.b.clone())
    }

    fn xgrad(&self, _mu: &EmpiricalMeasure, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }

    fn mean_affine(&self) -> Option<&DMatrix<f64>> {
        Some(&self.a)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(linalg::op_norm(&self.a) + linalg::op_norm(&self.b))
    }

    fn wgrad_sup(&self) -> Option<f64> {
        Some(linalg::op_norm(&self.b))
    }

    fn has_flat1(&self) -> bool {
        true
    }
    fn has_flat2(&self) -> bool {
        true
    }
    fn has_wgrad(&self) -> bool {
        true
    }
    fn has_xgrad(&self) -> bool {
        true
    }
}

fn affine_batch(a: &DMatrix<f64>, c: &[f64], xs: &[f64], out: &mut [f64]) {
    let d = c.len();
    if d == 1 {
        let a = a[(0, 0)];
        let c = c[0];
        for (o, x) in out.iter_mut().zip(xs) {
            *o = a * x + c;
        }
        return;
    }
    for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        matvec_into(a, x, o);
        o.iter_mut().zip(c).for_each(|(o, c)| *o += c);
    }
}

#[derive(Debug, Clone)]
pub struct MeanNonlinearity {
    pub a: DMatrix<f64>,
    pub g: Nonlinearity,
}

impl Drift for MeanNonlinearity {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
        let c = self.g.value(&mu.mean());
        matvec_into(&self.a, x, out);
        out.iter_mut().zip(&c).for_each(|(o, c)| *o += c);
    }

    fn eval_batch(&self, mu: &EmpiricalMeasure, xs: &[f64], out: &mut [f64]) {
        let c = self.g.value(&mu.mean());
        affine_batch(&self.a, &c, xs, out);
    }

    fn flat1(&self, mu: &EmpiricalMeasure, _x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        Some(matvec(&self.g.jacobian(&mu.mean()), y))
    }

    fn flat2(&self, mu: &EmpiricalMeasure, _x: &[f64], y: &[f64], z: &[f64]) -> Option<Vec<f64>> {
        Some(self.g.hessian_form(&mu.mean(), y, z))
    }

    fn wgrad(&self, mu: &EmpiricalMeasure, _x: &[f64], _y: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.g.jacobian(&mu.mean()))
    }

    fn xgrad(&self, _mu: &EmpiricalMeasure, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }

    fn mean_affine(&self) -> Option<&DMatrix<f64>> {
        Some(&self.a)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(linalg::op_norm(&self.a) + self.g.jacobian_sup(self.dim()))
    }

    fn wgrad_sup(&self) -> Option<f64> {
        Some(self.g.jacobian_sup(self.dim()))
    }

    fn has_flat1(&self) -> bool {
        true
    }
    fn has_flat2(&self) -> bool {
        true
    }
    fn has_wgrad(&self) -> bool {
        true
    }
    fn has_xgrad(&self) -> bool {
        true
    }
}

/// `O(n)` per evaluation, `O(n^2)` per particle step.
#[derive(Debug, Clone)]
pub struct PairwiseKernelDrift {
    pub dim: usize,
    pub phi: PairKernel,
}

impl Drift for PairwiseKernelDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut tmp = vec![0.0; self.dim];
        for (w, y) in mu.atoms() {
            self.phi.value(x, y, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += w * t);
        }
    }

    fn flat1(&self, _mu: &EmpiricalMeasure, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        let mut a = vec![0.0; self.dim];
        let mut b = vec![0.0; self.dim];
        self.phi.value(x, y, &mut a);
        self.phi.value(x, &vec![0.0; self.dim], &mut b);
        Some(a.iter().zip(&b).map(|(a, b)| a - b).collect())
    }

    fn flat2(&self, _mu: &EmpiricalMeasure, _x: &[f64], _y: &[f64], _z: &[f64]) -> Option<Vec<f64>> {
        Some(vec![0.0; self.dim])
    }

    fn wgrad(&self, _mu: &EmpiricalMeasure, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.phi.grad_y(x, y))
    }

    fn xgrad(&self, mu: &EmpiricalMeasure, x: &[f64]) -> Option<DMatrix<f64>> {
        let mut g = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in mu.atoms() {
            g += self.phi.grad_x(x, y) * w;
        }
        Some(g)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(2.0 * self.phi.grad_y_sup(self.dim))
    }

    fn wgrad_sup(&self) -> Option<f64> {
        Some(self.phi.grad_y_sup(self.dim))
    }

    fn has_flat1(&self) -> bool {
        true
    }
    fn has_flat2(&self) -> bool {
        true
    }
    fn has_wgrad(&self) -> bool {
        true
    }
    fn has_xgrad(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct KernelComposition {
    pub a: DMatrix<f64>,
    pub outer: Nonlinearity,
    pub inner: PairKernel,
}

impl KernelComposition {
    fn average(&self, mu: &EmpiricalMeasure, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut u = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        for (w, y) in mu.atoms() {
            self.inner.value(x, y, &mut tmp);
            u.iter_mut().zip(&tmp).for_each(|(u, t)| *u += w * t);
        }
        u
    }

    fn centered_inner(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        self.inner.value(x, y, &mut a);
        self.inner.value(x, &vec![0.0; d], &mut b);
        a.iter().zip(&b).map(|(a, b)| a - b).collect()
    }
}

impl Drift for KernelComposition {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
        let g = self.outer.value(&self.average(mu, x));
        matvec_into(&self.a, x, out);
        out.iter_mut().zip(&g).for_each(|(o, g)| *o += g);
    }

    fn flat1(&self, mu: &EmpiricalMeasure, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        let jac = self.outer.jacobian(&self.average(mu, x));
        Some(matvec(&jac, &self.centered_inner(x, y)))
    }

    fn flat2(&self, mu: &EmpiricalMeasure, x: &[f64], y: &[f64], z: &[f64]) -> Option<Vec<f64>> {
        let u = self.average(mu, x);
        Some(
            self.outer
                .hessian_form(&u, &self.centered_inner(x, y), &self.centered_inner(x, z)),
        )
    }

    fn wgrad(&self, mu: &EmpiricalMeasure, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        let jac = self.outer.jacobian(&self.average(mu, x));
        Some(jac * self.inner.grad_y(x, y))
    }

    fn xgrad(&self, mu: &EmpiricalMeasure, x: &[f64]) -> Option<DMatrix<f64>> {
        let d = x.len();
        let jac = self.outer.jacobian(&self.average(mu, x));
        let mut gx = DMatrix::zeros(d, d);
        for (w, y) in mu.atoms() {
            gx += self.inner.grad_x(x, y) * w;
        }
        Some(&self.a + jac * gx)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        let d = self.dim();
        Some(linalg::op_norm(&self.a) + 2.0 * self.outer.jacobian_sup(d) * self.inner.grad_y_sup(d))
    }

    fn wgrad_sup(&self) -> Option<f64> {
        let d = self.dim();
        Some(self.outer.jacobian_sup(d) * self.inner.grad_y_sup(d))
    }

    fn has_flat1(&self) -> bool {
        true
    }
    fn has_flat2(&self) -> bool {
        true
    }
    fn has_wgrad(&self) -> bool {
        true
    }
    fn has_xgrad(&self) -> bool {
        true
    }
}

/// Drift of the mean field Langevin dynamics, `-grad_W Psi` for
/// `Psi(mu) = int U dmu + 1/2 int int W(x - y) dmu dmu + g(mean(mu))`.
#[derive(Debug, Clone)]
pub struct LangevinGradient {
    pub dim: usize,
    pub confinement: Potential,
    pub interaction: Potential,
    pub mean_penalty: Potential,
}

impl Drift for LangevinGradient {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut tmp = vec![0.0; d];
        self.confinement.grad(x, out);
        for (w, y) in mu.atoms() {
            let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            self.interaction.grad(&diff, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += w * t);
        }
        self.mean_penalty.grad(&mu.mean(), &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o = -(*o + t));
    }

    fn flat1(&self, mu: &EmpiricalMeasure, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        let d = self.dim;
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let mut at_y = vec![0.0; d];
        let mut at_0 = vec![0.0; d];
        self.interaction.grad(&diff, &mut at_y);
        self.interaction.grad(x, &mut at_0);
        let hg = self.mean_penalty.hessian(&mu.mean());
        let hy = matvec(&hg, y);
        Some((0..d).map(|i| -(at_y[i] - at_0[i]) - hy[i]).collect())
    }

    fn flat2(&self, mu: &EmpiricalMeasure, _x: &[f64], y: &[f64], z: &[f64]) -> Option<Vec<f64>> {
        // the interaction term is pairwise; only the mean penalty contributes
        let m = mu.mean();
        Some(
            (0..self.dim)
                .map(|i| -self.mean_penalty.d3(m[i]) * y[i] * z[i])
                .collect(),
        )
    }

    fn wgrad(&self, mu: &EmpiricalMeasure, x: &[f64], y: &[f64]) -> Option<DMatrix<f64>> {
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        Some(self.interaction.hessian(&diff) - self.mean_penalty.hessian(&mu.mean()))
    }

    fn xgrad(&self, mu: &EmpiricalMeasure, x: &[f64]) -> Option<DMatrix<f64>> {
        let mut h = -self.confinement.hessian(x);
        for (w, y) in mu.atoms() {
            let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            h -= self.interaction.hessian(&diff) * w;
        }
        Some(h)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(
            self.confinement.hessian_sup()
                + 2.0 * self.interaction.hessian_sup()
                + self.mean_penalty.hessian_sup(),
        )
    }

    fn wgrad_sup(&self) -> Option<f64> {
        Some(self.interaction.hessian_sup() + self.mean_penalty.hessian_sup())
    }

    fn has_flat1(&self) -> bool {
        true
    }
    fn has_flat2(&self) -> bool {
        true
    }
    fn has_wgrad(&self) -> bool {
        true
    }
    fn has_xgrad(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq)]
pub struct FlatDerivativeReport {
    /// Difference quotients, one per step in the grid.
    pub quotients: Vec<Vec<f64>>,
    /// Polynomial extrapolation of the quotients to `h = 0`.
    pub fd_value: Vec<f64>,
    pub analytic_value: Vec<f64>,
    /// `|fd - analytic| / |analytic|`, or the absolute gap when `analytic = 0`.
    pub rel_error: f64,
}

/// Default step schedule for [`check_flat_derivative`].
pub const FD_STEPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// Compares `[V((1-h) nu + h eta, x) - V(nu, x)] / h`, extrapolated to `h -> 0`,
/// against `int flat1(nu, x, y) d(eta - nu)(y)`.
pub fn check_flat_derivative(
    drift: &dyn Drift,
    nu: &EmpiricalMeasure,
    eta: &EmpiricalMeasure,
    x: &[f64],
    h_grid: &[f64],
) -> Result<FlatDerivativeReport> {
    if !drift.has_flat1() {
        return Err(Error::MissingCapability("flat1"));
    }
    if h_grid.is_empty() || h_grid.iter().any(|h| !(*h > 0.0 && *h <= 0.5)) {
        return Err(Error::OutOfRange {
            what: "finite-difference step",
            value: format!("{h_grid:?}"),
            range: "(0, 0.5]".into(),
        });
    }
    let d = drift.dim();
    let mut base = vec![0.0; d];
    drift.eval(nu, x, &mut base);
    let mut quotients = Vec::with_capacity(h_grid.len());
    let mut bumped = vec![0.0; d];
    for &h in h_grid {
        let mix = nu.mixture(eta, h)?;
        drift.eval(&mix, x, &mut bumped);
        quotients.push(bumped.iter().zip(&base).map(|(b, a)| (b - a) / h).collect::<Vec<_>>());
    }
    let fd_value: Vec<f64> = (0..d)
        .map(|i| {
            let ys: Vec<f64> = quotients.iter().map(|q| q[i]).collect();
            extrapolate_to_zero(h_grid, &ys)
        })
        .collect();

    let mut analytic_value = vec![0.0; d];
    for (w, y) in eta.atoms() {
        let f = drift.flat1(nu, x, y).ok_or(Error::MissingCapability("flat1"))?;
        analytic_value.iter_mut().zip(&f).for_each(|(a, f)| *a += w * f);
    }
    for (w, y) in nu.atoms() {
        let f = drift.flat1(nu, x, y).ok_or(Error::MissingCapability("flat1"))?;
        analytic_value.iter_mut().zip(&f).for_each(|(a, f)| *a -= w * f);
    }
    let gap = norm(&sub(&fd_value, &analytic_value));
    let scale = norm(&analytic_value);
    let rel_error = if scale > 0.0 { gap / scale } else { gap };
    Ok(FlatDerivativeReport {
        quotients,
        fd_value,
        analytic_value,
        rel_error,
    })
}

/// Neville evaluation at 0 of the interpolating polynomial through `(h_i, y_i)`.
pub fn extrapolate_to_zero(h: &[f64], y: &[f64]) -> f64 {
    let mut p = y.to_vec();
    let n = p.len();
    for level in 1..n {
        for i in 0..n - level {
            let (hi, hj) = (h[i], h[i + level]);
            p[i] = (hj * p[i] - hi * p[i + 1]) / (hj - hi);
        }
    }
    p[0]
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a - b).collect()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Source of coupled pairs `(X, Y)` in `R^d x R^d`.
pub trait CoupledSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut StreamRng, x: &mut [f64], y: &mut [f64]);
}

/// `X = mean_x + scale_x Z1`, `Y = mean_y + scale_y (rho Z1 + sqrt(1 - rho^2) Z2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPairs {
    pub dim: usize,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub scale_x: f64,
    pub scale_y: f64,
    pub correlation: f64,
}

impl GaussianPairs {
    /// Independent standard normals in `R^d`.
    pub fn independent(dim: usize) -> Self {
        Self {
            dim,
            mean_x: vec![0.0; dim],
            mean_y: vec![0.0; dim],
            scale_x: 1.0,
            scale_y: 1.0,
            correlation: 0.0,
        }
    }
}

impl CoupledSampler for GaussianPairs {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut StreamRng, x: &mut [f64], y: &mut [f64]) {
        let r = self.correlation;
        let s = (1.0 - r * r).max(0.0).sqrt();
        for i in 0..self.dim {
            let z1 = rng::normal(rng);
            let z2 = rng::normal(rng);
            x[i] = self.mean_x[i] + self.scale_x * z1;
            y[i] = self.mean_y[i] + self.scale_y * (r * z1 + s * z2);
        }
    }
}

const BOOTSTRAP_RESAMPLES: usize = 200;

fn draw_pairs(sampler: &dyn CoupledSampler, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let d = sampler.dim();
    let mut xs = vec![0.0; n * d];
    let mut ys = vec![0.0; n * d];
    let mut rng = rng::stream(seed, AUX_REPLICA_BASE + 1, 0);
    for (x, y) in xs.chunks_exact_mut(d).zip(ys.chunks_exact_mut(d)) {
        sampler.sample(&mut rng, x, y);
    }
    (xs, ys)
}

fn bootstrap_se_of_mean(values: &[f64], seed: u64) -> f64 {
    let n = values.len();
    let mut rng = rng::stream(seed, AUX_REPLICA_BASE + 2, 0);
    let means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| values[random_index(&mut rng, n)]).sum::<f64>() / n as f64)
        .collect();
    sample_sd(&means)
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// `E[(V(L(X), X) - V(L(Y), Y)) . (X - Y)]`.
    pub empirical_lhs: f64,
    /// `-lambda E|X - Y|^2`.
    pub empirical_rhs: f64,
    /// `lhs - rhs`; nonpositive when the inequality holds exactly.
    pub margin: f64,
    pub std_error: f64,
    pub pass: bool,
}

/// Sampled displacement-monotonicity check; passes iff `lhs <= rhs + 3 * se`,
/// with `se` the bootstrap standard error of the per-sample margin.
pub fn check_monotonicity(
    drift: &dyn Drift,
    sampler: &dyn CoupledSampler,
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    if n_samples < 1000 {
        return Err(Error::OutOfRange {
            what: "n_samples",
            value: n_samples.to_string(),
            range: ">= 1000".into(),
        });
    }
    let d = drift.dim();
    if sampler.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: sampler.dim(),
        });
    }
    let (xs, ys) = draw_pairs(sampler, n_samples, seed);
    let law_x = EmpiricalMeasure::new(d, xs.clone())?;
    let law_y = EmpiricalMeasure::new(d, ys.clone())?;
    let mut vx = vec![0.0; xs.len()];
    let mut vy = vec![0.0; ys.len()];
    drift.eval_batch(&law_x, &xs, &mut vx);
    drift.eval_batch(&law_y, &ys, &mut vy);
    let mut lhs_terms = Vec::with_capacity(n_samples);
    let mut margins = Vec::with_capacity(n_samples);
    let mut dist = 0.0;
    for i in 0..n_samples {
        let r = i * d..(i + 1) * d;
        let dx = sub(&xs[r.clone()], &ys[r.clone()]);
        let dv = sub(&vx[r.clone()], &vy[r]);
        let l = dot(&dv, &dx);
        let sq = dot(&dx, &dx);
        lhs_terms.push(l);
        margins.push(l + lambda * sq);
        dist += sq;
    }
    let n = n_samples as f64;
    let empirical_lhs = lhs_terms.iter().sum::<f64>() / n;
    let empirical_rhs = -lambda * dist / n;
    let margin = empirical_lhs - empirical_rhs;
    let std_error = bootstrap_se_of_mean(&margins, seed);
    Ok(MonotonicityReport {
        empirical_lhs,
        empirical_rhs,
        margin,
        std_error,
        pass: margin <= 3.0 * std_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFormReport {
    /// `E[Y^T wgrad(L(X), X, X') Y' + Y^T xgrad(L(X), X) Y]` with `(X', Y')` an independent copy.
    pub form: f64,
    /// `-lambda E|Y|^2`.
    pub bound: f64,
    pub std_error: f64,
    pub pass: bool,
}

/// Sampled check of the quadratic form implied by displacement monotonicity.
///
/// The independent-copy expectation is the off-diagonal U-statistic over all sample
/// pairs (`O(N^2)` drift derivative calls, `O(N)` for mean-affine drifts).
pub fn check_quadratic_form(
    drift: &dyn Drift,
    sampler: &dyn CoupledSampler,
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<QuadraticFormReport> {
    if !drift.has_wgrad() {
        return Err(Error::MissingCapability("wgrad"));
    }
    if !drift.has_xgrad() {
        return Err(Error::MissingCapability("xgrad"));
    }
    if n_samples < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: n_samples,
        });
    }
    let d = drift.dim();
    let (xs, ys) = draw_pairs(sampler, n_samples, seed);
    let law = EmpiricalMeasure::new(d, xs.clone())?;
    let n = n_samples;
    let point = |v: &[f64], i: usize| v[i * d..(i + 1) * d].to_vec();

    // per-sample local term and row sums of the cross term
    let mut local = vec![0.0; n];
    let mut cross_rows = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for i in 0..n {
        let (x, y) = (point(&xs, i), point(&ys, i));
        let gx = drift.xgrad(&law, &x).ok_or(Error::MissingCapability("xgrad"))?;
        local[i] = dot(&y, &matvec(&gx, &y));
        sq[i] = dot(&y, &y);
    }
    if drift.mean_affine().is_some() {
        let w = drift
            .wgrad(&law, &point(&xs, 0), &point(&xs, 0))
            .ok_or(Error::MissingCapability("wgrad"))?;
        let mut ysum = vec![0.0; d];
        for i in 0..n {
            for (s, v) in ysum.iter_mut().zip(&ys[i * d..(i + 1) * d]) {
                *s += v;
            }
        }
        for i in 0..n {
            let y = point(&ys, i);
            let others: Vec<f64> = ysum.iter().zip(&y).map(|(s, v)| s - v).collect();
            cross_rows[i] = dot(&y, &matvec(&w, &others)) / (n - 1) as f64;
        }
    } else {
        for i in 0..n {
            let (x, y) = (point(&xs, i), point(&ys, i));
            let mut acc = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = drift
                    .wgrad(&law, &x, &xs[j * d..(j + 1) * d])
                    .ok_or(Error::MissingCapability("wgrad"))?;
                acc += dot(&y, &matvec(&w, &ys[j * d..(j + 1) * d]));
            }
            cross_rows[i] = acc / (n - 1) as f64;
        }
    }
    let nf = n as f64;
    let form = (0..n).map(|i| local[i] + cross_rows[i]).sum::<f64>() / nf;
    let bound = -lambda * sq.iter().sum::<f64>() / nf;
    let margins: Vec<f64> = (0..n).map(|i| local[i] + cross_rows[i] + lambda * sq[i]).collect();
    let std_error = bootstrap_se_of_mean(&margins, seed);
    Ok(QuadraticFormReport {
        form,
        bound,
        std_error,
        pass: form <= bound + 3.0 * std_error,
    })
}
