//! Numerical laboratory for interacting particle systems with measure-nonlinear
//! drifts and their McKean-Vlasov limits.
//!
//! The crate is organised bottom-up:
//!
//! - [`measure`]: empirical and Gaussian measures, Wasserstein distances, relative entropy.
//! - [`drift`]: the drift functional `V(mu, x)` with its flat and Wasserstein derivatives.
//! - [`simulate`]: Euler-Maruyama for the n-particle system, reference flows, synchronous coupling.
//! - [`oracle`]: exact Gaussian laws of the linear mean-field model and their entropies.
//! - [`hierarchy`]: the stopped Yule semigroup and the entropy hierarchy comparison system.
//! - [`flows`]: tangent and Lions derivative flows of the limit SDE.
//! - [`remainder`]: the second-order remainder functional and weak-chaos experiments.
//! - [`ratefit`]: log-log regression with bootstrap intervals.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod drift;
pub mod error;
pub mod flows;
pub mod hierarchy;
pub mod linalg;
pub mod measure;
pub mod oracle;
pub mod quadrature;
pub mod ratefit;
pub mod remainder;
pub mod rng;
pub mod simulate;
pub mod table;

pub use drift::{make_family, Drift, DriftModel, ModelFamily};
pub use error::{Error, Result};
pub use measure::{EmpiricalMeasure, GaussianMeasure};
pub use oracle::{GaussianState, LimitState, LinearModel};
pub use ratefit::{loglog_fit, verdict, RateFit, Verdict};
pub use simulate::{ReferenceFlow, SimConfig, Trajectory};
pub use flows::{LionsFlow, TangentFlow};
pub use hierarchy::YuleGenerator;
pub use remainder::{RemainderSpec, WeakFunctional};
