//! One module per subcommand.

pub mod chaos;
pub mod flows;
pub mod hierarchy;
pub mod oracle_rates;
pub mod quantization;

use anyhow::Result;

use chaoslab_core::simulate::{self, ReferenceFlow, SimConfig};
use chaoslab_core::Drift;

/// Gauss-Hermite nodes per dimension of the exact Euler reference law.
pub const REFERENCE_NODES: usize = 8;

/// The limit law on the grid of `cfg`: exact for mean-affine drifts with Gaussian
/// initial law, otherwise an independent population of `population` particles.
pub fn reference_flow(drift: &dyn Drift, cfg: &SimConfig, population: usize) -> Result<ReferenceFlow> {
    if drift.mean_affine().is_some() && cfg.initial_gaussian()?.is_some() {
        return Ok(ReferenceFlow::discrete_gaussian(drift, cfg, REFERENCE_NODES)?);
    }
    let traj = simulate::run_mckean_reference(drift, cfg, population)?;
    Ok(ReferenceFlow::from_trajectory(&traj))
}
