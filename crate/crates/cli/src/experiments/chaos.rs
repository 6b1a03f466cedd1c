//! `chaos-mc`: synchronous coupling, weak-chaos gaps and the remainder decay.

use anyhow::{Context, Result};

use chaoslab_core::remainder::{self, ReferenceLaw, RemainderSpec, ScalingRow, WeakFunctional};
use chaoslab_core::simulate::{self, ReferenceFlow};
use chaoslab_core::make_family;

use crate::config::ExperimentConfig;
use crate::experiments::reference_flow;
use crate::{fmt_full, scaling_points, slope_check, Outcome};

const COUPLING: &str = "synchronous coupling bound";
const WEAK_GENERIC: &str = "classical weak chaos, O(1/n)";
const WEAK_VANISHING: &str = "weak chaos for functionals with vanishing derivatives, O(1/n^2)";
const REMAINDER: &str = "second-order remainder estimate, O(1/n^2)";

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let chaos = cfg.chaos.as_ref().context("config needs a `chaos` section")?;
    let drift = make_family(cfg.model()?)?;
    let n_grid = cfg.n_grid()?;
    let template = cfg.sim(1)?;
    let flow = reference_flow(&*drift, &template, chaos.reference_size)?;
    let mut out = Outcome::default();

    if let Some(c) = &chaos.coupling {
        let mut rows = Vec::with_capacity(n_grid.len());
        for &n in n_grid {
            let r = simulate::run_synchronous_coupling(&*drift, &cfg.sim(n)?, &flow, c.replicas)?;
            rows.push(ScalingRow { n, value: r.sup_gap_sq_per_particle, stderr: r.stderr });
        }
        let (check, _) = slope_check(COUPLING, "slope of per-particle sup_t |Y - Xbar|^2 vs n", &scaling_points(&rows), c.target_slope, c.tolerance);
        out.checks.push(check);
        out.tables.push(("coupling.csv".into(), remainder::scaling_table(&rows)));
    }

    let terminal = terminal_law(&flow);
    let terminal_mean = terminal.mean();
    if terminal_mean.len() != 1 {
        out.notices.push("weak-chaos and remainder functionals use the first coordinate of the mean".into());
    }
    let m_t = terminal_mean[0];

    if let Some(w) = &chaos.weak_chaos {
        let phis = [WeakFunctional::mean_coordinate(0), WeakFunctional::centered_mean_power(0, m_t, 4)];
        let tables = remainder::weak_chaos_gaps(&phis, &*drift, &template, n_grid, w.replicas, &[m_t, 0.0], w.antithetic)?;
        let (c1, _) = slope_check(WEAK_GENERIC, "slope of |E mean(m^n_T) - mean(mu_T)| vs n", &scaling_points(&tables[0]), -1.0, w.tolerance);
        let (c2, _) = slope_check(WEAK_VANISHING, "slope of E (mean(m^n_T) - mean(mu_T))^4 vs n", &scaling_points(&tables[1]), -2.0, w.tolerance);
        out.checks.extend([c1, c2]);
        out.notices.push(format!("weak-chaos reference mean(mu_T) = {}", fmt_full(m_t)));
        out.tables.push(("weak_chaos_mean.csv".into(), remainder::scaling_table(&tables[0])));
        out.tables.push(("weak_chaos_quartic.csv".into(), remainder::scaling_table(&tables[1])));
    }

    if let Some(r) = &chaos.remainder {
        let mut spec = RemainderSpec::new(drift.clone(), terminal)?;
        spec.seed = cfg.seed;
        let rows = remainder::remainder_scaling(&spec, &*drift, &template, n_grid, r.replicas, r.antithetic)?;
        let (check, _) = slope_check(REMAINDER, "slope of E R_T(m^n_T) vs n", &scaling_points(&rows), -2.0, r.tolerance);
        out.checks.push(check);
        out.tables.push(("remainder.csv".into(), remainder::scaling_table(&rows)));
    }
    Ok(out)
}

fn terminal_law(flow: &ReferenceFlow) -> ReferenceLaw {
    match flow.gaussian(flow.len() - 1) {
        Some(g) => ReferenceLaw::Gaussian(g.clone()),
        None => ReferenceLaw::Empirical(flow.terminal().clone()),
    }
}
