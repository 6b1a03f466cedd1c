//! `oracle-rates`: exact entropies of the linear Gaussian model and their rates.

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use chaoslab_core::oracle::{self, EntropyRow, GaussianState, LinearModel};
use chaoslab_core::simulate;
use chaoslab_core::table::Table;
use chaoslab_core::{make_family, ModelFamily};

use crate::config::{AgreementSection, ExperimentConfig};
use crate::{fmt_full, fmt_short, slope_check, Check, Outcome};

const RATE_N: &str = "sharp-rate theorem, O(k^2/n^2) in n";
const RATE_K: &str = "sharp-rate theorem, O(k^2/n^2) in k";
const UNIFORM: &str = "uniform-in-time theorem";
const AGREEMENT: &str = "particle system vs exact Gaussian law";

pub const N_SLOPE_TOLERANCE: f64 = 0.2;
pub const K_SLOPE_TOLERANCE: f64 = 0.3;
/// Times up to this value form the short window of the uniformity check.
pub const SHORT_WINDOW: f64 = 2.0;

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let family = cfg.model()?;
    if !matches!(family, ModelFamily::LinearMeanField { .. }) {
        bail!("oracle-rates needs the linear_mean_field family");
    }
    let sim = cfg.sim_section()?;
    let model = LinearModel::from_family(family, sim.sigma)?;
    let mu0 = cfg.sim(1)?.initial_gaussian()?.context("oracle-rates needs a Gaussian initial law")?;
    let n_grid = cfg.n_grid()?;
    let k_grid = cfg.k_grid()?;
    let t_grid = cfg.t_grid()?;

    let sweeps: Vec<Vec<EntropyRow>> = n_grid
        .par_iter()
        .map(|&n| {
            let ks: Vec<usize> = k_grid.iter().copied().filter(|&k| k <= n).collect();
            oracle::entropy_sweep(&model, &mu0, n, &ks, t_grid)
        })
        .collect::<chaoslab_core::Result<_>>()?;
    let rows: Vec<EntropyRow> = sweeps.into_iter().flatten().collect();

    let mut table = Table::new(&["n", "k", "t", "entropy"]);
    for r in &rows {
        table.push(vec![r.n.to_string(), r.k.to_string(), fmt_full(r.t), fmt_full(r.entropy)]);
    }
    let mut out = Outcome::default();
    out.tables.push(("entropy.csv".into(), table));

    if rows.iter().all(|r| r.entropy == 0.0) {
        out.notices.push("degenerate: every entropy vanishes (no measure dependence); rate and uniformity checks skipped".into());
    } else {
        rate_checks(&rows, n_grid, k_grid, t_grid, &mut out);
        uniformity_checks(&rows, n_grid, k_grid, t_grid, &mut out);
    }
    if let Some(a) = cfg.oracle.as_ref().and_then(|o| o.agreement.as_ref()) {
        agreement(cfg, &model, family, a, &mut out)?;
    }
    Ok(out)
}

fn entropy_at(rows: &[EntropyRow], n: usize, k: usize, t: f64) -> Option<f64> {
    rows.iter().find(|r| r.n == n && r.k == k && r.t == t).map(|r| r.entropy)
}

fn rate_checks(rows: &[EntropyRow], n_grid: &[usize], k_grid: &[usize], t_grid: &[f64], out: &mut Outcome) {
    for &t in t_grid {
        if n_grid.len() >= 2 {
            for &k in k_grid {
                let pts: Vec<(f64, f64)> = n_grid.iter().filter_map(|&n| entropy_at(rows, n, k, t).map(|e| (n as f64, e))).collect();
                if pts.len() < 2 {
                    continue;
                }
                let (c, _) = slope_check(RATE_N, format!("slope of entropy vs n at k={k}, t={t}"), &pts, -2.0, N_SLOPE_TOLERANCE);
                out.checks.push(c);
            }
        }
        if k_grid.len() >= 2 {
            let n = *n_grid.iter().max().expect("nonempty grid");
            let pts: Vec<(f64, f64)> = k_grid.iter().filter_map(|&k| entropy_at(rows, n, k, t).map(|e| (k as f64, e))).collect();
            if pts.len() >= 2 {
                let (c, _) = slope_check(RATE_K, format!("slope of entropy vs k at n={n}, t={t}"), &pts, 2.0, K_SLOPE_TOLERANCE);
                out.checks.push(c);
            }
        }
    }
}

fn uniformity_checks(rows: &[EntropyRow], n_grid: &[usize], k_grid: &[usize], t_grid: &[f64], out: &mut Outcome) {
    if !(t_grid.iter().any(|&t| t <= SHORT_WINDOW) && t_grid.iter().any(|&t| t > SHORT_WINDOW)) {
        return;
    }
    for &n in n_grid {
        for &k in k_grid.iter().filter(|&&k| k <= n) {
            let over = |keep: &dyn Fn(f64) -> bool| {
                t_grid
                    .iter()
                    .filter(|&&t| keep(t))
                    .filter_map(|&t| entropy_at(rows, n, k, t))
                    .fold(0.0f64, f64::max)
            };
            let short = over(&|t| t <= SHORT_WINDOW);
            let all = over(&|_| true);
            out.checks.push(Check::new(
                UNIFORM,
                format!("sup over t of entropy at n={n}, k={k}"),
                all <= 2.0 * short,
                format!("max over grid {} vs 2 x max over t <= {SHORT_WINDOW} = {}", fmt_short(all), fmt_short(2.0 * short)),
            ));
        }
    }
}

/// Compares replica averages of the terminal mean, the within-particle variance and the
/// cross covariance with the exact law of the particle system.
fn agreement(cfg: &ExperimentConfig, model: &LinearModel, family: &ModelFamily, a: &AgreementSection, out: &mut Outcome) -> Result<()> {
    if model.dim() != 1 {
        bail!("the agreement check is one-dimensional");
    }
    if a.n < 2 || a.replicas < 2 {
        bail!("the agreement check needs n >= 2 and replicas >= 2");
    }
    let mut sim = cfg.sim(a.n)?;
    sim.dt = a.dt;
    sim.t_end = a.t;
    let mu0 = sim.initial_gaussian()?.context("Gaussian initial law required")?;
    let law = oracle::evolve_particle_law(model, &GaussianState::iid(a.n, &mu0), a.t)?;
    let m = law.mean[0];
    let drift = make_family(family)?;
    let nf = a.n as f64;
    let stats: Vec<[f64; 3]> = simulate::map_terminal(&*drift, &sim, a.replicas, false, |mu| {
        let dev: Vec<f64> = mu.points().iter().map(|y| y - m).collect();
        let s: f64 = dev.iter().sum();
        let s2: f64 = dev.iter().map(|d| d * d).sum();
        [s / nf + m, s2 / nf, (s * s - s2) / (nf * (nf - 1.0))]
    })?;
    let exact = [m, law.var_block[(0, 0)], law.cov_block[(0, 0)]];
    let names = ["mean", "within-particle variance", "cross covariance"];
    let mut table = Table::new(&["quantity", "simulated", "oracle", "stderr"]);
    for q in 0..3 {
        let v: Vec<f64> = stats.iter().map(|s| s[q]).collect();
        let (est, se) = simulate::mean_stderr(&v);
        table.push(vec![names[q].replace(' ', "_"), fmt_full(est), fmt_full(exact[q]), fmt_full(se)]);
        out.checks.push(Check::new(
            AGREEMENT,
            format!("{} at n={}, t={}", names[q], a.n, a.t),
            (est - exact[q]).abs() <= 4.0 * se,
            format!("simulated {} vs exact {} (4 se = {})", fmt_short(est), fmt_short(exact[q]), fmt_short(4.0 * se)),
        ));
    }
    out.tables.push(("agreement.csv".into(), table));
    Ok(())
}
