//! `quantization-demo`: empirical 1-Wasserstein quantization rate of the 3-d Gaussian.

use anyhow::{Context, Result};

use chaoslab_core::measure::SinkhornOptions;
use chaoslab_core::ratefit;
use chaoslab_core::remainder::{self, QuantizationOptions};

use crate::config::ExperimentConfig;
use crate::{fmt_short, scaling_points, Outcome};

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let q = cfg.quantization.as_ref().context("config needs a `quantization` section")?;
    let opts = QuantizationOptions {
        regularization: q.regularization,
        sinkhorn: SinkhornOptions {
            tolerance: q.sinkhorn_tolerance,
            ..SinkhornOptions::default()
        },
        ..QuantizationOptions::default()
    };
    let rows = remainder::quantization_demo(q.d, cfg.n_grid()?, cfg.replicas()?, cfg.seed, &opts)?;
    let mut out = Outcome::default();
    match ratefit::loglog_fit(&scaling_points(&rows), None) {
        Ok(fit) => out.notices.push(format!(
            "informational: slope of E[W_1(m^n, gamma)] vs n is {} (95% CI [{}, {}]); the quantization rate is -1/{}",
            fmt_short(fit.slope),
            fmt_short(fit.slope_ci.0),
            fmt_short(fit.slope_ci.1),
            q.d
        )),
        Err(e) => out.notices.push(format!("informational: no slope fit ({e})")),
    }
    out.tables.push(("quantization.csv".into(), remainder::scaling_table(&rows)));
    Ok(out)
}
