//! Experiment driver behind the `chaoslab` binary.
//!
//! Each subcommand reads one JSON config, runs an experiment suite from
//! `chaoslab-core`, writes CSV tables into the output directory and reports
//! pass/fail checks. See `configs/` for the reference presets.

pub mod config;
pub mod experiments;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use chaoslab_core::ratefit::{self, RateFit};
use chaoslab_core::table::{fmt_float, Table};

pub use config::{Experiment, ExperimentConfig};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "CHAOSLAB_OUTPUT_DIR";

/// One pass/fail statement, tagged with the result it tests.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub anchor: &'static str,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(anchor: &'static str, name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            anchor,
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{}] {}: {}", self.anchor, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    /// Informational lines (skipped checks, fitted slopes that do not gate).
    pub notices: Vec<String>,
    /// `(file name, table)` pairs written to the output directory.
    pub tables: Vec<(String, Table)>,
}

impl Outcome {
    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes every table plus `checks.txt`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::new();
        for (name, table) in &self.tables {
            let path = dir.join(name);
            let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            table.write(std::io::BufWriter::new(file))?;
            written.push(path);
        }
        let mut text = String::new();
        for c in &self.checks {
            text.push_str(&format!("{c}\n"));
        }
        for n in &self.notices {
            text.push_str(&format!("NOTE {n}\n"));
        }
        let path = dir.join("checks.txt");
        fs::write(&path, text)?;
        written.push(path);
        Ok(written)
    }
}

/// `CHAOSLAB_OUTPUT_DIR` if set and nonempty, else the configured path.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_path.clone(),
    }
}

/// Runs the experiment of `cfg` on a pool of `cfg.workers` threads.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().context("building the worker pool")?;
    pool.install(|| match cfg.experiment {
        Experiment::OracleRates => experiments::oracle_rates::run(cfg),
        Experiment::HierarchyCertify => experiments::hierarchy::run(cfg),
        Experiment::ChaosMc => experiments::chaos::run(cfg),
        Experiment::FlowsCheck => experiments::flows::run(cfg),
        Experiment::QuantizationDemo => experiments::quantization::run(cfg),
    })
}

/// Loads `config_path`, checks it names `experiment`, runs it and writes the outputs.
pub fn run(experiment: Experiment, config_path: &Path) -> Result<(Outcome, PathBuf)> {
    let cfg = ExperimentConfig::load(config_path)?;
    if cfg.experiment != experiment {
        bail!(
            "{} is a `{}` config, not `{}`",
            config_path.display(),
            cfg.experiment.name(),
            experiment.name()
        );
    }
    let outcome = execute(&cfg)?;
    let dir = output_dir(&cfg);
    outcome.write(&dir)?;
    Ok((outcome, dir))
}

/// Fits `points` on log-log axes and checks the slope against `target +- tolerance`.
pub fn slope_check(anchor: &'static str, name: impl Into<String>, points: &[(f64, f64)], target: f64, tolerance: f64) -> (Check, Option<RateFit>) {
    let name = name.into();
    match ratefit::loglog_fit(points, None) {
        Ok(fit) => {
            let v = ratefit::verdict(&fit, target, tolerance);
            (Check::new(anchor, name, v.pass, v.message), Some(fit))
        }
        Err(e) => (Check::new(anchor, name, false, format!("no fit: {e}")), None),
    }
}

pub(crate) fn scaling_points(rows: &[chaoslab_core::remainder::ScalingRow]) -> Vec<(f64, f64)> {
    rows.iter().map(|r| (r.n as f64, r.value)).collect()
}

pub(crate) fn fmt_short(x: f64) -> String {
    format!("{x:.6e}")
}

pub(crate) fn fmt_full(x: f64) -> String {
    fmt_float(x)
}
