//! Experiment configuration files (JSON).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use chaoslab_core::drift::{GaussianPairs, ModelFamily};
use chaoslab_core::simulate::{InitLaw, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    OracleRates,
    HierarchyCertify,
    ChaosMc,
    FlowsCheck,
    QuantizationDemo,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::OracleRates => "oracle-rates",
            Experiment::HierarchyCertify => "hierarchy-certify",
            Experiment::ChaosMc => "chaos-mc",
            Experiment::FlowsCheck => "flows-check",
            Experiment::QuantizationDemo => "quantization-demo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Experiment::OracleRates,
            Experiment::HierarchyCertify,
            Experiment::ChaosMc,
            Experiment::FlowsCheck,
            Experiment::QuantizationDemo,
        ]
        .into_iter()
        .find(|e| e.name() == s)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Directory receiving the CSV files.
    pub output_path: PathBuf,
    /// Worker threads; defaults to the machine's parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub model: Option<ModelFamily>,
    #[serde(default)]
    pub sim: Option<SimSection>,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub oracle: Option<OracleSection>,
    #[serde(default)]
    pub hierarchy: Option<HierarchySection>,
    #[serde(default)]
    pub chaos: Option<ChaosSection>,
    #[serde(default)]
    pub flows: Option<FlowsSection>,
    #[serde(default)]
    pub quantization: Option<QuantizationSection>,
}

/// [`SimConfig`] without `n` (taken from the grids) and `seed` (top level).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "one")]
    pub d: usize,
    pub sigma: f64,
    pub dt: f64,
    pub t_end: f64,
    pub init: InitLaw,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub k_grid: Vec<usize>,
    #[serde(default)]
    pub t_grid: Vec<f64>,
}

/// Direct simulation of the linear model compared against its exact Gaussian law.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub agreement: Option<AgreementSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgreementSection {
    pub n: usize,
    pub replicas: usize,
    pub dt: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchySection {
    pub moments: Option<MomentSection>,
    pub lemma: Option<LemmaSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentSection {
    pub n: usize,
    pub a: f64,
    pub t_grid: Vec<f64>,
    pub q_grid: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingSpec {
    Zero,
    InverseSquare,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSection {
    pub n_grid: Vec<usize>,
    pub a_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
    pub p_grid: Vec<u32>,
    pub b: f64,
    pub c0: f64,
    pub t_end: f64,
    pub forcing: Vec<ForcingSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosSection {
    pub coupling: Option<CouplingSection>,
    pub weak_chaos: Option<ReplicaSection>,
    pub remainder: Option<ReplicaSection>,
    /// Size of the simulated stand-in for the limit law when no exact one exists.
    #[serde(default = "default_reference_size")]
    pub reference_size: usize,
}

fn default_reference_size() -> usize {
    100_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub replicas: usize,
    pub target_slope: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaSection {
    pub replicas: usize,
    #[serde(default)]
    pub antithetic: bool,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowsSection {
    pub tangent: Option<TangentSection>,
    pub lions: Option<LionsSection>,
    pub monotonicity: Option<Vec<MonotonicityCase>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TangentSection {
    pub x0: Vec<f64>,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    /// Extra families checked by finite differences on the same grid.
    #[serde(default)]
    pub fd_families: Vec<ModelFamily>,
    pub lambda: f64,
    #[serde(default = "default_exact_tolerance")]
    pub exact_tolerance: f64,
}

fn default_exact_tolerance() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LionsSection {
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
    pub ensemble: usize,
    pub dt: f64,
    pub horizon: f64,
    pub lambda: f64,
    /// Time at which the ensemble is compared with the closed form of the linear model.
    #[serde(default = "unit")]
    pub probe_time: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotonicityCase {
    pub label: String,
    pub model: ModelFamily,
    pub lambda: f64,
    pub expect_pass: bool,
    pub samples: usize,
    pub pairs: PairSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub scale_x: f64,
    pub scale_y: f64,
    pub correlation: f64,
}

impl PairSpec {
    pub fn sampler(&self) -> GaussianPairs {
        GaussianPairs {
            dim: self.mean_x.len(),
            mean_x: self.mean_x.clone(),
            mean_y: self.mean_y.clone(),
            scale_x: self.scale_x,
            scale_y: self.scale_y,
            correlation: self.correlation,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationSection {
    pub d: usize,
    pub regularization: f64,
    #[serde(default = "default_tolerance")]
    pub sinkhorn_tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-6
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.workers == Some(0) {
            bail!("workers must be positive");
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<&ModelFamily> {
        self.model.as_ref().context("config needs a `model`")
    }

    pub fn sim_section(&self) -> Result<&SimSection> {
        self.sim.as_ref().context("config needs a `sim` section")
    }

    /// The simulation config for `n` particles.
    pub fn sim(&self, n: usize) -> Result<SimConfig> {
        let s = self.sim_section()?;
        let cfg = SimConfig {
            n,
            d: s.d,
            sigma: s.sigma,
            dt: s.dt,
            t_end: s.t_end,
            seed: self.seed,
            init: s.init.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_grid(&self) -> Result<&[usize]> {
        nonempty("grids.n_grid", &self.grids.n_grid)
    }

    pub fn k_grid(&self) -> Result<&[usize]> {
        nonempty("grids.k_grid", &self.grids.k_grid)
    }

    pub fn t_grid(&self) -> Result<&[f64]> {
        nonempty("grids.t_grid", &self.grids.t_grid)
    }

    pub fn replicas(&self) -> Result<usize> {
        match self.replicas {
            Some(r) if r > 0 => Ok(r),
            _ => bail!("config needs a positive `replicas`"),
        }
    }
}

fn nonempty<'a, T>(name: &str, v: &'a [T]) -> Result<&'a [T]> {
    if v.is_empty() {
        bail!("{name} must be nonempty");
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"experiment": "oracle-rates", "seed": 3, "output_path": "out",
                "model": {"family": "linear_mean_field", "a": [[-1.0]], "b": [[0.5]], "b0": [0.0]},
                "sim": {"sigma": 1.0, "dt": 0.01, "t_end": 1.0, "init": {"kind": "gaussian", "mean": [0.0], "cov": [[0.25]]}},
                "grids": {"n_grid": [4, 8], "k_grid": [1], "t_grid": [1.0]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.experiment, Experiment::OracleRates);
        assert_eq!(cfg.sim(8).unwrap().n, 8);
        assert_eq!(cfg.n_grid().unwrap(), &[4, 8]);
        assert!(cfg.replicas().is_err());
    }

    #[test]
    fn rejects_unknown_fields_and_missing_seed() {
        let bad = r#"{"experiment": "chaos-mc", "output_path": "o"}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let extra = r#"{"experiment": "chaos-mc", "seed": 1, "output_path": "o", "colour": 2}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(extra).is_err());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in [Experiment::OracleRates, Experiment::HierarchyCertify, Experiment::ChaosMc, Experiment::FlowsCheck, Experiment::QuantizationDemo] {
            assert_eq!(Experiment::parse(e.name()), Some(e));
        }
        assert_eq!(Experiment::parse("nope"), None);
    }
}
