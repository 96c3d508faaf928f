//! The run configuration document.
//!
//! One TOML file describes a run. Every section and key is optional and
//! falls back to its default; unknown keys are rejected. `hierax config
//! echo` prints the fully populated, normalized document.

use std::path::{Path, PathBuf};

use hierax::coordinator::FixedPointConfig;
use hierax::fastgrad::{OracleConfig, SolverConfig};
use hierax::plant::{build_benchmark_with, Benchmark, BenchmarkParams, ControllerKind, ScenarioConfig};
use hierax::surrogate::RpropConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that replaces every seed in the document.
pub const SEED_ENV: &str = "HIERAX_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigDocument {
    pub plant: BenchmarkParams,
    pub solver: SolverConfig,
    pub oracle: OracleConfig,
    pub fixed_point: FixedPointConfig,
    pub surrogate: SurrogateSection,
    pub data: DataSection,
    pub scenario: ScenarioConfig,
    pub bench: BenchSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    /// Hidden layer widths of the trained network.
    pub hidden: Vec<usize>,
    /// Trained model used by surrogate controllers.
    pub model: Option<PathBuf>,
    pub training: RpropConfig,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            hidden: vec![25, 25],
            model: None,
            training: RpropConfig {
                epochs: 2000,
                ..RpropConfig::default()
            },
        }
    }
}

/// Excitation runs used by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub records: usize,
    pub seed: u64,
    /// Updating period of the generating runs, seconds.
    pub updating_period: f64,
    /// Simulated steps per generating run.
    pub steps_per_run: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            records: 20_000,
            seed: 11,
            updating_period: 0.5,
            steps_per_run: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Local problems in the solver comparison.
    pub instances: usize,
    pub seed: u64,
    /// Fail `bench solvers` when J_bar exceeds this, percent.
    pub assert_jbar_max: Option<f64>,
    /// Fail `bench solvers` when J_bar falls below this, percent.
    pub assert_jbar_min: Option<f64>,
    pub closed_loop: ClosedLoopSection,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 1,
            assert_jbar_max: None,
            assert_jbar_min: None,
            closed_loop: ClosedLoopSection::default(),
        }
    }
}

/// Closed-loop comparison: every entry runs the same disturbance
/// realization with the nominal set-points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopSection {
    pub sim_steps: usize,
    /// Disturbance seed.
    pub seed: u64,
    pub entries: Vec<ClosedLoopEntrySpec>,
}

impl Default for ClosedLoopSection {
    fn default() -> Self {
        let entry = |label: &str, updating_period, controller| ClosedLoopEntrySpec {
            label: label.to_string(),
            updating_period,
            controller,
        };
        Self {
            sim_steps: 400,
            seed: 1,
            entries: vec![
                entry("exact_0.5s", 0.5, ControllerKind::ExactNmpc),
                entry("surrogate_0.5s", 0.5, ControllerKind::Surrogate),
                entry("surrogate_2s", 2.0, ControllerKind::Surrogate),
            ],
        }
    }
}

/// Controller of subsystem 0; subsystem 3 always runs the exact controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopEntrySpec {
    pub label: String,
    pub updating_period: f64,
    pub controller: ControllerKind,
}

impl ConfigDocument {
    /// Parses a document; the error names the offending line and key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Config(msg) => CliError::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    /// Replaces every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.data.seed = seed;
        self.surrogate.training.seed = seed;
        self.bench.seed = seed;
        self.bench.closed_loop.seed = seed;
    }

    /// Applies [`SEED_ENV`] when it is set.
    pub fn apply_seed_env(&mut self) -> Result<(), CliError> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                self.set_seed(seed);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    /// Normalized TOML text of the document.
    pub fn canonical(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize configuration: {e}")))
    }

    /// Benchmark at the scenario horizon.
    pub fn benchmark(&self) -> Result<Benchmark, CliError> {
        build_benchmark_with(&self.plant, self.scenario.horizon).map_err(config_error)
    }

    /// Checks every section that does not need a run to validate.
    pub fn validate(&self) -> Result<Benchmark, CliError> {
        let bench = self.benchmark()?;
        self.scenario.validate(&bench).map_err(config_error)?;
        self.solver.validate().map_err(config_error)?;
        self.fixed_point.validate().map_err(config_error)?;
        self.surrogate.training.validate().map_err(config_error)?;
        if self.surrogate.hidden.contains(&0) {
            return Err(CliError::Config("surrogate.hidden widths must be positive".into()));
        }
        if !(self.oracle.tolerance > 0.0) || self.oracle.max_iter == 0 {
            return Err(CliError::Config("oracle needs a positive tolerance and max_iter".into()));
        }
        if self.data.steps_per_run == 0 {
            return Err(CliError::Config("data.steps_per_run must be at least 1".into()));
        }
        if self.bench.instances == 0 {
            return Err(CliError::Config("bench.instances must be at least 1".into()));
        }
        let cl = &self.bench.closed_loop;
        if cl.sim_steps == 0 {
            return Err(CliError::Config("bench.closed_loop.sim_steps must be at least 1".into()));
        }
        for e in &cl.entries {
            let sc = ScenarioConfig {
                updating_period: e.updating_period,
                ..self.scenario.clone()
            };
            sc.period_steps(bench.sample_time)
                .map_err(|err| CliError::Config(format!("closed-loop entry {}: {err}", e.label)))?;
        }
        Ok(bench)
    }
}

fn config_error(e: hierax::Error) -> CliError {
    CliError::Config(e.to_string())
}
