//! Closed-loop experiment descriptions.

use serde::{Deserialize, Serialize};

use super::Benchmark;
use crate::error::{check_len, Error, Result};
use crate::surrogate::prbs::{generate_prbs, stream_seed};

/// A scalar or vector signal over simulation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSpec {
    Constant(Vec<f64>),
    /// Independent PRBS per component, hold durations in simulation steps.
    Prbs {
        lo: Vec<f64>,
        hi: Vec<f64>,
        hold: [usize; 2],
    },
    /// Explicit per-step values; the last value is held past the end.
    Profile(Vec<Vec<f64>>),
}

impl SignalSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Constant(v) => v.len(),
            Self::Prbs { lo, .. } => lo.len(),
            Self::Profile(p) => p.first().map_or(0, Vec::len),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        check_len("signal dimension", dim, self.dim())?;
        match self {
            Self::Constant(v) if v.iter().any(|x| !x.is_finite()) => {
                Err(Error::Config("constant signal must be finite".into()))
            }
            Self::Prbs { lo, hi, hold } => {
                check_len("PRBS bounds", lo.len(), hi.len())?;
                if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
                    return Err(Error::Config("PRBS requires lo < hi".into()));
                }
                if hold[0] == 0 || hold[0] > hold[1] {
                    return Err(Error::Config(format!("invalid PRBS hold range {hold:?}")));
                }
                Ok(())
            }
            Self::Profile(p) => {
                if p.is_empty() {
                    return Err(Error::Config("explicit profile is empty".into()));
                }
                for v in p {
                    check_len("profile entry", dim, v.len())?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Samples the signal over `len` steps. `stream` separates the random
    /// streams of different signals under one scenario seed.
    pub fn sample(&self, len: usize, seed: u64, stream: u64) -> Vec<Vec<f64>> {
        match self {
            Self::Constant(v) => vec![v.clone(); len],
            Self::Profile(p) => (0..len).map(|k| p[k.min(p.len() - 1)].clone()).collect(),
            Self::Prbs { lo, hi, hold } => {
                let cols: Vec<Vec<f64>> = (0..lo.len())
                    .map(|j| {
                        let s = stream_seed(seed, stream * 64 + j as u64);
                        generate_prbs(lo[j], hi[j], len, (hold[0], hold[1]), s)
                            .expect("validated PRBS spec")
                    })
                    .collect();
                (0..len).map(|k| cols.iter().map(|c| c[k]).collect()).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEntry {
    pub subsystem: usize,
    pub signal: SignalSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    ExactNmpc,
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// All states zero.
    Zero,
    /// Steady state of the initial set-points and disturbances.
    Steady,
}

/// What the local controllers know about future disturbances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forecast {
    /// The realized disturbance at the predicted output times `k+1 … k+N`.
    Preview,
    /// The current disturbance held constant over the horizon.
    Hold,
}

/// Optional outer set-point search run at every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointSearch {
    /// Central-cost evaluations per update.
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Prediction horizon, steps.
    pub horizon: usize,
    /// Updating period, seconds. Must be a multiple of the sample time.
    pub updating_period: f64,
    /// Simulated steps.
    pub sim_steps: usize,
    pub seed: u64,
    /// One schedule per controlled subsystem, ascending index.
    pub setpoints: Vec<SignalSpec>,
    /// Subsystems with disturbance inputs that are not listed see zero.
    pub disturbances: Vec<DisturbanceEntry>,
    /// One entry per controlled subsystem.
    pub controllers: Vec<ControllerKind>,
    pub initial_state: InitialState,
    pub forecast: Forecast,
    /// Seed each local solve with the previous period's shifted solution.
    pub warm_start: bool,
    pub setpoint_search: Option<SetpointSearch>,
    /// Abort when the network state norm exceeds this value.
    pub divergence_bound: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            horizon: super::DEFAULT_HORIZON,
            updating_period: 0.5,
            sim_steps: 200,
            seed: 1,
            setpoints: vec![
                SignalSpec::Constant(vec![60.5, 20.0]),
                SignalSpec::Constant(vec![10.0]),
            ],
            disturbances: Vec::new(),
            controllers: vec![ControllerKind::ExactNmpc; 2],
            initial_state: InitialState::Steady,
            forecast: Forecast::Preview,
            warm_start: false,
            setpoint_search: None,
            divergence_bound: 1e6,
        }
    }
}

/// Sampled set-point and disturbance trajectories. Both cover
/// `sim_steps + horizon` steps so forecasts never run past the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSignals {
    /// `[controlled index][step]`
    pub setpoints: Vec<Vec<Vec<f64>>>,
    /// `[subsystem][step]`
    pub disturbances: Vec<Vec<Vec<f64>>>,
}

impl ScenarioConfig {
    pub fn validate(&self, bench: &Benchmark) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.sim_steps == 0 {
            return Err(Error::Config("sim_steps must be at least 1".into()));
        }
        if !(self.divergence_bound > 0.0) {
            return Err(Error::Config("divergence_bound must be positive".into()));
        }
        self.period_steps(bench.sample_time)?;
        let controlled = bench.topology.controlled();
        check_len("set-point schedules", controlled.len(), self.setpoints.len())?;
        check_len("controller choices", controlled.len(), self.controllers.len())?;
        for (spec, &s) in self.setpoints.iter().zip(controlled) {
            spec.validate(bench.models[s].c.rows())?;
        }
        let mut seen = vec![false; bench.n_subsystems()];
        for d in &self.disturbances {
            if d.subsystem >= bench.n_subsystems() {
                return Err(Error::Config(format!(
                    "disturbance on unknown subsystem {}",
                    d.subsystem
                )));
            }
            if std::mem::replace(&mut seen[d.subsystem], true) {
                return Err(Error::Config(format!(
                    "two disturbance entries for subsystem {}",
                    d.subsystem
                )));
            }
            d.signal.validate(bench.models[d.subsystem].dw.cols())?;
        }
        if let Some(search) = &self.setpoint_search {
            if search.budget == 0 {
                return Err(Error::Config("set-point search budget must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Simulation steps per updating period.
    pub fn period_steps(&self, sample_time: f64) -> Result<usize> {
        if !(self.updating_period > 0.0) || !self.updating_period.is_finite() {
            return Err(Error::Config("updating_period must be positive".into()));
        }
        let ratio = self.updating_period / sample_time;
        let m = ratio.round();
        if m < 1.0 || (ratio - m).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "updating_period {} s is not a multiple of the {} s sample time",
                self.updating_period, sample_time
            )));
        }
        Ok(m as usize)
    }

    pub fn signals(&self, bench: &Benchmark) -> ScenarioSignals {
        let len = self.sim_steps + self.horizon;
        let setpoints = self
            .setpoints
            .iter()
            .enumerate()
            .map(|(k, spec)| spec.sample(len, self.seed, k as u64))
            .collect();
        let disturbances = bench
            .models
            .iter()
            .enumerate()
            .map(|(s, m)| {
                match self.disturbances.iter().find(|d| d.subsystem == s) {
                    Some(d) => d.signal.sample(len, self.seed, 1000 + s as u64),
                    None => vec![vec![0.0; m.dw.cols()]; len],
                }
            })
            .collect();
        ScenarioSignals {
            setpoints,
            disturbances,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::build_benchmark;

    #[test]
    fn default_scenario_is_valid() {
        let b = build_benchmark();
        ScenarioConfig::default().validate(&b).unwrap();
    }

    #[test]
    fn period_must_be_a_sample_multiple() {
        let sc = ScenarioConfig {
            updating_period: 0.7,
            ..Default::default()
        };
        assert!(sc.period_steps(0.5).is_err());
        let sc = ScenarioConfig {
            updating_period: 2.0,
            ..Default::default()
        };
        assert_eq!(sc.period_steps(0.5).unwrap(), 4);
    }

    #[test]
    fn missing_schedule_rejected() {
        let b = build_benchmark();
        let sc = ScenarioConfig {
            setpoints: vec![SignalSpec::Constant(vec![60.5, 20.0])],
            ..Default::default()
        };
        assert!(sc.validate(&b).is_err());
    }

    #[test]
    fn prbs_disturbance_is_seeded() {
        let b = build_benchmark();
        let sc = ScenarioConfig {
            disturbances: vec![DisturbanceEntry {
                subsystem: 0,
                signal: SignalSpec::Prbs {
                    lo: vec![-3.0],
                    hi: vec![3.0],
                    hold: [4, 20],
                },
            }],
            ..Default::default()
        };
        sc.validate(&b).unwrap();
        let a = sc.signals(&b);
        assert_eq!(a, sc.signals(&b));
        assert!(a.disturbances[0].iter().all(|w| w[0] == -3.0 || w[0] == 3.0));
        let other = ScenarioConfig { seed: 2, ..sc.clone() }.signals(&b);
        assert_ne!(a.disturbances[0], other.disturbances[0]);
    }
}
