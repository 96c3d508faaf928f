//! Solver and closed-loop comparison harnesses.
//!
//! Wall times are measured around the solve call only (problem
//! construction excluded) and are reported, never asserted.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coordinator::{closed_loop_run, ClosedLoopLog, ClosedLoopSetup, FixedPointConfig};
use crate::error::{Error, Result};
use crate::fastgrad::{
    minimize_oracle, solve, BoxBounds, LocalProblem, Objective, OracleConfig, SolveReport, SolverConfig,
};
use crate::plant::{
    Benchmark, ControllerKind, DisturbanceEntry, Forecast, InitialState, ScenarioConfig, SignalSpec,
};
use crate::surrogate::{collect_with_logs, excitation_run, excitation_scenario, MlpParams, TrainingRecord};

/// Instances whose reference cost is at or below this are excluded from
/// the ratio average: their ratio is dominated by rounding.
pub const DEGENERATE_COST: f64 = 1e-6;

/// Subsystem whose local problem the harnesses study.
pub const TARGET_SUBSYSTEM: usize = 0;

/// Local problems sampled from excited closed-loop runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverDataset {
    pub subsystem: usize,
    /// Problem data; the `u` field holds the in-loop solution.
    pub instances: Vec<TrainingRecord>,
    /// Componentwise range of the target state over the generating runs.
    pub envelope_lo: Vec<f64>,
    pub envelope_hi: Vec<f64>,
}

/// Samples `n` local problems of the target subsystem from closed-loop
/// runs under PRBS set-points and disturbances, with a 2 s updating period.
///
/// Only problems whose in-loop solution costs more than
/// [`DEGENERATE_COST`] are eligible: below that the optimum is zero up to
/// rounding and the cost ratio carries no information. The pool of logged
/// solves grows until `n` eligible problems are found.
pub fn make_solver_dataset(bench: &Benchmark, n: usize, seed: u64) -> Result<SolverDataset> {
    if n == 0 {
        return Err(Error::Config("solver dataset needs at least one instance".into()));
    }
    let mut pool = 100 * n;
    loop {
        let scenario = excitation_scenario(bench, 2.0, 40 * n + 400, seed);
        let setup = ClosedLoopSetup {
            bench,
            scenario: &scenario,
            solver: SolverConfig::default(),
            fixed_point: FixedPointConfig::default(),
            surrogates: Vec::new(),
        };
        let (ds, logs) = collect_with_logs(&setup, TARGET_SUBSYSTEM, pool, &|run| excitation_run(&scenario, run))?;
        let mut eligible = Vec::new();
        for rec in ds.records {
            let prob = instance_problem(bench, TARGET_SUBSYSTEM, &rec)?;
            if prob.value(rec.u.as_slice())? > DEGENERATE_COST {
                eligible.push(rec);
            }
        }
        if eligible.len() < n {
            if pool >= 1600 * n {
                return Err(Error::Config(format!(
                    "only {} of {pool} logged problems are non-degenerate",
                    eligible.len()
                )));
            }
            pool *= 2;
            continue;
        }
        let n_x = bench.models[TARGET_SUBSYSTEM].a.rows();
        let mut lo = vec![f64::INFINITY; n_x];
        let mut hi = vec![f64::NEG_INFINITY; n_x];
        for st in logs.iter().flat_map(|l| &l.steps) {
            for (j, v) in st.x[TARGET_SUBSYSTEM].iter().enumerate() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, eligible.len(), n).into_vec();
        picks.sort_unstable();
        return Ok(SolverDataset {
            subsystem: TARGET_SUBSYSTEM,
            instances: picks.into_iter().map(|i| eligible[i].clone()).collect(),
            envelope_lo: lo,
            envelope_hi: hi,
        });
    }
}

/// Local problem for one dataset instance.
pub fn instance_problem<'a>(bench: &'a Benchmark, s: usize, rec: &TrainingRecord) -> Result<LocalProblem<'a>> {
    let step_box = bench.input_boxes[s]
        .as_ref()
        .ok_or_else(|| Error::Config(format!("subsystem {s} has no inputs")))?;
    LocalProblem::new(
        &bench.models[s],
        rec.x.clone(),
        rec.r.clone(),
        rec.v_in.clone(),
        rec.w.clone(),
        BoxBounds::repeat(step_box, rec.v_in.horizon()),
        &bench.costs[s],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceStatus {
    Used,
    ReferenceNotConverged,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceResult {
    pub j_truncated: f64,
    pub j_reference: f64,
    /// `J_truncated / J_reference` for used instances.
    pub ratio: Option<f64>,
    pub t_truncated: f64,
    pub t_reference: f64,
    pub reference_iterations: usize,
    pub status: InstanceStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverComparisonReport {
    /// Mean ratio over used instances, in percent.
    pub j_bar: f64,
    pub t_max_truncated: f64,
    pub t_max_reference: f64,
    pub ratios: Vec<f64>,
    /// Instances entering the average.
    pub n_dta: usize,
    pub n_not_converged: usize,
    pub n_degenerate: usize,
    pub instances: Vec<InstanceResult>,
    pub truncated: SolverConfig,
    pub oracle: OracleConfig,
}

type SolveFn<'f> = dyn Fn(&LocalProblem<'_>) -> Result<SolveReport> + Sync + 'f;

/// Runs the truncated solver and the converged reference on every
/// instance.
pub fn compare_solvers(
    bench: &Benchmark,
    dataset: &SolverDataset,
    truncated: &SolverConfig,
    oracle: &OracleConfig,
) -> Result<SolverComparisonReport> {
    truncated.validate()?;
    let a = |p: &LocalProblem<'_>| solve(p, truncated);
    let b = |p: &LocalProblem<'_>| minimize_oracle(p, &p.bounds, oracle);
    let mut rep = compare_solvers_with(bench, dataset, &a, &b)?;
    rep.truncated = truncated.clone();
    rep.oracle = oracle.clone();
    Ok(rep)
}

/// Generic comparison of two solvers on the same problems.
pub fn compare_solvers_with(
    bench: &Benchmark,
    dataset: &SolverDataset,
    truncated: &SolveFn<'_>,
    reference: &SolveFn<'_>,
) -> Result<SolverComparisonReport> {
    if dataset.instances.is_empty() {
        return Err(Error::Config("solver comparison needs at least one instance".into()));
    }
    let s = dataset.subsystem;
    let results: Vec<Result<InstanceResult>> = dataset
        .instances
        .par_iter()
        .map(|rec| {
            let prob = instance_problem(bench, s, rec)?;
            let ta = truncated(&prob)?;
            let tb = reference(&prob)?;
            let status = if !tb.converged {
                InstanceStatus::ReferenceNotConverged
            } else if tb.j_final <= DEGENERATE_COST {
                InstanceStatus::Degenerate
            } else {
                InstanceStatus::Used
            };
            Ok(InstanceResult {
                j_truncated: ta.j_final,
                j_reference: tb.j_final,
                ratio: (status == InstanceStatus::Used).then(|| ta.j_final / tb.j_final),
                t_truncated: ta.wall_time,
                t_reference: tb.wall_time,
                reference_iterations: tb.iterations,
                status,
            })
        })
        .collect();
    let instances = results.into_iter().collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = instances.iter().filter_map(|r| r.ratio).collect();
    let count = |st| instances.iter().filter(|r| r.status == st).count();
    let j_bar = if ratios.is_empty() {
        f64::NAN
    } else {
        100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    Ok(SolverComparisonReport {
        j_bar,
        t_max_truncated: instances.iter().map(|r| r.t_truncated).fold(0.0, f64::max),
        t_max_reference: instances.iter().map(|r| r.t_reference).fold(0.0, f64::max),
        n_dta: ratios.len(),
        ratios,
        n_not_converged: count(InstanceStatus::ReferenceNotConverged),
        n_degenerate: count(InstanceStatus::Degenerate),
        instances,
        truncated: SolverConfig::default(),
        oracle: OracleConfig::default(),
    })
}

impl SolverComparisonReport {
    /// Per-instance rows: `index, status, j_truncated, j_reference, ratio,
    /// reference_iterations[, t_truncated, t_reference]`.
    pub fn write_csv<W: Write>(&self, out: W, with_wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "index",
            "status",
            "j_truncated",
            "j_reference",
            "ratio",
            "reference_iterations",
        ];
        if with_wall_time {
            header.extend(["t_truncated", "t_reference"]);
        }
        w.write_record(&header)?;
        for (i, r) in self.instances.iter().enumerate() {
            let status = match r.status {
                InstanceStatus::Used => "used",
                InstanceStatus::ReferenceNotConverged => "reference_not_converged",
                InstanceStatus::Degenerate => "degenerate",
            };
            let mut row = vec![
                i.to_string(),
                status.to_string(),
                r.j_truncated.to_string(),
                r.j_reference.to_string(),
                r.ratio.map_or(String::new(), |v| v.to_string()),
                r.reference_iterations.to_string(),
            ];
            if with_wall_time {
                row.push(r.t_truncated.to_string());
                row.push(r.t_reference.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary table: solver, N_max, tolerance, J_bar, t_max.
    pub fn summary_table(&self, with_wall_time: bool) -> String {
        let t = |v: f64| {
            if with_wall_time {
                format!("{v:.4}")
            } else {
                "-".to_string()
            }
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>10} {:>10} {:>10}",
            "solver", "N_max", "tolerance", "J_bar[%]", "t_max[s]"
        );
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>10.0e} {:>10} {:>10}",
            "converged reference",
            self.oracle.max_iter,
            self.oracle.tolerance,
            "100.00",
            t(self.t_max_reference)
        );
        let tol = self
            .truncated
            .tolerance
            .map_or("-".to_string(), |v| format!("{v:.0e}"));
        let _ = writeln!(
            s,
            "{:<22} {:>8} {:>10} {:>10.2} {:>10}",
            "truncated gradient",
            self.truncated.n_max,
            tol,
            self.j_bar,
            t(self.t_max_truncated)
        );
        let _ = writeln!(
            s,
            "instances used: {}, reference not converged: {}, degenerate (J_ref <= {:e}): {}",
            self.n_dta, self.n_not_converged, DEGENERATE_COST, self.n_degenerate
        );
        s
    }
}

/// Nominal set-points, PRBS disturbance on subsystem 0, steady initial
/// state. The controllers see the current disturbance held over the
/// horizon. Scenarios built with the same `seed` and `sim_steps` share one
/// disturbance realization.
pub fn comparison_scenario(
    bench: &Benchmark,
    updating_period: f64,
    controller: ControllerKind,
    sim_steps: usize,
    seed: u64,
) -> ScenarioConfig {
    let (w_lo, w_hi) = bench.disturbance_range();
    ScenarioConfig {
        horizon: bench.horizon(),
        updating_period,
        sim_steps,
        seed,
        setpoints: bench
            .nominal_setpoints()
            .into_iter()
            .map(SignalSpec::Constant)
            .collect(),
        disturbances: vec![DisturbanceEntry {
            subsystem: 0,
            signal: SignalSpec::Prbs {
                lo: vec![w_lo],
                hi: vec![w_hi],
                hold: [4, 40],
            },
        }],
        controllers: bench
            .topology
            .controlled()
            .iter()
            .map(|&s| if s == TARGET_SUBSYSTEM { controller } else { ControllerKind::ExactNmpc })
            .collect(),
        initial_state: InitialState::Steady,
        forecast: Forecast::Hold,
        ..ScenarioConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopEntry {
    pub label: String,
    pub controllers: Vec<ControllerKind>,
    pub updating_period: f64,
    /// The run's log, or the error that aborted it.
    pub outcome: std::result::Result<ClosedLoopLog, String>,
}

impl ClosedLoopEntry {
    pub fn j_c_cl(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|l| l.j_c_cl)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopComparisonReport {
    pub entries: Vec<ClosedLoopEntry>,
}

/// Runs every scenario; they must share the disturbance description, the
/// seed and the duration.
pub fn compare_closed_loop(
    bench: &Benchmark,
    scenarios: &[(String, ScenarioConfig)],
    solver: &SolverConfig,
    fixed_point: &FixedPointConfig,
    surrogates: &[(usize, &MlpParams)],
) -> Result<ClosedLoopComparisonReport> {
    if let Some((_, first)) = scenarios.first() {
        for (label, sc) in scenarios {
            if sc.disturbances != first.disturbances || sc.seed != first.seed || sc.sim_steps != first.sim_steps {
                return Err(Error::Config(format!(
                    "scenario {label} does not share the disturbance realization and duration"
                )));
            }
        }
    }
    let entries = scenarios
        .iter()
        .map(|(label, sc)| {
            let setup = ClosedLoopSetup {
                bench,
                scenario: sc,
                solver: solver.clone(),
                fixed_point: fixed_point.clone(),
                surrogates: surrogates.to_vec(),
            };
            ClosedLoopEntry {
                label: label.clone(),
                controllers: sc.controllers.clone(),
                updating_period: sc.updating_period,
                outcome: closed_loop_run(&setup).map_err(|e| e.to_string()),
            }
        })
        .collect();
    Ok(ClosedLoopComparisonReport { entries })
}

fn controller_label(kinds: &[ControllerKind]) -> String {
    kinds
        .iter()
        .map(|k| match k {
            ControllerKind::ExactNmpc => "exact_nmpc",
            ControllerKind::Surrogate => "surrogate",
        })
        .collect::<Vec<_>>()
        .join("+")
}

impl ClosedLoopComparisonReport {
    /// Rows: `label, controllers, updating_period, j_c_cl, updates,
    /// nonconverged_updates, error[, max_solve_time, mean_solve_time]`.
    pub fn write_csv<W: Write>(&self, out: W, with_wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "label",
            "controllers",
            "updating_period",
            "j_c_cl",
            "updates",
            "nonconverged_updates",
            "error",
        ];
        if with_wall_time {
            header.extend(["max_solve_time", "mean_solve_time"]);
        }
        w.write_record(&header)?;
        for e in &self.entries {
            let mut row = vec![
                e.label.clone(),
                controller_label(&e.controllers),
                e.updating_period.to_string(),
            ];
            match &e.outcome {
                Ok(log) => {
                    row.extend([
                        log.j_c_cl.to_string(),
                        log.updates.to_string(),
                        log.nonconverged_updates.to_string(),
                        String::new(),
                    ]);
                    if with_wall_time {
                        let times: Vec<f64> = log.update_solve_times();
                        let max = times.iter().copied().fold(0.0, f64::max);
                        let mean = times.iter().sum::<f64>() / times.len().max(1) as f64;
                        row.extend([max.to_string(), mean.to_string()]);
                    }
                }
                Err(msg) => {
                    row.extend([String::new(), String::new(), String::new(), msg.clone()]);
                    if with_wall_time {
                        row.extend([String::new(), String::new()]);
                    }
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One line per configuration.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:<24} {:>8} {:>14}",
            "configuration", "controllers", "tau_u[s]", "J_c_cl"
        );
        for e in &self.entries {
            let j = match &e.outcome {
                Ok(log) => format!("{:.6e}", log.j_c_cl),
                Err(msg) => format!("failed: {msg}"),
            };
            let _ = writeln!(
                s,
                "{:<24} {:<24} {:>8} {:>14}",
                e.label,
                controller_label(&e.controllers),
                e.updating_period,
                j
            );
        }
        s
    }
}
