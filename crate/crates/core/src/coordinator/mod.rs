//! The upper layer: filtered fixed-point coordination of the coupling
//! profiles, set-point search and closed-loop simulation.
//!
//! The coordinator only talks to [`SubsystemAgent`]s. One message round
//! ("sweep") sends each agent its set-point and its incoming coupling stack
//! and collects the outgoing stack and local cost it answers with.

mod closed_loop;

pub use closed_loop::{
    closed_loop_run, closed_loop_run_observed, ClosedLoopLog, ClosedLoopSetup, LocalController,
    LoopObserver, PlantAgent, StepLog, UpdateContext,
};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::network::{
    assemble_incoming, build_routing, split_incoming, stack_outgoing, CouplingTopology,
    RoutingMatrix,
};

/// One agent's answer to a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentResponse {
    /// Flat control profile; empty for uncontrolled subsystems.
    pub u: Vec<f64>,
    /// Outgoing stack in edge-blocked layout.
    pub v_out: Vec<f64>,
    pub cost: f64,
    /// Seconds spent in the local controller.
    pub solve_time: f64,
}

/// A subsystem as seen by the coordinator.
pub trait SubsystemAgent: Sync {
    /// Length of the set-point this agent receives; 0 when uncontrolled.
    fn setpoint_dim(&self) -> usize;

    /// Computes the control profile (if any), the outgoing coupling stack
    /// and the local cost for an incoming stack.
    fn respond(&self, r_s: &[f64], v_in: &[f64]) -> Result<AgentResponse>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    pub sigma_max: usize,
    /// Stop once `max|v_in⁽σ⁺¹⁾ − v_in⁽σ⁾| ≤ eps_tol`.
    pub eps_tol: f64,
    /// Relaxation weight of the new iterate.
    pub alpha: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            sigma_max: 30,
            eps_tol: 1e-6,
            alpha: 0.7,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_max == 0 {
            return Err(Error::Config("sigma_max must be at least 1".into()));
        }
        if !(self.eps_tol > 0.0) {
            return Err(Error::Config("eps_tol must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Output of one message round.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    /// Network-wide outgoing stack.
    pub v_out: Vec<f64>,
    pub costs: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    pub solve_times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationResult {
    pub j_c: f64,
    pub v_in_star: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub costs: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    /// `max|Δv_in|` after every sweep.
    pub residuals: Vec<f64>,
    /// Controller time summed over all sweeps, per subsystem.
    pub solve_times: Vec<f64>,
}

/// `(1 − α)·v_prev + α·v_hat`
pub fn filter_update(v_prev: &[f64], v_hat: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_len("filtered profile", v_prev.len(), v_hat.len())?;
    if alpha == 1.0 {
        return Ok(v_hat.to_vec());
    }
    Ok(v_prev
        .iter()
        .zip(v_hat)
        .map(|(p, h)| p + alpha * (h - p))
        .collect())
}

/// Sum of the local costs.
pub fn central_cost(costs: &[f64]) -> f64 {
    costs.iter().sum()
}

pub struct Coordinator<'a> {
    topology: CouplingTopology,
    routing: RoutingMatrix,
    agents: Vec<&'a dyn SubsystemAgent>,
    parallel: bool,
}

impl<'a> Coordinator<'a> {
    /// `agents[s]` answers for subsystem `s`.
    pub fn new(topology: &CouplingTopology, agents: Vec<&'a dyn SubsystemAgent>) -> Result<Self> {
        check_len("agents", topology.n_subsystems(), agents.len())?;
        for (s, a) in agents.iter().enumerate() {
            if (a.setpoint_dim() > 0) != topology.is_controlled(s) {
                return Err(Error::Topology(format!(
                    "agent {s} set-point dimension disagrees with the controlled set"
                )));
            }
        }
        Ok(Self {
            routing: build_routing(topology)?,
            topology: topology.clone(),
            agents,
            parallel: true,
        })
    }

    /// Runs the agents of a sweep one after the other instead of on the
    /// thread pool. Results are identical either way.
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    pub fn topology(&self) -> &CouplingTopology {
        &self.topology
    }

    pub fn setpoint_len(&self) -> usize {
        self.agents.iter().map(|a| a.setpoint_dim()).sum()
    }

    /// Splits the stacked set-point over the subsystems (empty slices for
    /// uncontrolled ones).
    pub fn split_setpoint<'r>(&self, r: &'r [f64]) -> Result<Vec<&'r [f64]>> {
        check_len("set-point vector", self.setpoint_len(), r.len())?;
        let mut out = Vec::with_capacity(self.agents.len());
        let mut start = 0;
        for a in &self.agents {
            let d = a.setpoint_dim();
            out.push(&r[start..start + d]);
            start += d;
        }
        Ok(out)
    }

    /// One message round at `(r, v_in)`.
    pub fn sweep(&self, r: &[f64], v_in: &[f64]) -> Result<SweepOutput> {
        let r_parts = self.split_setpoint(r)?;
        let v_parts = split_incoming(v_in, &self.topology)?;
        let call = |s: usize| {
            self.agents[s]
                .respond(r_parts[s], &v_parts[s])
                .map_err(|e| Error::Subsystem {
                    subsystem: s,
                    source: Box::new(e),
                })
        };
        let n = self.agents.len();
        let responses: Vec<Result<AgentResponse>> = if self.parallel {
            (0..n).into_par_iter().map(call).collect()
        } else {
            (0..n).map(call).collect()
        };
        let mut outs = Vec::with_capacity(n);
        let mut costs = Vec::with_capacity(n);
        let mut controls = Vec::with_capacity(n);
        let mut solve_times = Vec::with_capacity(n);
        for resp in responses {
            let resp = resp?;
            outs.push(resp.v_out);
            costs.push(resp.cost);
            controls.push(resp.u);
            solve_times.push(resp.solve_time);
        }
        Ok(SweepOutput {
            v_out: stack_outgoing(&outs, &self.topology)?,
            costs,
            controls,
            solve_times,
        })
    }

    /// Filtered fixed-point iteration at set-point `r`.
    pub fn evaluate_setpoint(
        &self,
        r: &[f64],
        v_in_init: &[f64],
        cfg: &FixedPointConfig,
    ) -> Result<CoordinationResult> {
        self.evaluate_setpoint_observed(r, v_in_init, cfg, &mut |_, _| {})
    }

    /// As [`Coordinator::evaluate_setpoint`], calling `observer` with the
    /// incoming stack and the output of every sweep.
    pub fn evaluate_setpoint_observed(
        &self,
        r: &[f64],
        v_in_init: &[f64],
        cfg: &FixedPointConfig,
        observer: &mut dyn FnMut(&[f64], &SweepOutput),
    ) -> Result<CoordinationResult> {
        cfg.validate()?;
        check_len("initial incoming profile", self.routing.rows(), v_in_init.len())?;
        let mut v = v_in_init.to_vec();
        let mut residuals = Vec::new();
        let mut solve_times = vec![0.0; self.agents.len()];
        let mut converged = false;
        let mut last = None;
        for _ in 0..cfg.sigma_max {
            let out = self.sweep(r, &v)?;
            observer(&v, &out);
            for (acc, t) in solve_times.iter_mut().zip(&out.solve_times) {
                *acc += t;
            }
            let v_hat = assemble_incoming(&out.v_out, &self.routing)?;
            let v_next = filter_update(&v, &v_hat, cfg.alpha)?;
            let res = v_next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if !res.is_finite() {
                return Err(Error::NonFinite {
                    quantity: "coupling residual",
                    iteration: residuals.len(),
                });
            }
            residuals.push(res);
            v = v_next;
            last = Some(out);
            if res <= cfg.eps_tol {
                converged = true;
                break;
            }
        }
        let last = last.expect("sigma_max ≥ 1");
        Ok(CoordinationResult {
            j_c: central_cost(&last.costs),
            v_in_star: v,
            converged,
            sweeps: residuals.len(),
            costs: last.costs,
            controls: last.controls,
            residuals,
            solve_times,
        })
    }

    /// Compass search for the set-point minimizing the central cost.
    pub fn optimize_setpoints(
        &self,
        r0: &[f64],
        bounds: &SetpointBounds,
        budget: usize,
        v_in_init: &[f64],
        cfg: &FixedPointConfig,
    ) -> Result<SetpointOptimum> {
        pattern_search(r0, bounds, budget, |r| {
            let res = self.evaluate_setpoint(r, v_in_init, cfg)?;
            Ok(res.converged.then_some(res.j_c))
        })
    }
}

/// Box on the stacked set-point vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetpointOptimum {
    pub r_opt: Vec<f64>,
    pub j_opt: f64,
    pub evaluations: usize,
}

/// Derivative-free compass search with a halving step.
///
/// `score` returns `None` for candidates whose coordination did not
/// converge; those count against the budget but never win. The initial
/// step is a quarter of each coordinate's range; the first evaluation is
/// always `r0`.
pub fn pattern_search(
    r0: &[f64],
    bounds: &SetpointBounds,
    budget: usize,
    mut score: impl FnMut(&[f64]) -> Result<Option<f64>>,
) -> Result<SetpointOptimum> {
    let n = r0.len();
    check_len("set-point bounds", n, bounds.lo.len())?;
    check_len("set-point bounds", n, bounds.hi.len())?;
    if budget == 0 {
        return Err(Error::Config("set-point search budget must be at least 1".into()));
    }
    if r0
        .iter()
        .zip(bounds.lo.iter().zip(&bounds.hi))
        .any(|(r, (l, h))| !(l <= r && r <= h))
    {
        return Err(Error::Config("initial set-point outside its bounds".into()));
    }
    let mut evaluated = Vec::new();
    let mut eval = |r: &[f64], evaluated: &mut Vec<(Vec<f64>, Option<f64>)>| -> Result<Option<f64>> {
        let j = score(r)?;
        evaluated.push((r.to_vec(), j));
        Ok(j)
    };
    let mut best_r = r0.to_vec();
    let mut best_j = eval(r0, &mut evaluated)?;
    let mut step: Vec<f64> = bounds
        .lo
        .iter()
        .zip(&bounds.hi)
        .map(|(l, h)| 0.25 * (h - l))
        .collect();
    let min_step = 1e-12;
    'outer: while evaluated.len() < budget && step.iter().any(|s| *s > min_step) {
        let mut improved = false;
        for k in 0..n {
            for dir in [1.0, -1.0] {
                if evaluated.len() >= budget {
                    break 'outer;
                }
                let mut cand = best_r.clone();
                cand[k] = (cand[k] + dir * step[k]).clamp(bounds.lo[k], bounds.hi[k]);
                if cand[k] == best_r[k] {
                    continue;
                }
                if let Some(j) = eval(&cand, &mut evaluated)? {
                    if best_j.map_or(true, |b| j < b) {
                        best_j = Some(j);
                        best_r = cand;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    match best_j {
        Some(j_opt) => Ok(SetpointOptimum {
            r_opt: best_r,
            j_opt,
            evaluations: evaluated.len(),
        }),
        None => Err(Error::NoConvergedCandidate {
            evaluated: evaluated.len(),
            candidates: evaluated
                .iter()
                .map(|(r, _)| format!("{r:?}"))
                .collect::<Vec<_>>()
                .join(", "),
        }),
    }
}

/// Per-call timer for agents.
pub(crate) fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}
