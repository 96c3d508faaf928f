use std::io::Write;

use super::{
    timed, AgentResponse, CoordinationResult, Coordinator, FixedPointConfig, SetpointBounds,
    SubsystemAgent, SweepOutput,
};
use crate::error::{Error, Result};
use crate::fastgrad::{minimize, solve, BoxBounds, LocalProblem, SolverConfig};
use crate::network::{build_routing, shift_incoming, assemble_incoming, BlockLayout, Profile};
use crate::plant::{
    local_cost, rollout, Benchmark, ControllerKind, Forecast, InitialState, LocalCostSpec,
    ScenarioConfig, SubsystemModel,
};
use crate::surrogate::{surrogate_control, MlpParams};

/// How a subsystem computes its control profile.
#[derive(Debug, Clone)]
pub enum LocalController<'a> {
    /// Uncontrolled: rollout only.
    None,
    /// Truncated fast gradient, optionally seeded with a previous solution.
    Exact {
        cfg: SolverConfig,
        warm: Option<Vec<f64>>,
    },
    Surrogate(&'a MlpParams),
}

/// A benchmark subsystem frozen at the current state and disturbance
/// forecast.
#[derive(Debug, Clone)]
pub struct PlantAgent<'a> {
    pub model: &'a dyn SubsystemModel,
    pub cost: &'a LocalCostSpec,
    pub bounds: Option<BoxBounds>,
    pub layout_in: BlockLayout,
    pub layout_out: BlockLayout,
    pub x0: Vec<f64>,
    pub w: Profile,
    /// Set-point the reported local cost is measured against.
    pub cost_setpoint: Vec<f64>,
    pub controller: LocalController<'a>,
    controlled: bool,
}

impl<'a> PlantAgent<'a> {
    pub fn new(
        bench: &'a Benchmark,
        s: usize,
        x0: Vec<f64>,
        w: Profile,
        cost_setpoint: Vec<f64>,
        controller: LocalController<'a>,
    ) -> Result<Self> {
        let t = &bench.topology;
        let controlled = t.is_controlled(s);
        if controlled == matches!(controller, LocalController::None) {
            return Err(Error::Config(format!(
                "subsystem {s}: controller choice does not match the controlled set"
            )));
        }
        Ok(Self {
            model: &bench.models[s],
            cost: &bench.costs[s],
            bounds: bench.input_boxes[s]
                .as_ref()
                .map(|b| BoxBounds::repeat(b, t.horizon())),
            layout_in: t.incoming_layout(s),
            layout_out: t.outgoing_layout(s),
            x0,
            w,
            cost_setpoint,
            controller,
            controlled,
        })
    }

    /// The local NMPC problem for set-point `r_s` and incoming profile
    /// `v_in` (time-major).
    pub fn local_problem(&self, r_s: &[f64], v_in: Profile) -> Result<LocalProblem<'a>> {
        let bounds = self
            .bounds
            .clone()
            .ok_or_else(|| Error::Config("uncontrolled subsystem has no local problem".into()))?;
        LocalProblem::new(
            self.model,
            self.x0.clone(),
            r_s.to_vec(),
            v_in,
            self.w.clone(),
            bounds,
            self.cost,
        )
    }
}

impl SubsystemAgent for PlantAgent<'_> {
    fn setpoint_dim(&self) -> usize {
        if self.controlled {
            self.model.dims().n_y
        } else {
            0
        }
    }

    fn respond(&self, r_s: &[f64], v_in: &[f64]) -> Result<AgentResponse> {
        let v = self.layout_in.to_time_major(v_in)?;
        let n = v.horizon();
        let n_u = self.model.dims().n_u;
        let (u, solve_time) = match &self.controller {
            LocalController::None => (Profile::zeros(n_u, n), 0.0),
            LocalController::Exact { cfg, warm } => {
                let prob = self.local_problem(r_s, v.clone())?;
                let (rep, t) = timed(|| match warm {
                    Some(u0) => minimize(&prob, &prob.bounds, cfg, Some(u0)),
                    None => solve(&prob, cfg),
                })?;
                (Profile::new(rep.u_star, n_u, n)?, t)
            }
            LocalController::Surrogate(params) => {
                let bounds = self.bounds.as_ref().expect("controlled agent has bounds");
                timed(|| surrogate_control(params, &self.x0, r_s, &v, &self.w, bounds))?
            }
        };
        let ro = rollout(self.model, &self.x0, &u, &v, &self.w)?;
        let cost = local_cost(self.cost, &ro.y, &u, &self.cost_setpoint)?;
        Ok(AgentResponse {
            u: u.into_vec(),
            v_out: self.layout_out.from_time_major(&ro.v_out)?,
            cost,
            solve_time,
        })
    }
}

/// Everything a closed-loop run needs besides the scenario.
#[derive(Debug, Clone)]
pub struct ClosedLoopSetup<'a> {
    pub bench: &'a Benchmark,
    pub scenario: &'a ScenarioConfig,
    pub solver: SolverConfig,
    pub fixed_point: FixedPointConfig,
    /// Trained surrogates keyed by subsystem index.
    pub surrogates: Vec<(usize, &'a MlpParams)>,
}

/// State of the loop at a controller update, handed to observers.
#[derive(Debug)]
pub struct UpdateContext<'c> {
    pub step: usize,
    pub states: &'c [Vec<f64>],
    /// Stacked set-point sent to the agents.
    pub setpoint: &'c [f64],
    /// Disturbance forecast per subsystem.
    pub forecasts: &'c [Profile],
}

/// Hooks into a closed-loop run.
pub trait LoopObserver {
    fn on_sweep(&mut self, ctx: &UpdateContext<'_>, v_in: &[f64], out: &SweepOutput);

    fn on_update(&mut self, _ctx: &UpdateContext<'_>, _result: &CoordinationResult) {}

    /// Stops the run after the current update when true.
    fn done(&self) -> bool {
        false
    }
}

struct NoObserver;

impl LoopObserver for NoObserver {
    fn on_sweep(&mut self, _: &UpdateContext<'_>, _: &[f64], _: &SweepOutput) {}
}

/// One simulated step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub time: f64,
    /// State at the start of the step, per subsystem. Not written to CSV.
    pub x: Vec<Vec<f64>>,
    /// Per subsystem.
    pub y: Vec<Vec<f64>>,
    /// Applied input per subsystem (empty when uncontrolled).
    pub u: Vec<Vec<f64>>,
    /// Desired set-point per subsystem (empty when uncontrolled).
    pub r: Vec<Vec<f64>>,
    /// Realized disturbance per subsystem.
    pub w: Vec<Vec<f64>>,
    /// Stage cost per subsystem.
    pub j: Vec<f64>,
    /// Whether the controller was updated at this step.
    pub update: bool,
    /// Sweeps of the update governing this step.
    pub sweeps: usize,
    pub converged: bool,
    /// Controller seconds spent in this step's update (0 between updates).
    pub solve_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub steps: Vec<StepLog>,
    /// Time average of the summed stage costs.
    pub j_c_cl: f64,
    pub updates: usize,
    pub nonconverged_updates: usize,
    pub final_states: Vec<Vec<f64>>,
}

impl ClosedLoopLog {
    /// Controller seconds of each update, in order.
    pub fn update_solve_times(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| s.update)
            .map(|s| s.solve_time)
            .collect()
    }

    /// Column names, in file order.
    pub fn csv_header(&self, with_wall_time: bool) -> Vec<String> {
        let mut h = vec!["time".to_string()];
        let first = match self.steps.first() {
            Some(s) => s,
            None => return h,
        };
        let groups: [(&str, &Vec<Vec<f64>>); 4] =
            [("y", &first.y), ("u", &first.u), ("r", &first.r), ("w", &first.w)];
        for (name, g) in groups {
            for (s, v) in g.iter().enumerate() {
                for j in 0..v.len() {
                    h.push(format!("{name}{s}_{j}"));
                }
            }
        }
        for s in 0..first.j.len() {
            h.push(format!("J{s}"));
        }
        h.push("sweeps".into());
        h.push("converged".into());
        if with_wall_time {
            h.push("solve_time".into());
        }
        h
    }

    /// Writes one row per simulated step.
    pub fn write_csv<W: Write>(&self, out: W, with_wall_time: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header(with_wall_time))?;
        for st in &self.steps {
            let mut row = vec![st.time.to_string()];
            for g in [&st.y, &st.u, &st.r, &st.w] {
                row.extend(g.iter().flatten().map(f64::to_string));
            }
            row.extend(st.j.iter().map(f64::to_string));
            row.push(st.sweeps.to_string());
            row.push(st.converged.to_string());
            if with_wall_time {
                row.push(st.solve_time.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the scenario with no observer.
pub fn closed_loop_run(setup: &ClosedLoopSetup<'_>) -> Result<ClosedLoopLog> {
    closed_loop_run_observed(setup, &mut NoObserver)
}

/// Simulates the benchmark under the hierarchical controller.
///
/// Every updating period the coordinator runs the fixed-point iteration at
/// the scheduled set-points (or the searched ones), warm-started with the
/// previous converged coupling profile shifted by one period. The first
/// step of each control profile is held until the next update. When the
/// coordination does not converge, the last converged profile is advanced
/// instead.
pub fn closed_loop_run_observed(
    setup: &ClosedLoopSetup<'_>,
    observer: &mut dyn LoopObserver,
) -> Result<ClosedLoopLog> {
    let sc = setup.scenario;
    let owned;
    let bench = if setup.bench.horizon() == sc.horizon {
        setup.bench
    } else {
        owned = setup.bench.with_horizon(sc.horizon)?;
        &owned
    };
    sc.validate(bench)?;
    setup.solver.validate()?;
    setup.fixed_point.validate()?;
    let m = sc.period_steps(bench.sample_time)?;
    let n = sc.horizon;
    let topo = &bench.topology;
    let n_s = bench.n_subsystems();
    let controlled = topo.controlled().to_vec();
    for (k, &s) in controlled.iter().enumerate() {
        if sc.controllers[k] == ControllerKind::Surrogate
            && !setup.surrogates.iter().any(|(i, _)| *i == s)
        {
            return Err(Error::Config(format!("no surrogate supplied for subsystem {s}")));
        }
    }
    let signals = sc.signals(bench);
    let sim_models = bench.simulation_models();
    let step_routing = build_routing(&topo.with_horizon(1)?)?;
    let step_topo = topo.with_horizon(1)?;

    let mut x: Vec<Vec<f64>> = match sc.initial_state {
        InitialState::Zero => bench.models.iter().map(|m| vec![0.0; m.a.rows()]).collect(),
        InitialState::Steady => {
            let r0: Vec<_> = signals.setpoints.iter().map(|s| s[0].clone()).collect();
            let w0: Vec<_> = signals.disturbances.iter().map(|d| d[0].clone()).collect();
            bench.steady_state(&r0, &w0)?.states
        }
    };

    let mut v_warm = vec![0.0; topo.stacked_len()];
    let mut active: Vec<Profile> = bench
        .models
        .iter()
        .map(|m| Profile::zeros(m.b.cols(), n))
        .collect();
    let mut have_active = false;
    let mut active_age = 0usize;
    let mut prev_controls: Option<Vec<Vec<f64>>> = None;
    let mut steps = Vec::with_capacity(sc.sim_steps);
    let mut updates = 0;
    let mut nonconverged = 0;
    let mut last_sweeps = 0;
    let mut last_converged = false;
    let mut total_cost = 0.0;

    for k in 0..sc.sim_steps {
        let mut step_solve_time = 0.0;
        if k % m == 0 {
            let forecasts: Vec<Profile> = (0..n_s)
                .map(|s| {
                    let d = &signals.disturbances[s];
                    let mut p = Profile::zeros(d[k].len(), n);
                    for i in 0..n {
                        let src = match sc.forecast {
                            Forecast::Preview => k + 1 + i,
                            Forecast::Hold => k,
                        };
                        p.step_mut(i).copy_from_slice(&d[src]);
                    }
                    p
                })
                .collect();
            let r_d: Vec<f64> = signals.setpoints.iter().flat_map(|s| s[k].clone()).collect();
            let mut agents = Vec::with_capacity(n_s);
            let mut r_off = 0;
            for s in 0..n_s {
                let ctrl = match controlled.iter().position(|&c| c == s) {
                    None => LocalController::None,
                    Some(ci) => match sc.controllers[ci] {
                        ControllerKind::ExactNmpc => LocalController::Exact {
                            cfg: setup.solver.clone(),
                            warm: if sc.warm_start {
                                prev_controls.as_ref().map(|pc| {
                                    Profile::new(pc[s].clone(), bench.models[s].b.cols(), n)
                                        .expect("stored profile shape")
                                        .shifted(m)
                                        .into_vec()
                                })
                            } else {
                                None
                            },
                        },
                        ControllerKind::Surrogate => LocalController::Surrogate(
                            setup
                                .surrogates
                                .iter()
                                .find(|(i, _)| *i == s)
                                .map(|(_, p)| *p)
                                .expect("checked above"),
                        ),
                    },
                };
                let dim = if topo.is_controlled(s) { bench.models[s].c.rows() } else { 0 };
                let cost_r = r_d[r_off..r_off + dim].to_vec();
                r_off += dim;
                agents.push(PlantAgent::new(
                    bench,
                    s,
                    x[s].clone(),
                    forecasts[s].clone(),
                    cost_r,
                    ctrl,
                )?);
            }
            let agent_refs: Vec<&dyn SubsystemAgent> =
                agents.iter().map(|a| a as &dyn SubsystemAgent).collect();
            let coord = Coordinator::new(topo, agent_refs)?;
            let r = match &sc.setpoint_search {
                None => r_d.clone(),
                Some(search) => {
                    let ranges = bench.setpoint_ranges();
                    let bounds = SetpointBounds {
                        lo: ranges.iter().flat_map(|r| r.0.clone()).collect(),
                        hi: ranges.iter().flat_map(|r| r.1.clone()).collect(),
                    };
                    let r0: Vec<f64> = r_d
                        .iter()
                        .zip(bounds.lo.iter().zip(&bounds.hi))
                        .map(|(r, (l, h))| r.clamp(*l, *h))
                        .collect();
                    coord
                        .optimize_setpoints(&r0, &bounds, search.budget, &v_warm, &setup.fixed_point)?
                        .r_opt
                }
            };
            let ctx = UpdateContext {
                step: k,
                states: &x,
                setpoint: &r,
                forecasts: &forecasts,
            };
            let result = coord.evaluate_setpoint_observed(
                &r,
                &v_warm,
                &setup.fixed_point,
                &mut |v, out| observer.on_sweep(&ctx, v, out),
            )?;
            observer.on_update(&ctx, &result);
            updates += 1;
            step_solve_time = result.solve_times.iter().sum();
            last_sweeps = result.sweeps;
            last_converged = result.converged;
            if result.converged || !have_active {
                for s in 0..n_s {
                    active[s] = Profile::new(result.controls[s].clone(), bench.models[s].b.cols(), n)?;
                }
                have_active = true;
                active_age = 0;
                prev_controls = Some(result.controls.clone());
                v_warm = shift_incoming(&result.v_in_star, topo, m)?;
            } else {
                active_age += m;
                v_warm = shift_incoming(&v_warm, topo, m)?;
            }
            if !result.converged {
                nonconverged += 1;
            }
        }

        // Plant step. Coupling outputs depend on the state only, so they are
        // known before the incoming signals are assembled.
        let idx = active_age.min(n - 1);
        let u_now: Vec<Vec<f64>> = (0..n_s).map(|s| active[s].step(idx).to_vec()).collect();
        let w_now: Vec<Vec<f64>> = (0..n_s).map(|s| signals.disturbances[s][k].clone()).collect();
        let mut v_out_parts = Vec::with_capacity(n_s);
        for s in 0..n_s {
            let d = sim_models[s].dims();
            let probe = sim_models[s].step_unchecked(&x[s], &u_now[s], &vec![0.0; d.n_vin], &w_now[s]);
            v_out_parts.push(probe.v_out);
        }
        let v_out_all = crate::network::stack_outgoing(&v_out_parts, &step_topo)?;
        let v_in_all = assemble_incoming(&v_out_all, &step_routing)?;
        let v_in_parts = crate::network::split_incoming(&v_in_all, &step_topo)?;
        let mut ys = Vec::with_capacity(n_s);
        let mut js = Vec::with_capacity(n_s);
        let mut x_next = Vec::with_capacity(n_s);
        let mut r_log = Vec::with_capacity(n_s);
        let mut ci = 0;
        for s in 0..n_s {
            let out = sim_models[s].step_unchecked(&x[s], &u_now[s], &v_in_parts[s], &w_now[s]);
            let r_s: Vec<f64> = if topo.is_controlled(s) {
                let r = signals.setpoints[ci][k].clone();
                ci += 1;
                r
            } else {
                Vec::new()
            };
            r_log.push(r_s.clone());
            js.push(bench.costs[s].stage_cost(&out.y, &u_now[s], &r_s));
            ys.push(out.y);
            x_next.push(out.x_next);
        }
        total_cost += js.iter().sum::<f64>();
        steps.push(StepLog {
            time: k as f64 * bench.sample_time,
            x: x.clone(),
            y: ys,
            u: u_now,
            r: r_log,
            w: w_now,
            j: js,
            update: k % m == 0,
            sweeps: last_sweeps,
            converged: last_converged,
            solve_time: step_solve_time,
        });
        x = x_next;
        let norm = x.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(norm <= sc.divergence_bound) {
            return Err(Error::Diverged { step: k, norm });
        }
        if k % m == m - 1 && observer.done() {
            break;
        }
    }
    let n_steps = steps.len();
    Ok(ClosedLoopLog {
        steps,
        j_c_cl: total_cost / n_steps as f64,
        updates,
        nonconverged_updates: nonconverged,
        final_states: x,
    })
}
