//! Truncated projected fast gradient solver for box-constrained local NMPC
//! problems, with Barzilai–Borwein step sizes and periodic restart, and a
//! converged projected-gradient reference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::dot;
use crate::network::Profile;
use crate::plant::{rollout_unchecked, InputBox, LocalCostSpec, SubsystemModel};

/// A smooth objective over a flat decision vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, u: &[f64]) -> Result<f64>;

    /// Writes `∇J(u)` into `grad` and returns `J(u)`.
    fn value_and_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// Componentwise box `lo ≤ u ≤ hi` over a stacked profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_len("box bounds", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::Config("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lo, hi })
    }

    /// The per-step box repeated over the horizon.
    pub fn repeat(step: &InputBox, horizon: usize) -> Self {
        let mut lo = Vec::with_capacity(step.dim() * horizon);
        let mut hi = Vec::with_capacity(step.dim() * horizon);
        for _ in 0..horizon {
            lo.extend_from_slice(&step.lo);
            hi.extend_from_slice(&step.hi);
        }
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.dim()
            && u.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn project_in_place(&self, u: &mut [f64]) {
        for (v, (l, h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }
}

/// Componentwise clamp of `p` onto `bounds`.
pub fn project_box(p: &[f64], bounds: &BoxBounds) -> Result<Vec<f64>> {
    check_len("projected vector", bounds.dim(), p.len())?;
    let mut out = p.to_vec();
    bounds.project_in_place(&mut out);
    Ok(out)
}

/// One subsystem's NMPC instance with everything but the input profile
/// frozen.
#[derive(Debug, Clone)]
pub struct LocalProblem<'a> {
    pub model: &'a dyn SubsystemModel,
    pub x0: Vec<f64>,
    pub setpoint: Vec<f64>,
    pub v_in: Profile,
    pub w: Profile,
    pub bounds: BoxBounds,
    pub cost: &'a LocalCostSpec,
}

impl<'a> LocalProblem<'a> {
    pub fn new(
        model: &'a dyn SubsystemModel,
        x0: Vec<f64>,
        setpoint: Vec<f64>,
        v_in: Profile,
        w: Profile,
        bounds: BoxBounds,
        cost: &'a LocalCostSpec,
    ) -> Result<Self> {
        let d = model.dims();
        let n = v_in.horizon();
        check_len("state", d.n_x, x0.len())?;
        check_len("incoming profile step", d.n_vin, v_in.step_dim())?;
        check_len("disturbance profile step", d.n_w, w.step_dim())?;
        check_len("disturbance horizon", n, w.horizon())?;
        check_len("input bounds", d.n_u * n, bounds.dim())?;
        cost.validate(d.n_y, d.n_u)?;
        if matches!(cost.kind, crate::plant::CostKind::Tracking) {
            check_len("set-point", d.n_y, setpoint.len())?;
        }
        Ok(Self {
            model,
            x0,
            setpoint,
            v_in,
            w,
            bounds,
            cost,
        })
    }

    pub fn horizon(&self) -> usize {
        self.v_in.horizon()
    }

    pub fn n_u(&self) -> usize {
        self.model.dims().n_u
    }

    fn input_profile(&self, u: &[f64]) -> Profile {
        Profile::new(u.to_vec(), self.n_u(), self.horizon()).expect("length checked by caller")
    }
}

impl Objective for LocalProblem<'_> {
    fn dim(&self) -> usize {
        self.n_u() * self.horizon()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        check_len("input profile", self.dim(), u.len())?;
        let up = self.input_profile(u);
        let ro = rollout_unchecked(self.model, &self.x0, &up, &self.v_in, &self.w);
        Ok((0..self.horizon())
            .map(|i| self.cost.stage_cost(ro.y.step(i), up.step(i), &self.setpoint))
            .sum())
    }

    fn value_and_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        check_len("input profile", self.dim(), u.len())?;
        check_len("gradient", self.dim(), grad.len())?;
        let d = self.model.dims();
        let n = self.horizon();
        let up = self.input_profile(u);
        let ro = rollout_unchecked(self.model, &self.x0, &up, &self.v_in, &self.w);
        let mut j = 0.0;
        // lambda holds ∂J/∂x_{i+1} while step i is processed.
        let mut lambda = vec![0.0; d.n_x];
        let mut gy = vec![0.0; d.n_y];
        let zero_x = vec![0.0; d.n_x];
        let zero_y = vec![0.0; d.n_y];
        let mut adj_x = vec![0.0; d.n_x];
        for i in (0..n).rev() {
            let (y, ui, vi, wi) = (ro.y.step(i), up.step(i), self.v_in.step(i), self.w.step(i));
            j += self.cost.stage_cost(y, ui, &self.setpoint);
            gy.iter_mut().for_each(|g| *g = 0.0);
            let gu = &mut grad[i * d.n_u..(i + 1) * d.n_u];
            gu.iter_mut().for_each(|g| *g = 0.0);
            self.cost.stage_gradient(y, ui, &self.setpoint, &mut gy, gu);
            self.model
                .step_vjp(&ro.states[i + 1], ui, vi, wi, &zero_x, &gy, &mut lambda, gu);
            adj_x.iter_mut().for_each(|a| *a = 0.0);
            self.model
                .step_vjp(&ro.states[i], ui, vi, wi, &lambda, &zero_y, &mut adj_x, gu);
            std::mem::swap(&mut lambda, &mut adj_x);
        }
        Ok(j)
    }
}

/// `∇J` of the local problem at `u`, by adjoint recursion through the
/// rollout.
pub fn grad_local_cost(prob: &LocalProblem<'_>, u: &Profile) -> Result<Profile> {
    check_len("input profile step", prob.n_u(), u.step_dim())?;
    check_len("input profile horizon", prob.horizon(), u.horizon())?;
    let mut g = vec![0.0; prob.dim()];
    prob.value_and_gradient(u.as_slice(), &mut g)?;
    Profile::new(g, prob.n_u(), prob.horizon())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Iteration budget.
    pub n_max: usize,
    /// Restart period: every `n_rstr`-th iteration drops the momentum term.
    pub n_rstr: usize,
    /// Momentum coefficient.
    pub c: f64,
    /// Step size used by the first iteration.
    pub gamma0: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Optional early exit on `‖u − Pr(u − ∇J)‖∞`.
    pub tolerance: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_max: 50,
            n_rstr: 5,
            c: 0.3,
            gamma0: 1e-3,
            gamma_min: 1e-8,
            gamma_max: 1e2,
            tolerance: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 || self.n_rstr == 0 {
            return Err(Error::Config("n_max and n_rstr must be at least 1".into()));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::Config(format!("momentum c = {} outside (0, 1)", self.c)));
        }
        if !(self.gamma0 > 0.0) || !(self.gamma_min > 0.0) || !(self.gamma_min <= self.gamma_max) {
            return Err(Error::Config("step sizes must satisfy 0 < gamma_min ≤ gamma_max, gamma0 > 0".into()));
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) {
                return Err(Error::Config("tolerance must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub u_star: Vec<f64>,
    pub j_final: f64,
    pub iterations: usize,
    /// `‖u* − Pr(u* − ∇J(u*))‖∞`
    pub grad_norm_final: f64,
    /// Seconds spent inside the solve call.
    pub wall_time: f64,
    /// Always true for the truncated solver; the reference sets it from its
    /// stopping test.
    pub converged: bool,
}

impl SolveReport {
    pub const CSV_HEADER: &'static str = "j_final,iterations,grad_norm_final,converged,wall_time";

    /// One CSV record matching [`SolveReport::CSV_HEADER`]; the wall time
    /// column is left empty when `with_wall_time` is false.
    pub fn csv_record(&self, with_wall_time: bool) -> String {
        let wt = if with_wall_time {
            self.wall_time.to_string()
        } else {
            String::new()
        };
        format!(
            "{},{},{},{},{}",
            self.j_final, self.iterations, self.grad_norm_final, self.converged, wt
        )
    }
}

/// Barzilai–Borwein step `|Δu·Δg| / ‖Δg‖²`, clamped; `previous` when
/// `‖Δg‖²` vanishes.
pub fn bb_step(delta_u: &[f64], delta_g: &[f64], cfg: &SolverConfig, previous: f64) -> f64 {
    let gg = dot(delta_g, delta_g);
    if gg < 1e-30 {
        return previous;
    }
    (dot(delta_u, delta_g).abs() / gg).clamp(cfg.gamma_min, cfg.gamma_max)
}

fn check_finite(v: &[f64], quantity: &'static str, iteration: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            quantity,
            iteration,
        })
    }
}

/// `‖u − Pr(u − g)‖∞`
pub fn projected_gradient_norm(u: &[f64], g: &[f64], bounds: &BoxBounds) -> f64 {
    u.iter()
        .zip(g)
        .zip(bounds.lo.iter().zip(&bounds.hi))
        .map(|((u, g), (l, h))| (u - (u - g).clamp(*l, *h)).abs())
        .fold(0.0, f64::max)
}

/// Cold-start truncated solve of a local problem.
pub fn solve(prob: &LocalProblem<'_>, cfg: &SolverConfig) -> Result<SolveReport> {
    minimize(prob, &prob.bounds, cfg, None)
}

/// Truncated fast gradient on an arbitrary objective. Starts from
/// `Pr(u_init)` or `Pr(0)`. The iteration is not monotone, so the iterate
/// with the lowest cost is returned rather than the last one.
pub fn minimize(
    obj: &dyn Objective,
    bounds: &BoxBounds,
    cfg: &SolverConfig,
    u_init: Option<&[f64]>,
) -> Result<SolveReport> {
    minimize_impl(obj, bounds, cfg, u_init, None)
}

/// As [`minimize`], also returning every iterate `u⁰, u¹, …`.
pub fn minimize_traced(
    obj: &dyn Objective,
    bounds: &BoxBounds,
    cfg: &SolverConfig,
    u_init: Option<&[f64]>,
) -> Result<(SolveReport, Vec<Vec<f64>>)> {
    let mut trace = Vec::new();
    let report = minimize_impl(obj, bounds, cfg, u_init, Some(&mut trace))?;
    Ok((report, trace))
}

fn minimize_impl(
    obj: &dyn Objective,
    bounds: &BoxBounds,
    cfg: &SolverConfig,
    u_init: Option<&[f64]>,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<SolveReport> {
    cfg.validate()?;
    let n = obj.dim();
    check_len("box bounds", n, bounds.dim())?;
    let start = Instant::now();
    let mut u = match u_init {
        Some(u0) => project_box(u0, bounds)?,
        None => project_box(&vec![0.0; n], bounds)?,
    };
    let mut z_prev = u.clone();
    let mut g = vec![0.0; n];
    let mut j = obj.value_and_gradient(&u, &mut g)?;
    check_finite(&g, "gradient", 0)?;
    let mut gamma = cfg.gamma0;
    let mut z = vec![0.0; n];
    let mut u_prev = vec![0.0; n];
    let mut g_prev = vec![0.0; n];
    let mut iterations = 0;
    let mut best = (j, u.clone(), g.clone());
    if let Some(t) = trace.as_deref_mut() {
        t.push(u.clone());
    }
    for i in 1..=cfg.n_max {
        if let Some(tol) = cfg.tolerance {
            if projected_gradient_norm(&u, &g, bounds) <= tol {
                break;
            }
        }
        for k in 0..n {
            z[k] = u[k] - gamma * g[k];
        }
        u_prev.copy_from_slice(&u);
        if i % cfg.n_rstr == 0 {
            u.copy_from_slice(&z);
        } else {
            for k in 0..n {
                u[k] = z[k] + cfg.c * (z[k] - z_prev[k]);
            }
        }
        bounds.project_in_place(&mut u);
        std::mem::swap(&mut z_prev, &mut z);
        g_prev.copy_from_slice(&g);
        j = obj.value_and_gradient(&u, &mut g)?;
        iterations = i;
        if !j.is_finite() {
            return Err(Error::NonFinite {
                quantity: "cost",
                iteration: i,
            });
        }
        check_finite(&g, "gradient", i)?;
        if j < best.0 {
            best.0 = j;
            best.1.copy_from_slice(&u);
            best.2.copy_from_slice(&g);
        }
        let du: Vec<f64> = u.iter().zip(&u_prev).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = g.iter().zip(&g_prev).map(|(a, b)| a - b).collect();
        gamma = bb_step(&du, &dg, cfg, gamma);
        if let Some(t) = trace.as_deref_mut() {
            t.push(u.clone());
        }
    }
    let wall_time = start.elapsed().as_secs_f64();
    let (j_best, u_best, g_best) = best;
    Ok(SolveReport {
        grad_norm_final: projected_gradient_norm(&u_best, &g_best, bounds),
        u_star: u_best,
        j_final: j_best,
        iterations,
        wall_time,
        converged: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Stop when `‖u − Pr(u − ∇J)‖∞` falls below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iter: 100_000,
        }
    }
}

/// Converged reference with the default stopping rule.
pub fn solve_oracle(prob: &LocalProblem<'_>) -> Result<SolveReport> {
    minimize_oracle(prob, &prob.bounds, &OracleConfig::default())
}

/// Projected gradient with Armijo backtracking along the projection arc.
///
/// Each search starts from the Barzilai-Borwein step of the previous
/// move (twice the accepted step when that is undefined). A step whose decrease
/// is lost in rounding of `J` is accepted too, so the search does not stall
/// near the optimum before the stationarity test is met.
pub fn minimize_oracle(obj: &dyn Objective, bounds: &BoxBounds, cfg: &OracleConfig) -> Result<SolveReport> {
    const SIGMA: f64 = 1e-4;
    let n = obj.dim();
    check_len("box bounds", n, bounds.dim())?;
    let start = Instant::now();
    let mut u = project_box(&vec![0.0; n], bounds)?;
    let mut g = vec![0.0; n];
    let mut j = obj.value_and_gradient(&u, &mut g)?;
    check_finite(&g, "gradient", 0)?;
    let mut step = 1.0;
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut iterations = 0;
    let mut pg = projected_gradient_norm(&u, &g, bounds);
    while pg >= cfg.tolerance && iterations < cfg.max_iter {
        iterations += 1;
        let mut t = step;
        loop {
            for k in 0..n {
                trial[k] = (u[k] - t * g[k]).clamp(bounds.lo[k], bounds.hi[k]);
            }
            let decrease: f64 = g.iter().zip(trial.iter().zip(&u)).map(|(g, (a, b))| g * (a - b)).sum();
            let j_trial = obj.value(&trial)?;
            let slack = 10.0 * f64::EPSILON * j.abs();
            if j_trial.is_finite() && j_trial <= j + SIGMA * decrease + slack {
                break;
            }
            t *= 0.5;
            if t < 1e-30 {
                return Err(Error::NonFinite {
                    quantity: "line search step",
                    iteration: iterations,
                });
            }
        }
        std::mem::swap(&mut u, &mut trial);
        j = obj.value_and_gradient(&u, &mut g_trial)?;
        std::mem::swap(&mut g, &mut g_trial);
        check_finite(&g, "gradient", iterations)?;
        // BB1 trial step from the accepted move; doubling when undefined.
        let (mut ss, mut sy) = (0.0, 0.0);
        for k in 0..n {
            let du = u[k] - trial[k];
            ss += du * du;
            sy += du * (g[k] - g_trial[k]);
        }
        step = if sy > 0.0 { ss / sy } else { 2.0 * t }.clamp(1e-12, 1e12);
        pg = projected_gradient_norm(&u, &g, bounds);
    }
    Ok(SolveReport {
        u_star: u,
        j_final: j,
        iterations,
        grad_norm_final: pg,
        wall_time: start.elapsed().as_secs_f64(),
        converged: pg < cfg.tolerance,
    })
}
