//! Subsystem models, local costs and horizon rollouts.

mod benchmark;
mod scenario;

pub use benchmark::{
    build_benchmark, build_benchmark_with, benchmark_topology, Benchmark, BenchmarkParams,
    SteadyState, BENCHMARK_VERSION, DEFAULT_HORIZON,
};
pub use scenario::{
    ControllerKind, DisturbanceEntry, Forecast, InitialState, ScenarioConfig, ScenarioSignals,
    SetpointSearch, SignalSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::Mat;
use crate::network::Profile;

/// Per-step dimensions of a subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_vin: usize,
    pub n_vout: usize,
    pub n_w: usize,
}

/// Result of one model step: the successor state, the output measured at
/// the current state and the outgoing coupling emitted during the step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_next: Vec<f64>,
    pub y: Vec<f64>,
    pub v_out: Vec<f64>,
}

/// A discrete-time subsystem seen as a black box by the coordinator.
///
/// Implementations are deterministic and immutable. The unchecked methods
/// assume correctly sized slices; use [`step`] and [`rollout`] for
/// validated calls.
pub trait SubsystemModel: Send + Sync + std::fmt::Debug {
    fn dims(&self) -> ModelDims;

    fn is_controlled(&self) -> bool {
        self.dims().n_u > 0
    }

    fn step_unchecked(&self, x: &[f64], u: &[f64], v_in: &[f64], w: &[f64]) -> StepOutput;

    /// Vector-Jacobian product of `(x_next, y)` with respect to `(x, u)`:
    /// accumulates `adj_x += ∂x_next/∂xᵀ·adj_x_next + ∂y/∂xᵀ·adj_y` and
    /// `adj_u += ∂x_next/∂uᵀ·adj_x_next + ∂y/∂uᵀ·adj_y`.
    #[allow(clippy::too_many_arguments)]
    fn step_vjp(
        &self,
        x: &[f64],
        u: &[f64],
        v_in: &[f64],
        w: &[f64],
        adj_x_next: &[f64],
        adj_y: &[f64],
        adj_x: &mut [f64],
        adj_u: &mut [f64],
    );
}

/// Validated single step.
pub fn step(
    model: &dyn SubsystemModel,
    x: &[f64],
    u: &[f64],
    v_in: &[f64],
    w: &[f64],
) -> Result<StepOutput> {
    let d = model.dims();
    check_len("state", d.n_x, x.len())?;
    check_len("input", d.n_u, u.len())?;
    check_len("incoming coupling", d.n_vin, v_in.len())?;
    check_len("disturbance", d.n_w, w.len())?;
    Ok(model.step_unchecked(x, u, v_in, w))
}

/// Trajectories produced by iterating [`step`] over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `y_i` is the output reached after applying `u_i`, measured at
    /// `x_{i+1}` with disturbance `w_i`.
    pub y: Profile,
    /// `v_out_i` is emitted at `x_i`.
    pub v_out: Profile,
    /// `x_0 … x_N`
    pub states: Vec<Vec<f64>>,
}

/// Iterates the model over the horizon shared by the input profiles.
///
/// Outputs must depend on the state and the disturbance only: `y_i` is
/// read from a model step at `x_{i+1}`, so every input of the profile
/// reaches the cost.
pub fn rollout(
    model: &dyn SubsystemModel,
    x0: &[f64],
    u: &Profile,
    v_in: &Profile,
    w: &Profile,
) -> Result<Rollout> {
    let d = model.dims();
    let n = u.horizon();
    check_len("state", d.n_x, x0.len())?;
    check_len("input profile step", d.n_u, u.step_dim())?;
    check_len("incoming profile step", d.n_vin, v_in.step_dim())?;
    check_len("disturbance profile step", d.n_w, w.step_dim())?;
    check_len("incoming profile horizon", n, v_in.horizon())?;
    check_len("disturbance profile horizon", n, w.horizon())?;
    Ok(rollout_unchecked(model, x0, u, v_in, w))
}

pub(crate) fn rollout_unchecked(
    model: &dyn SubsystemModel,
    x0: &[f64],
    u: &Profile,
    v_in: &Profile,
    w: &Profile,
) -> Rollout {
    let d = model.dims();
    let n = u.horizon();
    let mut y = Profile::zeros(d.n_y, n);
    let mut v_out = Profile::zeros(d.n_vout, n);
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    for i in 0..n {
        let out = model.step_unchecked(&states[i], u.step(i), v_in.step(i), w.step(i));
        v_out.step_mut(i).copy_from_slice(&out.v_out);
        states.push(out.x_next);
        let after = model.step_unchecked(&states[i + 1], u.step(i), v_in.step(i), w.step(i));
        y.step_mut(i).copy_from_slice(&after.y);
    }
    Rollout { y, v_out, states }
}

/// Smooth saturation `level·tanh(z/level)` on one output channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub channel: usize,
    pub level: f64,
}

impl Saturation {
    fn apply(&self, z: f64) -> f64 {
        self.level * (z / self.level).tanh()
    }

    fn derivative(&self, z: f64) -> f64 {
        let t = (z / self.level).tanh();
        1.0 - t * t
    }

    /// Inverse map; `None` outside the open range `(-level, level)`.
    pub fn inverse(&self, y: f64) -> Option<f64> {
        let t = y / self.level;
        (t.abs() < 1.0).then(|| self.level * t.atanh())
    }
}

/// Stable linear core with an optional output saturation:
///
/// ```text
/// x⁺ = A x + B u + E v_in
/// y  = sat(C x) + D_w w
/// v_out = C_v x
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCoreModel {
    pub a: Mat,
    pub b: Mat,
    pub e: Mat,
    pub c: Mat,
    pub cv: Mat,
    pub dw: Mat,
    pub saturation: Option<Saturation>,
}

impl LinearCoreModel {
    /// Checks that the matrix shapes agree with each other.
    pub fn validate(&self) -> Result<()> {
        let n_x = self.a.rows();
        check_len("A columns", n_x, self.a.cols())?;
        check_len("B rows", n_x, self.b.rows())?;
        check_len("E rows", n_x, self.e.rows())?;
        check_len("C columns", n_x, self.c.cols())?;
        check_len("C_v columns", n_x, self.cv.cols())?;
        check_len("D_w rows", self.c.rows(), self.dw.rows())?;
        if let Some(s) = self.saturation {
            if s.channel >= self.c.rows() || s.level <= 0.0 || !s.level.is_finite() {
                return Err(Error::Config(format!(
                    "saturation {s:?} invalid for {} outputs",
                    self.c.rows()
                )));
            }
        }
        Ok(())
    }

    fn pre_output(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.c.rows()];
        self.c.mul_acc(x, &mut z);
        z
    }

    /// Output map without the disturbance term.
    pub fn output_of_state(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.pre_output(x);
        if let Some(s) = self.saturation {
            z[s.channel] = s.apply(z[s.channel]);
        }
        z
    }
}

impl SubsystemModel for LinearCoreModel {
    fn dims(&self) -> ModelDims {
        ModelDims {
            n_x: self.a.rows(),
            n_u: self.b.cols(),
            n_y: self.c.rows(),
            n_vin: self.e.cols(),
            n_vout: self.cv.rows(),
            n_w: self.dw.cols(),
        }
    }

    fn step_unchecked(&self, x: &[f64], u: &[f64], v_in: &[f64], w: &[f64]) -> StepOutput {
        let mut x_next = vec![0.0; x.len()];
        self.a.mul_acc(x, &mut x_next);
        self.b.mul_acc(u, &mut x_next);
        self.e.mul_acc(v_in, &mut x_next);
        let mut y = self.output_of_state(x);
        self.dw.mul_acc(w, &mut y);
        let mut v_out = vec![0.0; self.cv.rows()];
        self.cv.mul_acc(x, &mut v_out);
        StepOutput { x_next, y, v_out }
    }

    fn step_vjp(
        &self,
        x: &[f64],
        _u: &[f64],
        _v_in: &[f64],
        _w: &[f64],
        adj_x_next: &[f64],
        adj_y: &[f64],
        adj_x: &mut [f64],
        adj_u: &mut [f64],
    ) {
        self.a.tr_mul_acc(adj_x_next, adj_x);
        self.b.tr_mul_acc(adj_x_next, adj_u);
        match self.saturation {
            Some(s) => {
                let z = self.pre_output(x);
                let mut gz = adj_y.to_vec();
                gz[s.channel] *= s.derivative(z[s.channel]);
                self.c.tr_mul_acc(&gz, adj_x);
            }
            None => self.c.tr_mul_acc(adj_y, adj_x),
        }
    }
}

/// Per-step input box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_len("input box", lo.len(), hi.len())?;
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::Config(format!("input box lower bound exceeds upper bound: {lo:?} > {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `Σ ‖y − r‖²_Q + ‖u‖²_R`
    Tracking,
    /// `Σ ‖max(y − ȳ, 0)‖²_Q`
    Constraint,
    /// Identically zero.
    Zero,
}

/// Diagonal weights of a subsystem's contribution to the central cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalCostSpec {
    pub kind: CostKind,
    pub q: Vec<f64>,
    #[serde(default)]
    pub r: Vec<f64>,
    #[serde(default)]
    pub y_bar: Option<Vec<f64>>,
}

impl LocalCostSpec {
    pub fn tracking(q: Vec<f64>, r: Vec<f64>) -> Self {
        Self {
            kind: CostKind::Tracking,
            q,
            r,
            y_bar: None,
        }
    }

    pub fn constraint(q: Vec<f64>, y_bar: Vec<f64>) -> Self {
        Self {
            kind: CostKind::Constraint,
            q,
            r: Vec::new(),
            y_bar: Some(y_bar),
        }
    }

    pub fn zero() -> Self {
        Self {
            kind: CostKind::Zero,
            q: Vec::new(),
            r: Vec::new(),
            y_bar: None,
        }
    }

    /// Checks weights against the output and input dimensions.
    pub fn validate(&self, n_y: usize, n_u: usize) -> Result<()> {
        if self.q.iter().chain(&self.r).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("cost weights must be finite and nonnegative".into()));
        }
        match self.kind {
            CostKind::Zero => Ok(()),
            CostKind::Tracking => {
                check_len("tracking Q diagonal", n_y, self.q.len())?;
                if !self.r.is_empty() {
                    check_len("tracking R diagonal", n_u, self.r.len())?;
                }
                Ok(())
            }
            CostKind::Constraint => {
                check_len("constraint Q diagonal", n_y, self.q.len())?;
                let y_bar = self
                    .y_bar
                    .as_ref()
                    .ok_or_else(|| Error::Config("constraint cost requires y_bar".into()))?;
                check_len("constraint bound", n_y, y_bar.len())?;
                if y_bar.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("constraint bound must be finite".into()));
                }
                Ok(())
            }
        }
    }

    /// Cost of one horizon step.
    pub fn stage_cost(&self, y: &[f64], u: &[f64], r: &[f64]) -> f64 {
        match self.kind {
            CostKind::Zero => 0.0,
            CostKind::Tracking => {
                let track: f64 = self
                    .q
                    .iter()
                    .zip(y)
                    .zip(r)
                    .map(|((q, y), r)| q * (y - r) * (y - r))
                    .sum();
                let effort: f64 = self.r.iter().zip(u).map(|(w, u)| w * u * u).sum();
                track + effort
            }
            CostKind::Constraint => {
                let y_bar = self.y_bar.as_deref().unwrap_or(&[]);
                self.q
                    .iter()
                    .zip(y)
                    .zip(y_bar)
                    .map(|((q, y), b)| {
                        let excess = (y - b).max(0.0);
                        q * excess * excess
                    })
                    .sum()
            }
        }
    }

    /// Accumulates the stage-cost gradient into `gy` and `gu`. At the
    /// `max(·, 0)` kink the derivative is taken as zero.
    pub fn stage_gradient(&self, y: &[f64], u: &[f64], r: &[f64], gy: &mut [f64], gu: &mut [f64]) {
        match self.kind {
            CostKind::Zero => {}
            CostKind::Tracking => {
                for ((g, q), (y, r)) in gy.iter_mut().zip(&self.q).zip(y.iter().zip(r)) {
                    *g += 2.0 * q * (y - r);
                }
                for ((g, w), u) in gu.iter_mut().zip(&self.r).zip(u) {
                    *g += 2.0 * w * u;
                }
            }
            CostKind::Constraint => {
                let y_bar = self.y_bar.as_deref().unwrap_or(&[]);
                for ((g, q), (y, b)) in gy.iter_mut().zip(&self.q).zip(y.iter().zip(y_bar)) {
                    let excess = y - b;
                    if excess > 0.0 {
                        *g += 2.0 * q * excess;
                    }
                }
            }
        }
    }
}

/// Local cost over a horizon of outputs and inputs against the set-point
/// `r_d` (ignored for the constraint and zero kinds).
pub fn local_cost(spec: &LocalCostSpec, y: &Profile, u: &Profile, r_d: &[f64]) -> Result<f64> {
    spec.validate(y.step_dim(), u.step_dim())?;
    if spec.kind == CostKind::Zero {
        return Ok(0.0);
    }
    if spec.kind == CostKind::Tracking {
        check_len("set-point", y.step_dim(), r_d.len())?;
    }
    if u.step_dim() > 0 {
        check_len("input horizon", y.horizon(), u.horizon())?;
    }
    let empty: [f64; 0] = [];
    Ok((0..y.horizon())
        .map(|i| {
            let ui = if u.step_dim() > 0 { u.step(i) } else { &empty };
            spec.stage_cost(y.step(i), ui, r_d)
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_profile(v: &[f64]) -> Profile {
        Profile::new(v.to_vec(), 1, v.len()).unwrap()
    }

    #[test]
    fn perfect_tracking_costs_nothing() {
        let spec = LocalCostSpec::tracking(vec![1e3], vec![0.0]);
        let y = scalar_profile(&[2.5, 2.5, 2.5]);
        let u = scalar_profile(&[7.0, -3.0, 1.0]);
        assert_eq!(local_cost(&spec, &y, &u, &[2.5]).unwrap(), 0.0);
    }

    #[test]
    fn tracking_cost_hand_value() {
        // N = 2, y = r + 1 at both steps, Q = 1e3, R = 0.
        let spec = LocalCostSpec::tracking(vec![1e3], vec![0.0]);
        let y = scalar_profile(&[61.5, 61.5]);
        let u = scalar_profile(&[0.0, 0.0]);
        assert_eq!(local_cost(&spec, &y, &u, &[60.5]).unwrap(), 2000.0);
    }

    #[test]
    fn inactive_constraint_costs_nothing() {
        let spec = LocalCostSpec::constraint(vec![1e10], vec![0.07]);
        let y = scalar_profile(&[0.01, 0.07, 0.0699]);
        let u = Profile::zeros(0, 3);
        assert_eq!(local_cost(&spec, &y, &u, &[]).unwrap(), 0.0);
        let y = scalar_profile(&[0.08]);
        let u = Profile::zeros(0, 1);
        let j = local_cost(&spec, &y, &u, &[]).unwrap();
        assert!((j - 1e10 * 0.01f64.powi(2)).abs() < 1e-3);
    }

    #[test]
    fn zero_kind_and_missing_bound() {
        let y = scalar_profile(&[5.0]);
        let u = Profile::zeros(0, 1);
        assert_eq!(local_cost(&LocalCostSpec::zero(), &y, &u, &[]).unwrap(), 0.0);
        let mut spec = LocalCostSpec::constraint(vec![1.0], vec![0.0]);
        spec.y_bar = None;
        assert!(matches!(local_cost(&spec, &y, &u, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn step_rejects_wrong_dimensions() {
        let b = build_benchmark();
        let m = &b.models[0];
        assert!(step(m, &[0.0; 2], &[0.0; 2], &[0.0; 3], &[0.0]).is_err());
        assert!(step(m, &[0.0; 3], &[0.0; 1], &[0.0; 3], &[0.0]).is_err());
    }

    #[test]
    fn saturation_inverse_round_trips() {
        let s = Saturation { channel: 0, level: 200.0 };
        let y = s.apply(63.0);
        assert!((s.inverse(y).unwrap() - 63.0).abs() < 1e-10);
        assert!(s.inverse(250.0).is_none());
    }
}
