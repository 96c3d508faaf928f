//! Synthetic four-subsystem benchmark with the coupling topology of a
//! helium refrigeration network: two controlled subsystems (indices 0 and
//! 3), a passive mixing node (1) and a passive constrained node (2).
//!
//! Subsystems are zero-indexed here. Each one is a stable linear core; the
//! controlled ones carry a tanh saturation on their first output.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{InputBox, LinearCoreModel, LocalCostSpec, Saturation, SubsystemModel};
use crate::error::{check_len, Error, Result};
use crate::linalg::{spectral_radius, Mat};
use crate::network::{build_routing, CouplingEdge, CouplingTopology};

/// Bumped whenever a default benchmark coefficient changes.
pub const BENCHMARK_VERSION: u32 = 1;

pub const DEFAULT_HORIZON: usize = 10;

/// Overridable benchmark knobs. Defaults reproduce version
/// [`BENCHMARK_VERSION`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkParams {
    /// Multiplies every state matrix `A`.
    pub pole_scale: f64,
    /// Multiplies every coupling input matrix `E`.
    pub coupling_gain: f64,
    /// tanh saturation levels on the first output of subsystems 0 and 3.
    pub saturation_levels: [f64; 2],
    /// Relative error applied to the input matrices of the simulated plant
    /// (the prediction models keep the nominal values).
    pub mismatch: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            pole_scale: 1.0,
            coupling_gain: 1.0,
            saturation_levels: [200.0, 100.0],
            mismatch: 0.0,
        }
    }
}

impl BenchmarkParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.pole_scale,
            self.coupling_gain,
            self.saturation_levels[0],
            self.saturation_levels[1],
            self.mismatch,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("benchmark parameters must be finite".into()));
        }
        if self.pole_scale <= 0.0 {
            return Err(Error::Config("pole_scale must be positive".into()));
        }
        if self.coupling_gain < 0.0 {
            return Err(Error::Config("coupling_gain must be nonnegative".into()));
        }
        if self.saturation_levels.iter().any(|l| *l <= 0.0) {
            return Err(Error::Config("saturation levels must be positive".into()));
        }
        if self.mismatch.abs() >= 1.0 {
            return Err(Error::Config("mismatch must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

/// The eight coupling edges, `(from, to, dim)`.
pub fn benchmark_topology(horizon: usize) -> Result<CouplingTopology> {
    let e = CouplingEdge::new;
    CouplingTopology::new(
        4,
        vec![0, 3],
        vec![
            e(0, 1, 3),
            e(1, 0, 3),
            e(1, 2, 3),
            e(1, 3, 1),
            e(2, 1, 3),
            e(2, 3, 2),
            e(3, 1, 2),
            e(3, 2, 1),
        ],
        horizon,
    )
}

/// Benchmark network: topology, prediction models, costs and actuator
/// boxes.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub topology: CouplingTopology,
    pub models: Vec<LinearCoreModel>,
    pub costs: Vec<LocalCostSpec>,
    /// `Some` exactly for controlled subsystems.
    pub input_boxes: Vec<Option<InputBox>>,
    pub params: BenchmarkParams,
    /// Sampling time of the prediction and simulation models, seconds.
    pub sample_time: f64,
}

/// Benchmark with default parameters and horizon.
pub fn build_benchmark() -> Benchmark {
    build_benchmark_with(&BenchmarkParams::default(), DEFAULT_HORIZON)
        .expect("default benchmark parameters are valid")
}

pub fn build_benchmark_with(params: &BenchmarkParams, horizon: usize) -> Result<Benchmark> {
    params.validate()?;
    let topology = benchmark_topology(horizon)?;
    let models = nominal_models(params);
    for (s, m) in models.iter().enumerate() {
        m.validate()?;
        if spectral_radius(&m.a.to_nalgebra()) >= 1.0 {
            return Err(Error::Config(format!(
                "pole_scale {} makes subsystem {s} unstable",
                params.pole_scale
            )));
        }
    }
    let costs = vec![
        LocalCostSpec::tracking(vec![1e3, 1e3], vec![0.0, 0.0]),
        LocalCostSpec::zero(),
        LocalCostSpec::constraint(vec![1e10], vec![0.07]),
        LocalCostSpec::tracking(vec![1e3], vec![0.0]),
    ];
    let input_boxes = vec![
        Some(InputBox::new(vec![0.0, 0.0], vec![100.0, 55.0])?),
        None,
        None,
        Some(InputBox::new(vec![0.0], vec![12.0])?),
    ];
    let bench = Benchmark {
        topology,
        models,
        costs,
        input_boxes,
        params: params.clone(),
        sample_time: 0.5,
    };
    bench.check_consistency()?;
    Ok(bench)
}

fn nominal_models(p: &BenchmarkParams) -> Vec<LinearCoreModel> {
    let k = p.pole_scale;
    let g = p.coupling_gain;
    let m = Mat::from_rows;
    let s0 = LinearCoreModel {
        a: m(&[&[0.7, 0.0, 0.03], &[0.02, 0.7, 0.0], &[0.0, 0.0, 0.6]]).scaled(k),
        b: m(&[&[0.3, -0.03], &[-0.03, 0.6], &[0.06, 0.06]]),
        e: m(&[&[1.0, 0.5, -0.5], &[0.5, 1.0, 0.0], &[0.0, 0.5, 1.0]]).scaled(0.04 * g),
        c: m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]),
        cv: m(&[&[0.3, 0.0, 0.2], &[0.2, 0.1, 0.0], &[0.0, 0.4, 0.0]]),
        dw: m(&[&[1.0], &[0.0]]),
        saturation: Some(Saturation {
            channel: 0,
            level: p.saturation_levels[0],
        }),
    };
    let s1 = LinearCoreModel {
        a: Mat::diag(&[0.7, 0.6, 0.5]).scaled(k),
        b: Mat::zeros(3, 0),
        e: m(&[
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0],
            &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0],
        ])
        .scaled(0.05 * g),
        c: Mat::zeros(0, 3),
        cv: m(&[
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 1.0],
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 1.0],
            &[0.5, 0.5, 0.0],
        ]),
        dw: Mat::zeros(0, 0),
        saturation: None,
    };
    let s2 = LinearCoreModel {
        a: Mat::diag(&[0.8, 0.6]).scaled(k),
        b: Mat::zeros(2, 0),
        e: m(&[&[1.0, 1.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 0.0]]).scaled(0.05 * g),
        c: m(&[&[0.016, 0.0]]),
        cv: m(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5], &[1.0, 0.0], &[0.0, 1.0]]),
        dw: Mat::zeros(1, 0),
        saturation: None,
    };
    let s3 = LinearCoreModel {
        a: m(&[&[0.7, 0.1], &[0.0, 0.5]]).scaled(k),
        b: m(&[&[0.8], &[0.3]]),
        e: m(&[&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0]]).scaled(0.04 * g),
        c: m(&[&[1.0, 0.0]]),
        cv: m(&[&[0.5, 0.0], &[0.0, 0.5], &[0.3, 0.3]]),
        dw: Mat::zeros(1, 0),
        saturation: Some(Saturation {
            channel: 0,
            level: p.saturation_levels[1],
        }),
    };
    vec![s0, s1, s2, s3]
}

/// Network-wide steady state for given set-points and disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub states: Vec<Vec<f64>>,
    /// Empty for uncontrolled subsystems.
    pub inputs: Vec<Vec<f64>>,
}

impl Benchmark {
    pub fn n_subsystems(&self) -> usize {
        self.models.len()
    }

    pub fn horizon(&self) -> usize {
        self.topology.horizon()
    }

    /// Same benchmark with another prediction horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Ok(Self {
            topology: self.topology.with_horizon(horizon)?,
            ..self.clone()
        })
    }

    /// Replaces the coupling graph after checking it against the models.
    pub fn with_topology(&self, topology: CouplingTopology) -> Result<Self> {
        let b = Self {
            topology,
            ..self.clone()
        };
        b.check_consistency()?;
        Ok(b)
    }

    fn check_consistency(&self) -> Result<()> {
        let t = &self.topology;
        check_len("topology subsystem count", self.models.len(), t.n_subsystems())?;
        for (s, m) in self.models.iter().enumerate() {
            let d = m.dims();
            check_len("incoming coupling per step", d.n_vin, t.incoming_step_dim(s))?;
            check_len("outgoing coupling per step", d.n_vout, t.outgoing_step_dim(s))?;
            if m.is_controlled() != t.is_controlled(s) {
                return Err(Error::Topology(format!(
                    "subsystem {s}: controlled flag disagrees with the model input count"
                )));
            }
            self.costs[s].validate(d.n_y, d.n_u)?;
        }
        Ok(())
    }

    /// Models driven by the simulator. Equal to the prediction models
    /// unless `mismatch` is nonzero.
    pub fn simulation_models(&self) -> Vec<LinearCoreModel> {
        self.models
            .iter()
            .map(|m| LinearCoreModel {
                b: m.b.scaled(1.0 + self.params.mismatch),
                ..m.clone()
            })
            .collect()
    }

    /// Operator set-points for subsystems 0 and 3.
    pub fn nominal_setpoints(&self) -> Vec<Vec<f64>> {
        vec![vec![60.5, 20.0], vec![10.0]]
    }

    /// Operating ranges of the set-points, per controlled subsystem.
    pub fn setpoint_ranges(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        vec![
            (vec![55.0, 15.0], vec![66.0, 25.0]),
            (vec![8.0], vec![12.0]),
        ]
    }

    /// Realistic disturbance range for subsystem 0's output disturbance.
    pub fn disturbance_range(&self) -> (f64, f64) {
        (-3.0, 3.0)
    }

    /// Per-step dimensions of every subsystem's coupling and state, as the
    /// offsets of the network-wide stacks.
    fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
        let mut acc = 0;
        let mut out = vec![0];
        for d in dims {
            acc += d;
            out.push(acc);
        }
        out
    }

    /// Network-wide linear state map with inputs frozen:
    /// `x⁺ = (A + E G C_v) x`, on the concatenated state.
    pub fn network_state_matrix(&self) -> Result<DMatrix<f64>> {
        let t1 = self.topology.with_horizon(1)?;
        let g = build_routing(&t1)?;
        let dims: Vec<_> = self.models.iter().map(|m| m.dims()).collect();
        let xo = Self::offsets(dims.iter().map(|d| d.n_x));
        let vo = Self::offsets(dims.iter().map(|d| d.n_vout));
        let io = Self::offsets(dims.iter().map(|d| d.n_vin));
        let nx = xo[dims.len()];
        let nv_out = vo[dims.len()];
        let nv_in = io[dims.len()];
        let mut a = DMatrix::zeros(nx, nx);
        let mut e = DMatrix::zeros(nx, nv_in);
        let mut cv = DMatrix::zeros(nv_out, nx);
        for (s, m) in self.models.iter().enumerate() {
            a.view_mut((xo[s], xo[s]), (dims[s].n_x, dims[s].n_x))
                .copy_from(&m.a.to_nalgebra());
            e.view_mut((xo[s], io[s]), (dims[s].n_x, dims[s].n_vin))
                .copy_from(&m.e.to_nalgebra());
            cv.view_mut((vo[s], xo[s]), (dims[s].n_vout, dims[s].n_x))
                .copy_from(&m.cv.to_nalgebra());
        }
        let mut gm = DMatrix::zeros(nv_in, nv_out);
        for r in 0..g.rows() {
            gm[(r, g.source_of(r))] = 1.0;
        }
        Ok(a + e * gm * cv)
    }

    /// DC loop gain of the coupling chain with inputs frozen,
    /// `G · blockdiag(C_v (I − A)⁻¹ E)`, on the per-step incoming stack.
    pub fn dc_loop_gain(&self) -> Result<DMatrix<f64>> {
        let t1 = self.topology.with_horizon(1)?;
        let g = build_routing(&t1)?;
        let dims: Vec<_> = self.models.iter().map(|m| m.dims()).collect();
        let vo = Self::offsets(dims.iter().map(|d| d.n_vout));
        let io = Self::offsets(dims.iter().map(|d| d.n_vin));
        let mut blocks = DMatrix::zeros(vo[dims.len()], io[dims.len()]);
        for (s, m) in self.models.iter().enumerate() {
            let n = dims[s].n_x;
            let i_minus_a = DMatrix::identity(n, n) - m.a.to_nalgebra();
            let inv = i_minus_a
                .try_inverse()
                .ok_or_else(|| Error::Config(format!("subsystem {s} has a pole at 1")))?;
            let blk = m.cv.to_nalgebra() * inv * m.e.to_nalgebra();
            blocks
                .view_mut((vo[s], io[s]), (dims[s].n_vout, dims[s].n_vin))
                .copy_from(&blk);
        }
        let mut gm = DMatrix::zeros(io[dims.len()], vo[dims.len()]);
        for r in 0..g.rows() {
            gm[(r, g.source_of(r))] = 1.0;
        }
        Ok(gm * blocks)
    }

    /// Solves for the steady state that puts every tracked output on its
    /// set-point. `setpoints` has one entry per controlled subsystem,
    /// `disturbances` one entry per subsystem.
    pub fn steady_state(&self, setpoints: &[Vec<f64>], disturbances: &[Vec<f64>]) -> Result<SteadyState> {
        let controlled = self.topology.controlled().to_vec();
        check_len("set-point groups", controlled.len(), setpoints.len())?;
        check_len("disturbance groups", self.models.len(), disturbances.len())?;
        let dims: Vec<_> = self.models.iter().map(|m| m.dims()).collect();
        let xo = Self::offsets(dims.iter().map(|d| d.n_x));
        let nx = xo[dims.len()];
        let mut uo = vec![0; dims.len()];
        let mut nu = 0;
        let mut ny = 0;
        for &s in &controlled {
            uo[s] = nu;
            nu += dims[s].n_u;
            ny += dims[s].n_y;
        }
        if nu != ny {
            return Err(Error::Config(format!(
                "steady state needs as many inputs ({nu}) as tracked outputs ({ny})"
            )));
        }
        let a_net = self.network_state_matrix()?;
        let n = nx + nu;
        let mut lhs = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        lhs.view_mut((0, 0), (nx, nx))
            .copy_from(&(DMatrix::identity(nx, nx) - a_net));
        let mut row = nx;
        for (k, &s) in controlled.iter().enumerate() {
            let m = &self.models[s];
            let r = &setpoints[k];
            check_len("set-point", dims[s].n_y, r.len())?;
            check_len("disturbance", dims[s].n_w, disturbances[s].len())?;
            let b = m.b.to_nalgebra();
            lhs.view_mut((xo[s], nx + uo[s]), (dims[s].n_x, dims[s].n_u))
                .copy_from(&(-b));
            let mut offset = vec![0.0; dims[s].n_y];
            m.dw.mul_acc(&disturbances[s], &mut offset);
            for j in 0..dims[s].n_y {
                let mut target = r[j] - offset[j];
                if let Some(sat) = m.saturation.filter(|sat| sat.channel == j) {
                    target = sat.inverse(target).ok_or_else(|| {
                        Error::Config(format!(
                            "set-point {} of subsystem {s} lies outside the saturation range",
                            r[j]
                        ))
                    })?;
                }
                for c in 0..dims[s].n_x {
                    lhs[(row, xo[s] + c)] = m.c.get(j, c);
                }
                rhs[row] = target;
                row += 1;
            }
        }
        let sol = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Config("steady-state system is singular".into()))?;
        let states = (0..dims.len())
            .map(|s| sol.rows(xo[s], dims[s].n_x).iter().copied().collect())
            .collect();
        let inputs = (0..dims.len())
            .map(|s| {
                if self.topology.is_controlled(s) {
                    sol.rows(nx + uo[s], dims[s].n_u).iter().copied().collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Ok(SteadyState { states, inputs })
    }

    /// Zero disturbance vector for every subsystem.
    pub fn zero_disturbances(&self) -> Vec<Vec<f64>> {
        self.models.iter().map(|m| vec![0.0; m.dims().n_w]).collect()
    }
}
