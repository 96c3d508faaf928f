//! Training records collected from closed-loop runs, and their CSV form.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::prbs::stream_seed;
use crate::coordinator::{
    closed_loop_run_observed, ClosedLoopLog, ClosedLoopSetup, LoopObserver, SweepOutput, UpdateContext,
};
use crate::error::{check_len, Error, Result};
use crate::network::{split_incoming, BlockLayout, Profile};
use crate::plant::{Benchmark, ControllerKind, DisturbanceEntry, Forecast, ScenarioConfig, SignalSpec};

/// One local solve: the problem data and the solver's control profile.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    /// Incoming coupling profile, time-major.
    pub v_in: Profile,
    /// Disturbance forecast.
    pub w: Profile,
    /// Label.
    pub u: Profile,
}

impl TrainingRecord {
    /// Network input `z = (x, r, v_in, w)`.
    pub fn input_vector(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.x.len() + self.r.len() + self.v_in.len() + self.w.len());
        z.extend_from_slice(&self.x);
        z.extend_from_slice(&self.r);
        z.extend_from_slice(self.v_in.as_slice());
        z.extend_from_slice(self.w.as_slice());
        z
    }
}

/// Assembles `z = (x, r, v_in, w)` without building a record.
pub fn surrogate_input(x: &[f64], r: &[f64], v_in: &Profile, w: &Profile) -> Vec<f64> {
    let mut z = Vec::with_capacity(x.len() + r.len() + v_in.len() + w.len());
    z.extend_from_slice(x);
    z.extend_from_slice(r);
    z.extend_from_slice(v_in.as_slice());
    z.extend_from_slice(w.as_slice());
    z
}

/// Per-step dimensions shared by all records of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetLayout {
    pub n_x: usize,
    pub n_r: usize,
    pub n_vin: usize,
    pub n_w: usize,
    pub n_u: usize,
    pub horizon: usize,
}

impl DatasetLayout {
    pub fn for_subsystem(bench: &Benchmark, s: usize) -> Self {
        let m = &bench.models[s];
        Self {
            n_x: m.a.rows(),
            n_r: m.c.rows(),
            n_vin: m.e.cols(),
            n_w: m.dw.cols(),
            n_u: m.b.cols(),
            horizon: bench.horizon(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.n_x + self.n_r + (self.n_vin + self.n_w) * self.horizon
    }

    pub fn output_len(&self) -> usize {
        self.n_u * self.horizon
    }

    /// Column names: `x_j`, `r_j`, `vin_i_j`, `w_i_j`, `u_i_j` with `i` the
    /// horizon step and `j` the component.
    pub fn header(&self) -> Vec<String> {
        let mut h = Vec::with_capacity(self.input_len() + self.output_len());
        h.extend((0..self.n_x).map(|j| format!("x_{j}")));
        h.extend((0..self.n_r).map(|j| format!("r_{j}")));
        for (name, d) in [("vin", self.n_vin), ("w", self.n_w), ("u", self.n_u)] {
            for i in 0..self.horizon {
                h.extend((0..d).map(|j| format!("{name}_{i}_{j}")));
            }
        }
        h
    }

    fn from_header(header: &[String]) -> Result<Self> {
        let count = |p: &str| header.iter().filter(|c| c.starts_with(p)).count();
        let steps = |p: &str| {
            header
                .iter()
                .filter_map(|c| c.strip_prefix(p))
                .filter_map(|rest| rest.split('_').next()?.parse::<usize>().ok())
                .max()
                .map_or(0, |m| m + 1)
        };
        let horizon = steps("u_").max(steps("vin_")).max(steps("w_"));
        if horizon == 0 {
            return Err(Error::Format("header has no horizon-indexed columns".into()));
        }
        let layout = Self {
            n_x: count("x_"),
            n_r: count("r_"),
            n_vin: count("vin_") / horizon,
            n_w: count("w_") / horizon,
            n_u: count("u_") / horizon,
            horizon,
        };
        if layout.header() != header {
            return Err(Error::Format("unexpected column names or order".into()));
        }
        Ok(layout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: DatasetLayout,
    pub records: Vec<TrainingRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(TrainingRecord::input_vector).collect()
    }

    pub fn labels(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.u.as_slice().to_vec()).collect()
    }

    /// Header row then one row per record. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.layout.header())?;
        for r in &self.records {
            let row = r
                .input_vector()
                .into_iter()
                .chain(r.u.as_slice().iter().copied())
                .map(|v| v.to_string());
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let layout = DatasetLayout::from_header(&header)?;
        let l = layout;
        let mut records = Vec::new();
        for (line, row) in rd.records().enumerate() {
            let row = row?;
            let vals: Vec<f64> = row
                .iter()
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("record {}: {e}", line + 1)))?;
            check_len("dataset row", header.len(), vals.len())?;
            let mut k = 0;
            let mut take = |n: usize| {
                let v = vals[k..k + n].to_vec();
                k += n;
                v
            };
            let x = take(l.n_x);
            let r = take(l.n_r);
            let v_in = Profile::new(take(l.n_vin * l.horizon), l.n_vin, l.horizon)?;
            let w = Profile::new(take(l.n_w * l.horizon), l.n_w, l.horizon)?;
            let u = Profile::new(take(l.n_u * l.horizon), l.n_u, l.horizon)?;
            records.push(TrainingRecord { x, r, v_in, w, u });
        }
        Ok(Self { layout, records })
    }
}

/// PRBS set-points over the operating ranges and a PRBS disturbance on
/// subsystem 0, held over the horizon by the controllers, for data
/// generation.
pub fn excitation_scenario(bench: &Benchmark, updating_period: f64, sim_steps: usize, seed: u64) -> ScenarioConfig {
    let (w_lo, w_hi) = bench.disturbance_range();
    ScenarioConfig {
        horizon: bench.horizon(),
        updating_period,
        sim_steps,
        seed,
        setpoints: bench
            .setpoint_ranges()
            .into_iter()
            .map(|(lo, hi)| SignalSpec::Prbs { lo, hi, hold: [10, 60] })
            .collect(),
        disturbances: vec![DisturbanceEntry {
            subsystem: 0,
            signal: SignalSpec::Prbs {
                lo: vec![w_lo],
                hi: vec![w_hi],
                hold: [4, 40],
            },
        }],
        forecast: Forecast::Hold,
        ..ScenarioConfig::default()
    }
}

struct Collector {
    target: usize,
    r_range: std::ops::Range<usize>,
    layout_in: BlockLayout,
    topology: crate::network::CouplingTopology,
    n_u: usize,
    limit: usize,
    records: Vec<TrainingRecord>,
    error: Option<Error>,
}

impl Collector {
    fn record(&mut self, ctx: &UpdateContext<'_>, v_in: &[f64], out: &SweepOutput) -> Result<()> {
        let s = self.target;
        let v_parts = split_incoming(v_in, &self.topology)?;
        let v = self.layout_in.to_time_major(&v_parts[s])?;
        let n = v.horizon();
        self.records.push(TrainingRecord {
            x: ctx.states[s].clone(),
            r: ctx.setpoint[self.r_range.clone()].to_vec(),
            v_in: v,
            w: ctx.forecasts[s].clone(),
            u: Profile::new(out.controls[s].clone(), self.n_u, n)?,
        });
        Ok(())
    }
}

impl LoopObserver for Collector {
    fn on_sweep(&mut self, ctx: &UpdateContext<'_>, v_in: &[f64], out: &SweepOutput) {
        if self.records.len() >= self.limit || self.error.is_some() {
            return;
        }
        if let Err(e) = self.record(ctx, v_in, out) {
            self.error = Some(e);
        }
    }

    fn done(&self) -> bool {
        self.records.len() >= self.limit || self.error.is_some()
    }
}

/// Copy of `base` for data-generation run `run`: a derived seed and, for
/// every PRBS set-point channel, two levels drawn uniformly inside that
/// channel's levels. Binary signals only visit their two levels, so
/// redrawing them per run spreads the set-points over the whole range.
pub fn excitation_run(base: &ScenarioConfig, run: u64) -> ScenarioConfig {
    let seed = run_seed(base.seed, run);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, LEVEL_STREAM));
    let setpoints = base
        .setpoints
        .iter()
        .map(|sig| match sig {
            SignalSpec::Prbs { lo, hi, hold } => {
                let (lo, hi) = lo
                    .iter()
                    .zip(hi)
                    .map(|(&l, &h)| {
                        let a = rng.random_range(l..=h);
                        let b = rng.random_range(l..=h);
                        if (a - b).abs() > 1e-6 * (h - l) {
                            (a.min(b), a.max(b))
                        } else {
                            (l, h)
                        }
                    })
                    .unzip();
                SignalSpec::Prbs { lo, hi, hold: *hold }
            }
            other => other.clone(),
        })
        .collect();
    ScenarioConfig {
        seed,
        setpoints,
        ..base.clone()
    }
}

const LEVEL_STREAM: u64 = 0x1e7e;

fn run_seed(seed: u64, run: u64) -> u64 {
    if run == 0 {
        seed
    } else {
        stream_seed(seed, run)
    }
}

/// Runs closed-loop simulations of `scenario` and logs one record per
/// local solve of subsystem `target` in every fixed-point sweep, until
/// `n_records` are collected. Run `i` uses a seed derived from the
/// scenario seed and `i`.
///
/// The target must use the exact controller with cold starts so every
/// label is reproducible by a fresh solve.
pub fn collect_dataset(setup: &ClosedLoopSetup<'_>, target: usize, n_records: usize) -> Result<Dataset> {
    let base = setup.scenario;
    collect_with_logs(setup, target, n_records, &|run| ScenarioConfig {
        seed: run_seed(base.seed, run),
        ..base.clone()
    })
    .map(|(d, _)| d)
}

/// As [`collect_dataset`], with the runs built by [`excitation_run`].
pub fn collect_excitation_dataset(
    setup: &ClosedLoopSetup<'_>,
    target: usize,
    n_records: usize,
) -> Result<Dataset> {
    let base = setup.scenario;
    collect_with_logs(setup, target, n_records, &|run| excitation_run(base, run)).map(|(d, _)| d)
}

/// Collection loop shared by the public entry points; also returns the log
/// of every run.
pub(crate) fn collect_with_logs(
    setup: &ClosedLoopSetup<'_>,
    target: usize,
    n_records: usize,
    run_scenario: &dyn Fn(u64) -> ScenarioConfig,
) -> Result<(Dataset, Vec<ClosedLoopLog>)> {
    let bench = setup.bench.with_horizon(setup.scenario.horizon)?;
    let layout = DatasetLayout::for_subsystem(&bench, target);
    if n_records == 0 {
        return Ok((
            Dataset {
                layout,
                records: Vec::new(),
            },
            Vec::new(),
        ));
    }
    let topo = &bench.topology;
    let ci = topo
        .controlled()
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::Config(format!("subsystem {target} is not controlled")))?;
    if setup.scenario.controllers.get(ci) != Some(&ControllerKind::ExactNmpc) {
        return Err(Error::Config("data collection needs the exact controller on the target".into()));
    }
    if setup.scenario.warm_start {
        return Err(Error::Config("data collection needs cold-started local solves".into()));
    }
    let r_start: usize = topo.controlled()[..ci]
        .iter()
        .map(|&c| bench.models[c].c.rows())
        .sum();
    let mut collector = Collector {
        target,
        r_range: r_start..r_start + layout.n_r,
        layout_in: topo.incoming_layout(target),
        topology: topo.clone(),
        n_u: layout.n_u,
        limit: n_records,
        records: Vec::with_capacity(n_records),
        error: None,
    };
    let mut logs = Vec::new();
    for run in 0u64.. {
        let scenario = run_scenario(run);
        let run_setup = ClosedLoopSetup {
            bench: &bench,
            scenario: &scenario,
            ..setup.clone()
        };
        let before = collector.records.len();
        logs.push(closed_loop_run_observed(&run_setup, &mut collector)?);
        if let Some(e) = collector.error.take() {
            return Err(e);
        }
        if collector.records.len() >= n_records {
            break;
        }
        if collector.records.len() == before {
            return Err(Error::Config("scenario produced no records".into()));
        }
    }
    Ok((
        Dataset {
            layout,
            records: collector.records,
        },
        logs,
    ))
}
