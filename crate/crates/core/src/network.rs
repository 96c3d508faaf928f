//! Interconnection of subsystems: profiles, coupling edges and the routing
//! of stacked outgoing coupling profiles onto stacked incoming ones.
//!
//! Stacking convention. The incoming profile of subsystem `s` is the
//! concatenation of the elementary profiles `v[s'→s]` for ascending `s'`;
//! its outgoing profile concatenates `v[s→s']` for ascending `s'`. The
//! network-wide stacks concatenate the per-subsystem stacks for ascending
//! `s`. Inside an elementary profile the data is time-major: all components
//! of step `i` precede step `i + 1`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A signal stacked over the prediction horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    data: Vec<f64>,
    step_dim: usize,
    horizon: usize,
}

impl Profile {
    pub fn new(data: Vec<f64>, step_dim: usize, horizon: usize) -> Result<Self> {
        check_len("profile data", step_dim * horizon, data.len())?;
        Ok(Self {
            data,
            step_dim,
            horizon,
        })
    }

    pub fn zeros(step_dim: usize, horizon: usize) -> Self {
        Self {
            data: vec![0.0; step_dim * horizon],
            step_dim,
            horizon,
        }
    }

    /// The same per-step value repeated over the horizon.
    pub fn constant(value: &[f64], horizon: usize) -> Self {
        let mut data = Vec::with_capacity(value.len() * horizon);
        for _ in 0..horizon {
            data.extend_from_slice(value);
        }
        Self {
            data,
            step_dim: value.len(),
            horizon,
        }
    }

    pub fn step_dim(&self) -> usize {
        self.step_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The value at horizon step `i`.
    pub fn step(&self, i: usize) -> &[f64] {
        &self.data[i * self.step_dim..(i + 1) * self.step_dim]
    }

    pub fn step_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.step_dim..(i + 1) * self.step_dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Drops the first `k` steps and repeats the last step to keep the
    /// horizon length.
    pub fn shifted(&self, k: usize) -> Self {
        let mut out = Self::zeros(self.step_dim, self.horizon);
        if self.horizon == 0 {
            return out;
        }
        for i in 0..self.horizon {
            let src = (i + k).min(self.horizon - 1);
            out.step_mut(i).copy_from_slice(self.step(src));
        }
        out
    }
}

/// Elementary coupling `v[from→to]` with `dim` components per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CouplingEdge {
    pub from: usize,
    pub to: usize,
    pub dim: usize,
}

impl CouplingEdge {
    pub fn new(from: usize, to: usize, dim: usize) -> Self {
        Self { from, to, dim }
    }
}

/// Layout of one subsystem's stacked coupling profile: one block per
/// elementary profile, each block time-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    dims: Vec<usize>,
    horizon: usize,
}

impl BlockLayout {
    pub fn new(dims: Vec<usize>, horizon: usize) -> Self {
        Self { dims, horizon }
    }

    /// Components per horizon step summed over the blocks.
    pub fn step_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.step_dim() * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.dims
    }

    /// Reorders an edge-blocked stack into a time-major profile whose step
    /// `i` concatenates every block's step `i`.
    pub fn to_time_major(&self, stack: &[f64]) -> Result<Profile> {
        check_len("coupling stack", self.len(), stack.len())?;
        let step_dim = self.step_dim();
        let mut out = Profile::zeros(step_dim, self.horizon);
        let mut block_start = 0;
        let mut col = 0;
        for &d in &self.dims {
            for i in 0..self.horizon {
                let src = &stack[block_start + i * d..block_start + (i + 1) * d];
                out.step_mut(i)[col..col + d].copy_from_slice(src);
            }
            block_start += d * self.horizon;
            col += d;
        }
        Ok(out)
    }

    /// Inverse of [`BlockLayout::to_time_major`].
    pub fn from_time_major(&self, profile: &Profile) -> Result<Vec<f64>> {
        check_len("coupling profile", self.len(), profile.len())?;
        let mut out = Vec::with_capacity(self.len());
        let mut col = 0;
        for &d in &self.dims {
            for i in 0..self.horizon {
                out.extend_from_slice(&profile.step(i)[col..col + d]);
            }
            col += d;
        }
        Ok(out)
    }
}

/// The directed coupling graph over `n_subsystems` subsystems.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTopology {
    n_subsystems: usize,
    controlled: Vec<usize>,
    /// Sorted ascending by `(from, to)`.
    edges: Vec<CouplingEdge>,
    horizon: usize,
}

impl CouplingTopology {
    pub fn new(
        n_subsystems: usize,
        controlled: Vec<usize>,
        edges: Vec<CouplingEdge>,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Topology("horizon must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for e in &edges {
            if e.from >= n_subsystems || e.to >= n_subsystems {
                return Err(Error::Topology(format!(
                    "edge {}→{} references a subsystem outside 0..{n_subsystems}",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::Topology(format!("self-loop on subsystem {}", e.from)));
            }
            if e.dim == 0 {
                return Err(Error::Topology(format!(
                    "edge {}→{} has zero dimension",
                    e.from, e.to
                )));
            }
            if !seen.insert((e.from, e.to)) {
                return Err(Error::Topology(format!(
                    "duplicate edge {}→{}",
                    e.from, e.to
                )));
            }
        }
        let mut controlled = controlled;
        controlled.sort_unstable();
        controlled.dedup();
        if let Some(&bad) = controlled.iter().find(|&&s| s >= n_subsystems) {
            return Err(Error::Topology(format!(
                "controlled subsystem {bad} outside 0..{n_subsystems}"
            )));
        }
        let mut edges = edges;
        edges.sort_by_key(|e| (e.from, e.to));
        Ok(Self {
            n_subsystems,
            controlled,
            edges,
            horizon,
        })
    }

    /// Same graph with a different horizon length.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::new(
            self.n_subsystems,
            self.controlled.clone(),
            self.edges.clone(),
            horizon,
        )
    }

    pub fn n_subsystems(&self) -> usize {
        self.n_subsystems
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn controlled(&self) -> &[usize] {
        &self.controlled
    }

    pub fn is_controlled(&self, s: usize) -> bool {
        self.controlled.binary_search(&s).is_ok()
    }

    /// Edges in outgoing stacking order, ascending by `(from, to)`.
    pub fn edges(&self) -> &[CouplingEdge] {
        &self.edges
    }

    /// Edges into `s`, ascending by source.
    pub fn incoming_edges(&self, s: usize) -> Vec<CouplingEdge> {
        let mut v: Vec<_> = self.edges.iter().copied().filter(|e| e.to == s).collect();
        v.sort_by_key(|e| e.from);
        v
    }

    /// Edges out of `s`, ascending by target.
    pub fn outgoing_edges(&self, s: usize) -> Vec<CouplingEdge> {
        self.edges.iter().copied().filter(|e| e.from == s).collect()
    }

    pub fn incoming_layout(&self, s: usize) -> BlockLayout {
        BlockLayout::new(
            self.incoming_edges(s).iter().map(|e| e.dim).collect(),
            self.horizon,
        )
    }

    pub fn outgoing_layout(&self, s: usize) -> BlockLayout {
        BlockLayout::new(
            self.outgoing_edges(s).iter().map(|e| e.dim).collect(),
            self.horizon,
        )
    }

    /// Per-step dimension of the incoming stack of `s`.
    pub fn incoming_step_dim(&self, s: usize) -> usize {
        self.incoming_edges(s).iter().map(|e| e.dim).sum()
    }

    pub fn outgoing_step_dim(&self, s: usize) -> usize {
        self.outgoing_edges(s).iter().map(|e| e.dim).sum()
    }

    /// Length of the network-wide stacked incoming (equivalently outgoing)
    /// profile.
    pub fn stacked_len(&self) -> usize {
        self.edges.iter().map(|e| e.dim).sum::<usize>() * self.horizon
    }

    fn incoming_lengths(&self) -> Vec<usize> {
        (0..self.n_subsystems)
            .map(|s| self.incoming_step_dim(s) * self.horizon)
            .collect()
    }

    fn outgoing_lengths(&self) -> Vec<usize> {
        (0..self.n_subsystems)
            .map(|s| self.outgoing_step_dim(s) * self.horizon)
            .collect()
    }
}

/// The selection matrix mapping the stacked outgoing profile onto the
/// stacked incoming profile, stored as `incoming position → outgoing
/// position`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingMatrix {
    source: Vec<usize>,
    cols: usize,
}

impl RoutingMatrix {
    pub fn rows(&self) -> usize {
        self.source.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Outgoing position feeding incoming position `row`.
    pub fn source_of(&self, row: usize) -> usize {
        self.source[row]
    }

    /// Materializes the 0/1 matrix, row by row.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.source
            .iter()
            .map(|&c| {
                let mut row = vec![0.0; self.cols];
                row[c] = 1.0;
                row
            })
            .collect()
    }
}

/// Builds the routing matrix for `topology`.
pub fn build_routing(topology: &CouplingTopology) -> Result<RoutingMatrix> {
    let n = topology.horizon();
    let mut out_offset = std::collections::HashMap::new();
    let mut offset = 0;
    for e in topology.edges() {
        if out_offset.insert((e.from, e.to), offset).is_some() {
            return Err(Error::Topology(format!(
                "duplicate edge {}→{}",
                e.from, e.to
            )));
        }
        offset += e.dim * n;
    }
    let cols = offset;
    let mut source = Vec::with_capacity(cols);
    for s in 0..topology.n_subsystems() {
        for e in topology.incoming_edges(s) {
            let base = out_offset[&(e.from, e.to)];
            source.extend(base..base + e.dim * n);
        }
    }
    Ok(RoutingMatrix { source, cols })
}

/// `G_in · v_out`.
pub fn assemble_incoming(v_out: &[f64], routing: &RoutingMatrix) -> Result<Vec<f64>> {
    check_len("stacked outgoing profile", routing.cols(), v_out.len())?;
    Ok(routing.source.iter().map(|&c| v_out[c]).collect())
}

fn split_by(stack: &[f64], lengths: &[usize], context: &'static str) -> Result<Vec<Vec<f64>>> {
    check_len(context, lengths.iter().sum(), stack.len())?;
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &len in lengths {
        out.push(stack[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

fn stack_by(parts: &[Vec<f64>], lengths: &[usize], context: &'static str) -> Result<Vec<f64>> {
    check_len(context, lengths.len(), parts.len())?;
    let mut out = Vec::with_capacity(lengths.iter().sum());
    for (p, &len) in parts.iter().zip(lengths) {
        check_len(context, len, p.len())?;
        out.extend_from_slice(p);
    }
    Ok(out)
}

/// Splits the network-wide incoming stack into per-subsystem stacks.
pub fn split_incoming(v_in: &[f64], topology: &CouplingTopology) -> Result<Vec<Vec<f64>>> {
    split_by(v_in, &topology.incoming_lengths(), "stacked incoming profile")
}

/// Concatenates per-subsystem incoming stacks.
pub fn stack_incoming(parts: &[Vec<f64>], topology: &CouplingTopology) -> Result<Vec<f64>> {
    stack_by(parts, &topology.incoming_lengths(), "per-subsystem incoming profile")
}

pub fn split_outgoing(v_out: &[f64], topology: &CouplingTopology) -> Result<Vec<Vec<f64>>> {
    split_by(v_out, &topology.outgoing_lengths(), "stacked outgoing profile")
}

/// Concatenates per-subsystem outgoing stacks into the network-wide stack.
pub fn stack_outgoing(parts: &[Vec<f64>], topology: &CouplingTopology) -> Result<Vec<f64>> {
    stack_by(parts, &topology.outgoing_lengths(), "per-subsystem outgoing profile")
}

/// Shifts every elementary profile of the network-wide incoming stack by
/// `k` steps, repeating each block's last step.
pub fn shift_incoming(v_in: &[f64], topology: &CouplingTopology, k: usize) -> Result<Vec<f64>> {
    check_len("stacked incoming profile", topology.stacked_len(), v_in.len())?;
    let n = topology.horizon();
    let mut out = Vec::with_capacity(v_in.len());
    let mut start = 0;
    for s in 0..topology.n_subsystems() {
        for e in topology.incoming_edges(s) {
            let len = e.dim * n;
            let block = Profile::new(v_in[start..start + len].to_vec(), e.dim, n)?;
            out.extend_from_slice(block.shifted(k).as_slice());
            start += len;
        }
    }
    Ok(out)
}
