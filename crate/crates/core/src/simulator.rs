//! Aliev–Panfilov excitable-media simulation on a mesh graph.
//!
//! ```text
//! ∂ω₁/∂t = D·Lω₁ + k·ω₁(ω₁ − a)(1 − ω₁) − ω₁ω₂ + I_stim
//! ∂ω₂/∂t = ξ(ω₁, ω₂)·(−ω₂ − k·ω₁(ω₁ − a − 1)),   ξ = e₀ + μ₁ω₂/(ω₁ + μ₂)
//! ```
//!
//! integrated with forward Euler. `L` is a row-normalized inverse-distance
//! graph Laplacian.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::mesh::{inverse_distance, MeshGraph};
use crate::sparse::SparseOp;

pub const OMEGA1_BAND: (f64, f64) = (-0.2, 1.2);
pub const OMEGA2_BAND: (f64, f64) = (0.0, 3.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApParams {
    pub a: f64,
    /// Excitation rate; the same constant drives both equations.
    pub k: f64,
    pub e0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub diffusion: f64,
    pub dt: f64,
}

impl Default for ApParams {
    fn default() -> Self {
        Self {
            a: 0.15,
            k: 8.0,
            e0: 0.002,
            mu1: 0.2,
            mu2: 0.3,
            diffusion: 1.0,
            dt: 0.05,
        }
    }
}

impl ApParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a, self.k, self.e0, self.mu1, self.mu2, self.diffusion, self.dt]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.dt <= 0.0 || self.diffusion < 0.0 || self.mu2 <= 0.0 {
            return Err(invalid(format!("invalid model parameters: {self:?}")));
        }
        Ok(())
    }

    /// Reaction part of `∂ω₁/∂t` and `∂ω₂/∂t` at one node.
    pub fn reaction(&self, w1: f64, w2: f64) -> (f64, f64) {
        let f1 = self.k * w1 * (w1 - self.a) * (1.0 - w1) - w1 * w2;
        let xi = self.e0 + self.mu1 * w2 / (w1 + self.mu2);
        let f2 = xi * (-w2 - self.k * w1 * (w1 - self.a - 1.0));
        (f1, f2)
    }
}

/// Row-normalized graph Laplacian: `L_ij = w_ij / Σ_j w_ij` on edges with
/// inverse-distance weights, `L_ii = −1`.
pub fn graph_laplacian(graph: &MeshGraph) -> SparseOp {
    let n = graph.node_count();
    let pos = graph.positions();
    let mut entries = Vec::with_capacity(graph.edge_count() + n);
    for i in 0..n {
        let nb = graph.neighbors(i);
        if nb.is_empty() {
            continue;
        }
        let w: Vec<f64> = nb.iter().map(|&j| inverse_distance(&pos[i], &pos[j])).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in nb.iter().zip(&w) {
            entries.push((i, j, 0, wj / total));
        }
        entries.push((i, i, 0, -1.0));
    }
    SparseOp::from_entries(n, n, 1, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Periodic pacing at the apex.
    I,
    /// Adds a second source a few hops from the apex.
    II,
    /// Adds a second source on the far side of the mesh.
    III,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::I => "I",
            Protocol::II => "II",
            Protocol::III => "III",
        }
    }
}

/// Timing knobs shared by every protocol, in integration steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacingConfig {
    pub period: usize,
    pub duration: usize,
    pub amplitude: f64,
    /// First step at which the secondary source fires (protocols II/III).
    pub secondary_onset: usize,
    pub secondary_period: usize,
    /// Hop distance of the protocol-II source from the apex patch.
    pub near_hops: usize,
}

impl Default for PacingConfig {
    fn default() -> Self {
        Self {
            period: 600,
            duration: 40,
            amplitude: 0.5,
            secondary_onset: 780,
            secondary_period: 600,
            near_hops: 3,
        }
    }
}

/// A periodically pulsed current injected at a set of nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSource {
    pub sites: Vec<usize>,
    pub onset: usize,
    pub period: usize,
    pub duration: usize,
    pub amplitude: f64,
}

impl StimulusSource {
    pub fn active(&self, step: usize) -> bool {
        step >= self.onset && (step - self.onset) % self.period < self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusProtocol {
    pub protocol: Protocol,
    pub sources: Vec<StimulusSource>,
}

fn with_ring(graph: &MeshGraph, node: usize) -> Vec<usize> {
    let mut v = vec![node];
    v.extend_from_slice(graph.neighbors(node));
    v
}

/// Minimum-z node (lowest index on ties).
pub fn apex_node(graph: &MeshGraph) -> usize {
    let pos = graph.positions();
    (0..pos.len()).fold(0, |best, i| if pos[i][2] < pos[best][2] { i } else { best })
}

impl StimulusProtocol {
    pub fn new(protocol: Protocol, graph: &MeshGraph, pacing: &PacingConfig) -> Result<Self> {
        if pacing.period <= pacing.duration || pacing.secondary_period <= pacing.duration {
            return Err(invalid("pacing period must exceed stimulus duration"));
        }
        if graph.node_count() == 0 {
            return Err(invalid("empty graph"));
        }
        let apex = apex_node(graph);
        let primary = StimulusSource {
            sites: with_ring(graph, apex),
            onset: 0,
            period: pacing.period,
            duration: pacing.duration,
            amplitude: pacing.amplitude,
        };
        let secondary_site = match protocol {
            Protocol::I => None,
            Protocol::II => {
                let d = graph.hop_distances(&primary.sites);
                let target = pacing.near_hops.min(d.iter().copied().filter(|&x| x != usize::MAX).max().unwrap_or(0));
                (0..d.len()).find(|&i| d[i] == target)
            }
            Protocol::III => {
                let pos = graph.positions();
                Some((0..pos.len()).fold(0, |b, i| if pos[i][0] > pos[b][0] { i } else { b }))
            }
        };
        let mut sources = vec![primary];
        if let Some(site) = secondary_site {
            sources.push(StimulusSource {
                sites: with_ring(graph, site),
                onset: pacing.secondary_onset,
                period: pacing.secondary_period,
                duration: pacing.duration,
                amplitude: pacing.amplitude,
            });
        }
        Ok(Self { protocol, sources })
    }

    /// Stimulus current per node at integration step `step`.
    pub fn current(&self, step: usize, n: usize, out: &mut [f64]) {
        out[..n].fill(0.0);
        for s in &self.sources {
            if s.active(step) {
                for &i in &s.sites {
                    out[i] += s.amplitude;
                }
            }
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for s in &self.sources {
            if let Some(&bad) = s.sites.iter().find(|&&i| i >= n) {
                return Err(invalid(format!("stimulus site {bad} out of range ({n} nodes)")));
            }
        }
        Ok(())
    }
}

/// Mutable state of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ApState {
    pub omega1: Vec<f64>,
    pub omega2: Vec<f64>,
    /// Number of values pulled back into the guard band so far.
    pub clamps: usize,
}

impl ApState {
    pub fn rest(n: usize) -> Self {
        Self {
            omega1: vec![0.0; n],
            omega2: vec![0.0; n],
            clamps: 0,
        }
    }
}

/// One forward-Euler step. `stimulus` may be empty (no current).
pub fn ap_step(
    state: &mut ApState,
    params: &ApParams,
    laplacian: &SparseOp,
    stimulus: &[f64],
    step_index: usize,
) -> Result<()> {
    let n = state.omega1.len();
    let lap = if params.diffusion != 0.0 {
        laplacian.apply(&state.omega1, 1)
    } else {
        vec![0.0; n]
    };
    let dt = params.dt;
    let mut clamps = 0;
    for i in 0..n {
        let (w1, w2) = (state.omega1[i], state.omega2[i]);
        let (f1, f2) = params.reaction(w1, w2);
        let stim = stimulus.get(i).copied().unwrap_or(0.0);
        let mut n1 = w1 + dt * (params.diffusion * lap[i] + f1 + stim);
        let mut n2 = w2 + dt * f2;
        if n1.is_nan() || n2.is_nan() {
            return Err(Error::SimulationNan { step: step_index });
        }
        if !(OMEGA1_BAND.0..=OMEGA1_BAND.1).contains(&n1) {
            n1 = n1.clamp(OMEGA1_BAND.0, OMEGA1_BAND.1);
            clamps += 1;
        }
        if !(OMEGA2_BAND.0..=OMEGA2_BAND.1).contains(&n2) {
            n2 = n2.clamp(OMEGA2_BAND.0, OMEGA2_BAND.1);
            clamps += 1;
        }
        state.omega1[i] = n1;
        state.omega2[i] = n2;
    }
    state.clamps += clamps;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub params: ApParams,
    pub pacing: PacingConfig,
    /// Integration steps per saved frame.
    pub substeps: usize,
    /// Frames integrated and discarded before recording starts.
    pub burn_in: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            params: ApParams::default(),
            pacing: PacingConfig::default(),
            substeps: 5,
            burn_in: 0,
            frames: 1500,
            seed: 0,
        }
    }
}

/// Recorded `ω₁`/`ω₂` snapshots, stored frame-major (`T × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub nodes: usize,
    pub frames: usize,
    pub states: Vec<f64>,
    pub recovery: Vec<f64>,
    pub protocol: Protocol,
    pub config: SimulationConfig,
    pub clamps: usize,
}

impl TrajectoryDataset {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.states[t * self.nodes..(t + 1) * self.nodes]
    }

    /// Frame interval in model time units.
    pub fn frame_dt(&self) -> f64 {
        self.config.params.dt * self.config.substeps as f64
    }
}

/// Integrates `frames` snapshots after `burn_in` discarded frames.
pub fn simulate(graph: &MeshGraph, protocol: &StimulusProtocol, config: &SimulationConfig) -> Result<TrajectoryDataset> {
    config.params.validate()?;
    if config.substeps == 0 {
        return Err(invalid("substeps must be positive"));
    }
    let n = graph.node_count();
    protocol.validate(n)?;
    let lap = graph_laplacian(graph);
    let mut state = ApState::rest(n);
    let mut stim = vec![0.0; n];
    let mut states = Vec::with_capacity(n * config.frames);
    let mut recovery = Vec::with_capacity(n * config.frames);
    let mut step = 0;
    for frame in 0..config.burn_in + config.frames {
        for _ in 0..config.substeps {
            protocol.current(step, n, &mut stim);
            ap_step(&mut state, &config.params, &lap, &stim, step)?;
            step += 1;
        }
        if frame >= config.burn_in {
            states.extend_from_slice(&state.omega1);
            recovery.extend_from_slice(&state.omega2);
        }
    }
    Ok(TrajectoryDataset {
        nodes: n,
        frames: config.frames,
        states,
        recovery,
        protocol: protocol.protocol,
        config: *config,
        clamps: state.clamps,
    })
}

/// First frame at which each node exceeds `threshold` at or after `from`
/// (`None` if it never does).
pub fn activation_frames(data: &TrajectoryDataset, threshold: f64, from: usize) -> Vec<Option<usize>> {
    (0..data.nodes)
        .map(|i| (from..data.frames).find(|&t| data.states[t * data.nodes + i] > threshold))
        .collect()
}
