//! JSON experiment configuration. Every section has defaults, so a config
//! file only lists what it changes; unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tkgcn_core::koopman_ae::Stage1Config;
use tkgcn_core::latent_transformer::{PositionMode, TransformerConfig};
use tkgcn_core::mesh::{CoarseEdges, MeshKind};
use tkgcn_core::simulator::{ApParams, PacingConfig, Protocol, SimulationConfig};
use tkgcn_core::spline_gcn::KernelSpec;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sphere,
    Ellipsoid,
    VentricleShell,
}

impl From<SynthKind> for MeshKind {
    fn from(k: SynthKind) -> Self {
        match k {
            SynthKind::Sphere => MeshKind::Sphere,
            SynthKind::Ellipsoid => MeshKind::Ellipsoid,
            SynthKind::VentricleShell => MeshKind::VentricleShell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSource {
    Synth { kind: SynthKind, subdivisions: u32 },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolName {
    I,
    II,
    III,
}

impl From<ProtocolName> for Protocol {
    fn from(p: ProtocolName) -> Self {
        match p {
            ProtocolName::I => Protocol::I,
            ProtocolName::II => Protocol::II,
            ProtocolName::III => Protocol::III,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApSection {
    pub a: f64,
    #[serde(alias = "k0")]
    pub k: f64,
    pub e0: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub diffusion: f64,
    pub dt: f64,
}

impl Default for ApSection {
    fn default() -> Self {
        let p = ApParams::default();
        Self {
            a: p.a,
            k: p.k,
            e0: p.e0,
            mu1: p.mu1,
            mu2: p.mu2,
            diffusion: p.diffusion,
            dt: p.dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacingSection {
    pub period: usize,
    pub duration: usize,
    pub amplitude: f64,
    pub secondary_onset: usize,
    pub secondary_period: usize,
    pub near_hops: usize,
}

impl Default for PacingSection {
    fn default() -> Self {
        let p = PacingConfig::default();
        Self {
            period: p.period,
            duration: p.duration,
            amplitude: p.amplitude,
            secondary_onset: p.secondary_onset,
            secondary_period: p.secondary_period,
            near_hops: p.near_hops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub frames: usize,
    pub substeps: usize,
    pub burn_in: usize,
    pub ap: ApSection,
    pub pacing: PacingSection,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let s = SimulationConfig::default();
        Self {
            frames: s.frames,
            substeps: s.substeps,
            burn_in: s.burn_in,
            ap: ApSection::default(),
            pacing: PacingSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CoarseEdgesName {
    ClusterAdjacency,
    Knn(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchySection {
    pub depth: usize,
    pub seed: u64,
    pub coarse_edges: CoarseEdgesName,
}

impl Default for HierarchySection {
    fn default() -> Self {
        Self {
            depth: 2,
            seed: 0,
            coarse_edges: CoarseEdgesName::ClusterAdjacency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub d_z: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta_t: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub channels: usize,
    pub kernel_size: [usize; 3],
    pub degree: usize,
    pub root_weight: bool,
    pub koopman_init_noise: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let c = Stage1Config::default();
        Self {
            d_z: c.d_z,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            delta_t: c.delta_t,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            channels: c.channels,
            kernel_size: c.kernel.size,
            degree: c.kernel.degree,
            root_weight: c.root_weight,
            koopman_init_noise: c.koopman_init_noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionName {
    Absolute,
    WindowRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub window: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub mask_value: f64,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub windows_per_epoch: Option<usize>,
    pub layer_norm_eps: f64,
    pub positions: PositionName,
    pub residual_output: bool,
    /// Standardize each sequence dimension with training-split statistics.
    pub standardize: bool,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let c = TransformerConfig::default();
        Self {
            window: c.window,
            heads: c.heads,
            layers: c.layers,
            d_model: c.d_model,
            d_ff: c.d_ff,
            mask_value: c.mask_value,
            learning_rate: c.learning_rate,
            final_lr_fraction: c.final_lr_fraction,
            epochs: c.epochs,
            batch_size: c.batch_size,
            windows_per_epoch: c.windows_per_epoch,
            layer_norm_eps: c.layer_norm_eps,
            positions: match c.positions {
                PositionMode::Absolute => PositionName::Absolute,
                PositionMode::WindowRelative => PositionName::WindowRelative,
            },
            residual_output: c.residual_output,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSpace {
    /// Full mesh states.
    Raw,
    /// Stage-1 latents, decoded for evaluation.
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub dmd_rank: usize,
    pub dmd_space: FitSpace,
    pub var_order: usize,
    pub var_ridge: f64,
    pub var_space: FitSpace,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            dmd_rank: 32,
            dmd_space: FitSpace::Raw,
            var_order: 2,
            var_ridge: 1e-6,
            var_space: FitSpace::Latent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_len: usize,
    pub test_len: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            train_len: 1200,
            test_len: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mesh: MeshSource,
    pub protocol: ProtocolName,
    pub simulation: SimulationSection,
    pub hierarchy: HierarchySection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub baselines: BaselineSection,
    pub split: SplitSection,
    /// Half-open `[start, end)` step ranges of the test horizon.
    pub intervals: Vec<[usize; 2]>,
    /// Seeds both training stages.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mesh: MeshSource::Synth {
                kind: SynthKind::VentricleShell,
                subdivisions: 4,
            },
            protocol: ProtocolName::I,
            simulation: SimulationSection::default(),
            hierarchy: HierarchySection::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            baselines: BaselineSection::default(),
            split: SplitSection::default(),
            intervals: vec![[0, 100], [100, 200], [200, 300]],
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// The laptop-sized setup: 341-node shell, 900 frames split 600/300,
    /// `d_z = 32`.
    pub fn desk() -> Self {
        let mut c = Self {
            mesh: MeshSource::Synth {
                kind: SynthKind::VentricleShell,
                subdivisions: 3,
            },
            output_dir: PathBuf::from("runs/desk"),
            ..Self::default()
        };
        c.simulation.frames = 900;
        c.split = SplitSection {
            train_len: 600,
            test_len: 300,
        };
        c.stage1.d_z = 32;
        c.stage1.epochs = 100;
        c.stage1.learning_rate = 3e-3;
        c.stage2.epochs = 30;
        c.stage2.learning_rate = 3e-3;
        c.stage2.final_lr_fraction = 0.1;
        c.stage2.positions = PositionName::WindowRelative;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form; any field change alters it.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Invalid(m));
        let s = &self.split;
        if s.train_len == 0 || s.test_len == 0 {
            return bad("train_len and test_len must be positive".into());
        }
        if s.train_len + s.test_len > self.simulation.frames {
            return bad(format!(
                "train_len + test_len = {} exceeds the {} simulated frames",
                s.train_len + s.test_len,
                self.simulation.frames
            ));
        }
        if self.intervals.is_empty() {
            return bad("at least one evaluation interval is required".into());
        }
        for &[a, b] in &self.intervals {
            if a >= b || b > s.test_len {
                return bad(format!("interval [{a}, {b}) must be non-empty and lie within [0, {})", s.test_len));
            }
        }
        if self.stage2.window >= s.train_len {
            return bad(format!("window {} must be shorter than the training split", self.stage2.window));
        }
        if self.hierarchy.depth != 2 {
            return bad("the autoencoder expects a hierarchy of depth 2".into());
        }
        if self.baselines.dmd_rank == 0 {
            return bad("dmd_rank must be positive".into());
        }
        self.stage1_config().validate()?;
        self.transformer_config().validate(self.stage1.d_z)?;
        self.simulation_config().params.validate()?;
        Ok(())
    }

    pub fn simulation_config(&self) -> SimulationConfig {
        let s = &self.simulation;
        SimulationConfig {
            params: ApParams {
                a: s.ap.a,
                k: s.ap.k,
                e0: s.ap.e0,
                mu1: s.ap.mu1,
                mu2: s.ap.mu2,
                diffusion: s.ap.diffusion,
                dt: s.ap.dt,
            },
            pacing: PacingConfig {
                period: s.pacing.period,
                duration: s.pacing.duration,
                amplitude: s.pacing.amplitude,
                secondary_onset: s.pacing.secondary_onset,
                secondary_period: s.pacing.secondary_period,
                near_hops: s.pacing.near_hops,
            },
            substeps: s.substeps,
            burn_in: s.burn_in,
            frames: s.frames,
            seed: self.seed,
        }
    }

    pub fn coarse_edges(&self) -> CoarseEdges {
        match self.hierarchy.coarse_edges {
            CoarseEdgesName::ClusterAdjacency => CoarseEdges::ClusterAdjacency,
            CoarseEdgesName::Knn(k) => CoarseEdges::Knn(k),
        }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let s = &self.stage1;
        Stage1Config {
            d_z: s.d_z,
            lambda1: s.lambda1,
            lambda2: s.lambda2,
            delta_t: s.delta_t,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            seed: self.seed,
            channels: s.channels,
            kernel: KernelSpec {
                degree: s.degree,
                size: s.kernel_size,
            },
            root_weight: s.root_weight,
            koopman_init_noise: s.koopman_init_noise,
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        let s = &self.stage2;
        TransformerConfig {
            window: s.window,
            heads: s.heads,
            layers: s.layers,
            d_model: s.d_model,
            d_ff: s.d_ff,
            mask_value: s.mask_value,
            learning_rate: s.learning_rate,
            epochs: s.epochs,
            batch_size: s.batch_size,
            windows_per_epoch: s.windows_per_epoch,
            seed: self.seed,
            layer_norm_eps: s.layer_norm_eps,
            positions: match s.positions {
                PositionName::Absolute => PositionMode::Absolute,
                PositionName::WindowRelative => PositionMode::WindowRelative,
            },
            final_lr_fraction: s.final_lr_fraction,
            residual_output: s.residual_output,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"protocol": "III", "seed": 4, "stage1": {"k0": 1}}"#);
        assert!(c.is_err(), "k0 belongs to the AP section");
        let c = ExperimentConfig::from_json(r#"{"protocol": "III", "seed": 4, "simulation": {"ap": {"k0": 7.5}}}"#).unwrap();
        assert_eq!(c.protocol, ProtocolName::III);
        assert_eq!(c.simulation.ap.k, 7.5);
        assert_eq!(c.split, SplitSection::default());
        assert_eq!(c.stage1_config().seed, 4);
    }

    #[test]
    fn json_round_trip() {
        let c = ExperimentConfig::desk();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let f = ExperimentConfig::from_json(r#"{"mesh": {"file": "heart.mesh"}}"#).unwrap();
        assert_eq!(f.mesh, MeshSource::File("heart.mesh".into()));
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = ExperimentConfig::desk();
        let mut other = base.clone();
        assert_eq!(base.fingerprint(), other.fingerprint());
        other.stage2.mask_value = -1e8;
        assert_ne!(base.fingerprint(), other.fingerprint());
        let mut other = base.clone();
        other.intervals[2][1] = 299;
        assert_ne!(base.fingerprint(), other.fingerprint());
        assert_eq!(base.fingerprint().len(), 64);
    }

    #[test]
    fn validation_rejects_inconsistent_lengths() {
        let mut c = ExperimentConfig::desk();
        c.split.train_len = 700;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.intervals.push([250, 301]);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.stage2.heads = 5;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}
