//! The experiment stages: data, stage-1 and stage-2 training, forecasting
//! with every method, and evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tkgcn_core::baselines::{DmdModel, VarModel};
use tkgcn_core::koopman_ae::{KoopmanAutoencoder, Stage1Epoch};
use tkgcn_core::latent_transformer::{LatentTransformer, Stage2Epoch, Standardizer};
use tkgcn_core::mesh::{build_graph, synth_mesh, GraphHierarchy, MeshGraph};
use tkgcn_core::simulator::{simulate, StimulusProtocol};
use tkgcn_core::{ParamStore, Tensor};

use crate::config::{ExperimentConfig, FitSpace, MeshSource};
use crate::error::{LabError, Result, StageContext};
use crate::formats::{load_mesh, Trajectory};

/// Methods compared by the full pipeline.
pub const METHODS: [&str; 4] = ["tk-gcn", "dmd", "var", "koopman"];

/// Table-1 variants accepted by [`run_ablation`].
pub const VARIANTS: [&str; 3] = ["tk-gcn", "transformer+gcn", "transformer-only"];

pub fn load_graph(config: &ExperimentConfig) -> Result<MeshGraph> {
    let mesh = match &config.mesh {
        MeshSource::Synth { kind, subdivisions } => synth_mesh((*kind).into(), *subdivisions)?,
        MeshSource::File(path) => load_mesh(path)?,
    };
    Ok(build_graph(&mesh)?)
}

pub fn build_hierarchy(config: &ExperimentConfig, graph: MeshGraph) -> Result<Arc<GraphHierarchy>> {
    let h = &config.hierarchy;
    Ok(Arc::new(GraphHierarchy::build(graph, h.depth, h.seed, config.coarse_edges())?))
}

/// Simulated `ω₁` trajectory (`T × N`, one feature).
pub fn simulate_dataset(config: &ExperimentConfig, graph: &MeshGraph) -> Result<Trajectory> {
    let sim = config.simulation_config();
    let protocol = StimulusProtocol::new(config.protocol.into(), graph, &sim.pacing)?;
    let d = simulate(graph, &protocol, &sim)?;
    Trajectory::new(d.nodes, d.frames, 1, d.states)
}

/// Contiguous `(train, test)` frames: `[0, train_len)` and the `test_len`
/// frames right after it.
pub fn split_dataset<'a>(data: &'a Trajectory, config: &ExperimentConfig) -> Result<(&'a [f64], &'a [f64])> {
    let (a, b) = (config.split.train_len, config.split.test_len);
    if a + b > data.frames {
        return Err(LabError::Invalid(format!("split {a}+{b} exceeds the {} available frames", data.frames)));
    }
    let w = data.width();
    Ok((&data.data[..a * w], &data.data[a * w..(a + b) * w]))
}

/// `MSE_t = (1/N) Σ_i (x̂_i(t) − x_i(t))²` for every step.
pub fn mse_per_step(pred: &[f64], truth: &[f64], nodes: usize) -> Result<Vec<f64>> {
    if nodes == 0 || pred.len() != truth.len() || pred.len() % nodes != 0 {
        return Err(LabError::Invalid(format!("cannot compare {} predicted values with {} targets", pred.len(), truth.len())));
    }
    Ok(pred
        .chunks(nodes)
        .zip(truth.chunks(nodes))
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / nodes as f64)
        .collect())
}

/// Mean of the per-step MSE inside each `[start, end)` interval.
pub fn mse_intervals(pred: &[f64], truth: &[f64], nodes: usize, intervals: &[[usize; 2]]) -> Result<Vec<f64>> {
    let steps = mse_per_step(pred, truth, nodes)?;
    interval_means(&steps, intervals)
}

fn interval_means(steps: &[f64], intervals: &[[usize; 2]]) -> Result<Vec<f64>> {
    intervals
        .iter()
        .map(|&[a, b]| {
            if a >= b || b > steps.len() {
                return Err(LabError::Invalid(format!("interval [{a}, {b}) is empty or beyond the {}-step horizon", steps.len())));
            }
            Ok(steps[a..b].iter().sum::<f64>() / (b - a) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalMse {
    pub start: usize,
    pub end: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastReport {
    pub method: String,
    /// How the method was set up (fit space, variant, rank…).
    pub metadata: BTreeMap<String, String>,
    pub per_step_mse: Vec<f64>,
    pub intervals: Vec<IntervalMse>,
    /// Steps whose per-node squared error is stored alongside the report.
    pub snapshot_steps: Vec<usize>,
    pub config_fingerprint: String,
    pub runtime_seconds: f64,
}

impl ForecastReport {
    pub fn interval_values(&self) -> Vec<f64> {
        self.intervals.iter().map(|i| i.mse).collect()
    }
}

/// Steps whose node errors are kept: the last step of each interval.
pub fn snapshot_steps(config: &ExperimentConfig) -> Vec<usize> {
    config.intervals.iter().map(|iv| iv[1] - 1).collect()
}

/// Scores a `τ × N` forecast against the test frames.
pub fn evaluate(
    method: &str,
    metadata: BTreeMap<String, String>,
    pred: &[f64],
    truth: &[f64],
    nodes: usize,
    config: &ExperimentConfig,
    runtime_seconds: f64,
) -> Result<ForecastReport> {
    let steps = mse_per_step(pred, truth, nodes)?;
    let means = interval_means(&steps, &config.intervals)?;
    Ok(ForecastReport {
        method: method.to_string(),
        metadata,
        intervals: config.intervals.iter().zip(means).map(|(&[start, end], mse)| IntervalMse { start, end, mse }).collect(),
        per_step_mse: steps,
        snapshot_steps: snapshot_steps(config),
        config_fingerprint: config.fingerprint(),
        runtime_seconds,
    })
}

/// Per-node squared error at the report's snapshot steps (`S × N`).
pub fn error_snapshots(report: &ForecastReport, pred: &[f64], truth: &[f64], nodes: usize) -> Result<Trajectory> {
    let mut data = Vec::with_capacity(report.snapshot_steps.len() * nodes);
    for &s in &report.snapshot_steps {
        let (p, t) = (&pred[s * nodes..(s + 1) * nodes], &truth[s * nodes..(s + 1) * nodes]);
        data.extend(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)));
    }
    Trajectory::new(nodes, report.snapshot_steps.len(), 1, data)
}

pub fn train_stage1(
    config: &ExperimentConfig,
    hierarchy: Arc<GraphHierarchy>,
    data: &Trajectory,
    on_epoch: impl FnMut(&Stage1Epoch),
) -> Result<(KoopmanAutoencoder, Vec<Stage1Epoch>)> {
    let mut model = KoopmanAutoencoder::new(hierarchy, config.stage1_config())?;
    let (train, _) = split_dataset(data, config)?;
    let log = model.train(train, config.split.train_len, on_epoch)?;
    Ok((model, log))
}

/// Rebuilds a stage-1 model and loads `params` into it.
pub fn restore_stage1(config: &ExperimentConfig, hierarchy: Arc<GraphHierarchy>, params: &ParamStore) -> Result<KoopmanAutoencoder> {
    let mut model = KoopmanAutoencoder::new(hierarchy, config.stage1_config())?;
    model.params.load_from(params)?;
    Ok(model)
}

/// Encodes every frame: `T` frames of one node with `d_z` features.
pub fn encode_latents(model: &KoopmanAutoencoder, data: &Trajectory) -> Result<Trajectory> {
    let z = model.encode(&data.data)?;
    Trajectory::new(1, z.frames, z.dim, z.z)
}

/// A trained transformer plus the standardization of its sequence space.
#[derive(Debug, Clone)]
pub struct SequenceModel {
    pub transformer: LatentTransformer,
    pub scaler: Standardizer,
}

const SCALER_MEAN: &str = "scaler.mean";
const SCALER_SCALE: &str = "scaler.scale";

impl SequenceModel {
    /// Transformer parameters plus the scaler, for checkpointing.
    pub fn to_params(&self) -> ParamStore {
        let mut p = self.transformer.params.clone();
        let d = self.scaler.mean.len();
        p.insert(SCALER_MEAN, Tensor::new(&[d], self.scaler.mean.clone()).expect("shape"));
        p.insert(SCALER_SCALE, Tensor::new(&[d], self.scaler.scale.clone()).expect("shape"));
        p
    }

    pub fn from_params(config: &ExperimentConfig, dim: usize, d_model: Option<usize>, params: &ParamStore) -> Result<Self> {
        let mut tc = config.transformer_config();
        tc.d_model = d_model.or(tc.d_model);
        let mut transformer = LatentTransformer::new(dim, tc)?;
        transformer.params.load_from(params)?;
        let get = |name: &str| {
            params
                .by_name(name)
                .map(|t| t.data().to_vec())
                .filter(|v| v.len() == dim)
                .ok_or_else(|| LabError::Format(format!("checkpoint lacks a {dim}-value `{name}`")))
        };
        Ok(Self {
            transformer,
            scaler: Standardizer {
                mean: get(SCALER_MEAN)?,
                scale: get(SCALER_SCALE)?,
            },
        })
    }

    /// Teacher-forced training on the first `train_len` rows of `seq`.
    pub fn train(
        config: &ExperimentConfig,
        seq: &[f64],
        dim: usize,
        d_model: Option<usize>,
        on_epoch: impl FnMut(&Stage2Epoch),
    ) -> Result<(Self, Vec<Stage2Epoch>)> {
        let train_len = config.split.train_len;
        if seq.len() < train_len * dim {
            return Err(LabError::Invalid("sequence is shorter than the training split".into()));
        }
        let scaler = if config.stage2.standardize {
            Standardizer::fit(&seq[..train_len * dim], dim)?
        } else {
            Standardizer::identity(dim)
        };
        let scaled = scaler.apply(&seq[..train_len * dim]);
        let mut tc = config.transformer_config();
        tc.d_model = d_model.or(tc.d_model);
        let mut transformer = LatentTransformer::new(dim, tc)?;
        let log = transformer.train(&scaled, train_len, on_epoch)?;
        Ok((Self { transformer, scaler }, log))
    }

    /// Rollout seeded with the last `L` training rows of `seq`, `τ × dim`.
    pub fn forecast(&self, seq: &[f64], train_len: usize, horizon: usize) -> Result<Vec<f64>> {
        let dim = self.transformer.dim;
        let l = self.transformer.config.window;
        if train_len < l || seq.len() < train_len * dim {
            return Err(LabError::Invalid("not enough history for the seed window".into()));
        }
        let seed = self.scaler.apply(&seq[(train_len - l) * dim..train_len * dim]);
        let out = self.transformer.rollout(&seed, train_len - 1, horizon)?;
        Ok(self.scaler.invert(&out))
    }
}

/// A decoded forecast and how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub method: String,
    pub metadata: BTreeMap<String, String>,
    /// `τ × N` decoded states.
    pub states: Vec<f64>,
    /// `τ × d` sequence-space prediction, for latent methods.
    pub latents: Option<Trajectory>,
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub fn forecast_tkgcn(config: &ExperimentConfig, stage1: &KoopmanAutoencoder, stage2: &SequenceModel, latents: &Trajectory, variant: &str) -> Result<Forecast> {
    let tau = config.split.test_len;
    let z = stage2.forecast(&latents.data, config.split.train_len, tau)?;
    let states = stage1.decode(&z)?;
    Ok(Forecast {
        method: variant.to_string(),
        metadata: meta(&[("variant", variant.to_string()), ("space", "latent".into())]),
        states,
        latents: Some(Trajectory::new(1, tau, latents.features, z)?),
    })
}

/// The transformer run directly on mesh states.
pub fn forecast_raw_transformer(config: &ExperimentConfig, model: &SequenceModel, data: &Trajectory) -> Result<Forecast> {
    let states = model.forecast(&data.data, config.split.train_len, config.split.test_len)?;
    Ok(Forecast {
        method: "transformer-only".into(),
        metadata: meta(&[("variant", "transformer-only".into()), ("space", "raw".into())]),
        states,
        latents: None,
    })
}

pub fn forecast_dmd(config: &ExperimentConfig, stage1: &KoopmanAutoencoder, data: &Trajectory, latents: &Trajectory) -> Result<Forecast> {
    let (a, tau) = (config.split.train_len, config.split.test_len);
    let rank = config.baselines.dmd_rank;
    let (states, fitted) = match config.baselines.dmd_space {
        FitSpace::Raw => {
            let w = data.width();
            let m = DmdModel::fit(&data.data[..a * w], w, rank)?;
            (m.forecast(&data.data[(a - 1) * w..a * w], tau)?, m.rank)
        }
        FitSpace::Latent => {
            let d = latents.width();
            let m = DmdModel::fit(&latents.data[..a * d], d, rank)?;
            let z = m.forecast(&latents.data[(a - 1) * d..a * d], tau)?;
            (stage1.decode(&z)?, m.rank)
        }
    };
    Ok(Forecast {
        method: "dmd".into(),
        metadata: meta(&[
            ("space", space_name(config.baselines.dmd_space)),
            ("requested_rank", rank.to_string()),
            ("rank", fitted.to_string()),
        ]),
        states,
        latents: None,
    })
}

pub fn forecast_var(config: &ExperimentConfig, stage1: &KoopmanAutoencoder, data: &Trajectory, latents: &Trajectory) -> Result<Forecast> {
    let (a, tau) = (config.split.train_len, config.split.test_len);
    let b = &config.baselines;
    let states = match b.var_space {
        FitSpace::Raw => {
            let w = data.width();
            let m = VarModel::fit(&data.data[..a * w], w, b.var_order, b.var_ridge)?;
            m.forecast(&data.data[..a * w], tau)?
        }
        FitSpace::Latent => {
            let d = latents.width();
            let m = VarModel::fit(&latents.data[..a * d], d, b.var_order, b.var_ridge)?;
            stage1.decode(&m.forecast(&latents.data[..a * d], tau)?)?
        }
    };
    Ok(Forecast {
        method: "var".into(),
        metadata: meta(&[
            ("space", space_name(b.var_space)),
            ("order", b.var_order.to_string()),
            ("ridge", b.var_ridge.to_string()),
        ]),
        states,
        latents: None,
    })
}

pub fn forecast_koopman(config: &ExperimentConfig, stage1: &KoopmanAutoencoder, data: &Trajectory) -> Result<Forecast> {
    let (a, tau) = (config.split.train_len, config.split.test_len);
    let w = data.width();
    Ok(Forecast {
        method: "koopman".into(),
        metadata: meta(&[("space", "latent".into())]),
        states: stage1.pure_koopman_forecast(&data.data[(a - 1) * w..a * w], tau)?,
        latents: None,
    })
}

fn space_name(s: FitSpace) -> String {
    match s {
        FitSpace::Raw => "raw".into(),
        FitSpace::Latent => "latent".into(),
    }
}

/// Everything an in-memory pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub data: Trajectory,
    pub stage1: KoopmanAutoencoder,
    pub stage1_log: Vec<Stage1Epoch>,
    pub latents: Trajectory,
    pub stage2: SequenceModel,
    pub stage2_log: Vec<Stage2Epoch>,
    pub forecasts: Vec<Forecast>,
    pub reports: Vec<ForecastReport>,
}

/// Mesh, simulated data and hierarchy for a config.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(Trajectory, Arc<GraphHierarchy>)> {
    config.validate()?;
    let graph = load_graph(config).stage("mesh")?;
    let data = simulate_dataset(config, &graph).stage("simulate")?;
    let hierarchy = build_hierarchy(config, graph).stage("mesh")?;
    Ok((data, hierarchy))
}

/// Stage 1 on `data` and the encoded latents of every frame.
pub fn prepare_latents(
    config: &ExperimentConfig,
    hierarchy: Arc<GraphHierarchy>,
    data: &Trajectory,
) -> Result<(KoopmanAutoencoder, Vec<Stage1Epoch>, Trajectory)> {
    let (stage1, log) = train_stage1(config, hierarchy, data, |_| {}).stage("train-kgcn")?;
    let latents = encode_latents(&stage1, data).stage("train-kgcn")?;
    Ok((stage1, log, latents))
}

/// All four baseline-comparable forecasts from a trained stage 1 and 2.
pub fn forecast_all(
    config: &ExperimentConfig,
    data: &Trajectory,
    stage1: &KoopmanAutoencoder,
    stage2: &SequenceModel,
    latents: &Trajectory,
) -> Result<Vec<(Forecast, f64)>> {
    let mut out = Vec::with_capacity(METHODS.len());
    for method in METHODS {
        let t = std::time::Instant::now();
        let f = match method {
            "tk-gcn" => forecast_tkgcn(config, stage1, stage2, latents, "tk-gcn").stage("forecast"),
            "dmd" => forecast_dmd(config, stage1, data, latents).stage("baseline"),
            "var" => forecast_var(config, stage1, data, latents).stage("baseline"),
            _ => forecast_koopman(config, stage1, data).stage("baseline"),
        }?;
        out.push((f, t.elapsed().as_secs_f64()));
    }
    Ok(out)
}

/// Simulate, stage 1, encode, stage 2, rollout and decode, plus the
/// baselines on the same split, all scored on the test frames.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineRun> {
    let (data, hierarchy) = prepare_data(config)?;
    let (stage1, stage1_log, latents) = prepare_latents(config, hierarchy, &data)?;
    let clock = std::time::Instant::now();
    let (stage2, stage2_log) = SequenceModel::train(config, &latents.data, latents.width(), None, |_| {}).stage("train-transformer")?;
    let trained = clock.elapsed().as_secs_f64();
    let mut forecasts = Vec::new();
    let mut timings = Vec::new();
    for (f, t) in forecast_all(config, &data, &stage1, &stage2, &latents)? {
        timings.push(if f.method == "tk-gcn" { t + trained } else { t });
        forecasts.push(f);
    }
    let reports = score(config, &data, &forecasts, &timings)?;
    Ok(PipelineRun {
        data,
        stage1,
        stage1_log,
        latents,
        stage2,
        stage2_log,
        forecasts,
        reports,
    })
}

pub fn score(config: &ExperimentConfig, data: &Trajectory, forecasts: &[Forecast], timings: &[f64]) -> Result<Vec<ForecastReport>> {
    let (_, test) = split_dataset(data, config)?;
    forecasts
        .iter()
        .zip(timings)
        .map(|(f, &t)| evaluate(&f.method, f.metadata.clone(), &f.states, test, data.width(), config, t))
        .collect::<Result<_>>()
        .stage("evaluate")
}

/// One Table-1 variant trained from scratch on `data` (the simulated
/// dataset of `config`).
pub fn run_ablation(config: &ExperimentConfig, variant: &str, data: &Trajectory) -> Result<(Forecast, ForecastReport)> {
    if !VARIANTS.contains(&variant) {
        return Err(LabError::Invalid(format!("unknown variant `{variant}`; valid variants: {}", VARIANTS.join(", "))));
    }
    let clock = std::time::Instant::now();
    let mut forecast = if variant == "transformer-only" {
        let (model, _) = SequenceModel::train(config, &data.data, data.width(), Some(config.stage1.d_z), |_| {}).stage("train-transformer")?;
        forecast_raw_transformer(config, &model, data).stage("forecast")?
    } else {
        let mut cfg = config.clone();
        if variant == "transformer+gcn" {
            cfg.stage1.lambda1 = 0.0;
            cfg.stage1.lambda2 = 0.0;
        }
        let graph = load_graph(&cfg).stage("mesh")?;
        let hierarchy = build_hierarchy(&cfg, graph).stage("mesh")?;
        let (stage1, _, latents) = prepare_latents(&cfg, hierarchy, data)?;
        let (stage2, _) = SequenceModel::train(&cfg, &latents.data, latents.width(), None, |_| {}).stage("train-transformer")?;
        forecast_tkgcn(&cfg, &stage1, &stage2, &latents, variant).stage("forecast")?
    };
    forecast.method = variant.to_string();
    forecast.metadata.insert("variant".into(), variant.into());
    let reports = score(config, data, std::slice::from_ref(&forecast), &[clock.elapsed().as_secs_f64()])?;
    Ok((forecast, reports.into_iter().next().expect("one report")))
}

/// Table-1 CSV: one row per report, one column per interval.
pub fn report_table(reports: &[ForecastReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| LabError::Invalid("no reports to tabulate".into()))?;
    let mut out = String::from("model");
    for iv in &first.intervals {
        out.push_str(&format!(",interval_{}_{}", iv.start, iv.end));
    }
    out.push('\n');
    for r in reports {
        if r.intervals.len() != first.intervals.len() {
            return Err(LabError::Invalid(format!("report `{}` has a different interval layout", r.method)));
        }
        out.push_str(&r.method);
        for iv in &r.intervals {
            out.push_str(&format!(",{}", iv.mse));
        }
        out.push('\n');
    }
    Ok(out)
}
