//! File-backed pipeline stages. Each stage reads the artifacts of the
//! previous one from the output directory and checks that they came from the
//! same config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use tkgcn_core::koopman_ae::KoopmanAutoencoder;
use tkgcn_core::mesh::GraphHierarchy;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result, StageContext};
use crate::formats::{load_checkpoint, load_stdf, save_checkpoint, save_stdf, write_atomic, Trajectory};
use crate::pipeline::{self, Forecast, ForecastReport, SequenceModel, METHODS, VARIANTS};

/// Baselines accepted by [`Workspace::baseline`].
pub const BASELINES: [&str; 3] = ["dmd", "var", "koopman"];

pub struct Workspace {
    pub config: ExperimentConfig,
    pub root: PathBuf,
    fingerprint: String,
}

impl Workspace {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            root: config.output_dir.clone(),
            fingerprint: config.fingerprint(),
            config,
        })
    }

    pub fn data_path(&self) -> PathBuf {
        self.root.join("data.stdf")
    }

    pub fn stage1_path(&self) -> PathBuf {
        self.root.join("stage1.kfck")
    }

    pub fn latents_path(&self) -> PathBuf {
        self.root.join("latents.stdf")
    }

    pub fn stage2_path(&self) -> PathBuf {
        self.root.join("stage2.kfck")
    }

    pub fn forecast_path(&self, method: &str) -> PathBuf {
        self.root.join("forecasts").join(format!("{method}.stdf"))
    }

    pub fn report_path(&self, method: &str) -> PathBuf {
        self.root.join("reports").join(format!("{method}.json"))
    }

    pub fn errors_path(&self, method: &str) -> PathBuf {
        self.root.join("errors").join(format!("{method}.stdf"))
    }

    pub fn table_path(&self) -> PathBuf {
        self.root.join("table.csv")
    }

    fn meta(&self, kind: &str) -> Value {
        json!({ "kind": kind, "config_fingerprint": self.fingerprint })
    }

    fn write_config(&self) -> Result<()> {
        write_atomic(&self.root.join("config.json"), self.config.to_json().as_bytes())
    }

    /// Loads an STDF artifact and checks its config fingerprint.
    fn load_artifact(&self, path: &Path, producer: &str) -> Result<(Trajectory, Value)> {
        if !path.exists() {
            return Err(LabError::Invalid(format!("{} is missing; run `{producer}` first", path.display())));
        }
        let (t, meta) = load_stdf(path)?;
        self.check_fingerprint(path, &meta, producer)?;
        Ok((t, meta))
    }

    fn check_fingerprint(&self, path: &Path, meta: &Value, producer: &str) -> Result<()> {
        if meta["config_fingerprint"].as_str() != Some(&self.fingerprint) {
            return Err(LabError::Invalid(format!("{} was produced by a different config; rerun `{producer}`", path.display())));
        }
        Ok(())
    }

    fn hierarchy(&self) -> Result<Arc<GraphHierarchy>> {
        let graph = pipeline::load_graph(&self.config).stage("mesh")?;
        pipeline::build_hierarchy(&self.config, graph).stage("mesh")
    }

    pub fn simulate(&self) -> Result<Trajectory> {
        let graph = pipeline::load_graph(&self.config).stage("mesh")?;
        let data = pipeline::simulate_dataset(&self.config, &graph).stage("simulate")?;
        self.write_config()?;
        save_stdf(&self.data_path(), &data, &self.meta("omega1")).stage("simulate")?;
        Ok(data)
    }

    pub fn data(&self) -> Result<Trajectory> {
        Ok(self.load_artifact(&self.data_path(), "simulate")?.0)
    }

    /// Stage 1 on the saved dataset; writes the checkpoint and the latents
    /// of every frame.
    pub fn train_kgcn(&self) -> Result<KoopmanAutoencoder> {
        let data = self.data()?;
        let (model, log) = pipeline::train_stage1(&self.config, self.hierarchy()?, &data, |_| {}).stage("train-kgcn")?;
        let latents = pipeline::encode_latents(&model, &data).stage("train-kgcn")?;
        save_checkpoint(&self.stage1_path(), &model.params).stage("train-kgcn")?;
        let mut meta = self.meta("latents");
        meta["final_loss"] = json!(log.last().map(|e| e.total));
        save_stdf(&self.latents_path(), &latents, &meta).stage("train-kgcn")?;
        Ok(model)
    }

    pub fn stage1(&self) -> Result<KoopmanAutoencoder> {
        let path = self.stage1_path();
        if !path.exists() {
            return Err(LabError::Invalid(format!("{} is missing; run `train-kgcn` first", path.display())));
        }
        pipeline::restore_stage1(&self.config, self.hierarchy()?, &load_checkpoint(&path)?)
    }

    pub fn latents(&self) -> Result<Trajectory> {
        Ok(self.load_artifact(&self.latents_path(), "train-kgcn")?.0)
    }

    pub fn train_transformer(&self) -> Result<SequenceModel> {
        let latents = self.latents()?;
        let (model, _) = SequenceModel::train(&self.config, &latents.data, latents.width(), None, |_| {}).stage("train-transformer")?;
        save_checkpoint(&self.stage2_path(), &model.to_params()).stage("train-transformer")?;
        Ok(model)
    }

    pub fn stage2(&self) -> Result<SequenceModel> {
        let path = self.stage2_path();
        if !path.exists() {
            return Err(LabError::Invalid(format!("{} is missing; run `train-transformer` first", path.display())));
        }
        let latents = self.latents()?;
        SequenceModel::from_params(&self.config, latents.width(), None, &load_checkpoint(&path)?)
    }

    fn save_forecast(&self, f: &Forecast, runtime: f64) -> Result<()> {
        let tau = self.config.split.test_len;
        let nodes = f.states.len() / tau;
        let traj = Trajectory::new(nodes, tau, 1, f.states.clone())?;
        let mut meta = self.meta("forecast");
        meta["method"] = json!(f.method);
        meta["metadata"] = json!(f.metadata);
        meta["start_frame"] = json!(self.config.split.train_len);
        meta["runtime_seconds"] = json!(runtime);
        save_stdf(&self.forecast_path(&f.method), &traj, &meta)
    }

    /// TK-GCN rollout from the saved checkpoints.
    pub fn forecast(&self) -> Result<Forecast> {
        let clock = std::time::Instant::now();
        let (stage1, stage2, latents) = (self.stage1()?, self.stage2()?, self.latents()?);
        let f = pipeline::forecast_tkgcn(&self.config, &stage1, &stage2, &latents, "tk-gcn").stage("forecast")?;
        self.save_forecast(&f, clock.elapsed().as_secs_f64()).stage("forecast")?;
        Ok(f)
    }

    pub fn baseline(&self, method: &str) -> Result<Forecast> {
        if !BASELINES.contains(&method) {
            return Err(LabError::Invalid(format!("unknown baseline `{method}`; valid baselines: {}", BASELINES.join(", "))));
        }
        let clock = std::time::Instant::now();
        let (data, stage1, latents) = (self.data()?, self.stage1()?, self.latents()?);
        let f = match method {
            "dmd" => pipeline::forecast_dmd(&self.config, &stage1, &data, &latents),
            "var" => pipeline::forecast_var(&self.config, &stage1, &data, &latents),
            _ => pipeline::forecast_koopman(&self.config, &stage1, &data),
        }
        .stage("baseline")?;
        self.save_forecast(&f, clock.elapsed().as_secs_f64()).stage("baseline")?;
        Ok(f)
    }

    /// Trains one variant from scratch on the saved dataset and writes its
    /// forecast under the variant name.
    pub fn ablate(&self, variant: &str) -> Result<Forecast> {
        if !VARIANTS.contains(&variant) {
            return Err(LabError::Invalid(format!("unknown variant `{variant}`; valid variants: {}", VARIANTS.join(", "))));
        }
        let data = self.data()?;
        let clock = std::time::Instant::now();
        let (f, _) = pipeline::run_ablation(&self.config, variant, &data)?;
        self.save_forecast(&f, clock.elapsed().as_secs_f64()).stage("ablate")?;
        Ok(f)
    }

    /// Scores every forecast file against the saved test frames. Only the
    /// forecast STDF files are consulted, whichever method made them.
    pub fn evaluate(&self) -> Result<Vec<ForecastReport>> {
        let data = self.data()?;
        let (_, test) = pipeline::split_dataset(&data, &self.config)?;
        let dir = self.root.join("forecasts");
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| LabError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "stdf"))
            .collect();
        if paths.is_empty() {
            return Err(LabError::Invalid(format!("no forecasts in {}", dir.display())));
        }
        paths.sort();
        let mut reports = Vec::with_capacity(paths.len());
        for path in paths {
            let (pred, meta) = load_stdf(&path).stage("evaluate")?;
            self.check_fingerprint(&path, &meta, "forecast")?;
            if pred.nodes != data.nodes || pred.frames != self.config.split.test_len || pred.features != 1 {
                return Err(LabError::Format(format!("{} does not cover the test frames", path.display())));
            }
            let method = meta["method"].as_str().ok_or_else(|| LabError::Format(format!("{} names no method", path.display())))?;
            let metadata: BTreeMap<String, String> = serde_json::from_value(meta["metadata"].clone())?;
            let runtime = meta["runtime_seconds"].as_f64().unwrap_or(0.0);
            let report = pipeline::evaluate(method, metadata, &pred.data, test, data.nodes, &self.config, runtime).stage("evaluate")?;
            let errors = pipeline::error_snapshots(&report, &pred.data, test, data.nodes)?;
            save_stdf(&self.errors_path(method), &errors, &json!({ "kind": "squared_error", "method": method, "steps": report.snapshot_steps })).stage("evaluate")?;
            write_atomic(&self.report_path(method), report_json(&report).as_bytes()).stage("evaluate")?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Reads every report and writes the method × interval CSV table.
    pub fn report(&self) -> Result<String> {
        let dir = self.root.join("reports");
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| LabError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut reports: Vec<ForecastReport> = Vec::with_capacity(paths.len());
        for p in &paths {
            let text = std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
            let r: ForecastReport = serde_json::from_str(&text)?;
            if r.config_fingerprint != self.fingerprint {
                return Err(LabError::Invalid(format!("{} was produced by a different config; rerun `evaluate`", p.display())));
            }
            reports.push(r);
        }
        // methods in table order, then anything else alphabetically
        let rank = |m: &str| METHODS.iter().chain(&VARIANTS[1..]).position(|x| *x == m).unwrap_or(usize::MAX);
        reports.sort_by(|a, b| (rank(&a.method), &a.method).cmp(&(rank(&b.method), &b.method)));
        let table = pipeline::report_table(&reports)?;
        write_atomic(&self.table_path(), table.as_bytes())?;
        Ok(table)
    }

    /// Every stage in order: the full pipeline with all artifacts on disk.
    pub fn run(&self) -> Result<Vec<ForecastReport>> {
        self.simulate()?;
        self.train_kgcn()?;
        self.train_transformer()?;
        self.forecast()?;
        for b in BASELINES {
            self.baseline(b)?;
        }
        let reports = self.evaluate()?;
        self.report()?;
        Ok(reports)
    }
}

pub fn report_json(report: &ForecastReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}
