use std::path::Path;

use proptest::prelude::*;
use serde_json::json;
use tkgcn_lab::config::{ExperimentConfig, FitSpace, MeshSource, SynthKind};
use tkgcn_lab::formats::{load_stdf, save_stdf, Trajectory};
use tkgcn_lab::pipeline::{self, ForecastReport};
use tkgcn_lab::workspace::report_json;
use tkgcn_lab::Workspace;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.mesh = MeshSource::Synth {
        kind: SynthKind::Sphere,
        subdivisions: 1,
    };
    c.simulation.frames = 160;
    c.split.train_len = 100;
    c.split.test_len = 60;
    c.intervals = vec![[0, 20], [20, 40], [40, 60]];
    c.stage1.d_z = 4;
    c.stage1.epochs = 2;
    c.stage1.channels = 2;
    c.stage1.batch_size = 8;
    c.stage2.window = 8;
    c.stage2.heads = 2;
    c.stage2.epochs = 2;
    c.stage2.batch_size = 8;
    c.baselines.dmd_rank = 4;
    c.baselines.var_order = 1;
    c.output_dir = dir.to_path_buf();
    c
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn split_is_contiguous_and_checked() {
    let data = Trajectory::new(2, 1500, 1, (0..3000).map(|v| v as f64).collect()).unwrap();
    let mut c = ExperimentConfig::default();
    c.simulation.frames = 1500;
    let (train, test) = pipeline::split_dataset(&data, &c).unwrap();
    assert_eq!(train.len(), 1200 * 2);
    assert_eq!(test.len(), 300 * 2);
    assert_eq!(train[0], 0.0);
    assert_eq!(test[0], 2400.0, "test starts right after the last training frame");
    assert_eq!(*test.last().unwrap(), 2999.0);
    let short = Trajectory::new(2, 1000, 1, vec![0.0; 2000]).unwrap();
    assert!(pipeline::split_dataset(&short, &c).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interval_means_match_a_double_loop(
        nodes in 1usize..6,
        values in prop::collection::vec(-2.0f64..2.0, 2 * 6 * 30),
        cut in 1usize..29,
    ) {
        let steps = 30;
        let pred = &values[..steps * nodes];
        let truth = &values[steps * 6..steps * 6 + steps * nodes];
        let intervals = [[0, cut], [cut, steps]];
        let got = pipeline::mse_intervals(pred, truth, nodes, &intervals).unwrap();
        for (k, &[a, b]) in intervals.iter().enumerate() {
            let mut total = 0.0;
            for t in a..b {
                let mut step = 0.0;
                for i in 0..nodes {
                    let e = pred[t * nodes + i] - truth[t * nodes + i];
                    step += e * e;
                }
                total += step / nodes as f64;
            }
            prop_assert!((got[k] - total / (b - a) as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn every_config_field_moves_the_fingerprint() {
    let base = ExperimentConfig::desk();
    let f = base.fingerprint();
    assert_eq!(f.len(), 64);
    assert_eq!(f, ExperimentConfig::from_json(&base.to_json()).unwrap().fingerprint());
    let edits: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
        Box::new(|c| c.seed += 1),
        Box::new(|c| c.simulation.ap.a = 0.14),
        Box::new(|c| c.simulation.pacing.period += 1),
        Box::new(|c| c.stage1.lambda2 *= 2.0),
        Box::new(|c| c.stage2.heads = 2),
        Box::new(|c| c.baselines.var_space = FitSpace::Raw),
        Box::new(|c| c.intervals[0] = [0, 50]),
        Box::new(|c| c.output_dir.push("x")),
    ];
    for (k, edit) in edits.iter().enumerate() {
        let mut c = base.clone();
        edit(&mut c);
        assert_ne!(c.fingerprint(), f, "edit {k}");
    }
}

#[test]
fn full_run_writes_every_artifact_and_reproduces_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tiny(dir.path())).unwrap();
    let reports = ws.run().unwrap();
    let mut methods: Vec<&str> = reports.iter().map(|r| r.method.as_str()).collect();
    methods.sort();
    assert_eq!(methods, ["dmd", "koopman", "tk-gcn", "var"]);

    for r in &reports {
        assert_eq!(r.config_fingerprint, ws.config.fingerprint());
        assert_eq!(r.per_step_mse.len(), 60);
        for iv in &r.intervals {
            let mean = r.per_step_mse[iv.start..iv.end].iter().sum::<f64>() / (iv.end - iv.start) as f64;
            assert!((mean - iv.mse).abs() < 1e-12);
        }
        let text = std::fs::read_to_string(ws.report_path(&r.method)).unwrap();
        let back: ForecastReport = serde_json::from_str(&text).unwrap();
        assert_eq!(&back, r);
        let (errors, _) = load_stdf(&ws.errors_path(&r.method)).unwrap();
        assert_eq!((errors.frames, errors.nodes), (3, ws.data().unwrap().nodes));
    }

    let table = std::fs::read_to_string(ws.table_path()).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "model,interval_0_20,interval_20_40,interval_40_60");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("tk-gcn,"));
    let cells: usize = lines[1..].iter().map(|l| l.split(',').count() - 1).sum();
    assert_eq!(cells, 4 * 3, "methods × intervals cells");

    // a second run with the same config must reproduce every artifact
    let files = ["data.stdf", "latents.stdf", "stage1.kfck", "stage2.kfck", "forecasts/tk-gcn.stdf", "forecasts/dmd.stdf", "forecasts/var.stdf", "forecasts/koopman.stdf", "table.csv"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| read(&dir.path().join(f))).collect();
    let first_reports: Vec<ForecastReport> = reports;
    let again = ws.run().unwrap();
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&read(&dir.path().join(f)), bytes, "{f} differs");
    }
    for (a, b) in first_reports.iter().zip(&again) {
        let (mut a, mut b) = (a.clone(), b.clone());
        a.runtime_seconds = 0.0;
        b.runtime_seconds = 0.0;
        assert_eq!(report_json(&a), report_json(&b));
    }

    // the in-memory pipeline runs the same code path
    let run = pipeline::run_pipeline(&ws.config).unwrap();
    let (tk, _) = load_stdf(&ws.forecast_path("tk-gcn")).unwrap();
    assert_eq!(run.forecasts[0].method, "tk-gcn");
    assert_eq!(run.forecasts[0].states, tk.data);
}

#[test]
fn evaluation_only_reads_forecast_files() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tiny(dir.path())).unwrap();
    let data = ws.simulate().unwrap();
    let (_, test) = pipeline::split_dataset(&data, &ws.config).unwrap();
    let shifted = Trajectory::new(data.nodes, 60, 1, test.iter().map(|v| v + 0.1).collect()).unwrap();
    let meta = json!({
        "kind": "forecast",
        "config_fingerprint": ws.config.fingerprint(),
        "method": "offset",
        "metadata": {},
        "runtime_seconds": 0.0,
    });
    save_stdf(&ws.forecast_path("offset"), &shifted, &meta).unwrap();
    let reports = ws.evaluate().unwrap();
    assert_eq!(reports.len(), 1);
    for iv in &reports[0].intervals {
        assert!((iv.mse - 0.01).abs() < 1e-12);
    }
    let table = ws.report().unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("offset,"));

    // a forecast from another config is refused
    let mut other = meta.clone();
    other["config_fingerprint"] = json!("0");
    save_stdf(&ws.forecast_path("stale"), &shifted, &other).unwrap();
    assert!(ws.evaluate().is_err());
}

#[test]
fn stages_demand_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::new(tiny(dir.path())).unwrap();
    let err = ws.train_kgcn().unwrap_err().to_string();
    assert!(err.contains("simulate"), "{err}");
    assert!(ws.forecast().is_err());
    assert!(ws.baseline("arima").unwrap_err().to_string().contains("dmd, var, koopman"));
    let err = ws.ablate("bogus").unwrap_err().to_string();
    assert!(err.contains("tk-gcn, transformer+gcn, transformer-only"), "{err}");

    ws.simulate().unwrap();
    let mut changed = ws.config.clone();
    changed.seed += 1;
    let ws2 = Workspace::new(changed).unwrap();
    assert!(ws2.train_kgcn().unwrap_err().to_string().contains("different config"));
}

#[test]
fn missing_mesh_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.mesh = MeshSource::File(dir.path().join("absent.mesh"));
    let err = pipeline::run_pipeline(&c).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("mesh") && msg.contains("absent.mesh"), "{msg}");
}

#[test]
fn ablation_variants_share_the_interval_layout() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let (data, _) = pipeline::prepare_data(&config).unwrap();
    let mut tables = Vec::new();
    for v in pipeline::VARIANTS {
        let (f, r) = pipeline::run_ablation(&config, v, &data).unwrap();
        assert_eq!(f.metadata["variant"], v);
        assert_eq!(r.method, v);
        assert_eq!(f.states.len(), 60 * data.nodes);
        tables.push(r);
    }
    let table = pipeline::report_table(&tables).unwrap();
    assert_eq!(table.lines().count(), 4);

    // the tk-gcn variant is the pipeline's primary forecast
    let run = pipeline::run_pipeline(&config).unwrap();
    let (tk, _) = pipeline::run_ablation(&config, "tk-gcn", &data).unwrap();
    assert_eq!(tk.states, run.forecasts[0].states);
    assert!(pipeline::run_ablation(&config, "lstm", &data).is_err());
}
