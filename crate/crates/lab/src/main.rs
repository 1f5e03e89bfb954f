use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tkgcn_lab::error::{LabError, Result};
use tkgcn_lab::workspace::BASELINES;
use tkgcn_lab::{ExperimentConfig, Workspace};

/// Two-stage mesh forecasting: spline-GCN Koopman autoencoder plus a latent
/// transformer, with DMD, VAR and pure-Koopman baselines.
#[derive(Parser)]
#[command(name = "tkgcn", version)]
struct Cli {
    /// Experiment config (JSON). Defaults to the desk-scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured protocol and write data.stdf.
    Simulate,
    /// Train stage 1 and write stage1.kfck and latents.stdf.
    TrainKgcn,
    /// Train stage 2 on the latents and write stage2.kfck.
    TrainTransformer,
    /// Roll out TK-GCN over the test horizon.
    Forecast,
    /// Fit and forecast one baseline, or all of them.
    Baseline {
        #[arg(long, default_value = "all")]
        method: String,
    },
    /// Train and forecast one ablation variant.
    Ablate {
        #[arg(long)]
        variant: String,
    },
    /// Score every forecast file against the test frames.
    Evaluate,
    /// Tabulate the reports into table.csv.
    Report {
        /// Run every stage first.
        #[arg(long)]
        run: bool,
    },
    /// Print the effective config as JSON.
    ShowConfig,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        // an unreadable config is bad input, not a runtime failure
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            LabError::Io { .. } => LabError::Invalid(e.to_string()),
            e => e,
        })?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        c.seed = seed;
    }
    if let Some(out) = &cli.out {
        c.output_dir = out.clone();
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: &Cli) -> Result<()> {
    let ws = Workspace::new(config(cli)?)?;
    match &cli.command {
        Command::Simulate => {
            let d = ws.simulate()?;
            println!("{}: {} nodes × {} frames", ws.data_path().display(), d.nodes, d.frames);
        }
        Command::TrainKgcn => {
            let m = ws.train_kgcn()?;
            println!("{}: d_z = {}", ws.stage1_path().display(), m.latent_dim());
        }
        Command::TrainTransformer => {
            ws.train_transformer()?;
            println!("{}", ws.stage2_path().display());
        }
        Command::Forecast => {
            ws.forecast()?;
            println!("{}", ws.forecast_path("tk-gcn").display());
        }
        Command::Baseline { method } => {
            let methods: Vec<&str> = if method == "all" { BASELINES.to_vec() } else { vec![method.as_str()] };
            for m in methods {
                ws.baseline(m)?;
                println!("{}", ws.forecast_path(m).display());
            }
        }
        Command::Ablate { variant } => {
            ws.ablate(variant)?;
            println!("{}", ws.forecast_path(variant).display());
        }
        Command::Evaluate => {
            for r in ws.evaluate()? {
                let iv: Vec<String> = r.intervals.iter().map(|i| format!("[{},{}) {:.4e}", i.start, i.end, i.mse)).collect();
                println!("{:<18} {}", r.method, iv.join("  "));
            }
        }
        Command::Report { run } => {
            if *run {
                ws.run()?;
            }
            print!("{}", ws.report()?);
        }
        Command::ShowConfig => println!("{}", ws.config.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
