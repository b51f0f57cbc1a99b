use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctshift_cli::commands::default_report_paths;
use ctshift_cli::{
    cmd_experiment, cmd_generate, cmd_ingest, cmd_report, cmd_train_base, CliError, ExperimentId,
    RunConfig,
};

/// Online pseudo-label adaptation experiments on CT-like slice data.
#[derive(Debug, Parser)]
#[command(name = "ctshift", version)]
struct Cli {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (overrides the config file).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `online.confidence_threshold=0.95`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic train/val/test1/test2/test3 suite.
    Generate,
    /// Pretext pretraining, models A and B, multipliers.
    TrainBase,
    /// Run experiments Exp1..Exp6 (or `all`).
    Experiment {
        #[arg(required = true)]
        ids: Vec<String>,
    },
    /// Print the results table and write a CSV.
    Report {
        /// Report files; defaults to every expN.json under <out>/reports.
        paths: Vec<PathBuf>,
        /// CSV destination; defaults to <out>/reports/results.csv.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Build a manifest from a directory of per-patient PGM folders.
    Ingest { dir: PathBuf, manifest_out: PathBuf },
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Generate => {
            for (split, n) in cmd_generate(&cfg)? {
                println!("{:<6} {n} patients", split.name());
            }
        }
        Command::TrainBase => {
            let meta = cmd_train_base(&cfg)?;
            println!(
                "multipliers: healthy {:.4}, B {:.4}; models in {}",
                meta.mult_healthy.factor,
                meta.mult_b.factor,
                cfg.models_dir().display()
            );
        }
        Command::Experiment { ids } => {
            let ids: Vec<ExperimentId> = if ids.iter().any(|i| i.eq_ignore_ascii_case("all")) {
                ExperimentId::ALL.to_vec()
            } else {
                ids.iter().map(|i| i.parse()).collect::<Result<_, _>>()?
            };
            for id in ids {
                let r = cmd_experiment(id, &cfg)?;
                println!(
                    "{} {} {}: {:.3} +- {:.3}",
                    r.experiment_id, r.test_set, r.method, r.accuracy, r.ci_half_width
                );
            }
        }
        Command::Report { paths, csv } => {
            let paths = if paths.is_empty() {
                default_report_paths(&cfg)
            } else {
                paths
            };
            if paths.is_empty() {
                return Err(CliError::Data(format!(
                    "no reports found under {}",
                    cfg.reports_dir().display()
                )));
            }
            let csv = csv.unwrap_or_else(|| cfg.reports_dir().join("results.csv"));
            print!("{}", cmd_report(&paths, Some(&csv))?);
        }
        Command::Ingest { dir, manifest_out } => {
            let m = cmd_ingest(&dir, &manifest_out)?;
            println!(
                "{} patients -> {}",
                m.patients.len(),
                manifest_out.display()
            );
        }
        Command::ShowConfig => {
            let json =
                serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
