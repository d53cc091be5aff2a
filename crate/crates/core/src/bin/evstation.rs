use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evstation::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "evstation", about = "Train, evaluate and compare EV charging-station agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds, replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    ports: Option<usize>,
    #[arg(long)]
    price_factor: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed into the output directory.
    Train(Overrides),
    /// Evaluate trained checkpoints and write report.json / report.csv.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint files; defaults to each seed's final checkpoint under --out.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Tabulate JPR and relative gains across report.json files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn resolve(o: &Overrides) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = match &o.config {
        Some(path) => experiment::read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if !o.seed.is_empty() {
        config.seeds = o.seed.clone();
    }
    if let Some(n) = o.ports {
        config.scenario.n_ports = n;
    }
    if let Some(f) = o.price_factor {
        config.scenario.price_factor = f;
    }
    if let Some(out) = &o.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Train(o) => {
            let dir = experiment::cmd_train(&resolve(&o)?)?;
            println!("{}", dir.display());
        }
        Command::Eval { overrides, checkpoint } => {
            let config = resolve(&overrides)?;
            let report = experiment::cmd_eval(&config, &checkpoint)?;
            println!(
                "{} ports={} factor={} mean_jpr={:.4} se={:.4}",
                report.agent.label(),
                report.n_ports,
                report.price_factor,
                report.mean.jpr,
                report.jpr_std_error
            );
        }
        Command::Compare { reports, out } => {
            let table = experiment::cmd_compare(&reports, &out)?;
            table.write_csv(std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                ExperimentError::Config { .. } => "config",
                ExperimentError::Mismatch(_) => "mismatch",
                ExperimentError::Io { .. } | ExperimentError::Json { .. } | ExperimentError::Csv(_) => "io",
                ExperimentError::Sac(_) | ExperimentError::Data(_) => "run",
            };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
