//! Trains the per-port agent on synthetic days, writes a run directory and
//! evaluates the final checkpoint.
//!
//! Usage: `train_sac [episodes] [out_dir]`. The defaults keep it to seconds;
//! raise `episodes` (and widen `sac.hidden`) for real runs.

use std::path::PathBuf;

use evstation::experiment::{self, AgentKind, ExperimentConfig};
use evstation::sac::SacConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let episodes: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("evstation-train"));

    let mut config = ExperimentConfig {
        agent: AgentKind::Proposed,
        episodes,
        eval_episodes: 2,
        seeds: vec![1],
        out_dir: out,
        sac: SacConfig {
            hidden: vec![32, 32],
            warmup_steps: 288,
            checkpoint_every: 1,
            ..SacConfig::default()
        },
        ..ExperimentConfig::default()
    };
    config.scenario.n_ports = 3;

    let dir = experiment::cmd_train(&config)?;
    let log = std::fs::read_to_string(dir.join("seed_1").join("train_log.csv"))?;
    print!("{log}");
    let report = experiment::cmd_eval(&config, &[])?;
    println!(
        "evaluation over {} days: JPR {:.3} (payment {:.3}, energy {:.3})",
        config.eval_episodes, report.mean.jpr, report.mean.payment, report.mean.energy_cost
    );
    println!("run directory {}", dir.display());
    Ok(())
}
