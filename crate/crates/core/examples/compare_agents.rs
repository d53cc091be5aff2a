//! Trains the per-port agent and both fleet baselines over a small port
//! sweep and prints the comparison table.
//!
//! Usage: `compare_agents [episodes] [ports,...]`.

use evstation::experiment::{self, AgentKind, ExperimentConfig};
use evstation::sac::SacConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let episodes: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2);
    let ports: Vec<usize> = match args.next() {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![3, 4],
    };

    let mut reports = Vec::new();
    for &n in &ports {
        for agent in AgentKind::ALL {
            let mut config = ExperimentConfig {
                agent,
                episodes,
                eval_episodes: 2,
                seeds: vec![1, 2],
                sac: SacConfig {
                    hidden: vec![32, 32],
                    warmup_steps: 288,
                    ..SacConfig::default()
                },
                ..ExperimentConfig::default()
            };
            config.scenario.n_ports = n;
            reports.push(experiment::run_in_memory(&config)?);
        }
    }
    let table = experiment::compare(&reports)?;
    table.write_csv(std::io::stdout())?;
    Ok(())
}
