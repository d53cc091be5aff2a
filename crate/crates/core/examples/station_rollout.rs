//! Runs one synthetic day under a fixed-price, full-rate policy routed
//! through the safe layer, then prints the reward breakdown.
//!
//! Usage: `station_rollout [price] [trace.csv]`.

use std::fs::File;

use evstation::data::{self, SynthConfig};
use evstation::env::{RewardBreakdown, ScenarioConfig, Station};
use evstation::sac::safe_act;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let price: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let trace_path = args.next();

    let config = ScenarioConfig::reference(5);
    let bundle = data::synthesize(&config, &SynthConfig::default(), 11);
    let mut station = Station::from_bundle(&bundle)?;
    station.reset(11);
    let mut raw = vec![price];
    raw.extend(std::iter::repeat(config.x_max).take(config.n_ports));
    let mut totals = RewardBreakdown::default();
    while !station.is_done() {
        let action = safe_act(&raw, station.state(), &config)?;
        totals.accumulate(&station.step(&action)?.reward);
    }
    let m = station.metrics();
    println!("price {price:.2}: JPR {:.3}", totals.total);
    println!(
        "  payment {:.3}  energy {:.3}  up {:.3}  down {:.3}",
        totals.payment, totals.energy_cost, totals.up_penalty, totals.down_penalty
    );
    println!(
        "  arrivals {}  admitted {}  completed {}  rejected(full) {}  balked {}  unserved {}",
        m.arrivals, m.admitted, m.completed, m.rejected_full, m.balked, m.unserved_departures
    );
    if let Some(path) = trace_path {
        station.write_trace_csv(File::create(&path)?)?;
        println!("trace written to {path}");
    }
    Ok(())
}
