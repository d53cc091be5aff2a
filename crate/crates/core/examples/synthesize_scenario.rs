//! Generates a synthetic day and writes it in the on-disk formats.
//!
//! Usage: `synthesize_scenario [out_dir] [seed]`; defaults to a temp dir.

use std::fs::File;
use std::path::PathBuf;

use evstation::data::{self, SynthConfig};
use evstation::env::ScenarioConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("evstation-scenario"));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    std::fs::create_dir_all(&out)?;

    let config = ScenarioConfig::reference(5);
    let bundle = data::synthesize(&config, &SynthConfig::default(), seed);
    data::write_price_csv(&bundle.prices, File::create(out.join("prices.csv"))?)?;
    std::fs::write(out.join("bundle.json"), bundle.to_json()?)?;

    let reloaded = data::load_price_csv(&out.join("prices.csv"), 1)?;
    assert_eq!(reloaded.prices, bundle.prices.prices);
    let arrivals: u32 = bundle.arrivals.counts.iter().sum();
    let (lo, hi) = bundle
        .prices
        .prices
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    println!("wrote {}", out.display());
    println!("{} slots, {arrivals} arrivals, price range {lo:.3}..{hi:.3} CNY/kWh", config.horizon_slots);
    Ok(())
}
