//! Splits a station-wide rate across ports the way the fleet baselines do.

use evstation::baselines::{laxity, llf_dispatch};
use evstation::env::PortState;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ports = [
        PortState { residual_demand_kwh: 14.0, residual_slots: 6 },
        PortState { residual_demand_kwh: 10.0, residual_slots: 2 },
        PortState::default(),
        PortState { residual_demand_kwh: 3.0, residual_slots: 9 },
    ];
    for (i, p) in ports.iter().enumerate().filter(|(_, p)| !p.is_empty()) {
        println!("port {i}: residual {:>5.1} kWh, {:>2} slots, laxity {}", p.residual_demand_kwh, p.residual_slots, laxity(p, 7.0));
    }
    for total in [0.0, 7.0, 12.0, 22.4] {
        let rates = llf_dispatch(total, &ports, 7.0, 5.6)?;
        println!("total {total:>5.1} -> {rates:?}");
    }
    Ok(())
}
