//! Projects an over-budget rate proposal onto the feasible set and checks
//! the greedy answer against the simplex oracle.

use evstation::env::PortState;
use evstation::safelayer::{self, ProjectionInstance};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // three busy ports: (residual kWh, residual slots)
    let ports = [
        PortState { residual_demand_kwh: 20.0, residual_slots: 4 },
        PortState { residual_demand_kwh: 6.0, residual_slots: 2 },
        PortState { residual_demand_kwh: 30.0, residual_slots: 12 },
    ];
    let rate_cap = 5.6;
    let lower = safelayer::lower_bounds(&ports, rate_cap)?;
    let instance = ProjectionInstance {
        proposal: vec![7.5, 6.0, 6.5],
        lower: lower.clone(),
        upper: 7.0,
        budget: 5.6 * 3.0,
    };
    let greedy = safelayer::project(&instance)?;
    let oracle = safelayer::lp_oracle(&instance)?;
    println!("lower bounds  {lower:?}");
    println!("proposal      {:?}", instance.proposal);
    println!("greedy        {:?}  cost {:.6}", greedy.rates, greedy.l1_cost);
    println!("lp oracle     {:?}  cost {:.6}", oracle.rates, oracle.l1_cost);
    println!("total rate    {:.6} (budget {:.1})", greedy.rates.iter().sum::<f64>(), instance.budget);
    assert!((greedy.l1_cost - oracle.l1_cost).abs() < 1e-9);
    Ok(())
}
