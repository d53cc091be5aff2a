//! Fleet-level comparison agents.
//!
//! A fleet agent picks a price and one station-wide charging rate; the rate
//! is split across ports by least-laxity-first. Fleet-Profit trains on
//! payment minus energy cost, Fleet-JPR on the full reward. Both are learned
//! by the same SAC machinery as the per-port agent.

use serde::{Deserialize, Serialize};

use crate::env::{Action, PortState, RewardBreakdown, ScenarioConfig, Station, StationState, StepOutcome};
use crate::sac::{ActionAdapter, ActionBounds, SacConfig, SacError};
use crate::safelayer::{self, SafeLayerError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetAction {
    pub price: f64,
    /// Station-wide rate, kWh per slot, in `[0, U]`.
    pub total_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetMode {
    Profit,
    Jpr,
}

impl FleetMode {
    pub fn training_reward(self, reward: &RewardBreakdown) -> f64 {
        match self {
            FleetMode::Profit => reward.profit(),
            FleetMode::Jpr => reward.total,
        }
    }
}

/// `residual_slots - ceil(residual_demand / x_max)`.
pub fn laxity(port: &PortState, x_max: f64) -> i64 {
    port.residual_slots as i64 - (port.residual_demand_kwh / x_max - 1e-12).ceil().max(0.0) as i64
}

/// Splits `total_rate` across ports, least laxity first.
///
/// Busy ports first receive their deadline lower bound (at `rate_cap` per
/// slot), with `total_rate` raised to cover the sum of those bounds. The rest
/// goes out in ascending laxity, ties to the lower index, each port topped up
/// to `min(x_max, residual)`.
pub fn llf_dispatch(
    total_rate: f64,
    ports: &[PortState],
    x_max: f64,
    rate_cap: f64,
) -> Result<Vec<f64>, SafeLayerError> {
    let occupied = safelayer::occupied_ports(ports);
    let lower = safelayer::lower_bounds(ports, rate_cap)?;
    let mut rates = vec![0.0; ports.len()];
    for (&i, &l) in occupied.iter().zip(&lower) {
        rates[i] = l;
    }
    let floor: f64 = lower.iter().sum();
    let mut remaining = total_rate.max(floor) - floor;
    let mut order = occupied.clone();
    order.sort_by_key(|&i| (laxity(&ports[i], x_max), i));
    for i in order {
        if remaining <= 0.0 {
            break;
        }
        let head = x_max.min(ports[i].residual_demand_kwh) - rates[i];
        let give = head.max(0.0).min(remaining);
        rates[i] += give;
        remaining -= give;
    }
    Ok(rates)
}

/// Fleet action to station action.
pub fn fleet_action_to_env(
    action: &FleetAction,
    state: &StationState,
    scenario: &ScenarioConfig,
) -> Result<Action, SafeLayerError> {
    let total = action.total_rate.clamp(0.0, scenario.capacity);
    Ok(Action {
        price: action.price.max(0.0),
        rates: llf_dispatch(total, &state.port_states(), scenario.x_max, scenario.guaranteed_rate())?,
    })
}

/// Dispatches and steps; returns the outcome and the mode's training reward.
pub fn fleet_step(mode: FleetMode, station: &mut Station, action: &FleetAction) -> Result<(StepOutcome, f64), SacError> {
    let env_action = fleet_action_to_env(action, station.state(), station.config())?;
    let out = station.step(&env_action)?;
    let reward = mode.training_reward(&out.reward);
    Ok((out, reward))
}

/// Fleet agent plumbing for the shared SAC trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FleetAdapter(pub FleetMode);

impl ActionAdapter for FleetAdapter {
    fn name(&self) -> &'static str {
        match self.0 {
            FleetMode::Profit => "fleet_profit",
            FleetMode::Jpr => "fleet_jpr",
        }
    }

    fn bounds(&self, scenario: &ScenarioConfig, config: &SacConfig) -> ActionBounds {
        ActionBounds {
            low: vec![0.0, 0.0],
            high: vec![config.r_max, scenario.capacity],
        }
    }

    fn to_env_action(&self, raw: &[f64], state: &StationState, scenario: &ScenarioConfig) -> Result<Action, SacError> {
        if raw.len() != 2 {
            return Err(SacError::Config(format!("fleet action has 2 entries, got {}", raw.len())));
        }
        let fleet = FleetAction {
            price: raw[0],
            total_rate: raw[1],
        };
        Ok(fleet_action_to_env(&fleet, state, scenario)?)
    }

    fn training_reward(&self, reward: &RewardBreakdown) -> f64 {
        self.0.training_reward(reward)
    }
}
