//! Discrete-time charging-station simulator.
//!
//! One slot proceeds as: charge occupied ports at the requested rates, age
//! every session by one slot, release finished or expired sessions, then
//! admit the vehicles arriving during the slot at the posted service price.
//! The slot reward is payment minus energy bill minus the price-fluctuation
//! penalty.

use std::collections::VecDeque;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ArrivalSeries, PriceSeries, ScenarioBundle};

/// Absolute tolerance for feasibility checks on energy quantities.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Demand-response quantities are expressed in blocks of this many kWh.
pub const DEMAND_UNIT_KWH: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("service price must be finite and non-negative, got {0}")]
    NegativePrice(f64),
    #[error("{what} series has {got} slots, horizon needs {needed}")]
    SeriesTooShort {
        what: &'static str,
        got: usize,
        needed: usize,
    },
    #[error("action rejected at slot {slot}: {reason}")]
    ActionOutOfBounds { slot: usize, reason: String },
    #[error("episode already finished")]
    EpisodeOver,
}

/// A class of driver with a linear demand response and a fixed parking window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserType {
    pub name: String,
    /// Demand slope, blocks of 5 kWh per CNY/kWh.
    pub beta1: f64,
    /// Demand intercept, blocks of 5 kWh.
    pub beta2: f64,
    pub deadline_slots: usize,
}

impl UserType {
    pub fn new(name: &str, beta1: f64, beta2: f64, deadline_slots: usize) -> Self {
        Self {
            name: name.to_string(),
            beta1,
            beta2,
            deadline_slots,
        }
    }

    /// Emergent, normal and residential drivers.
    pub fn standard_types() -> Vec<UserType> {
        vec![
            UserType::new("emergent", 2.0, 4.0, 3),
            UserType::new("normal", 10.0, 12.0, 6),
            UserType::new("residential", 24.0, 32.0, 12),
        ]
    }

    /// Price at which this type stops requesting energy.
    pub fn zero_demand_price(&self) -> f64 {
        self.beta2 / self.beta1
    }

    fn validate(&self) -> Result<(), EnvError> {
        if !(self.beta1 > 0.0 && self.beta2 > 0.0 && self.deadline_slots >= 1) {
            return Err(EnvError::InvalidConfig(format!(
                "user type {:?} needs beta1 > 0, beta2 > 0, deadline >= 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// Energy (kWh) requested by a driver of `user_type` at service `price`.
///
/// `5 * max(0, beta2 - beta1 * price)`: non-increasing and continuous in price.
pub fn demand_response(user_type: &UserType, price: f64) -> Result<f64, EnvError> {
    if !(price >= 0.0) || !price.is_finite() {
        return Err(EnvError::NegativePrice(price));
    }
    Ok(DEMAND_UNIT_KWH * (user_type.beta2 - user_type.beta1 * price).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_ports: usize,
    pub horizon_slots: usize,
    /// Per-port cap, kWh per slot.
    pub x_max: f64,
    /// Station-wide cap, kWh per slot.
    pub capacity: f64,
    pub history_len: usize,
    pub user_types: Vec<UserType>,
    /// Relative arrival frequency of each user type when the arrival series
    /// carries only totals.
    pub type_weights: Vec<f64>,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub slot_minutes: f64,
    /// Service price assumed for the slot before the episode starts.
    pub initial_price: f64,
}

impl ScenarioConfig {
    /// Station with `n_ports` ports and the reference parameters: 7 kWh per
    /// port, 5.6 kWh per port of shared capacity, 5-minute slots over one day.
    pub fn reference(n_ports: usize) -> Self {
        Self {
            n_ports,
            horizon_slots: 288,
            x_max: 7.0,
            capacity: 5.6 * n_ports as f64,
            history_len: 5,
            user_types: UserType::standard_types(),
            type_weights: vec![1.0; 3],
            lambda_up: 1.0610,
            lambda_down: -0.2979,
            slot_minutes: 5.0,
            initial_price: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.n_ports == 0 {
            return bad("n_ports must be >= 1".into());
        }
        if self.horizon_slots == 0 {
            return bad("horizon_slots must be >= 1".into());
        }
        if self.history_len == 0 {
            return bad("history_len must be >= 1".into());
        }
        if !(self.x_max > 0.0) || !self.x_max.is_finite() {
            return bad(format!("x_max must be positive, got {}", self.x_max));
        }
        if !(self.capacity > 0.0) || self.capacity > self.n_ports as f64 * self.x_max + FEASIBILITY_TOL {
            return bad(format!(
                "capacity must lie in (0, n_ports * x_max], got {}",
                self.capacity
            ));
        }
        if self.user_types.is_empty() {
            return bad("at least one user type is required".into());
        }
        for t in &self.user_types {
            t.validate()?;
        }
        if self.type_weights.len() != self.user_types.len()
            || self.type_weights.iter().any(|w| !(*w >= 0.0))
            || self.type_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("type_weights must be non-negative, one per user type, not all zero".into());
        }
        if !(self.slot_minutes > 0.0) {
            return bad("slot_minutes must be positive".into());
        }
        if !(self.initial_price >= 0.0) {
            return bad("initial_price must be non-negative".into());
        }
        Ok(())
    }

    /// Rate every port can be given simultaneously: `min(x_max, U / N)`.
    ///
    /// Demand caps and deadline lower bounds are computed against this rate,
    /// which keeps the sum of lower bounds within the station capacity.
    pub fn guaranteed_rate(&self) -> f64 {
        self.x_max.min(self.capacity / self.n_ports as f64)
    }

    pub fn max_deadline(&self) -> usize {
        self.user_types.iter().map(|t| t.deadline_slots).max().unwrap_or(1)
    }

    pub fn slots_per_hour(&self) -> usize {
        (60.0 / self.slot_minutes).round().max(1.0) as usize
    }

    /// `2N + h + h * types + 2`.
    pub fn observation_len(&self) -> usize {
        2 * self.n_ports + self.history_len * (1 + self.user_types.len()) + 2
    }
}

/// One vehicle's charging job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub id: u64,
    pub user_type: usize,
    pub arrival_slot: usize,
    pub parking_slots: usize,
    pub demand_kwh: f64,
    pub residual_demand_kwh: f64,
    pub residual_slots: usize,
    pub port: usize,
    /// Whether the requested demand exceeded what the parking window allows.
    pub capped: bool,
}

/// Residual demand and residual parking time of one port; both zero when idle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PortState {
    pub residual_demand_kwh: f64,
    pub residual_slots: usize,
}

impl PortState {
    pub fn is_empty(&self) -> bool {
        self.residual_slots == 0 && self.residual_demand_kwh == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationState {
    pub slot: usize,
    pub ports: Vec<Option<EvSession>>,
    /// Electricity prices `c_{t-h+1} ..= c_t`.
    pub price_history: VecDeque<f64>,
    /// Per-type arrival counts of the last `h` finished slots, oldest first.
    pub arrival_history: VecDeque<Vec<u32>>,
    pub last_price: f64,
}

impl StationState {
    pub fn port_states(&self) -> Vec<PortState> {
        self.ports
            .iter()
            .map(|p| match p {
                Some(ev) => PortState {
                    residual_demand_kwh: ev.residual_demand_kwh,
                    residual_slots: ev.residual_slots,
                },
                None => PortState::default(),
            })
            .collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.ports
            .iter()
            .flatten()
            .filter(|ev| ev.residual_demand_kwh > 0.0)
            .count()
    }

    pub fn current_price(&self) -> f64 {
        *self.price_history.back().expect("history is never empty")
    }
}

/// Service price and per-port charging rates for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub price: f64,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub payment: f64,
    pub energy_cost: f64,
    pub up_penalty: f64,
    pub down_penalty: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(payment: f64, energy_cost: f64, up_penalty: f64, down_penalty: f64) -> Self {
        Self {
            payment,
            energy_cost,
            up_penalty,
            down_penalty,
            total: payment - energy_cost - up_penalty - down_penalty,
        }
    }

    pub fn profit(&self) -> f64 {
        self.payment - self.energy_cost
    }

    pub fn accumulate(&mut self, other: &RewardBreakdown) {
        self.payment += other.payment;
        self.energy_cost += other.energy_cost;
        self.up_penalty += other.up_penalty;
        self.down_penalty += other.down_penalty;
        self.total += other.total;
    }
}

/// `(lambda_up * [r_t - r_{t-1}]^+, lambda_down * [r_{t-1} - r_t]^+)`
pub fn fluctuation_penalty(config: &ScenarioConfig, previous: f64, current: f64) -> (f64, f64) {
    (
        config.lambda_up * (current - previous).max(0.0),
        config.lambda_down * (previous - current).max(0.0),
    )
}

/// Slot reward from its ingredients: demands admitted at `price`, energy
/// delivered at electricity price `electricity_price`.
pub fn reward_breakdown(
    config: &ScenarioConfig,
    admitted_demands: &[f64],
    delivered: &[f64],
    electricity_price: f64,
    previous_price: f64,
    price: f64,
) -> RewardBreakdown {
    let payment = price * admitted_demands.iter().sum::<f64>();
    let energy_cost = electricity_price * delivered.iter().sum::<f64>();
    let (up, down) = fluctuation_penalty(config, previous_price, price);
    RewardBreakdown::new(payment, energy_cost, up, down)
}

/// Everything that happened in one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub electricity_price: f64,
    pub previous_price: f64,
    pub service_price: f64,
    /// Energy actually delivered per port.
    pub delivered: Vec<f64>,
    /// Demand of each vehicle admitted this slot.
    pub admitted_demands: Vec<f64>,
    pub rejected: usize,
    pub reward: RewardBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub arrivals: usize,
    pub admitted: usize,
    /// Turned away because every port was busy.
    pub rejected_full: usize,
    /// Turned away because the parking window would outlast the horizon.
    pub rejected_horizon: usize,
    /// Requested no energy at the posted price.
    pub balked: usize,
    /// Admitted with demand truncated to what the window can deliver.
    pub capped: usize,
    pub completed: usize,
    /// Departed with residual demand above tolerance.
    pub unserved_departures: usize,
    pub unserved_kwh: f64,
    pub delivered_kwh: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub observation: Vec<f64>,
    pub done: bool,
}

/// The charging-station environment.
#[derive(Debug, Clone)]
pub struct Station {
    config: ScenarioConfig,
    prices: Vec<f64>,
    arrivals: ArrivalSeries,
    price_scale: f64,
    rng: ChaCha8Rng,
    state: StationState,
    next_id: u64,
    metrics: EpisodeMetrics,
    trace: Vec<SlotRecord>,
}

impl Station {
    pub fn new(
        config: ScenarioConfig,
        prices: &PriceSeries,
        arrivals: &ArrivalSeries,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        let needed = config.horizon_slots;
        if prices.prices.len() < needed {
            return Err(EnvError::SeriesTooShort {
                what: "price",
                got: prices.prices.len(),
                needed,
            });
        }
        if arrivals.counts.len() < needed {
            return Err(EnvError::SeriesTooShort {
                what: "arrival",
                got: arrivals.counts.len(),
                needed,
            });
        }
        if let Some(per_type) = &arrivals.per_type {
            if per_type.iter().any(|row| row.len() != config.user_types.len()) {
                return Err(EnvError::InvalidConfig(
                    "per-type arrival rows must have one count per user type".into(),
                ));
            }
        }
        let prices = prices.prices[..needed].to_vec();
        if prices.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(EnvError::InvalidConfig("electricity prices must be finite and >= 0".into()));
        }
        let price_scale = prices.iter().copied().fold(0.0, f64::max).max(1e-9);
        let state = Self::initial_state(&config, &prices);
        Ok(Self {
            prices,
            arrivals: arrivals.clone(),
            price_scale,
            rng: ChaCha8Rng::seed_from_u64(0),
            state,
            next_id: 0,
            metrics: EpisodeMetrics::default(),
            trace: Vec::new(),
            config,
        })
    }

    pub fn from_bundle(bundle: &ScenarioBundle) -> Result<Self, EnvError> {
        Self::new(bundle.config.clone(), &bundle.prices, &bundle.arrivals)
    }

    fn initial_state(config: &ScenarioConfig, prices: &[f64]) -> StationState {
        let h = config.history_len;
        StationState {
            slot: 0,
            ports: vec![None; config.n_ports],
            price_history: std::iter::repeat(prices[0]).take(h).collect(),
            arrival_history: std::iter::repeat(vec![0; config.user_types.len()]).take(h).collect(),
            last_price: config.initial_price,
        }
    }

    /// Empties the station and rewinds to slot 0. `seed` drives user-type draws.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = Self::initial_state(&self.config, &self.prices);
        self.next_id = 0;
        self.metrics = EpisodeMetrics::default();
        self.trace.clear();
        self.observation()
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn state(&self) -> &StationState {
        &self.state
    }

    pub fn metrics(&self) -> &EpisodeMetrics {
        &self.metrics
    }

    pub fn trace(&self) -> &[SlotRecord] {
        &self.trace
    }

    pub fn electricity_prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn is_done(&self) -> bool {
        self.state.slot >= self.config.horizon_slots
    }

    /// True while no vehicle has left with unmet demand.
    pub fn is_feasible(&self) -> bool {
        self.metrics.unserved_departures == 0
    }

    pub fn observation(&self) -> Vec<f64> {
        encode_observation(&self.config, &self.state, self.price_scale)
    }

    pub fn price_scale(&self) -> f64 {
        self.price_scale
    }

    fn check_action(&self, action: &Action) -> Result<(), EnvError> {
        let slot = self.state.slot;
        let reject = |reason: String| Err(EnvError::ActionOutOfBounds { slot, reason });
        if !(action.price >= 0.0) || !action.price.is_finite() {
            return reject(format!("price {} is negative or non-finite", action.price));
        }
        if action.rates.len() != self.config.n_ports {
            return reject(format!(
                "{} rates for {} ports",
                action.rates.len(),
                self.config.n_ports
            ));
        }
        for (i, &x) in action.rates.iter().enumerate() {
            if !x.is_finite() || x < -FEASIBILITY_TOL || x > self.config.x_max + FEASIBILITY_TOL {
                return reject(format!("rate {x} on port {i} outside [0, {}]", self.config.x_max));
            }
        }
        let total: f64 = action.rates.iter().sum();
        if total > self.config.capacity + FEASIBILITY_TOL {
            return reject(format!("total rate {total} exceeds capacity {}", self.config.capacity));
        }
        Ok(())
    }

    fn draw_arrivals(&mut self, slot: usize) -> Vec<usize> {
        let n_types = self.config.user_types.len();
        let mut types = Vec::new();
        match &self.arrivals.per_type {
            Some(per_type) => {
                for (k, &c) in per_type[slot].iter().enumerate() {
                    types.extend(std::iter::repeat(k).take(c as usize));
                }
                types.shuffle(&mut self.rng);
            }
            None => {
                let dist = WeightedIndex::new(&self.config.type_weights).expect("validated weights");
                for _ in 0..self.arrivals.counts[slot] {
                    types.push(if n_types == 1 { 0 } else { dist.sample(&mut self.rng) });
                }
            }
        }
        types
    }

    /// Advances one slot under `action`.
    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeOver);
        }
        self.check_action(action)?;
        let t = self.state.slot;
        let c_t = self.prices[t];
        let horizon = self.config.horizon_slots;

        // charge, age, release
        let mut delivered = vec![0.0; self.config.n_ports];
        for (port, slot) in self.state.ports.iter_mut().enumerate() {
            let Some(ev) = slot.as_mut() else { continue };
            let x = action.rates[port].max(0.0).min(ev.residual_demand_kwh);
            ev.residual_demand_kwh -= x;
            if ev.residual_demand_kwh <= FEASIBILITY_TOL {
                ev.residual_demand_kwh = 0.0;
            }
            delivered[port] = x;
            ev.residual_slots -= 1;
            if ev.residual_demand_kwh == 0.0 {
                self.metrics.completed += 1;
                *slot = None;
            } else if ev.residual_slots == 0 {
                self.metrics.unserved_departures += 1;
                self.metrics.unserved_kwh += ev.residual_demand_kwh;
                *slot = None;
            }
        }
        self.metrics.delivered_kwh += delivered.iter().sum::<f64>();

        // admit this slot's arrivals at the posted price
        let arriving = self.draw_arrivals(t);
        let mut counts = vec![0u32; self.config.user_types.len()];
        let mut admitted_demands = Vec::new();
        let mut rejected = 0;
        let rate = self.config.guaranteed_rate();
        for k in arriving {
            counts[k] += 1;
            self.metrics.arrivals += 1;
            let user = &self.config.user_types[k];
            let demand = demand_response(user, action.price)?;
            if demand <= 0.0 {
                self.metrics.balked += 1;
                continue;
            }
            if t + user.deadline_slots >= horizon {
                self.metrics.rejected_horizon += 1;
                rejected += 1;
                continue;
            }
            let Some(port) = self.state.ports.iter().position(Option::is_none) else {
                self.metrics.rejected_full += 1;
                rejected += 1;
                continue;
            };
            let window = user.deadline_slots as f64 * rate;
            let capped = demand > window;
            let demand = demand.min(window);
            if capped {
                self.metrics.capped += 1;
            }
            self.metrics.admitted += 1;
            admitted_demands.push(demand);
            self.state.ports[port] = Some(EvSession {
                id: self.next_id,
                user_type: k,
                arrival_slot: t,
                parking_slots: user.deadline_slots,
                demand_kwh: demand,
                residual_demand_kwh: demand,
                residual_slots: user.deadline_slots,
                port,
                capped,
            });
            self.next_id += 1;
        }

        let previous = self.state.last_price;
        let reward = reward_breakdown(
            &self.config,
            &admitted_demands,
            &delivered,
            c_t,
            previous,
            action.price,
        );
        self.trace.push(SlotRecord {
            slot: t,
            electricity_price: c_t,
            previous_price: previous,
            service_price: action.price,
            delivered,
            admitted_demands,
            rejected,
            reward,
        });

        self.state.slot = t + 1;
        self.state.last_price = action.price;
        self.state.arrival_history.pop_front();
        self.state.arrival_history.push_back(counts);
        let done = self.is_done();
        if !done {
            self.state.price_history.pop_front();
            self.state.price_history.push_back(self.prices[t + 1]);
        }
        Ok(StepOutcome {
            reward,
            observation: self.observation(),
            done,
        })
    }

    /// Writes the episode trace as CSV: `t,c_t,r_t,x_0..x_{N-1},payment,...`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_trace_csv(&self.trace, self.config.n_ports, out)
    }
}

/// Flat observation: residual demand and slots per port, electricity price
/// history, per-type arrival history, previous service price, busy ports.
pub fn encode_observation(config: &ScenarioConfig, state: &StationState, price_scale: f64) -> Vec<f64> {
    let demand_scale = config.x_max * config.max_deadline() as f64;
    let slot_scale = config.max_deadline() as f64;
    let count_scale = config.n_ports as f64;
    let mut obs = Vec::with_capacity(config.observation_len());
    for p in state.port_states() {
        obs.push(p.residual_demand_kwh / demand_scale);
        obs.push(p.residual_slots as f64 / slot_scale);
    }
    obs.extend(state.price_history.iter().map(|c| c / price_scale));
    for counts in &state.arrival_history {
        obs.extend(counts.iter().map(|&c| c as f64 / count_scale));
    }
    obs.push(state.last_price / price_scale);
    obs.push(state.occupied_count() as f64 / count_scale);
    obs
}

pub fn write_trace_csv<W: Write>(trace: &[SlotRecord], n_ports: usize, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "c_t".into(), "r_t".into()];
    header.extend((0..n_ports).map(|i| format!("x_{i}")));
    header.extend(
        ["payment", "energy_cost", "up_penalty", "down_penalty", "total"].map(String::from),
    );
    w.write_record(&header)?;
    for rec in trace {
        let mut row = vec![
            rec.slot.to_string(),
            rec.electricity_price.to_string(),
            rec.service_price.to_string(),
        ];
        row.extend(rec.delivered.iter().map(f64::to_string));
        let r = rec.reward;
        row.extend([r.payment, r.energy_cost, r.up_penalty, r.down_penalty, r.total].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
