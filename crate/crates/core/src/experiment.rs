//! Experiment harness: train, evaluate and compare agents across seeds.
//!
//! Run directory layout for `cmd_train`:
//!
//! ```text
//! <out>/config.json                  effective configuration
//! <out>/seed_<s>/config.json         single-seed echo (replays the sub-run)
//! <out>/seed_<s>/train_log.csv
//! <out>/seed_<s>/checkpoint.json     final agent
//! <out>/seed_<s>/checkpoints/episode_<k>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{FleetAdapter, FleetMode};
use crate::data::{self, DataError, ScenarioBundle, ScenarioSource, SynthConfig};
use crate::env::{Action, EpisodeMetrics, RewardBreakdown, ScenarioConfig, Station, StationState};
use crate::sac::{
    self, ActionAdapter, ActionBounds, ActorHead, AgentCheckpoint, PortwiseAdapter, SacConfig, SacError,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn config_err(field: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|source| ExperimentError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Proposed,
    FleetProfit,
    FleetJpr,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Proposed, AgentKind::FleetJpr, AgentKind::FleetProfit];

    pub fn label(self) -> &'static str {
        match self {
            AgentKind::Proposed => "proposed",
            AgentKind::FleetProfit => "fleet_profit",
            AgentKind::FleetJpr => "fleet_jpr",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| format!("unknown agent `{s}` (expected proposed, fleet_profit or fleet_jpr)"))
    }
}

impl ActionAdapter for AgentKind {
    fn name(&self) -> &'static str {
        self.label()
    }

    fn bounds(&self, scenario: &ScenarioConfig, config: &SacConfig) -> ActionBounds {
        match self {
            AgentKind::Proposed => PortwiseAdapter.bounds(scenario, config),
            AgentKind::FleetProfit => FleetAdapter(FleetMode::Profit).bounds(scenario, config),
            AgentKind::FleetJpr => FleetAdapter(FleetMode::Jpr).bounds(scenario, config),
        }
    }

    fn to_env_action(&self, raw: &[f64], state: &StationState, scenario: &ScenarioConfig) -> Result<Action, SacError> {
        match self {
            AgentKind::Proposed => PortwiseAdapter.to_env_action(raw, state, scenario),
            AgentKind::FleetProfit => FleetAdapter(FleetMode::Profit).to_env_action(raw, state, scenario),
            AgentKind::FleetJpr => FleetAdapter(FleetMode::Jpr).to_env_action(raw, state, scenario),
        }
    }

    fn training_reward(&self, reward: &RewardBreakdown) -> f64 {
        match self {
            AgentKind::Proposed => PortwiseAdapter.training_reward(reward),
            AgentKind::FleetProfit => FleetMode::Profit.training_reward(reward),
            AgentKind::FleetJpr => FleetMode::Jpr.training_reward(reward),
        }
    }
}

/// Which station and which data an experiment runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub n_ports: usize,
    /// Aggregate capacity per port, kWh per slot (`U = capacity_per_port * N`).
    pub capacity_per_port: f64,
    pub horizon_slots: usize,
    /// Multiplier on electricity prices.
    pub price_factor: f64,
    pub synth: SynthConfig,
    /// Replays this bundle every episode instead of synthesizing days.
    pub bundle: Option<PathBuf>,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_ports: 5,
            capacity_per_port: 5.6,
            horizon_slots: 288,
            price_factor: 1.0,
            synth: SynthConfig::default(),
            bundle: None,
        }
    }
}

impl ScenarioSpec {
    pub fn config(&self) -> ScenarioConfig {
        let mut c = ScenarioConfig::reference(self.n_ports);
        c.capacity = self.capacity_per_port * self.n_ports as f64;
        c.horizon_slots = self.horizon_slots;
        c
    }

    pub fn source(&self) -> Result<ScenarioSource, ExperimentError> {
        if !(self.price_factor > 0.0) {
            return Err(config_err("scenario.price_factor", "must be positive"));
        }
        match &self.bundle {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let mut bundle = ScenarioBundle::from_json(&text)?;
                if bundle.config.n_ports != self.n_ports {
                    return Err(ExperimentError::Mismatch(format!(
                        "bundle {} has {} ports, scenario asks for {}",
                        path.display(),
                        bundle.config.n_ports,
                        self.n_ports
                    )));
                }
                bundle.prices = data::scale_prices(&bundle.prices, self.price_factor)?;
                Ok(ScenarioSource::Fixed(bundle))
            }
            None => {
                let config = self.config();
                config
                    .validate()
                    .map_err(|e| config_err("scenario", e.to_string()))?;
                let mut synth = self.synth.clone();
                synth.price_factor *= self.price_factor;
                Ok(ScenarioSource::Synthetic { config, synth })
            }
        }
    }

    /// Identity of the scenario family with the swept parameters blanked.
    pub fn family_key(&self) -> String {
        let mut s = self.clone();
        s.n_ports = 0;
        s.price_factor = 0.0;
        serde_json::to_string(&s).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub agent: AgentKind,
    pub sac: SacConfig,
    pub episodes: usize,
    pub eval_episodes: usize,
    /// Seeds the held-out evaluation days; shared by every agent and seed.
    pub eval_seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            agent: AgentKind::Proposed,
            sac: SacConfig::default(),
            episodes: 100,
            eval_episodes: 20,
            eval_seed: 9_999,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let config: Self = read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.scenario.n_ports == 0 {
            return Err(config_err("scenario.n_ports", "must be >= 1"));
        }
        if !(self.scenario.capacity_per_port > 0.0) {
            return Err(config_err("scenario.capacity_per_port", "must be positive"));
        }
        if !(self.scenario.price_factor > 0.0) {
            return Err(config_err("scenario.price_factor", "must be positive"));
        }
        self.sac
            .validate()
            .map_err(|e| config_err("sac", e.to_string()))?;
        self.scenario
            .config()
            .validate()
            .map_err(|e| config_err("scenario", e.to_string()))?;
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed_{seed}"))
    }
}

/// Chooses actions for the shared evaluator.
pub trait Policy {
    fn act(&mut self, observation: &[f64], state: &StationState, scenario: &ScenarioConfig)
        -> Result<Action, SacError>;
}

/// Deterministic (mean) action of a trained actor.
pub struct ActorPolicy<'a> {
    pub kind: AgentKind,
    pub actor: &'a ActorHead,
}

impl Policy for ActorPolicy<'_> {
    fn act(&mut self, observation: &[f64], state: &StationState, scenario: &ScenarioConfig) -> Result<Action, SacError> {
        let smp = self.actor.sample::<rand_chacha::ChaCha8Rng>(observation, None)?;
        self.kind.to_env_action(&smp.action, state, scenario)
    }
}

impl<F> Policy for F
where
    F: FnMut(&[f64], &StationState, &ScenarioConfig) -> Result<Action, SacError>,
{
    fn act(&mut self, observation: &[f64], state: &StationState, scenario: &ScenarioConfig) -> Result<Action, SacError> {
        self(observation, state, scenario)
    }
}

/// Episode totals as scored by the shared evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode: usize,
    pub jpr: f64,
    pub payment: f64,
    pub energy_cost: f64,
    pub up_penalty: f64,
    pub down_penalty: f64,
    pub metrics: EpisodeMetrics,
}

/// Plays one episode from `reset(env_seed)` and scores it by full JPR.
pub fn evaluate_episode<P: Policy + ?Sized>(
    policy: &mut P,
    station: &mut Station,
    env_seed: u64,
) -> Result<RewardBreakdown, SacError> {
    let scenario = station.config().clone();
    let mut obs = station.reset(env_seed);
    let mut totals = RewardBreakdown::default();
    loop {
        let action = policy.act(&obs, station.state(), &scenario)?;
        let out = station.step(&action)?;
        totals.accumulate(&out.reward);
        obs = out.observation;
        if out.done {
            return Ok(totals);
        }
    }
}

/// Scores `policy` on `episodes` held-out days drawn from `source`.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &mut P,
    source: &ScenarioSource,
    eval_seed: u64,
    episodes: usize,
) -> Result<Vec<EpisodeEval>, SacError> {
    (0..episodes)
        .map(|k| {
            let (mut station, env_seed) = source.station(eval_seed, k)?;
            let t = evaluate_episode(policy, &mut station, env_seed)?;
            Ok(EpisodeEval {
                episode: k,
                jpr: t.total,
                payment: t.payment,
                energy_cost: t.energy_cost,
                up_penalty: t.up_penalty,
                down_penalty: t.down_penalty,
                metrics: *station.metrics(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentMeans {
    pub jpr: f64,
    pub payment: f64,
    pub energy_cost: f64,
    pub up_penalty: f64,
    pub down_penalty: f64,
}

impl ComponentMeans {
    fn mean_of<I: IntoIterator<Item = ComponentMeans>>(items: I) -> Self {
        let mut acc = ComponentMeans::default();
        let mut n = 0usize;
        for c in items {
            acc.jpr += c.jpr;
            acc.payment += c.payment;
            acc.energy_cost += c.energy_cost;
            acc.up_penalty += c.up_penalty;
            acc.down_penalty += c.down_penalty;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            acc.jpr /= k;
            acc.payment /= k;
            acc.energy_cost /= k;
            acc.up_penalty /= k;
            acc.down_penalty /= k;
        }
        acc
    }
}

impl From<&EpisodeEval> for ComponentMeans {
    fn from(e: &EpisodeEval) -> Self {
        Self {
            jpr: e.jpr,
            payment: e.payment,
            energy_cost: e.energy_cost,
            up_penalty: e.up_penalty,
            down_penalty: e.down_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub mean: ComponentMeans,
    pub episodes: Vec<EpisodeEval>,
}

impl SeedReport {
    pub fn new(seed: u64, episodes: Vec<EpisodeEval>) -> Self {
        Self {
            seed,
            mean: ComponentMeans::mean_of(episodes.iter().map(ComponentMeans::from)),
            episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub agent: AgentKind,
    pub n_ports: usize,
    pub price_factor: f64,
    pub scenario_family: String,
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<SeedReport>,
    /// Mean over seeds of the per-seed means.
    pub mean: ComponentMeans,
    /// Standard error of the per-seed mean JPR.
    pub jpr_std_error: f64,
    /// Gain in percent against named reports, filled by [`cmd_compare`].
    #[serde(default)]
    pub gains_pct: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(config: &ExperimentConfig, seeds: Vec<SeedReport>) -> Self {
        let mean = ComponentMeans::mean_of(seeds.iter().map(|s| s.mean));
        let jpr: Vec<f64> = seeds.iter().map(|s| s.mean.jpr).collect();
        Self {
            agent: config.agent,
            n_ports: config.scenario.n_ports,
            price_factor: config.scenario.price_factor,
            scenario_family: config.scenario.family_key(),
            eval_seed: config.eval_seed,
            eval_episodes: config.eval_episodes,
            seeds,
            mean,
            jpr_std_error: std_error(&jpr),
            gains_pct: BTreeMap::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "agent",
            "n_ports",
            "price_factor",
            "seed",
            "jpr",
            "payment",
            "energy_cost",
            "up_penalty",
            "down_penalty",
        ])?;
        let row = |seed: String, m: &ComponentMeans| {
            vec![
                self.agent.label().to_string(),
                self.n_ports.to_string(),
                self.price_factor.to_string(),
                seed,
                m.jpr.to_string(),
                m.payment.to_string(),
                m.energy_cost.to_string(),
                m.up_penalty.to_string(),
                m.down_penalty.to_string(),
            ]
        };
        for s in &self.seeds {
            w.write_record(row(s.seed.to_string(), &s.mean))?;
        }
        w.write_record(row("mean".into(), &self.mean))?;
        w.flush().map_err(|e| ExperimentError::Csv(e.into()))?;
        Ok(())
    }
}

/// Sample standard error of the mean; zero for fewer than two values.
pub fn std_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `(a - b) / |b| * 100`; `None` when `b` is zero.
pub fn relative_gain(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| (a - b) / b.abs() * 100.0)
}

/// Trains one seed in memory.
pub fn train_seed<F>(config: &ExperimentConfig, seed: u64, on_checkpoint: F) -> Result<TrainOutcome, ExperimentError>
where
    F: FnMut(usize, &sac::SacAgent) -> Result<(), SacError>,
{
    let source = config.scenario.source()?;
    Ok(sac::train(&config.agent, &source, &config.sac, config.episodes, seed, on_checkpoint)?)
}

/// Scores one actor on the configured evaluation days.
pub fn evaluate_actor(config: &ExperimentConfig, actor: &ActorHead) -> Result<Vec<EpisodeEval>, ExperimentError> {
    let source = config.scenario.source()?;
    let mut policy = ActorPolicy {
        kind: config.agent,
        actor,
    };
    Ok(evaluate(&mut policy, &source, config.eval_seed, config.eval_episodes)?)
}

/// Trains and evaluates every seed without touching the filesystem.
pub fn run_in_memory(config: &ExperimentConfig) -> Result<MetricsReport, ExperimentError> {
    config.validate()?;
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let outcome = train_seed(config, seed, |_, _| Ok(()))?;
        seeds.push(SeedReport::new(seed, evaluate_actor(config, &outcome.agent.actor)?));
    }
    Ok(MetricsReport::new(config, seeds))
}

/// Trains every seed into `config.out_dir`; returns the run directory.
pub fn cmd_train(config: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("config.json"), config)?;
    let scenario = config.scenario.config();
    for &seed in &config.seeds {
        let dir = config.seed_dir(seed);
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
        let echo = ExperimentConfig {
            seeds: vec![seed],
            out_dir: dir.clone(),
            ..config.clone()
        };
        write_json(&dir.join("config.json"), &echo)?;
        let label = config.agent.label();
        let outcome = train_seed(config, seed, |episode, agent| {
            let path = ckpt_dir.join(format!("episode_{episode}.json"));
            write_json(&path, &agent.checkpoint(label, &scenario)).map_err(|e| SacError::Config(e.to_string()))
        })?;
        let log_path = dir.join("train_log.csv");
        let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        sac::write_train_log(&outcome.log, file)?;
        write_json(&dir.join("checkpoint.json"), &outcome.agent.checkpoint(label, &scenario))?;
    }
    Ok(out.clone())
}

fn check_compatible(
    config: &ExperimentConfig,
    ckpt: &AgentCheckpoint,
    path: &Path,
) -> Result<(), ExperimentError> {
    let scenario = config.scenario.config();
    let mismatch = |what: &str, got: String, want: String| {
        Err(ExperimentError::Mismatch(format!(
            "{}: checkpoint {what} is {got}, scenario needs {want}",
            path.display()
        )))
    };
    if ckpt.kind != config.agent.label() {
        return mismatch("agent", ckpt.kind.clone(), config.agent.label().into());
    }
    if ckpt.n_ports != scenario.n_ports {
        return mismatch("port count", ckpt.n_ports.to_string(), scenario.n_ports.to_string());
    }
    if ckpt.history_len != scenario.history_len {
        return mismatch("history length", ckpt.history_len.to_string(), scenario.history_len.to_string());
    }
    if ckpt.actor.net.input_dim() != scenario.observation_len() {
        return mismatch(
            "observation width",
            ckpt.actor.net.input_dim().to_string(),
            scenario.observation_len().to_string(),
        );
    }
    Ok(())
}

/// Evaluates checkpoints and writes `report.json` and `report.csv` into
/// `config.out_dir`. Without explicit checkpoints, each seed's final
/// checkpoint from a prior `cmd_train` is used.
pub fn cmd_eval(config: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<MetricsReport, ExperimentError> {
    config.validate()?;
    let pairs: Vec<(u64, PathBuf)> = if checkpoints.is_empty() {
        config
            .seeds
            .iter()
            .map(|&s| (s, config.seed_dir(s).join("checkpoint.json")))
            .collect()
    } else {
        checkpoints
            .iter()
            .enumerate()
            .map(|(i, p)| (config.seeds.get(i).copied().unwrap_or(i as u64), p.clone()))
            .collect()
    };
    let mut seeds = Vec::with_capacity(pairs.len());
    for (seed, path) in pairs {
        let ckpt: AgentCheckpoint = read_json(&path)?;
        check_compatible(config, &ckpt, &path)?;
        seeds.push(SeedReport::new(seed, evaluate_actor(config, &ckpt.actor)?));
    }
    let report = MetricsReport::new(config, seeds);
    write_report(&config.out_dir, &report)?;
    Ok(report)
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<(), ExperimentError> {
    write_json(&dir.join("report.json"), report)?;
    let path = dir.join("report.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    report.write_csv(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub agent: String,
    pub mean_jpr: f64,
    pub jpr_std_error: f64,
}

/// One scenario setting of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n_ports: usize,
    pub price_factor: f64,
    pub entries: Vec<ComparisonEntry>,
    /// `"<a>_vs_<b>"` to gain percent of `a` over `b`.
    pub gains_pct: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n_ports", "price_factor", "agent", "mean_jpr", "jpr_std_error", "gains_pct"])?;
        for row in &self.rows {
            for e in &row.entries {
                let gains: Vec<String> = row
                    .gains_pct
                    .iter()
                    .filter(|(k, _)| k.starts_with(&format!("{}_vs_", e.agent)))
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect();
                w.write_record([
                    row.n_ports.to_string(),
                    row.price_factor.to_string(),
                    e.agent.clone(),
                    e.mean_jpr.to_string(),
                    e.jpr_std_error.to_string(),
                    gains.join(";"),
                ])?;
            }
        }
        w.flush().map_err(|e| ExperimentError::Csv(e.into()))?;
        Ok(())
    }
}

/// Groups reports by (ports, price factor) and computes pairwise gains.
/// Reports must share one scenario family and evaluation protocol.
pub fn compare(reports: &[MetricsReport]) -> Result<ComparisonTable, ExperimentError> {
    if reports.len() < 2 {
        return Err(ExperimentError::Mismatch("compare needs at least two reports".into()));
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.scenario_family != first.scenario_family
            || r.eval_seed != first.eval_seed
            || r.eval_episodes != first.eval_episodes
        {
            return Err(ExperimentError::Mismatch(format!(
                "{} ({} ports, factor {}) was evaluated on a different scenario family or protocol than {}",
                r.agent.label(),
                r.n_ports,
                r.price_factor,
                first.agent.label()
            )));
        }
    }
    let mut groups: BTreeMap<(usize, u64), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.n_ports, r.price_factor.to_bits())).or_default().push(r);
    }
    let rows = groups
        .into_values()
        .map(|group| {
            let mut entries: Vec<ComparisonEntry> = Vec::new();
            for r in &group {
                let mut name = r.agent.label().to_string();
                let dup = entries.iter().filter(|e| e.agent.split('#').next() == Some(&name)).count();
                if dup > 0 {
                    name = format!("{name}#{}", dup + 1);
                }
                entries.push(ComparisonEntry {
                    agent: name,
                    mean_jpr: r.mean.jpr,
                    jpr_std_error: r.jpr_std_error,
                });
            }
            let mut gains_pct = BTreeMap::new();
            for a in &entries {
                for b in &entries {
                    if a.agent != b.agent {
                        if let Some(g) = relative_gain(a.mean_jpr, b.mean_jpr) {
                            gains_pct.insert(format!("{}_vs_{}", a.agent, b.agent), g);
                        }
                    }
                }
            }
            ComparisonRow {
                n_ports: group[0].n_ports,
                price_factor: group[0].price_factor,
                entries,
                gains_pct,
            }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

/// Loads reports, writes `compare.json` and `compare.csv` into `out`.
pub fn cmd_compare(report_paths: &[PathBuf], out: &Path) -> Result<ComparisonTable, ExperimentError> {
    let reports = report_paths
        .iter()
        .map(|p| read_json::<MetricsReport>(p))
        .collect::<Result<Vec<_>, _>>()?;
    let table = compare(&reports)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("compare.json"), &table)?;
    let path = out.join("compare.csv");
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    table.write_csv(file)?;
    Ok(table)
}
