//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Criteria outcomes are
//! reported, not asserted; set `ACCEPTANCE_STRICT=1` to turn any FAIL into a
//! non-zero exit. `ACCEPTANCE_ONLY=1,5` restricts the run to listed criteria.

use std::collections::HashMap;
use std::time::Instant;

use evstation::data::{ArrivalSeries, PriceSeries, ScenarioBundle, ScenarioSource, SynthConfig};
use evstation::env::{demand_response, ScenarioConfig, Station, UserType, FEASIBILITY_TOL};
use evstation::experiment::{self, AgentKind, ExperimentConfig, MetricsReport, ScenarioSpec};
use evstation::nn::{finite_difference_error, InitScheme};
use evstation::sac::{
    self, actor_loss_and_grad, critic_loss_and_grad, critic_targets, normal_noise, safe_act, ActionBounds,
    Batch, PortwiseAdapter, SacAgent, SacConfig, TemperatureMode,
};
use evstation::safelayer::{self, ProjectionInstance};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "safe-layer optimality", criterion_1),
        (2, "episode feasibility", criterion_2),
        (3, "gradient fidelity", criterion_3),
        (4, "SAC sanity oracle", criterion_4),
        (5, "reward identity", criterion_5),
        (6, "directional port sweep", criterion_6),
        (7, "price-factor sweep", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let n = rng.gen_range(1..=7);
        let budget = 5.6 * n as f64;
        let lower: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..5.6) }).collect();
        let proposal: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..10.0)).collect();
        let inst = ProjectionInstance {
            proposal: proposal.clone(),
            lower: lower.clone(),
            upper: 7.0,
            budget,
        };
        let greedy = safelayer::project(&inst).map_err(|e| format!("instance {k}: {e}"))?;
        let oracle = safelayer::lp_oracle(&inst).map_err(|e| format!("instance {k}: {e}"))?;
        // recompute the cost rather than trusting the reported one
        let cost: f64 = greedy.rates.iter().zip(&proposal).map(|(x, p)| (x - p).abs()).sum();
        let gap = (cost - oracle.l1_cost).abs();
        worst = worst.max(gap);
        if gap > 1e-6 {
            return Err(format!("instance {k}: greedy cost {cost} vs oracle {}", oracle.l1_cost));
        }
        for (i, (&x, &l)) in greedy.rates.iter().zip(&lower).enumerate() {
            if !(x >= l && x <= 7.0) {
                return Err(format!("instance {k}: rate {x} on port {i} outside [{l}, 7]"));
            }
        }
        let total: f64 = greedy.rates.iter().sum();
        if total > budget + 1e-12 {
            return Err(format!("instance {k}: total {total} exceeds budget {budget}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Err(format!("took {secs:.2}s (limit 10s)"));
    }
    Ok(format!("1000 instances, max cost gap {worst:.2e}, {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let config = ScenarioConfig::reference(5);
    let source = ScenarioSource::Synthetic {
        config: config.clone(),
        synth: SynthConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut slots, mut admitted, mut completed) = (0usize, 0usize, 0usize);
    for ep in 0..100 {
        let (mut station, env_seed) = source.station(202, ep).map_err(|e| e.to_string())?;
        station.reset(env_seed);
        while !station.is_done() {
            let mut raw = vec![rng.gen_range(0.0..2.0)];
            raw.extend((0..5).map(|_| rng.gen_range(0.0..7.0)));
            let action = safe_act(&raw, station.state(), &config).map_err(|e| format!("episode {ep}: {e}"))?;
            let total: f64 = action.rates.iter().sum();
            if total > config.capacity + 1e-9 {
                return Err(format!("episode {ep}: total rate {total} > U"));
            }
            if action.rates.iter().any(|&x| !(0.0..=config.x_max).contains(&x)) {
                return Err(format!("episode {ep}: rate outside [0, x_max]: {:?}", action.rates));
            }
            station.step(&action).map_err(|e| format!("episode {ep}: {e}"))?;
            slots += 1;
            for ev in station.state().ports.iter().flatten() {
                let reachable = ev.residual_slots as f64 * config.x_max;
                if ev.residual_demand_kwh > reachable + 1e-9 {
                    return Err(format!(
                        "episode {ep}: EV {} holds {} kWh with {} slots left",
                        ev.id, ev.residual_demand_kwh, ev.residual_slots
                    ));
                }
            }
        }
        let m = station.metrics();
        if m.unserved_departures > 0 || m.unserved_kwh > 1e-9 {
            return Err(format!(
                "episode {ep}: {} EVs left with {} kWh unserved",
                m.unserved_departures, m.unserved_kwh
            ));
        }
        admitted += m.admitted;
        completed += m.completed;
    }
    Ok(format!("{slots} slots, {admitted} admitted, {completed} completed, 0 violations"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let obs_dim = rng.gen_range(2..=6);
        let act_dim = rng.gen_range(1..=4);
        let depth = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(4..=16)).collect();
        let b = rng.gen_range(3..=8);
        let config = SacConfig {
            hidden,
            alpha: rng.gen_range(0.05..1.0),
            batch_size: b,
            buffer_capacity: 64,
            ..SacConfig::default()
        };
        let bounds = ActionBounds {
            low: vec![0.0; act_dim],
            high: (0..act_dim).map(|_| rng.gen_range(1.0..7.0)).collect(),
        };
        let mut agent = SacAgent::new(obs_dim, bounds, config.clone(), &mut rng);
        // zero-initialized biases put rectifiers exactly on their kink when a
        // whole layer is dead for a row; check at a generic point instead
        for p in agent.actor.net.params_mut().chain(agent.critic.params_mut()) {
            *p += 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let batch = Batch {
            observations: Array2::from_shape_simple_fn((b, obs_dim), || rng.gen_range(-1.0..1.0)),
            actions: Array2::from_shape_simple_fn((b, act_dim), || rng.gen_range(-0.95..0.95)),
            rewards: Array1::from_shape_simple_fn(b, || rng.gen_range(-5.0..5.0)),
            next_observations: Array2::from_shape_simple_fn((b, obs_dim), || rng.gen_range(-1.0..1.0)),
            done: Array1::from_shape_simple_fn(b, || if rng.gen_bool(0.2) { 1.0 } else { 0.0 }),
        };
        let noise = normal_noise(&mut rng, b, act_dim);
        let targets = critic_targets(&agent.target_critic, &agent.actor, &batch, config.alpha, &config, noise.view())
            .map_err(|e| e.to_string())?;
        let (_, cg) = critic_loss_and_grad(&agent.critic, &batch, &targets).map_err(|e| e.to_string())?;
        let critic_err = finite_difference_error(&agent.critic, &cg, |c| {
            critic_loss_and_grad(c, &batch, &targets).expect("finite").0
        });
        let actor_noise = normal_noise(&mut rng, b, act_dim);
        let obs = batch.observations.view();
        let (_, ag, _) = actor_loss_and_grad(&agent.actor, &agent.critic, obs, config.alpha, actor_noise.view())
            .map_err(|e| e.to_string())?;
        let actor_err = finite_difference_error(&agent.actor.net, &ag, |net| {
            let mut head = agent.actor.clone();
            head.net = net.clone();
            actor_loss_and_grad(&head, &agent.critic, obs, config.alpha, actor_noise.view())
                .expect("finite")
                .0
        });
        worst = worst.max(critic_err).max(actor_err);
        if critic_err >= 1e-4 || actor_err >= 1e-4 {
            return Err(format!("configuration {k}: critic {critic_err:.2e}, actor {actor_err:.2e}"));
        }
    }
    Ok(format!("20 configurations, max relative error {worst:.2e}"))
}

/// One port, one emergent-type arrival at slot 0, flat electricity price.
fn degenerate_bundle() -> ScenarioBundle {
    let mut config = ScenarioConfig::reference(1);
    config.horizon_slots = 4;
    config.user_types = vec![UserType::new("emergent", 2.0, 4.0, 3)];
    config.type_weights = vec![1.0];
    ScenarioBundle {
        prices: PriceSeries {
            prices: vec![0.5; 4],
            source: "flat".into(),
        },
        arrivals: ArrivalSeries {
            counts: vec![1, 0, 0, 0],
            per_type: None,
        },
        seed: 0,
        config,
    }
}

/// Exhaustive optimum over price and rate sequences on a 0.05 grid.
///
/// Dynamic programming over (slot, last price, residual demand, occupancy)
/// visits every grid sequence implicitly. The dynamics are re-derived here:
/// charge first, then admit at the posted price; demand is capped at
/// `slots * min(x_max, U/N)`; the episode is invalid if demand is left over.
fn degenerate_grid_optimum(bundle: &ScenarioBundle) -> f64 {
    let c = &bundle.config;
    let ut = &c.user_types[0];
    let rate_cap = c.x_max.min(c.capacity / c.n_ports as f64);
    let step = 0.05;
    let prices: Vec<f64> = (0..=40).map(|k| k as f64 * step).collect();
    let q = |kwh: f64| (kwh / step).round() as i64;
    let horizon = c.horizon_slots;
    let mut memo: HashMap<(usize, usize, i64, usize), f64> = HashMap::new();

    // state: slot t, index of r_{t-1} (usize::MAX for the initial price),
    // residual demand in grid units, residual slots (0 = empty port)
    fn value(
        t: usize,
        last: usize,
        residual: i64,
        slots: usize,
        ctx: &Ctx,
        memo: &mut HashMap<(usize, usize, i64, usize), f64>,
    ) -> f64 {
        if t == ctx.horizon {
            return if residual == 0 { 0.0 } else { f64::NEG_INFINITY };
        }
        if let Some(&v) = memo.get(&(t, last, residual, slots)) {
            return v;
        }
        let prev = if last == usize::MAX { ctx.initial } else { ctx.prices[last] };
        let mut best = f64::NEG_INFINITY;
        let max_rate = if slots > 0 { residual.min(ctx.q_xmax) } else { 0 };
        for (pi, &r) in ctx.prices.iter().enumerate() {
            let penalty = ctx.lambda_up * (r - prev).max(0.0) + ctx.lambda_down * (prev - r).max(0.0);
            for x in 0..=max_rate {
                let mut res = residual - x;
                let mut left = slots;
                if slots > 0 {
                    left -= 1;
                    if left == 0 && res > 0 {
                        continue;
                    }
                    if res == 0 {
                        left = 0;
                    }
                }
                let mut payment = 0.0;
                if left == 0 && ctx.arrivals[t] > 0 && t + ctx.deadline < ctx.horizon {
                    let d = (5.0 * (ctx.beta2 - ctx.beta1 * r)).max(0.0).min(ctx.deadline as f64 * ctx.rate_cap);
                    let dq = (d / ctx.step).round() as i64;
                    if dq > 0 {
                        payment = r * d;
                        res = dq;
                        left = ctx.deadline;
                    }
                }
                let reward = payment - ctx.energy_price * x as f64 * ctx.step - penalty;
                let v = reward + value(t + 1, pi, res, left, ctx, memo);
                if v > best {
                    best = v;
                }
            }
        }
        memo.insert((t, last, residual, slots), best);
        best
    }

    struct Ctx {
        horizon: usize,
        prices: Vec<f64>,
        initial: f64,
        lambda_up: f64,
        lambda_down: f64,
        q_xmax: i64,
        arrivals: Vec<u32>,
        deadline: usize,
        beta1: f64,
        beta2: f64,
        rate_cap: f64,
        step: f64,
        energy_price: f64,
    }
    let ctx = Ctx {
        horizon,
        prices,
        initial: c.initial_price,
        lambda_up: c.lambda_up,
        lambda_down: c.lambda_down,
        q_xmax: q(rate_cap),
        arrivals: bundle.arrivals.counts.clone(),
        deadline: ut.deadline_slots,
        beta1: ut.beta1,
        beta2: ut.beta2,
        rate_cap,
        step,
        energy_price: bundle.prices.prices[0],
    };
    value(0, usize::MAX, 0, 0, &ctx, &mut memo)
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let bundle = degenerate_bundle();
    let optimum = degenerate_grid_optimum(&bundle);
    let source = ScenarioSource::Fixed(bundle.clone());
    let config = SacConfig {
        hidden: vec![64, 64],
        warmup_steps: 400,
        batch_size: 64,
        buffer_capacity: 20_000,
        temperature_mode: TemperatureMode::TargetEntropy,
        ..SacConfig::default()
    };
    let outcome = sac::train(&PortwiseAdapter, &source, &config, 3000, 404, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let mut station = Station::from_bundle(&bundle).map_err(|e| e.to_string())?;
    let mut policy = experiment::ActorPolicy {
        kind: AgentKind::Proposed,
        actor: &outcome.agent.actor,
    };
    let learned = experiment::evaluate_episode(&mut policy, &mut station, 0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ratio = learned.total / optimum;
    let detail = format!(
        "learned JPR {:.4} vs grid optimum {optimum:.4} ({:.1}%), {secs:.1}s",
        learned.total,
        100.0 * ratio
    );
    if ratio >= 0.95 && secs < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Outcome {
    let config = ScenarioConfig::reference(5);
    let source = ScenarioSource::Synthetic {
        config: config.clone(),
        synth: SynthConfig::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let rate_cap = config.guaranteed_rate();
    let mut worst = 0.0f64;
    let mut slots = 0;
    for ep in 0..5 {
        let (mut station, env_seed) = source.station(505, ep).map_err(|e| e.to_string())?;
        let mut policy = |_: &[f64], state: &evstation::env::StationState, c: &ScenarioConfig| {
            let mut raw = vec![rng.gen_range(0.3..1.8)];
            raw.extend((0..c.n_ports).map(|_| rng.gen_range(0.0..7.0)));
            safe_act(&raw, state, c)
        };
        let totals = experiment::evaluate_episode(&mut policy, &mut station, env_seed).map_err(|e| e.to_string())?;
        let mut prev = config.initial_price;
        let mut sum = 0.0;
        for rec in station.trace() {
            let r = rec.service_price;
            for &d in &rec.admitted_demands {
                let plausible = config.user_types.iter().any(|u| {
                    let want = demand_response(u, r).unwrap().min(u.deadline_slots as f64 * rate_cap);
                    (want - d).abs() < 1e-12
                });
                if !plausible {
                    return Err(format!("slot {}: admitted demand {d} matches no user type at price {r}", rec.slot));
                }
            }
            let payment = r * rec.admitted_demands.iter().sum::<f64>();
            let energy = rec.electricity_price * rec.delivered.iter().sum::<f64>();
            let up = config.lambda_up * (r - prev).max(0.0);
            let down = config.lambda_down * (prev - r).max(0.0);
            let slot_total = payment - energy - up - down;
            let gap = (slot_total - rec.reward.total).abs();
            worst = worst.max(gap);
            if gap > 1e-9 {
                return Err(format!("episode {ep} slot {}: recomputed {slot_total} vs {}", rec.slot, rec.reward.total));
            }
            sum += slot_total;
            prev = r;
            slots += 1;
        }
        let n = station.trace().len() as f64;
        if (sum - totals.total).abs() > 1e-9 * n {
            return Err(format!("episode {ep}: evaluator JPR {} vs recomputed {sum}", totals.total));
        }
    }
    Ok(format!("{slots} slots over 5 episodes, max per-slot gap {worst:.2e}"))
}

/// Shared training protocol for the comparison criteria.
fn comparison_config(agent: AgentKind, n_ports: usize, price_factor: f64) -> ExperimentConfig {
    ExperimentConfig {
        agent,
        scenario: ScenarioSpec {
            n_ports,
            price_factor,
            ..ScenarioSpec::default()
        },
        sac: SacConfig {
            hidden: vec![64, 64],
            reward_scale: 0.1,
            ..SacConfig::default()
        },
        episodes: COMPARISON_EPISODES,
        eval_episodes: 10,
        seeds: vec![1, 2, 3, 4, 5],
        ..ExperimentConfig::default()
    }
}

const COMPARISON_EPISODES: usize = 150;

fn sweep_cache() -> &'static std::sync::Mutex<HashMap<(usize, u64, AgentKind), MetricsReport>> {
    static CACHE: std::sync::OnceLock<std::sync::Mutex<HashMap<(usize, u64, AgentKind), MetricsReport>>> =
        std::sync::OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn sweep_report(agent: AgentKind, n_ports: usize, price_factor: f64) -> Result<MetricsReport, String> {
    let key = (n_ports, price_factor.to_bits(), agent);
    if let Some(r) = sweep_cache().lock().unwrap().get(&key) {
        return Ok(r.clone());
    }
    let report = experiment::run_in_memory(&comparison_config(agent, n_ports, price_factor)).map_err(|e| e.to_string())?;
    sweep_cache().lock().unwrap().insert(key, report.clone());
    Ok(report)
}

fn describe(r: &MetricsReport) -> String {
    format!("{} {:.1}±{:.1}", r.agent.label(), r.mean.jpr, r.jpr_std_error)
}

fn criterion_6() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for n in [5, 6, 7] {
        let p = sweep_report(AgentKind::Proposed, n, 1.0)?;
        let j = sweep_report(AgentKind::FleetJpr, n, 1.0)?;
        let f = sweep_report(AgentKind::FleetProfit, n, 1.0)?;
        let beats = p.mean.jpr > j.mean.jpr && p.mean.jpr > f.mean.jpr;
        let separated = [&j, &f]
            .iter()
            .any(|b| p.mean.jpr - p.jpr_std_error > b.mean.jpr + b.jpr_std_error);
        let gain_j = experiment::relative_gain(p.mean.jpr, j.mean.jpr).unwrap_or(f64::NAN);
        let gain_f = experiment::relative_gain(p.mean.jpr, f.mean.jpr).unwrap_or(f64::NAN);
        ok &= beats && separated;
        lines.push(format!(
            "N={n}: {}, {}, {} (gain {gain_j:+.1}% / {gain_f:+.1}%{})",
            describe(&p),
            describe(&j),
            describe(&f),
            if separated { "" } else { ", intervals overlap" }
        ));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for factor in [0.8, 1.0, 1.2] {
        let p = sweep_report(AgentKind::Proposed, 5, factor)?;
        let j = sweep_report(AgentKind::FleetJpr, 5, factor)?;
        let f = sweep_report(AgentKind::FleetProfit, 5, factor)?;
        ok &= p.mean.jpr >= j.mean.jpr && p.mean.jpr >= f.mean.jpr;
        lines.push(format!("factor {factor}: {}, {}, {}", describe(&p), describe(&j), describe(&f)));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut logs = Vec::new();
    for dir in &dirs {
        let mut config = ExperimentConfig {
            episodes: 3,
            eval_episodes: 1,
            seeds: vec![8],
            out_dir: dir.path().to_path_buf(),
            sac: SacConfig {
                hidden: vec![32, 32],
                warmup_steps: 300,
                ..SacConfig::default()
            },
            ..ExperimentConfig::default()
        };
        config.scenario.n_ports = 3;
        let run = experiment::cmd_train(&config).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(run.join("seed_8").join("train_log.csv")).map_err(|e| e.to_string())?);
    }
    if logs[0] == logs[1] && !logs[0].is_empty() {
        Ok(format!("two runs, {} identical log bytes", logs[0].len()))
    } else {
        Err("training logs differ between identical runs".into())
    }
}

#[allow(dead_code)]
fn unused(_: InitScheme, _: f64) {
    let _ = FEASIBILITY_TOL;
}
