//! Soft actor-critic over a squashed-Gaussian policy.
//!
//! The actor emits a mean and log-std per action dimension; samples are
//! `tanh(mean + std * eps)` mapped affinely onto the action box. The critic
//! sees the observation concatenated with the tanh-space ("unit") action.
//! Environment-specific action handling (safe layer, fleet dispatch) lives
//! behind [`ActionAdapter`], so the same learner drives every agent.

use std::f64::consts::LN_2;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ScenarioSource};
use crate::env::{Action, EnvError, RewardBreakdown, ScenarioConfig, Station, StationState};
use crate::nn::{Adam, DenseNet, Gradients, InitScheme, NnError};
use crate::safelayer::{self, ProjectionInstance, SafeLayerError};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const ALPHA_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    SafeLayer(#[from] SafeLayerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("episode {episode}: {source}")]
    Episode {
        episode: usize,
        #[source]
        source: Box<SacError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Gradient descent on `-Q(s, tanh(mean + alpha * std * eps))`.
    Paper,
    /// Standard tuning toward a target policy entropy.
    #[default]
    TargetEntropy,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Initial entropy temperature.
    pub alpha: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub temperature_mode: TemperatureMode,
    /// Defaults to `-action_dim` when absent.
    pub target_entropy: Option<f64>,
    /// Upper end of the service-price range, CNY/kWh.
    pub r_max: f64,
    pub hidden: Vec<usize>,
    pub init: InitScheme,
    /// Transitions collected with uniform random actions before learning.
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    /// Multiplier on training rewards before they enter the critic target.
    pub reward_scale: f64,
    /// Emit a checkpoint every this many episodes (0 = only at start and end).
    pub checkpoint_every: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.2,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            alpha_lr: 1e-4,
            batch_size: 64,
            buffer_capacity: 100_000,
            temperature_mode: TemperatureMode::TargetEntropy,
            target_entropy: None,
            r_max: 2.0,
            hidden: vec![256, 256],
            init: InitScheme::FanInScaled,
            warmup_steps: 1000,
            updates_per_step: 1,
            reward_scale: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size must be >= 1 and no larger than buffer_capacity");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.alpha_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.r_max > 0.0) {
            return bad("r_max must be positive");
        }
        Ok(())
    }
}

/// Box of admissible raw actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Maps a tanh-space action in `[-1, 1]` onto the box.
    pub fn scale(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(u, (lo, hi))| lo + 0.5 * (u + 1.0) * (hi - lo))
            .collect()
    }

    pub fn unscale(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(a, (lo, hi))| 2.0 * (a - lo) / (hi - lo) - 1.0)
            .collect()
    }

    /// `sum_j ln((high_j - low_j) / 2)`, the log-Jacobian of [`Self::scale`].
    pub fn log_jacobian(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(lo, hi)| (0.5 * (hi - lo)).ln())
            .sum()
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian policy network with a tanh squash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorHead {
    pub net: DenseNet,
    pub bounds: ActionBounds,
}

/// A policy draw: unit-space action, box-space action, log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub unit: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Batched Gaussian parameters plus what the backward pass needs.
struct GaussianBatch {
    mean: Array2<f64>,
    log_std: Array2<f64>,
    /// Whether the raw log-std was inside the clamp range.
    log_std_active: Array2<bool>,
}

impl ActorHead {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        bounds: ActionBounds,
        hidden: &[usize],
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * bounds.dim());
        Self {
            net: DenseNet::new(&sizes, init, rng),
            bounds,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.dim()
    }

    fn split(&self, out: &Array2<f64>) -> GaussianBatch {
        let d = self.action_dim();
        let mean = out.slice(s![.., ..d]).to_owned();
        let raw = out.slice(s![.., d..]);
        GaussianBatch {
            mean,
            log_std: raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)),
            log_std_active: raw.mapv(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v)),
        }
    }

    /// Mean and clamped log-std for one observation.
    pub fn gaussian(&self, observation: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SacError> {
        let out = self.net.forward(observation)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFinite(format!("actor output {out:?}")));
        }
        let d = self.action_dim();
        Ok((
            out[..d].to_vec(),
            out[d..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
        ))
    }

    /// Reparameterized sample; `rng = None` gives the deterministic action
    /// `squash(mean)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        observation: &[f64],
        rng: Option<&mut R>,
    ) -> Result<PolicySample, SacError> {
        let (mean, log_std) = self.gaussian(observation)?;
        let eps: Vec<f64> = match rng {
            Some(r) => (0..mean.len()).map(|_| r.sample(StandardNormal)).collect(),
            None => vec![0.0; mean.len()],
        };
        Ok(self.squash(&mean, &log_std, &eps))
    }

    /// Applies the squash for given noise; exposed for tests.
    pub fn squash(&self, mean: &[f64], log_std: &[f64], eps: &[f64]) -> PolicySample {
        let mut log_prob = -self.bounds.log_jacobian();
        let mut unit = Vec::with_capacity(mean.len());
        for j in 0..mean.len() {
            let u = mean[j] + log_std[j].exp() * eps[j];
            log_prob += -0.5 * eps[j] * eps[j] - log_std[j] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
            unit.push(u.tanh());
        }
        PolicySample {
            action: self.bounds.scale(&unit),
            unit,
            log_prob,
        }
    }

    /// Density of a box-space `action` under the policy at `observation`.
    pub fn log_prob_of(&self, observation: &[f64], action: &[f64]) -> Result<f64, SacError> {
        let (mean, log_std) = self.gaussian(observation)?;
        let unit = self.bounds.unscale(action);
        let mut lp = -self.bounds.log_jacobian();
        for j in 0..mean.len() {
            let a = unit[j].clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            let u = a.atanh();
            let z = (u - mean[j]) / log_std[j].exp();
            lp += -0.5 * z * z - log_std[j] - HALF_LN_2PI - log_one_minus_tanh_sq(u);
        }
        Ok(lp)
    }
}

/// One replayed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    /// Actor output before the safe layer, in tanh space `[-1, 1]`.
    pub raw_action: Vec<f64>,
    /// Action the environment executed.
    pub safe_action: Action,
    /// Training reward (already mode-specific, before `reward_scale`).
    pub reward: f64,
    pub next_observation: Vec<f64>,
    pub done: bool,
}

/// FIFO ring buffer with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Indices drawn uniformly without replacement.
    pub fn sample_indices(&mut self, batch: usize) -> Vec<usize> {
        let n = batch.min(self.items.len());
        index::sample(&mut self.rng, self.items.len(), n).into_vec()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn sample(&mut self, batch: usize) -> Batch {
        let idx = self.sample_indices(batch);
        Batch::from_transitions(idx.iter().map(|&i| &self.items[i]))
    }
}

/// Column-stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_observations: Array2<f64>,
    pub done: Array1<f64>,
}

impl Batch {
    pub fn from_transitions<'a, I: IntoIterator<Item = &'a Transition>>(items: I) -> Self {
        let items: Vec<&Transition> = items.into_iter().collect();
        let b = items.len();
        let od = items.first().map_or(0, |t| t.observation.len());
        let ad = items.first().map_or(0, |t| t.raw_action.len());
        let rows = |f: &dyn Fn(&Transition) -> &[f64], w: usize| {
            Array2::from_shape_fn((b, w), |(i, j)| f(items[i])[j])
        };
        Self {
            observations: rows(&|t| &t.observation, od),
            actions: rows(&|t| &t.raw_action, ad),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_observations: rows(&|t| &t.next_observation, od),
            done: items.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn concat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(s![.., a.ncols()..]).assign(&b);
    out
}

/// Draws a `rows x cols` standard-normal matrix.
pub fn normal_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Squashed samples for a batch of observations under fixed noise.
struct BatchSample {
    gauss: GaussianBatch,
    /// pre-squash `mean + std * eps`
    pre: Array2<f64>,
    unit: Array2<f64>,
    log_prob: Array1<f64>,
}

fn sample_batch(actor: &ActorHead, actor_out: &Array2<f64>, noise: ArrayView2<f64>) -> BatchSample {
    let gauss = actor.split(actor_out);
    let pre = &gauss.mean + &(gauss.log_std.mapv(f64::exp) * noise);
    let unit = pre.mapv(f64::tanh);
    let lj = actor.bounds.log_jacobian();
    let log_prob = Array1::from_shape_fn(pre.nrows(), |i| {
        let mut lp = -lj;
        for j in 0..pre.ncols() {
            let e = noise[[i, j]];
            lp += -0.5 * e * e - gauss.log_std[[i, j]] - HALF_LN_2PI - log_one_minus_tanh_sq(pre[[i, j]]);
        }
        lp
    });
    BatchSample {
        gauss,
        pre,
        unit,
        log_prob,
    }
}

/// Soft Bellman targets `scale * r + gamma * (1 - done) * (Q̄(s', a') - alpha log pi(a'|s'))`.
pub fn critic_targets(
    target_critic: &DenseNet,
    actor: &ActorHead,
    batch: &Batch,
    alpha: f64,
    config: &SacConfig,
    next_noise: ArrayView2<f64>,
) -> Result<Array1<f64>, SacError> {
    let out = actor.net.forward_batch(batch.next_observations.view())?;
    let next = sample_batch(actor, &out, next_noise);
    let q_next = target_critic
        .forward_batch(concat(batch.next_observations.view(), next.unit.view()).view())?
        .column(0)
        .to_owned();
    let soft = &q_next - &(alpha * &next.log_prob);
    let bootstrap = config.gamma * &(1.0 - &batch.done) * &soft;
    Ok(config.reward_scale * &batch.rewards + &bootstrap)
}

/// Critic loss `mean 0.5 (Q(s, a) - y)^2` and its parameter gradient for given targets.
pub fn critic_loss_and_grad(
    critic: &DenseNet,
    batch: &Batch,
    targets: &Array1<f64>,
) -> Result<(f64, Gradients), SacError> {
    let input = concat(batch.observations.view(), batch.actions.view());
    let cache = critic.forward_cached(input.view())?;
    let q = cache.output().column(0);
    let diff = &q - targets;
    let b = batch.len() as f64;
    let loss = 0.5 * diff.mapv(|d| d * d).sum() / b;
    if !loss.is_finite() {
        return Err(SacError::NonFinite("critic loss".into()));
    }
    let grad_out = (diff / b).insert_axis(Axis(1));
    let (grads, _) = critic.backward(&cache, grad_out.view())?;
    Ok((loss, grads))
}

/// Actor loss `mean(alpha log pi(a|s) - Q(s, a))` with reparameterized `a`,
/// its parameter gradient, and the batch mean log-probability.
pub fn actor_loss_and_grad(
    actor: &ActorHead,
    critic: &DenseNet,
    observations: ArrayView2<f64>,
    alpha: f64,
    noise: ArrayView2<f64>,
) -> Result<(f64, Gradients, f64), SacError> {
    let b = observations.nrows() as f64;
    let d = actor.action_dim();
    let cache = actor.net.forward_cached(observations)?;
    let smp = sample_batch(actor, cache.output(), noise);
    let critic_in = concat(observations, smp.unit.view());
    let ccache = critic.forward_cached(critic_in.view())?;
    let q = ccache.output().column(0).to_owned();
    let loss = (alpha * &smp.log_prob - &q).sum() / b;
    if !loss.is_finite() {
        return Err(SacError::NonFinite("actor loss".into()));
    }
    let ones = Array2::from_elem((observations.nrows(), 1), 1.0);
    let (_, dq_din) = critic.backward(&ccache, ones.view())?;
    let dq_da = dq_din.slice(s![.., observations.ncols()..]);

    let mut grad_out = Array2::zeros((observations.nrows(), 2 * d));
    for i in 0..observations.nrows() {
        for j in 0..d {
            let a = smp.unit[[i, j]];
            let du = (alpha * 2.0 * a - dq_da[[i, j]] * (1.0 - a * a)) / b;
            grad_out[[i, j]] = du;
            if smp.gauss.log_std_active[[i, j]] {
                let std = smp.gauss.log_std[[i, j]].exp();
                grad_out[[i, d + j]] = du * std * noise[[i, j]] - alpha / b;
            }
        }
    }
    let (grads, _) = actor.net.backward(&cache, grad_out.view())?;
    let _ = &smp.pre;
    Ok((loss, grads, smp.log_prob.mean().unwrap_or(0.0)))
}

/// `dL/d alpha` for `L(alpha) = -mean Q(s, tanh(mean + alpha * std * eps))`.
pub fn paper_temperature_grad(
    actor: &ActorHead,
    critic: &DenseNet,
    observations: ArrayView2<f64>,
    alpha: f64,
    noise: ArrayView2<f64>,
) -> Result<(f64, f64), SacError> {
    let b = observations.nrows() as f64;
    let out = actor.net.forward_batch(observations)?;
    let gauss = actor.split(&out);
    let std = gauss.log_std.mapv(f64::exp);
    let unit = (&gauss.mean + &(alpha * &std * &noise)).mapv(f64::tanh);
    let cache = critic.forward_cached(concat(observations, unit.view()).view())?;
    let loss = -cache.output().sum() / b;
    let ones = Array2::from_elem((observations.nrows(), 1), 1.0);
    let (_, dq_din) = critic.backward(&cache, ones.view())?;
    let dq_da = dq_din.slice(s![.., observations.ncols()..]);
    let mut grad = 0.0;
    for i in 0..unit.nrows() {
        for j in 0..unit.ncols() {
            let a = unit[[i, j]];
            grad -= dq_da[[i, j]] * (1.0 - a * a) * std[[i, j]] * noise[[i, j]];
        }
    }
    Ok((loss, grad / b))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

/// Learner state: actor, critic, target critic, optimizers, temperature.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub actor: ActorHead,
    pub critic: DenseNet,
    pub target_critic: DenseNet,
    pub actor_adam: Adam,
    pub critic_adam: Adam,
    pub alpha: f64,
    pub config: SacConfig,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, bounds: ActionBounds, config: SacConfig, rng: &mut R) -> Self {
        let d = bounds.dim();
        let actor = ActorHead::new(obs_dim, bounds, &config.hidden, config.init, rng);
        let mut sizes = vec![obs_dim + d];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let critic = DenseNet::new(&sizes, config.init, rng);
        Self {
            actor_adam: Adam::new(&actor.net, config.actor_lr),
            critic_adam: Adam::new(&critic, config.critic_lr),
            target_critic: critic.clone(),
            critic,
            actor,
            alpha: config.alpha,
            config,
        }
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.actor.action_dim() as f64))
    }

    pub fn act<R: Rng + ?Sized>(&self, observation: &[f64], rng: Option<&mut R>) -> Result<PolicySample, SacError> {
        self.actor.sample(observation, rng)
    }

    /// One Adam step on the critic. Non-finite losses leave the critic untouched.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64, SacError> {
        let noise = normal_noise(rng, batch.len(), self.actor.action_dim());
        let targets = critic_targets(
            &self.target_critic,
            &self.actor,
            batch,
            self.alpha,
            &self.config,
            noise.view(),
        )?;
        let (loss, grads) = critic_loss_and_grad(&self.critic, batch, &targets)?;
        self.critic_adam.apply(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// One Adam step on the actor; returns the loss and batch-mean log-prob.
    pub fn actor_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<(f64, f64), SacError> {
        let noise = normal_noise(rng, batch.len(), self.actor.action_dim());
        let (loss, grads, mean_log_prob) = actor_loss_and_grad(
            &self.actor,
            &self.critic,
            batch.observations.view(),
            self.alpha,
            noise.view(),
        )?;
        self.actor_adam.apply(&mut self.actor.net, &grads)?;
        Ok((loss, mean_log_prob))
    }

    /// Updates the temperature per the configured mode. `mean_log_prob` is
    /// the policy's batch-mean log-density (used by target-entropy mode).
    pub fn temperature_update<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        mean_log_prob: f64,
        rng: &mut R,
    ) -> Result<f64, SacError> {
        let grad = match self.config.temperature_mode {
            TemperatureMode::Fixed => return Ok(self.alpha),
            TemperatureMode::TargetEntropy => {
                // d/d(log alpha) of -log_alpha * (log pi + target)
                let g = -(mean_log_prob + self.target_entropy());
                if g.is_finite() {
                    let log_alpha = self.alpha.max(ALPHA_MIN).ln() - self.config.alpha_lr * g;
                    self.alpha = log_alpha.exp();
                }
                None
            }
            TemperatureMode::Paper => {
                let noise = normal_noise(rng, batch.len(), self.actor.action_dim());
                let (_, g) = paper_temperature_grad(
                    &self.actor,
                    &self.critic,
                    batch.observations.view(),
                    self.alpha,
                    noise.view(),
                )?;
                Some(g)
            }
        };
        if let Some(g) = grad {
            if g.is_finite() {
                self.alpha -= self.config.alpha_lr * g;
            }
        }
        self.alpha = self.alpha.clamp(ALPHA_MIN, ALPHA_MAX);
        Ok(self.alpha)
    }

    pub fn target_sync(&mut self) {
        target_sync(&self.critic, &mut self.target_critic, self.config.tau);
    }

    /// Critic step, actor step, temperature step, target sync.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats, SacError> {
        let critic_loss = self.critic_update(batch, rng)?;
        let (actor_loss, mean_log_prob) = self.actor_update(batch, rng)?;
        let alpha = self.temperature_update(batch, mean_log_prob, rng)?;
        self.target_sync();
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha,
        })
    }

    pub fn checkpoint(&self, kind: &str, scenario: &ScenarioConfig) -> AgentCheckpoint {
        AgentCheckpoint {
            kind: kind.to_string(),
            n_ports: scenario.n_ports,
            history_len: scenario.history_len,
            observation_len: scenario.observation_len(),
            alpha: self.alpha,
            config: self.config.clone(),
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            target_critic: self.target_critic.clone(),
        }
    }
}

/// `target <- (1 - tau) target + tau critic`.
pub fn target_sync(critic: &DenseNet, target: &mut DenseNet, tau: f64) {
    target.soft_update_from(critic, tau);
}

/// Serialized agent plus the configuration it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub kind: String,
    pub n_ports: usize,
    pub history_len: usize,
    pub observation_len: usize,
    pub alpha: f64,
    pub config: SacConfig,
    pub actor: ActorHead,
    pub critic: DenseNet,
    pub target_critic: DenseNet,
}

/// Maps the learner's box-space action to an executable station action.
pub trait ActionAdapter {
    fn name(&self) -> &'static str;
    fn bounds(&self, scenario: &ScenarioConfig, config: &SacConfig) -> ActionBounds;
    fn to_env_action(&self, raw: &[f64], state: &StationState, scenario: &ScenarioConfig)
        -> Result<Action, SacError>;
    /// Reward the learner is trained on.
    fn training_reward(&self, reward: &RewardBreakdown) -> f64;
}

/// Routes per-port rate proposals through the safe layer.
///
/// `raw = [price, rate_0, .., rate_{N-1}]`. The price passes through; rates
/// on empty ports become zero; proposals on busy ports are capped at the
/// port's residual demand and projected onto the deadline/capacity polytope.
pub fn safe_act(raw: &[f64], state: &StationState, scenario: &ScenarioConfig) -> Result<Action, SacError> {
    let n = scenario.n_ports;
    if raw.len() != 1 + n {
        return Err(SacError::Config(format!("expected {} action entries, got {}", 1 + n, raw.len())));
    }
    let ports = state.port_states();
    let occupied = safelayer::occupied_ports(&ports);
    let mut rates = vec![0.0; n];
    if !occupied.is_empty() {
        let lower = safelayer::lower_bounds(&ports, scenario.guaranteed_rate())?;
        let proposal = occupied
            .iter()
            .map(|&i| raw[1 + i].min(ports[i].residual_demand_kwh))
            .collect();
        let projected = safelayer::project(&ProjectionInstance {
            proposal,
            lower,
            upper: scenario.x_max,
            budget: scenario.capacity,
        })?;
        for (&i, x) in occupied.iter().zip(projected.rates) {
            rates[i] = x;
        }
    }
    Ok(Action {
        price: raw[0].max(0.0),
        rates,
    })
}

/// The joint pricing and per-port scheduling agent, trained on the full
/// profit-and-reputation reward.
#[derive(Debug, Clone, Copy, Default)]
pub struct PortwiseAdapter;

impl ActionAdapter for PortwiseAdapter {
    fn name(&self) -> &'static str {
        "proposed"
    }

    fn bounds(&self, scenario: &ScenarioConfig, config: &SacConfig) -> ActionBounds {
        let mut low = vec![0.0; 1 + scenario.n_ports];
        let mut high = vec![scenario.x_max; 1 + scenario.n_ports];
        low[0] = 0.0;
        high[0] = config.r_max;
        ActionBounds { low, high }
    }

    fn to_env_action(&self, raw: &[f64], state: &StationState, scenario: &ScenarioConfig) -> Result<Action, SacError> {
        safe_act(raw, state, scenario)
    }

    fn training_reward(&self, reward: &RewardBreakdown) -> f64 {
        reward.total
    }
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub jpr: f64,
    pub payment: f64,
    pub energy_cost: f64,
    pub up_penalty: f64,
    pub down_penalty: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 9] = [
    "episode",
    "jpr",
    "payment",
    "energy_cost",
    "up_penalty",
    "down_penalty",
    "actor_loss",
    "critic_loss",
    "alpha",
];

pub fn write_train_log<W: std::io::Write>(log: &[EpisodeLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAIN_LOG_HEADER)?;
    for e in log {
        w.write_record([
            e.episode.to_string(),
            e.jpr.to_string(),
            e.payment.to_string(),
            e.energy_cost.to_string(),
            e.up_penalty.to_string(),
            e.down_penalty.to_string(),
            e.actor_loss.to_string(),
            e.critic_loss.to_string(),
            e.alpha.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Independent RNG streams derived from one run seed.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: SacAgent,
    pub log: Vec<EpisodeLog>,
    pub buffer_len: usize,
    pub steps: usize,
}

/// Off-policy training loop: one environment slot, then
/// `updates_per_step` gradient updates once the warm-up is over.
/// `on_checkpoint(episodes_done, agent)` fires before the first episode,
/// every `checkpoint_every` episodes, and after the last one.
pub fn train<A, F>(
    adapter: &A,
    source: &ScenarioSource,
    config: &SacConfig,
    episodes: usize,
    seed: u64,
    mut on_checkpoint: F,
) -> Result<TrainOutcome, SacError>
where
    A: ActionAdapter,
    F: FnMut(usize, &SacAgent) -> Result<(), SacError>,
{
    config.validate()?;
    let scenario = source.scenario().clone();
    scenario.validate()?;
    let bounds = adapter.bounds(&scenario, config);
    let mut init_rng = stream(seed, 1);
    let mut act_rng = stream(seed, 2);
    let mut update_rng = stream(seed, 3);
    let mut agent = SacAgent::new(scenario.observation_len(), bounds, config.clone(), &mut init_rng);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity, seed.wrapping_add(4));
    let mut log = Vec::with_capacity(episodes);
    let mut steps = 0usize;
    on_checkpoint(0, &agent)?;

    for episode in 0..episodes {
        let wrap = |e: SacError| SacError::Episode {
            episode,
            source: Box::new(e),
        };
        let (mut station, env_seed) = source.station(seed, episode).map_err(|e| wrap(e.into()))?;
        let mut obs = station.reset(env_seed);
        let mut totals = RewardBreakdown::default();
        let (mut actor_sum, mut critic_sum, mut n_updates) = (0.0, 0.0, 0usize);
        loop {
            let unit: Vec<f64> = if steps < config.warmup_steps {
                (0..agent.actor.action_dim()).map(|_| act_rng.gen_range(-1.0..1.0)).collect()
            } else {
                agent.act(&obs, Some(&mut act_rng)).map_err(wrap)?.unit
            };
            let raw = agent.actor.bounds.scale(&unit);
            let action = adapter
                .to_env_action(&raw, station.state(), &scenario)
                .map_err(wrap)?;
            let out = station.step(&action).map_err(|e| wrap(e.into()))?;
            totals.accumulate(&out.reward);
            let reward = adapter.training_reward(&out.reward);
            if !reward.is_finite() {
                return Err(wrap(SacError::NonFinite("reward".into())));
            }
            buffer.push(Transition {
                observation: std::mem::take(&mut obs),
                raw_action: unit,
                safe_action: action,
                reward,
                next_observation: out.observation.clone(),
                done: out.done,
            });
            obs = out.observation;
            steps += 1;
            if steps >= config.warmup_steps && buffer.len() >= config.batch_size {
                for _ in 0..config.updates_per_step {
                    let batch = buffer.sample(config.batch_size);
                    let stats = agent.update(&batch, &mut update_rng).map_err(wrap)?;
                    actor_sum += stats.actor_loss;
                    critic_sum += stats.critic_loss;
                    n_updates += 1;
                }
            }
            if out.done {
                break;
            }
        }
        if !station.is_feasible() {
            return Err(wrap(SacError::Config(format!(
                "{} vehicles left with unmet demand",
                station.metrics().unserved_departures
            ))));
        }
        let mean = |s: f64| if n_updates > 0 { s / n_updates as f64 } else { 0.0 };
        log.push(EpisodeLog {
            episode,
            jpr: totals.total,
            payment: totals.payment,
            energy_cost: totals.energy_cost,
            up_penalty: totals.up_penalty,
            down_penalty: totals.down_penalty,
            actor_loss: mean(actor_sum),
            critic_loss: mean(critic_sum),
            alpha: agent.alpha,
        });
        let last = episode + 1 == episodes;
        if last || (config.checkpoint_every > 0 && (episode + 1) % config.checkpoint_every == 0) {
            on_checkpoint(episode + 1, &agent)?;
        }
    }
    Ok(TrainOutcome {
        agent,
        log,
        buffer_len: buffer.len(),
        steps,
    })
}

/// Runs one episode with a deterministic policy and returns the station
/// after the final slot (trace, metrics and totals available on it).
pub fn rollout<A: ActionAdapter>(
    adapter: &A,
    actor: &ActorHead,
    station: &mut Station,
    env_seed: u64,
) -> Result<RewardBreakdown, SacError> {
    let scenario = station.config().clone();
    let mut obs = station.reset(env_seed);
    let mut totals = RewardBreakdown::default();
    loop {
        let smp = actor.sample::<ChaCha8Rng>(&obs, None)?;
        let action = adapter.to_env_action(&smp.action, station.state(), &scenario)?;
        let out = station.step(&action)?;
        totals.accumulate(&out.reward);
        obs = out.observation;
        if out.done {
            return Ok(totals);
        }
    }
}
