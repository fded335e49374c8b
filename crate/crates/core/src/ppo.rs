//! Proximal policy optimisation.
//!
//! Rollouts are collected with the policy in eval mode (no dropout) so the
//! stored log-probabilities are exactly reproducible; updates run the branch
//! networks with dropout. Advantages come from GAE and are normalised per
//! rollout. The per-sample loss is
//!
//! ```text
//! -min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) + c_v * (R - V)^2 - c_e * H
//! ```
//!
//! averaged over each minibatch, with the gradient clipped to a global norm.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::TradingEnv;
use crate::error::{Error, Result};
use crate::marketdata::Observation;
use crate::nn::{clip_grad_norm, AdamState, Mode, Parameters};
use crate::policy::{log_prob_and_entropy, log_prob_grad, sample_action, OutputGrad, PolicyCache, PolicyOutput, PolicyParams};
use crate::Rng;

/// Exponent bound for the probability ratio.
pub const RATIO_LOG_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub rollout: usize,
    pub gamma: f64,
    pub minibatches: usize,
    pub clip_epsilon: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            learning_rate: 0.00025,
            rollout: 1024,
            gamma: 0.99,
            minibatches: 4,
            clip_epsilon: 0.2,
            gae_lambda: 0.95,
            epochs: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            total_steps: 200_000,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.rollout == 0 || self.minibatches == 0 || self.rollout % self.minibatches != 0 {
            return bad("minibatches must divide a positive rollout length");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    /// Pre-clip Gaussian draw.
    pub raw_action: f64,
    pub action: f64,
    pub old_log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    capacity: usize,
    transitions: Vec<Transition>,
    bootstrap_value: f64,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    finalized: bool,
    /// Total reward of every episode that ended inside this rollout.
    pub episode_rewards: Vec<f64>,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize) -> Self {
        TrajectoryBuffer {
            capacity,
            transitions: Vec::with_capacity(capacity),
            bootstrap_value: 0.0,
            advantages: Vec::new(),
            returns: Vec::new(),
            finalized: false,
            episode_rewards: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if self.transitions.len() == self.capacity || self.finalized {
            return Err(Error::InvalidParams("trajectory buffer is full".into()));
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.transitions.len() == self.capacity
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn bootstrap_value(&self) -> f64 {
        self.bootstrap_value
    }

    pub fn set_bootstrap_value(&mut self, v: f64) {
        self.bootstrap_value = v;
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Normalised advantages; empty before [`finalize`](Self::finalize).
    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    /// Computes GAE advantages and returns, then normalises the advantages.
    /// Must be called exactly once on a full buffer.
    pub fn finalize(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.finalized {
            return Err(Error::InvalidParams("buffer already finalized".into()));
        }
        if !self.is_full() {
            return Err(Error::InvalidParams(format!(
                "buffer holds {} of {} transitions",
                self.len(),
                self.capacity
            )));
        }
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = self.transitions.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (mut adv, ret) = compute_gae(&rewards, &values, &dones, self.bootstrap_value, gamma, lambda);
        normalize_advantages(&mut adv);
        self.advantages = adv;
        self.returns = ret;
        self.finalized = true;
        Ok(())
    }
}

/// Generalised advantage estimates and value targets (unnormalised).
///
/// `dones[t]` marks that transition `t` ended its episode; `bootstrap` is the
/// value of the state following the last transition.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to mean 0 and (population) standard deviation 1.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= mean);
    let sd = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    if sd > 1e-12 {
        adv.iter_mut().for_each(|a| *a /= sd);
        // One correction pass pins the moments to rounding level.
        let m = adv.iter().sum::<f64>() / n;
        adv.iter_mut().for_each(|a| *a -= m);
    }
}

/// `exp(new - old)`, with the exponent clamped to +-50.
pub fn prob_ratio(new_log_prob: f64, old_log_prob: f64) -> f64 {
    (new_log_prob - old_log_prob).clamp(-RATIO_LOG_CLAMP, RATIO_LOG_CLAMP).exp()
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn ppo_surrogate(rho: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

/// Persistent interaction state: the environment plus the pending
/// observation, so episodes may span rollouts.
#[derive(Debug, Clone)]
pub struct Collector {
    pub env: TradingEnv,
    current: Option<Observation>,
    episode_reward: f64,
}

impl Collector {
    pub fn new(env: TradingEnv) -> Self {
        Collector {
            env,
            current: None,
            episode_reward: 0.0,
        }
    }
}

/// Steps the environment `n_steps` times under a frozen policy snapshot.
pub fn collect_rollout(collector: &mut Collector, policy: &PolicyParams, n_steps: usize, rng: &mut Rng) -> Result<TrajectoryBuffer> {
    let mut buffer = TrajectoryBuffer::new(n_steps);
    for _ in 0..n_steps {
        let obs = match collector.current.take() {
            Some(o) => o,
            None => {
                collector.episode_reward = 0.0;
                collector.env.reset(rng)?
            }
        };
        let out = policy.evaluate(&obs)?;
        let sample = sample_action(&out, rng);
        let step = collector.env.step(sample.action)?;
        collector.episode_reward += step.reward;
        if step.done {
            buffer.episode_rewards.push(collector.episode_reward);
        } else {
            collector.current = Some(step.observation);
        }
        buffer.push(Transition {
            observation: obs,
            raw_action: sample.raw,
            action: sample.action,
            old_log_prob: sample.log_prob,
            reward: step.reward,
            value: out.value,
            done: step.done,
        })?;
    }
    let bootstrap = match &collector.current {
        Some(o) => policy.evaluate(o)?.value,
        None => 0.0,
    };
    buffer.set_bootstrap_value(bootstrap);
    Ok(buffer)
}

/// Per-branch dropout masks for every sample of a minibatch.
pub type MinibatchMasks = Vec<Vec<Vec<Option<Vec<f64>>>>>;

pub enum Dropout<'a> {
    Off,
    Sample(&'a mut Rng),
    Replay(&'a MinibatchMasks),
}

/// One training sample as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub observation: &'a Observation,
    pub raw_action: f64,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub total: f64,
}

fn sample_terms(out: &PolicyOutput, s: &Sample<'_>, config: &PpoConfig) -> (LossTerms, OutputGrad) {
    let (new_lp, entropy) = log_prob_and_entropy(out, s.raw_action);
    let log_ratio = new_lp - s.old_log_prob;
    let rho = prob_ratio(new_lp, s.old_log_prob);
    let eps = config.clip_epsilon;
    let surrogate = ppo_surrogate(rho, s.advantage, eps);
    // The unclipped branch is active (and differentiable) when it attains the min.
    let d_surr_d_lp = if rho * s.advantage <= rho.clamp(1.0 - eps, 1.0 + eps) * s.advantage
        && log_ratio.abs() < RATIO_LOG_CLAMP
    {
        rho * s.advantage
    } else {
        0.0
    };
    let err = s.target - out.value;
    let value_loss = err * err;
    let (dlp_dmean, dlp_dlogstd) = log_prob_grad(out, s.raw_action);
    let grad = OutputGrad {
        d_mean: -d_surr_d_lp * dlp_dmean,
        d_value: -2.0 * config.value_coef * err,
        d_log_std: -d_surr_d_lp * dlp_dlogstd - config.entropy_coef,
    };
    let terms = LossTerms {
        policy_loss: -surrogate,
        value_loss,
        entropy,
        clip_fraction: if (rho - 1.0).abs() > eps { 1.0 } else { 0.0 },
        total: -surrogate + config.value_coef * value_loss - config.entropy_coef * entropy,
    };
    (terms, grad)
}

/// Mean loss over a minibatch and its gradient. Returns the masks used so the
/// same forward can be replayed.
pub fn minibatch_loss(
    policy: &PolicyParams,
    samples: &[Sample<'_>],
    config: &PpoConfig,
    mut dropout: Dropout<'_>,
) -> Result<(LossTerms, PolicyParams, MinibatchMasks)> {
    let scale = 1.0 / samples.len() as f64;
    let mut grads = policy.zeros_like();
    let mut mean = LossTerms::default();
    let mut masks = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (out, cache): (PolicyOutput, PolicyCache) = match &mut dropout {
            Dropout::Off => policy.forward(s.observation, Mode::Eval)?,
            Dropout::Sample(rng) => policy.forward(s.observation, Mode::Train(rng))?,
            Dropout::Replay(m) => policy.forward_replay(s.observation, &m[i])?,
        };
        let (terms, g) = sample_terms(&out, s, config);
        let g = OutputGrad {
            d_mean: g.d_mean * scale,
            d_value: g.d_value * scale,
            d_log_std: g.d_log_std * scale,
        };
        policy.backward_into(&cache, g, &mut grads)?;
        mean.policy_loss += terms.policy_loss * scale;
        mean.value_loss += terms.value_loss * scale;
        mean.entropy += terms.entropy * scale;
        mean.clip_fraction += terms.clip_fraction * scale;
        mean.total += terms.total * scale;
        masks.push(cache.masks());
    }
    Ok((mean, grads, masks))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// PPO update over a finalized buffer: `epochs` passes over shuffled
/// minibatches, one Adam step each.
pub fn update(
    policy: &mut PolicyParams,
    adam: &mut AdamState,
    buffer: &TrajectoryBuffer,
    config: &PpoConfig,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    if !buffer.is_finalized() {
        return Err(Error::InvalidParams("update needs a finalized buffer".into()));
    }
    let n = buffer.len();
    if n % config.minibatches != 0 {
        return Err(Error::InvalidParams("minibatches must divide the buffer length".into()));
    }
    let mb_size = n / config.minibatches;
    let samples: Vec<Sample<'_>> = buffer
        .transitions()
        .iter()
        .zip(buffer.advantages())
        .zip(buffer.returns())
        .map(|((t, &advantage), &target)| Sample {
            observation: &t.observation,
            raw_action: t.raw_action,
            old_log_prob: t.old_log_prob,
            advantage,
            target,
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut totals = LossTerms::default();
    let mut batches = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for (b, chunk) in order.chunks(mb_size).enumerate() {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| samples[i]).collect();
            let (terms, mut grads, _) = minibatch_loss(policy, &batch, config, Dropout::Sample(rng))?;
            if !terms.total.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, minibatch {b}: total {} (policy {}, value {}, entropy {})",
                    terms.total, terms.policy_loss, terms.value_loss, terms.entropy
                )));
            }
            clip_grad_norm(&mut grads, config.max_grad_norm);
            adam.step(policy, &grads)?;
            policy.project();
            totals.policy_loss += terms.policy_loss;
            totals.value_loss += terms.value_loss;
            totals.entropy += terms.entropy;
            totals.clip_fraction += terms.clip_fraction;
            batches += 1;
        }
    }

    // k3 estimator of KL(old || new), always >= 0.
    let mut kl = 0.0;
    for s in &samples {
        let out = policy.evaluate(s.observation)?;
        let (lp, _) = log_prob_and_entropy(&out, s.raw_action);
        let log_ratio = (lp - s.old_log_prob).clamp(-RATIO_LOG_CLAMP, RATIO_LOG_CLAMP);
        kl += log_ratio.exp() - 1.0 - log_ratio;
    }
    let b = batches as f64;
    Ok(UpdateStats {
        policy_loss: totals.policy_loss / b,
        value_loss: totals.value_loss / b,
        entropy: totals.entropy / b,
        clip_fraction: totals.clip_fraction / b,
        approx_kl: kl / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub update: usize,
    pub steps: usize,
    pub mean_ep_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
}

/// Owns the policy, optimizer and interaction state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub policy: PolicyParams,
    pub adam: AdamState,
    pub config: PpoConfig,
    pub collector: Collector,
    pub rng: Rng,
    pub steps: usize,
    pub updates: usize,
}

impl Trainer {
    pub fn new(policy: PolicyParams, env: TradingEnv, config: PpoConfig, rng: Rng) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&policy, config.learning_rate);
        Ok(Trainer {
            policy,
            adam,
            config,
            collector: Collector::new(env),
            rng,
            steps: 0,
            updates: 0,
        })
    }

    /// One collect + update cycle.
    pub fn iterate(&mut self) -> Result<TrainLogRow> {
        let mut buffer = collect_rollout(&mut self.collector, &self.policy, self.config.rollout, &mut self.rng)?;
        buffer.finalize(self.config.gamma, self.config.gae_lambda)?;
        let stats = update(&mut self.policy, &mut self.adam, &buffer, &self.config, &mut self.rng)?;
        self.steps += buffer.len();
        self.updates += 1;
        let mean_ep_reward = if buffer.episode_rewards.is_empty() {
            f64::NAN
        } else {
            buffer.episode_rewards.iter().sum::<f64>() / buffer.episode_rewards.len() as f64
        };
        Ok(TrainLogRow {
            update: self.updates,
            steps: self.steps,
            mean_ep_reward,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_frac: stats.clip_fraction,
            approx_kl: stats.approx_kl,
        })
    }

    /// Alternates collection and updates until `total_steps`, calling
    /// `on_update` after each update.
    pub fn train(&mut self, mut on_update: impl FnMut(&Trainer, &TrainLogRow) -> Result<()>) -> Result<Vec<TrainLogRow>> {
        let mut log = Vec::new();
        while self.steps < self.config.total_steps {
            let row = self.iterate()?;
            on_update(self, &row)?;
            log.push(row);
        }
        Ok(log)
    }
}

/// Mean total reward over `episodes` sampled episodes (stochastic policy).
pub fn evaluate_episodes(env: &mut TradingEnv, policy: &PolicyParams, episodes: usize, rng: &mut Rng) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut obs = env.reset(rng)?;
        loop {
            let out = policy.evaluate(&obs)?;
            let a = sample_action(&out, rng).action;
            let step = env.step(a)?;
            total += step.reward;
            if step.done {
                break;
            }
            obs = step.observation;
        }
    }
    Ok(total / episodes as f64)
}
