//! Conservative policy-gradient alignment.
//!
//! Each training step rolls out `k` episodes per minibatch example under
//! the current policy, scores them with the negative Brier reward, subtracts
//! the per-example mean reward, standardises across the minibatch and takes
//! one plain gradient step on
//!
//! ```text
//! L = mean(-w * A * log pi(a|s)) - eta * mean(H) + beta * mean(KL(pi || pi_behavior))
//! ```
//!
//! where `w = min(exp(log pi - log pi_behavior), c_clip)` is held constant.
//! Only the terminal step of each trajectory enters the loss.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Case;
use crate::episode::{run_episode, EpisodeResult, EvidenceSource, LoopConfig};
use crate::error::{Error, Result};
use crate::policy::{
    entropy, featurize, grad_entropy_row, grad_kl_row, grad_log_prob_row, kl_divergence, log_prob, Action,
    AgentState, PolicyParams, DEFAULT_BINS,
};
use crate::rng::StreamKey;

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub c_clip: f64,
    pub eta: f64,
    pub beta_kl: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sync_period: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 4,
            c_clip: 2.0,
            eta: 0.01,
            beta_kl: 0.1,
            learning_rate: 0.1,
            batch_size: 16,
            sync_period: 10,
            steps: 300,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 2 {
            return fail("train.k must be >= 2");
        }
        if !(self.c_clip > 0.0) || !self.c_clip.is_finite() {
            return fail("train.c_clip must be positive and finite");
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return fail("train.eta must be >= 0 and finite");
        }
        if !(self.beta_kl >= 0.0) || !self.beta_kl.is_finite() {
            return fail("train.beta_kl must be >= 0 and finite");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("train.learning_rate must be positive and finite");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be >= 1");
        }
        if self.sync_period == 0 {
            return fail("train.sync_period must be >= 1");
        }
        Ok(())
    }
}

/// Terminal-step data of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub advantage: f64,
    pub standardized: f64,
    pub state: AgentState,
    pub action: Action,
    pub logp_theta: f64,
    pub logp_beta: f64,
    /// Clipped importance weight, fixed at collection time.
    pub weight: f64,
    pub entropy: f64,
    pub kl: f64,
}

/// `-(p_final - g)^2`.
pub fn terminal_reward(p_final: f64, label: u8) -> f64 {
    -(p_final - f64::from(label)).powi(2)
}

/// `R_k - mean(R)`.
pub fn self_critical_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "self-critical baseline needs at least 2 rollouts, got {}",
            rewards.len()
        )));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(rewards.iter().map(|r| r - mean).collect())
}

/// `(A - mean) / max(pop_std, 1e-8)`, or all zeros when the spread is below the floor.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < STD_FLOOR {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// `min(exp(logp_theta - logp_beta), c_clip)`; no lower clip.
pub fn clipped_is_weight(logp_theta: f64, logp_beta: f64, c_clip: f64) -> f64 {
    (logp_theta - logp_beta).exp().min(c_clip)
}

/// Loss and its gradient for a batch of terminal-step records.
///
/// Importance weights are read from the records and do not carry gradient.
pub fn loss_and_gradient(
    batch: &[RolloutRecord],
    policy: &PolicyParams,
    behavior: &PolicyParams,
    config: &TrainConfig,
) -> Result<(f64, PolicyParams)> {
    if batch.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = PolicyParams::zeros(policy.bins, policy.t_max);
    for r in batch {
        let coef = r.weight * r.standardized;
        loss += -coef * log_prob(policy, &r.state, r.action)? / n;
        loss += -config.eta * entropy(policy, &r.state) / n;
        loss += config.beta_kl * kl_divergence(policy, behavior, &r.state) / n;

        let g = grad_log_prob_row(policy, &r.state, r.action)?;
        let he = grad_entropy_row(policy, &r.state);
        let gk = grad_kl_row(policy, behavior, &r.state);
        let row = &mut grad.theta[g.row];
        for (j, v) in row.iter_mut().enumerate() {
            *v += (-coef * g.values[j] - config.eta * he.values[j] + config.beta_kl * gk.values[j]) / n;
        }
    }
    Ok((loss, grad))
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub mean_kl: f64,
    pub pg_rate: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Sum of advantages within each group, largest magnitude over the batch.
    pub max_group_advantage_sum: f64,
    pub synced_after: bool,
}

/// Terminal-step record fields for one rollout, before advantages are known.
pub fn terminal_record(
    episode: &EpisodeResult,
    policy: &PolicyParams,
    behavior: &PolicyParams,
    probe_enabled: bool,
    c_clip: f64,
) -> Result<RolloutRecord> {
    let step = episode
        .terminal_step()
        .ok_or_else(|| Error::Contract(format!("episode {} has no steps", episode.case_id)))?;
    let state = featurize(step.p_before, step.t, step.probed_before, probe_enabled, policy);
    let logp_theta = log_prob(policy, &state, step.action)?;
    let logp_beta = log_prob(behavior, &state, step.action)?;
    Ok(RolloutRecord {
        advantage: 0.0,
        standardized: 0.0,
        state,
        action: step.action,
        logp_theta,
        logp_beta,
        weight: clipped_is_weight(logp_theta, logp_beta, c_clip),
        entropy: entropy(policy, &state),
        kl: kl_divergence(policy, behavior, &state),
    })
}

fn rollout_seed(train_seed: u64, step: usize, slot: usize, case_id: &str, k: usize) -> u64 {
    StreamKey::new(train_seed, "rollout")
        .num(step as u64)
        .num(slot as u64)
        .text(case_id)
        .num(k as u64)
        .seed64()
}

fn minibatch(n: usize, batch_size: usize, train_seed: u64, step: usize) -> Vec<usize> {
    let mut rng = StreamKey::new(train_seed, "batch").num(step as u64).stream();
    if batch_size <= n {
        sample(&mut rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Trains a policy from zero-initialised logits. Rollouts must use the proxy evidence source.
pub fn train(
    dataset: &[Case],
    config: &TrainConfig,
    loop_config: &LoopConfig,
    workers: usize,
) -> Result<(PolicyParams, Vec<TrainLogEntry>)> {
    config.validate()?;
    loop_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if !matches!(loop_config.evidence, EvidenceSource::Proxy { .. }) {
        return Err(Error::Config("training rollouts must use the proxy evidence source".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let mut theta = PolicyParams::zeros(DEFAULT_BINS, loop_config.t_max);
    let mut behavior = theta.clone();
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let indices = minibatch(dataset.len(), config.batch_size, config.seed, step);
        let jobs: Vec<(usize, usize, usize)> = indices
            .iter()
            .enumerate()
            .flat_map(|(slot, &i)| (0..config.k).map(move |k| (slot, i, k)))
            .collect();
        let episodes: Vec<EpisodeResult> = pool.install(|| {
            jobs.par_iter()
                .map(|&(slot, i, k)| {
                    let case = &dataset[i];
                    run_episode(case, &theta, loop_config, rollout_seed(config.seed, step, slot, &case.id, k))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut records = Vec::with_capacity(episodes.len());
        let mut rewards_all = Vec::with_capacity(episodes.len());
        let mut max_group_sum: f64 = 0.0;
        for (group, chunk) in episodes.chunks(config.k).enumerate() {
            let case = &dataset[indices[group]];
            let rewards: Vec<f64> = chunk.iter().map(|e| terminal_reward(e.p_final, case.label)).collect();
            let adv = self_critical_advantages(&rewards)?;
            max_group_sum = max_group_sum.max(adv.iter().sum::<f64>().abs());
            for (e, a) in chunk.iter().zip(adv) {
                let mut r = terminal_record(e, &theta, &behavior, loop_config.evidence.probe_enabled(), config.c_clip)?;
                r.advantage = a;
                records.push(r);
            }
            rewards_all.extend(rewards);
        }
        let standardized = standardize(&records.iter().map(|r| r.advantage).collect::<Vec<_>>());
        for (r, s) in records.iter_mut().zip(standardized) {
            r.standardized = s;
        }

        let (loss, grad) = loss_and_gradient(&records, &theta, &behavior, config)?;
        theta.add_scaled(&grad, -config.learning_rate);

        let synced = (step + 1) % config.sync_period == 0;
        if synced {
            behavior = theta.clone();
        }

        let n = records.len() as f64;
        log.push(TrainLogEntry {
            step,
            loss,
            mean_reward: rewards_all.iter().sum::<f64>() / n,
            mean_entropy: records.iter().map(|r| r.entropy).sum::<f64>() / n,
            mean_kl: records.iter().map(|r| r.kl).sum::<f64>() / n,
            pg_rate: episodes.iter().filter(|e| e.probed).count() as f64 / n,
            min_weight: records.iter().map(|r| r.weight).fold(f64::INFINITY, f64::min),
            max_weight: records.iter().map(|r| r.weight).fold(f64::NEG_INFINITY, f64::max),
            max_group_advantage_sum: max_group_sum,
            synced_after: synced,
        });
    }
    theta.validate()?;
    Ok((theta, log))
}
