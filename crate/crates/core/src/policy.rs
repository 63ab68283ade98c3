//! Tabular log-linear action policy.
//!
//! One row of four logits per `(belief bin, step, probed)` feature. Masked
//! actions are represented as `None` and never enter the normalisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const N_ACTIONS: usize = 4;
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    ProbeGround,
    Claim,
    Abstain,
    Stop,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::ProbeGround, Action::Claim, Action::Abstain, Action::Stop];

    pub fn index(self) -> usize {
        match self {
            Action::ProbeGround => 0,
            Action::Claim => 1,
            Action::Abstain => 2,
            Action::Stop => 3,
        }
    }

    pub fn is_terminal(self) -> bool {
        self != Action::ProbeGround
    }
}

/// Policy features for one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub belief_bin: usize,
    /// 1-based step, clamped to the policy's `t_max`.
    pub step: usize,
    pub probed: bool,
    /// False for the no-probe baseline, where ProbeGround is masked throughout.
    pub probe_enabled: bool,
}

impl AgentState {
    pub fn is_valid(&self, action: Action) -> bool {
        match action {
            Action::ProbeGround => self.probe_enabled,
            Action::Claim => self.probed,
            Action::Abstain | Action::Stop => true,
        }
    }
}

/// Bins `p` and clamps `t` into the feature space of `params`.
pub fn featurize(p: f64, t: usize, probed: bool, probe_enabled: bool, params: &PolicyParams) -> AgentState {
    let bins = params.bins;
    let raw = (p * bins as f64).floor();
    let belief_bin = if raw.is_nan() || raw < 0.0 { 0 } else { (raw as usize).min(bins - 1) };
    AgentState {
        belief_bin,
        step: t.clamp(1, params.t_max),
        probed,
        probe_enabled,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub bins: usize,
    pub t_max: usize,
    /// `bins * t_max * 2` rows of per-action logits.
    pub theta: Vec<[f64; N_ACTIONS]>,
}

impl PolicyParams {
    pub fn zeros(bins: usize, t_max: usize) -> Self {
        Self { bins, t_max, theta: vec![[0.0; N_ACTIONS]; bins * t_max * 2] }
    }

    pub fn n_rows(&self) -> usize {
        self.bins * self.t_max * 2
    }

    pub fn row_index(&self, state: &AgentState) -> usize {
        ((state.belief_bin * self.t_max) + (state.step - 1)) * 2 + usize::from(state.probed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.t_max == 0 {
            return Err(Error::Config("policy bins and t_max must be >= 1".into()));
        }
        if self.theta.len() != self.n_rows() {
            return Err(Error::Config(format!(
                "policy table has {} rows, expected {}",
                self.theta.len(),
                self.n_rows()
            )));
        }
        if self.theta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("policy table contains non-finite entries".into()));
        }
        Ok(())
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (row, g) in self.theta.iter_mut().zip(&other.theta) {
            for (v, d) in row.iter_mut().zip(g) {
                *v += scale * d;
            }
        }
    }
}

/// Four logits; `None` marks a masked action.
pub type MaskedLogits = [Option<f64>; N_ACTIONS];

pub fn masked_logits(params: &PolicyParams, state: &AgentState) -> MaskedLogits {
    let row = &params.theta[params.row_index(state)];
    let mut out = [None; N_ACTIONS];
    for a in Action::ALL {
        if state.is_valid(a) {
            out[a.index()] = Some(row[a.index()]);
        }
    }
    out
}

/// Softmax over the valid entries; masked entries get probability 0.
pub fn probabilities(logits: &MaskedLogits) -> [f64; N_ACTIONS] {
    let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut probs = [0.0; N_ACTIONS];
    let mut total = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        if let Some(v) = l {
            *p = (v - max).exp();
            total += *p;
        }
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    probs
}

/// Categorical draw over the valid actions.
///
/// Falls back to a uniform draw over valid actions when any valid logit is
/// non-finite, and to `Stop` when nothing is valid.
pub fn safe_sample(logits: &MaskedLogits, rng: &mut Stream) -> Action {
    let valid: Vec<Action> = Action::ALL.into_iter().filter(|a| logits[a.index()].is_some()).collect();
    if valid.is_empty() {
        return Action::Stop;
    }
    let u: f64 = rng.gen();
    let finite = valid.iter().all(|a| logits[a.index()].is_some_and(f64::is_finite));
    if finite {
        let probs = probabilities(logits);
        if probs.iter().all(|p| p.is_finite()) {
            let mut acc = 0.0;
            for &a in &valid {
                acc += probs[a.index()];
                if u < acc {
                    return a;
                }
            }
            return *valid.last().expect("non-empty");
        }
    }
    let k = ((u * valid.len() as f64) as usize).min(valid.len() - 1);
    valid[k]
}

pub fn log_probabilities(logits: &MaskedLogits) -> [Option<f64>; N_ACTIONS] {
    let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_z = max
        + logits
            .iter()
            .flatten()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits.map(|l| l.map(|v| v - log_z))
}

pub fn log_prob(params: &PolicyParams, state: &AgentState, action: Action) -> Result<f64> {
    log_probabilities(&masked_logits(params, state))[action.index()]
        .ok_or_else(|| Error::Contract(format!("{action:?} is not valid in {state:?}")))
}

pub fn entropy(params: &PolicyParams, state: &AgentState) -> f64 {
    let logits = masked_logits(params, state);
    let probs = probabilities(&logits);
    let logp = log_probabilities(&logits);
    let h: f64 = probs
        .iter()
        .zip(&logp)
        .filter_map(|(p, l)| l.map(|l| if *p > 0.0 { -p * l } else { 0.0 }))
        .sum();
    h.max(0.0)
}

/// `KL(pi_theta || pi_beta)` over the valid actions of `state`.
pub fn kl_divergence(theta: &PolicyParams, beta: &PolicyParams, state: &AgentState) -> f64 {
    let lt = masked_logits(theta, state);
    let pt = probabilities(&lt);
    let logpt = log_probabilities(&lt);
    let logpb = log_probabilities(&masked_logits(beta, state));
    let kl: f64 = (0..N_ACTIONS)
        .filter_map(|i| match (logpt[i], logpb[i]) {
            (Some(a), Some(b)) if pt[i] > 0.0 => Some(pt[i] * (a - b)),
            _ => None,
        })
        .sum();
    kl.max(0.0)
}

/// Gradient with respect to one row's logits, as a dense table of the same shape as `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradient {
    pub row: usize,
    pub values: [f64; N_ACTIONS],
}

impl RowGradient {
    pub fn into_table(self, params: &PolicyParams) -> PolicyParams {
        let mut table = PolicyParams::zeros(params.bins, params.t_max);
        table.theta[self.row] = self.values;
        table
    }
}

/// `d log pi(a|s) / d theta[row, a'] = 1{a' = a} - pi(a'|s)` on valid entries, zero elsewhere.
pub fn grad_log_prob_row(params: &PolicyParams, state: &AgentState, action: Action) -> Result<RowGradient> {
    if !state.is_valid(action) {
        return Err(Error::Contract(format!("{action:?} is not valid in {state:?}")));
    }
    let logits = masked_logits(params, state);
    let probs = probabilities(&logits);
    let mut values = [0.0; N_ACTIONS];
    for a in Action::ALL {
        if logits[a.index()].is_some() {
            values[a.index()] = f64::from(u8::from(a == action)) - probs[a.index()];
        }
    }
    Ok(RowGradient { row: params.row_index(state), values })
}

pub fn grad_log_prob(params: &PolicyParams, state: &AgentState, action: Action) -> Result<PolicyParams> {
    Ok(grad_log_prob_row(params, state, action)?.into_table(params))
}

/// `dH / d theta_b = -p_b (log p_b + H)` on valid entries.
pub fn grad_entropy_row(params: &PolicyParams, state: &AgentState) -> RowGradient {
    let logits = masked_logits(params, state);
    let probs = probabilities(&logits);
    let logp = log_probabilities(&logits);
    let h = entropy(params, state);
    let mut values = [0.0; N_ACTIONS];
    for i in 0..N_ACTIONS {
        if let Some(l) = logp[i] {
            values[i] = -probs[i] * (l + h);
        }
    }
    RowGradient { row: params.row_index(state), values }
}

/// `dKL / d theta_b = p_b (log p_b - log q_b - KL)` on valid entries; `beta` is constant.
pub fn grad_kl_row(theta: &PolicyParams, beta: &PolicyParams, state: &AgentState) -> RowGradient {
    let lt = masked_logits(theta, state);
    let pt = probabilities(&lt);
    let logpt = log_probabilities(&lt);
    let logpb = log_probabilities(&masked_logits(beta, state));
    let kl: f64 = (0..N_ACTIONS)
        .filter_map(|i| match (logpt[i], logpb[i]) {
            (Some(a), Some(b)) => Some(pt[i] * (a - b)),
            _ => None,
        })
        .sum();
    let mut values = [0.0; N_ACTIONS];
    for i in 0..N_ACTIONS {
        if let (Some(a), Some(b)) = (logpt[i], logpb[i]) {
            values[i] = pt[i] * (a - b - kl);
        }
    }
    RowGradient { row: theta.row_index(state), values }
}
