//! Scalar belief math.
//!
//! Probabilities are clamped to `[EPS, 1 - EPS]` before every log-odds
//! transform, so `logit` never returns an infinity. Fusion, sharpening and
//! the temperature overlay all work on a single positive-class probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied before every logit.
pub const EPS: f64 = 1e-6;

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Belief(f64);

impl Belief {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(Self(p))
        } else {
            Err(Error::Contract(format!("belief {p} outside [0, 1]")))
        }
    }

    /// Neutral belief, 0.5.
    pub const fn neutral() -> Self {
        Self(0.5)
    }

    pub fn p(self) -> f64 {
        self.0
    }

    pub fn log_odds(self) -> f64 {
        logit(self.0)
    }
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// `ln(p / (1 - p))` after clamping.
pub fn logit(p: f64) -> f64 {
    let p = clamp_probability(p);
    (p / (1.0 - p)).ln()
}

/// Logistic function. Non-finite input is rejected.
pub fn sigmoid(m: f64) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::InvalidScore(m));
    }
    Ok(sigmoid_unchecked(m))
}

pub(crate) fn sigmoid_unchecked(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Per-concept temperature and bias applied in log-odds space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub concept: String,
    pub temperature: f64,
    pub bias: f64,
}

impl CalibrationParams {
    pub fn identity(concept: impl Into<String>) -> Self {
        Self {
            concept: concept.into(),
            temperature: 1.0,
            bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "calibration temperature for '{}' must be positive, got {}",
                self.concept, self.temperature
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::Config(format!(
                "calibration bias for '{}' must be finite",
                self.concept
            )));
        }
        Ok(())
    }
}

/// `sigmoid(m_raw / T_c + b_c)`.
pub fn apply_calibration(m_raw: f64, params: &CalibrationParams) -> Result<f64> {
    params.validate()?;
    sigmoid(m_raw / params.temperature + params.bias)
}

const FIT_ITERATIONS: usize = 500;
const FIT_LEARNING_RATE: f64 = 0.1;

/// Fits `(T_c, b_c)` by gradient descent on the mean negative log-likelihood.
///
/// Plain full-batch descent over `(1/T_c, b_c)` from `(1, 0)` with a fixed
/// step count and learning rate, so the result is a pure function of `pairs`.
pub fn fit_calibration(pairs: &[(f64, u8)], concept: &str) -> Result<CalibrationParams> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let positives = pairs.iter().filter(|(_, g)| *g == 1).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::DegenerateFit(format!(
            "concept '{concept}' has a single label class"
        )));
    }
    if let Some((m, _)) = pairs.iter().find(|(m, _)| !m.is_finite()) {
        return Err(Error::InvalidScore(*m));
    }

    let n = pairs.len() as f64;
    let (mut inv_t, mut bias) = (1.0, 0.0);
    for _ in 0..FIT_ITERATIONS {
        let (mut gu, mut gb) = (0.0, 0.0);
        for &(m, g) in pairs {
            let r = sigmoid_unchecked(inv_t * m + bias) - f64::from(g);
            gu += r * m;
            gb += r;
        }
        inv_t -= FIT_LEARNING_RATE * gu / n;
        bias -= FIT_LEARNING_RATE * gb / n;
    }

    if !(inv_t > 0.0) || !inv_t.is_finite() {
        return Err(Error::DegenerateFit(format!(
            "concept '{concept}': scores are not positively associated with labels (1/T = {inv_t})"
        )));
    }
    Ok(CalibrationParams {
        concept: concept.to_string(),
        temperature: 1.0 / inv_t,
        bias,
    })
}

/// Fusion hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    pub gate_threshold: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gate_threshold: 0.1,
            gamma: 2.0,
            epsilon: EPS,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("fusion.alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.gate_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "fusion.gate_threshold must be >= 0, got {}",
                self.gate_threshold
            )));
        }
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("fusion.gamma must be > 1, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("fusion.epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// `(1 - alpha) * p + alpha * p_evidence`.
pub fn fuse_mix(p: Belief, p_evidence: f64, alpha: f64) -> Belief {
    let mixed = (1.0 - alpha) * p.0 + alpha * p_evidence;
    // keep the result inside the input interval despite rounding
    let (lo, hi) = if p.0 <= p_evidence { (p.0, p_evidence) } else { (p_evidence, p.0) };
    Belief(mixed.clamp(lo, hi))
}

/// Adopts evidence via [`fuse_mix`] iff it differs from the belief by at least `gate_threshold`.
pub fn fuse_gate(p: Belief, p_evidence: f64, alpha: f64, gate_threshold: f64) -> (Belief, bool) {
    if (p_evidence - p.0).abs() >= gate_threshold {
        (fuse_mix(p, p_evidence, alpha), true)
    } else {
        (p, false)
    }
}

/// `sigmoid(gamma * logit(p))`, pushing the belief away from 0.5.
pub fn sharpen(p: Belief, gamma: f64) -> Result<Belief> {
    if !(gamma > 1.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("sharpening gamma must be > 1, got {gamma}")));
    }
    Ok(Belief(sigmoid_unchecked(gamma * logit(p.0))))
}

/// Post-hoc `sigmoid(logit(p) / T)`.
pub fn temperature_overlay(p: Belief, temperature: f64) -> Result<Belief> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "overlay temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(p);
    }
    Ok(Belief(sigmoid_unchecked(logit(p.0) / temperature)))
}

/// Fits a single overlay temperature by minimising the negative log-likelihood
/// of `(p, label)` pairs over a log-spaced grid of temperatures in `[0.05, 20]`.
pub fn fit_overlay_temperature(pairs: &[(f64, u8)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::DegenerateFit("no pairs for overlay fit".into()));
    }
    const GRID: usize = 2001;
    let (lo, hi) = (0.05f64.ln(), 20f64.ln());
    let nll = |t: f64| -> f64 {
        pairs
            .iter()
            .map(|&(p, g)| {
                let q = clamp_probability(sigmoid_unchecked(logit(p) / t));
                if g == 1 { -q.ln() } else { -(1.0 - q).ln() }
            })
            .sum::<f64>()
    };
    let mut best = (f64::INFINITY, 1.0);
    for i in 0..GRID {
        let t = (lo + (hi - lo) * i as f64 / (GRID - 1) as f64).exp();
        let loss = nll(t);
        if loss < best.0 {
            best = (loss, t);
        }
    }
    Ok(best.1)
}
