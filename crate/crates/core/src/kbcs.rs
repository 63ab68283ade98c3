//! Knowledge-based confidence scorer.
//!
//! Both backends score an image by the peak of its box-filter heatmap. The
//! primary backend returns only the calibrated global score; the fallback
//! backend also reports the peak window as the ROI. Every call carries a
//! provenance record so the score can be recomputed from the trace alone.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::belief::{apply_calibration, sigmoid, CalibrationParams};
use crate::environment::{Case, Image, Roi};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Primary,
    Fallback,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Primary => "primary",
            Backend::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbcsConfig {
    pub backend: Backend,
    pub window: usize,
    pub score_scale: f64,
    /// Per-concept calibration; a concept without an entry is not covered.
    pub calibrations: BTreeMap<String, CalibrationParams>,
}

impl Default for KbcsConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Fallback,
            window: 6,
            score_scale: 1.0,
            calibrations: BTreeMap::new(),
        }
    }
}

/// The part of the config that identifies the scoring function.
#[derive(Serialize)]
struct BackendIdentity<'a> {
    backend: &'a str,
    window: usize,
    score_scale: f64,
}

impl KbcsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("kbcs.window must be >= 1".into()));
        }
        if !(self.score_scale > 0.0) || !self.score_scale.is_finite() {
            return Err(Error::Config(format!(
                "kbcs.score_scale must be positive, got {}",
                self.score_scale
            )));
        }
        for params in self.calibrations.values() {
            params.validate()?;
        }
        Ok(())
    }

    pub fn with_calibrations(mut self, calibrations: impl IntoIterator<Item = CalibrationParams>) -> Self {
        for c in calibrations {
            self.calibrations.insert(c.concept.clone(), c);
        }
        self
    }

    pub fn identity_json(&self) -> String {
        serde_json::to_string(&BackendIdentity {
            backend: self.backend.name(),
            window: self.window,
            score_scale: self.score_scale,
        })
        .expect("backend identity serializes")
    }

    /// First 64 bits of SHA-256 over [`KbcsConfig::identity_json`], as hex.
    pub fn config_hash(&self) -> String {
        config_hash_of(&self.identity_json())
    }
}

pub fn config_hash_of(identity_json: &str) -> String {
    let digest = Sha256::digest(identity_json.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_name: String,
    pub backend_config: String,
    pub backend_config_hash: String,
    pub calibration: CalibrationParams,
    pub window: usize,
    pub call_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub roi: Option<Roi>,
    pub p_evidence: f64,
    pub m_raw: f64,
    pub provenance: Provenance,
}

impl EvidenceReport {
    /// Recomputes `p_evidence` from the logged raw score and calibration.
    pub fn recompute(&self) -> Result<f64> {
        apply_calibration(self.m_raw, &self.provenance.calibration)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Mean of every `window`x`window` patch, indexed by its top-left corner.
///
/// Each patch is summed directly in row-major order, so two patches with
/// identical contents always produce bit-identical values.
pub fn box_heatmap(image: &Image, window: usize) -> Result<Heatmap> {
    if window == 0 || window > image.width.min(image.height) {
        return Err(Error::Bounds(format!(
            "window {window} does not fit a {}x{} image",
            image.width, image.height
        )));
    }
    let out_w = image.width - window + 1;
    let out_h = image.height - window + 1;
    let area = (window * window) as f64;
    let mut values = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let mut sum = 0.0;
            for dy in 0..window {
                let row = (y + dy) * image.width + x;
                for v in &image.pixels[row..row + window] {
                    sum += v;
                }
            }
            values.push(sum / area);
        }
    }
    Ok(Heatmap { width: out_w, height: out_h, values })
}

/// Argmax window of the heatmap; ties go to the smallest `(y, x)`.
pub fn select_peak_roi(heatmap: &Heatmap, window: usize) -> (Roi, f64) {
    let mut best = (0usize, heatmap.values[0]);
    for (i, &v) in heatmap.values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    let (x, y) = (best.0 % heatmap.width, best.0 / heatmap.width);
    (Roi::new(x, y, window, window), best.1)
}

/// Scores `image` for `concept`.
pub fn probe(image: &Image, concept: &str, config: &KbcsConfig, call_seed: u64) -> Result<EvidenceReport> {
    config.validate()?;
    let calibration = config
        .calibrations
        .get(concept)
        .ok_or_else(|| Error::Tool(format!("no calibration for concept '{concept}'")))?
        .clone();
    let heatmap = box_heatmap(image, config.window)?;
    let (roi, peak) = select_peak_roi(&heatmap, config.window);
    let m_raw = config.score_scale * peak;
    let p_evidence = apply_calibration(m_raw, &calibration)?;
    let roi = match config.backend {
        Backend::Primary => None,
        Backend::Fallback => Some(roi),
    };
    let backend_config = config.identity_json();
    Ok(EvidenceReport {
        roi,
        p_evidence,
        m_raw,
        provenance: Provenance {
            backend_name: config.backend.name().to_string(),
            backend_config_hash: config_hash_of(&backend_config),
            backend_config,
            calibration,
            window: config.window,
            call_seed,
        },
    })
}

/// Raw score `m_raw` for calibration fitting, without any calibration applied.
pub fn raw_score(image: &Image, config: &KbcsConfig) -> Result<f64> {
    let heatmap = box_heatmap(image, config.window)?;
    Ok(config.score_scale * select_peak_roi(&heatmap, config.window).1)
}

/// Fits one calibration per concept from raw probe scores on `cases`.
pub fn fit_calibrations(cases: &[Case], config: &KbcsConfig) -> Result<Vec<CalibrationParams>> {
    let mut by_concept: BTreeMap<&str, Vec<(f64, u8)>> = BTreeMap::new();
    for case in cases {
        by_concept
            .entry(case.concept.as_str())
            .or_default()
            .push((raw_score(&case.image, config)?, case.label));
    }
    by_concept
        .into_iter()
        .map(|(concept, pairs)| crate::belief::fit_calibration(&pairs, concept))
        .collect()
}

/// Training-time stand-in for [`probe`]: `sigmoid(informativeness * (2g - 1) + N(0, 1))`.
pub fn proxy_score(case: &Case, informativeness: f64, rng: &mut Stream) -> Result<f64> {
    if !(informativeness >= 0.0) {
        return Err(Error::Config(format!(
            "proxy informativeness must be >= 0, got {informativeness}"
        )));
    }
    let z: f64 = rng.sample(StandardNormal);
    let sign = if case.is_positive() { 1.0 } else { -1.0 };
    sigmoid(informativeness * sign + z)
}
