//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown keys are rejected.
//! Every run echoes the fully resolved configuration, defaults included,
//! so a run can be repeated from that file and the dataset alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::belief::{CalibrationParams, FusionConfig};
use crate::environment::{Case, GenSpec};
use crate::episode::{EvidenceSource, FusionMode, LoopConfig, P0Source};
use crate::error::{Error, Result};
use crate::eval::{MaskTarget, RoiSource, Variant};
#[cfg(test)]
use crate::eval::DEFAULT_N_RANDOM;
use crate::kbcs::{Backend, KbcsConfig};
use crate::rl::TrainConfig;

/// Prefix for per-concept overlay temperatures, e.g. `overlay.temp.effusion = 1.4`.
pub const OVERLAY_TEMP_PREFIX: &str = "overlay.temp.";

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("variant", "Prior-Mix"),
    ("policy", ""),
    ("gen.width", "32"),
    ("gen.height", "32"),
    ("gen.noise", "1"),
    ("gen.amplitude", "0.8"),
    ("gen.roi_size", "6"),
    ("gen.pos_rate", "0.5"),
    ("gen.peaks", "1"),
    ("gen.prior_info", "3"),
    ("gen.score_scale", "1"),
    ("gen.concepts", "effusion"),
    ("gen.domain_tag", "source"),
    ("kbcs.backend", "fallback"),
    ("kbcs.window", "6"),
    ("kbcs.score_scale", "1"),
    ("kbcs.calibration", ""),
    ("fusion.alpha", "0.5"),
    ("fusion.gate_threshold", "0.1"),
    ("fusion.gamma", "2"),
    ("fusion.epsilon", "0.000001"),
    ("loop.t_max", "3"),
    ("loop.p0", "0.5"),
    ("loop.timing", "false"),
    ("train.k", "4"),
    ("train.c_clip", "2"),
    ("train.eta", "0.01"),
    ("train.beta_kl", "0.1"),
    ("train.learning_rate", "0.1"),
    ("train.batch_size", "16"),
    ("train.sync_period", "10"),
    ("train.steps", "300"),
    ("train.proxy_info", "3"),
    ("eval.n_random", "20"),
    ("eval.roi_source", "gt"),
    ("eval.intervention", "adopted"),
    ("eval.gate_taus", "0,0.02,0.05,0.1,0.2,0.5,1"),
    ("eval.t_max_list", "1,2,3,4"),
    ("overlay.fit_split", "100"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
        || key.strip_prefix(OVERLAY_TEMP_PREFIX).is_some_and(|c| !c.is_empty())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_known(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("invalid value '{raw}' for key '{key}'")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Config(format!("invalid list entry '{s}' for key '{key}'"))))
            .collect()
    }

    /// Every key with its effective value, one per line, sorted.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn variant(&self) -> Result<Variant> {
        self.raw("variant").parse()
    }

    pub fn gen_spec(&self) -> Result<GenSpec> {
        let spec = GenSpec {
            width: self.get("gen.width")?,
            height: self.get("gen.height")?,
            noise_sigma: self.get("gen.noise")?,
            signal_amplitude: self.get("gen.amplitude")?,
            roi_size: self.get("gen.roi_size")?,
            positive_rate: self.get("gen.pos_rate")?,
            n_peaks: self.get("gen.peaks")?,
            prior_informativeness: self.get("gen.prior_info")?,
            score_scale: self.get("gen.score_scale")?,
            concepts: self.list("gen.concepts")?,
            domain_tag: self.raw("gen.domain_tag").to_string(),
            seed: self.seed()?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn backend(&self) -> Result<Backend> {
        match self.raw("kbcs.backend") {
            "primary" => Ok(Backend::Primary),
            "fallback" => Ok(Backend::Fallback),
            other => Err(Error::Config(format!(
                "invalid value '{other}' for key 'kbcs.backend' (expected primary or fallback)"
            ))),
        }
    }

    /// KBCS config without calibrations.
    pub fn kbcs_base(&self) -> Result<KbcsConfig> {
        let cfg = KbcsConfig {
            backend: self.backend()?,
            window: self.get("kbcs.window")?,
            score_scale: self.get("kbcs.score_scale")?,
            calibrations: BTreeMap::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// KBCS config with calibrations from `kbcs.calibration`, or identity calibration for every concept in `cases` when unset.
    pub fn kbcs(&self, base_dir: &Path, cases: &[Case]) -> Result<KbcsConfig> {
        let base = self.kbcs_base()?;
        let path = self.raw("kbcs.calibration");
        let calibrations: Vec<CalibrationParams> = if path.is_empty() {
            let mut concepts: Vec<&str> = cases.iter().map(|c| c.concept.as_str()).collect();
            concepts.sort_unstable();
            concepts.dedup();
            concepts.into_iter().map(CalibrationParams::identity).collect()
        } else {
            let full = base_dir.join(path);
            serde_json::from_str(&std::fs::read_to_string(&full).map_err(|e| {
                Error::Config(format!("cannot read kbcs.calibration '{}': {e}", full.display()))
            })?)?
        };
        let cfg = base.with_calibrations(calibrations);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fusion(&self) -> Result<FusionConfig> {
        let f = FusionConfig {
            alpha: self.get("fusion.alpha")?,
            gate_threshold: self.get("fusion.gate_threshold")?,
            gamma: self.get("fusion.gamma")?,
            epsilon: self.get("fusion.epsilon")?,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn p0(&self, cases: &[Case]) -> Result<P0Source> {
        match self.raw("loop.p0") {
            "prevalence" => Ok(P0Source::prevalence_from(cases)),
            _ => Ok(P0Source::Fixed(self.get("loop.p0")?)),
        }
    }

    /// Base loop config (Prior-Mix) before a variant is applied.
    pub fn loop_base(&self, cases: &[Case]) -> Result<LoopConfig> {
        let cfg = LoopConfig {
            t_max: self.get("loop.t_max")?,
            fusion: self.fusion()?,
            evidence: EvidenceSource::Prior,
            fusion_mode: FusionMode::Mix,
            p0: self.p0(cases)?,
            record_timing: self.get("loop.timing")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            k: self.get("train.k")?,
            c_clip: self.get("train.c_clip")?,
            eta: self.get("train.eta")?,
            beta_kl: self.get("train.beta_kl")?,
            learning_rate: self.get("train.learning_rate")?,
            batch_size: self.get("train.batch_size")?,
            sync_period: self.get("train.sync_period")?,
            steps: self.get("train.steps")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn proxy_informativeness(&self) -> Result<f64> {
        let v: f64 = self.get("train.proxy_info")?;
        if !(v >= 0.0) {
            return Err(Error::Config("train.proxy_info must be >= 0".into()));
        }
        Ok(v)
    }

    pub fn n_random(&self) -> Result<usize> {
        self.get("eval.n_random")
    }

    pub fn roi_source(&self) -> Result<RoiSource> {
        self.raw("eval.roi_source").parse()
    }

    pub fn mask_target(&self) -> Result<MaskTarget> {
        match self.raw("eval.intervention") {
            "adopted" => Ok(MaskTarget::AdoptedRoi),
            "placebo" => Ok(MaskTarget::DisjointPlacebo),
            other => Err(Error::Config(format!(
                "invalid value '{other}' for key 'eval.intervention' (expected adopted or placebo)"
            ))),
        }
    }

    pub fn gate_taus(&self) -> Result<Vec<f64>> {
        self.list("eval.gate_taus")
    }

    pub fn t_max_list(&self) -> Result<Vec<usize>> {
        self.list("eval.t_max_list")
    }

    pub fn overlay_fit_split(&self) -> Result<usize> {
        self.get("overlay.fit_split")
    }

    pub fn overlay_temperatures(&self) -> Result<BTreeMap<String, f64>> {
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(OVERLAY_TEMP_PREFIX).map(|c| (c, v)))
            .map(|(c, v)| {
                let t: f64 = v
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid value '{v}' for key '{OVERLAY_TEMP_PREFIX}{c}'")))?;
                if !(t > 0.0) {
                    return Err(Error::Config(format!("overlay temperature for '{c}' must be positive")));
                }
                Ok((c.to_string(), t))
            })
            .collect()
    }
}
