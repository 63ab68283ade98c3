//! Evaluation protocol: calibration metrics, behavioural rates, the
//! agent-level masking intervention, tool-level occlusion analysis, sweeps
//! and the post-hoc temperature overlay.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::belief::{fit_overlay_temperature, temperature_overlay, Belief};
use crate::environment::{mask_roi, random_roi, Case, Roi};
use crate::episode::{run_batch, run_episode, EpisodeResult, EvidenceSource, FusionMode, LoopConfig};
use crate::error::{Error, Result};
use crate::kbcs::{probe, Backend, KbcsConfig};
use crate::policy::{Action, PolicyParams};
use crate::rng::StreamKey;

pub const ECE_BINS: usize = 15;
pub const DEFAULT_N_RANDOM: usize = 20;
/// Reported for Cohen's d when the pooled spread is zero but the means differ.
pub const COHENS_D_SENTINEL: f64 = 1e9;
const MASK_FILL: f64 = 0.0;
const PLACEBO_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub brier: f64,
    pub ece: f64,
    pub pg_rate: f64,
    pub adoption_rate: f64,
    pub avg_steps: f64,
    pub mean_wall_ms: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_index: usize,
    pub mean_confidence: f64,
    pub empirical_accuracy: f64,
    pub count: usize,
}

fn check_pairs(preds: &[f64], labels: &[u8]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Contract("metrics need at least one prediction".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean squared error between predictions and 0/1 labels.
pub fn brier(preds: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, g)| (p - f64::from(*g)).powi(2))
        .sum();
    Ok(total / preds.len() as f64)
}

/// Equal-width bins over the predicted positive probability; `p = 1` lands in the last bin.
pub fn reliability_bins(preds: &[f64], labels: &[u8], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_pairs(preds, labels)?;
    if n_bins == 0 {
        return Err(Error::Contract("need at least one bin".into()));
    }
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for (&p, &g) in preds.iter().zip(labels) {
        let b = ((p * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        sums[b].0 += p;
        sums[b].1 += f64::from(g);
        sums[b].2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (conf, acc, count))| {
            let (mean_confidence, empirical_accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (conf / count as f64, acc / count as f64)
            };
            ReliabilityBin { bin_index: i, mean_confidence, empirical_accuracy, count }
        })
        .collect())
}

/// Count-weighted mean gap between confidence and accuracy over non-empty bins.
pub fn ece(bins: &[ReliabilityBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.mean_confidence - b.empirical_accuracy).abs())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehavioralRates {
    pub pg_rate: f64,
    pub adoption_rate: f64,
    pub avg_steps: f64,
    pub mean_wall_ms: f64,
}

pub fn behavioral_rates(episodes: &[EpisodeResult]) -> Result<BehavioralRates> {
    if episodes.is_empty() {
        return Err(Error::Contract("behavioral rates over zero episodes".into()));
    }
    let n = episodes.len() as f64;
    let probed = episodes
        .iter()
        .filter(|e| e.steps.iter().any(|s| s.action == Action::ProbeGround))
        .count();
    let adopted = episodes.iter().filter(|e| e.adopted()).count();
    Ok(BehavioralRates {
        pg_rate: probed as f64 / n,
        adoption_rate: adopted as f64 / n,
        avg_steps: episodes.iter().map(|e| e.steps.len() as f64).sum::<f64>() / n,
        mean_wall_ms: episodes.iter().map(|e| e.wall_ms).sum::<f64>() / n,
    })
}

pub fn metrics_from(episodes: &[EpisodeResult]) -> Result<(Metrics, Vec<ReliabilityBin>)> {
    let preds: Vec<f64> = episodes.iter().map(|e| e.p_final).collect();
    let labels: Vec<u8> = episodes.iter().map(|e| e.label).collect();
    metrics_with_preds(episodes, &preds, &labels)
}

fn metrics_with_preds(
    episodes: &[EpisodeResult],
    preds: &[f64],
    labels: &[u8],
) -> Result<(Metrics, Vec<ReliabilityBin>)> {
    let rates = behavioral_rates(episodes)?;
    let bins = reliability_bins(preds, labels, ECE_BINS)?;
    Ok((
        Metrics {
            brier: brier(preds, labels)?,
            ece: ece(&bins),
            pg_rate: rates.pg_rate,
            adoption_rate: rates.adoption_rate,
            avg_steps: rates.avg_steps,
            mean_wall_ms: rates.mean_wall_ms,
            n: episodes.len(),
        },
        bins,
    ))
}

/// Evidence source and fusion combination under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "noP&G")]
    NoProbe,
    #[serde(rename = "Prior-Mix")]
    PriorMix,
    #[serde(rename = "KBCS-Mix")]
    KbcsMix,
    #[serde(rename = "KBCS-Gate")]
    KbcsGate,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoProbe, Variant::PriorMix, Variant::KbcsMix, Variant::KbcsGate];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoProbe => "noP&G",
            Variant::PriorMix => "Prior-Mix",
            Variant::KbcsMix => "KBCS-Mix",
            Variant::KbcsGate => "KBCS-Gate",
        }
    }

    /// Loop config for this variant; everything but source and fusion mode comes from `base`.
    pub fn loop_config(self, base: &LoopConfig, kbcs: &KbcsConfig) -> LoopConfig {
        let (evidence, fusion_mode) = match self {
            Variant::NoProbe => (EvidenceSource::Disabled, FusionMode::Mix),
            Variant::PriorMix => (EvidenceSource::Prior, FusionMode::Mix),
            Variant::KbcsMix => (EvidenceSource::Kbcs(kbcs.clone()), FusionMode::Mix),
            Variant::KbcsGate => (EvidenceSource::Kbcs(kbcs.clone()), FusionMode::Gate),
        };
        LoopConfig { evidence, fusion_mode, ..base.clone() }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "nopg" | "noprobe" => Ok(Variant::NoProbe),
            "priormix" => Ok(Variant::PriorMix),
            "kbcsmix" => Ok(Variant::KbcsMix),
            "kbcsgate" => Ok(Variant::KbcsGate),
            _ => Err(Error::Config(format!(
                "unknown variant '{s}' (expected noP&G, Prior-Mix, KBCS-Mix or KBCS-Gate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub bins: Vec<ReliabilityBin>,
    pub traces: Vec<EpisodeResult>,
}

/// Runs every case once under `config` and scores the final beliefs.
pub fn evaluate(
    dataset: &[Case],
    policy: &PolicyParams,
    config: &LoopConfig,
    seed: u64,
    workers: usize,
) -> Result<Evaluation> {
    let traces = run_batch(dataset, policy, config, seed, workers)?;
    let (metrics, bins) = metrics_from(&traces)?;
    Ok(Evaluation { metrics, bins, traces })
}

/// Which region the intervention masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    /// The ROI the agent adopted.
    AdoptedRoi,
    /// A same-size random region disjoint from the adopted ROI and any planted ROI.
    DisjointPlacebo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub target: MaskTarget,
    pub cohort_size: usize,
    /// Adopted episodes whose evidence carried no ROI; excluded from the cohort.
    pub roi_less_adoptions: usize,
    pub brier_before: Option<f64>,
    pub brier_after: Option<f64>,
    pub delta_brier: Option<f64>,
    pub ece_before: Option<f64>,
    pub ece_after: Option<f64>,
    pub delta_ece: Option<f64>,
    pub cohort_ids: Vec<String>,
}

fn placebo_roi(case: &Case, adopted: &Roi, seed: u64) -> Option<Roi> {
    let mut rng = StreamKey::new(seed, "placebo").text(&case.id).stream();
    for _ in 0..PLACEBO_ATTEMPTS {
        let r = random_roi(case.image.width, case.image.height, adopted.w, adopted.h, &mut rng);
        let clear_of_gt = case.gt_roi.is_none_or(|g| !g.intersects(&r));
        if !r.intersects(adopted) && clear_of_gt {
            return Some(r);
        }
    }
    None
}

/// Re-runs the adopted cohort with the same seeds on masked images.
pub fn intervene(
    dataset: &[Case],
    policy: &PolicyParams,
    config: &LoopConfig,
    seed: u64,
    workers: usize,
    target: MaskTarget,
) -> Result<InterventionReport> {
    let before = run_batch(dataset, policy, config, seed, workers)?;
    let mut cohort_cases = Vec::new();
    let mut cohort_before = Vec::new();
    let mut roi_less = 0;
    for (case, episode) in dataset.iter().zip(&before) {
        if !episode.adopted() {
            continue;
        }
        let Some(roi) = episode.adopted_roi() else {
            roi_less += 1;
            continue;
        };
        let mask = match target {
            MaskTarget::AdoptedRoi => Some(roi),
            MaskTarget::DisjointPlacebo => {
                let r = placebo_roi(case, &roi, seed);
                if r.is_none() {
                    log::warn!("no disjoint placebo region for case {}; leaving it unmasked", case.id);
                }
                r
            }
        };
        let mut masked = case.clone();
        if let Some(r) = mask {
            masked.image = mask_roi(&case.image, &r, MASK_FILL)?;
        }
        cohort_cases.push(masked);
        cohort_before.push(episode.clone());
    }

    let mut report = InterventionReport {
        target,
        cohort_size: cohort_cases.len(),
        roi_less_adoptions: roi_less,
        brier_before: None,
        brier_after: None,
        delta_brier: None,
        ece_before: None,
        ece_after: None,
        delta_ece: None,
        cohort_ids: cohort_cases.iter().map(|c| c.id.clone()).collect(),
    };
    if cohort_cases.is_empty() {
        return Ok(report);
    }

    let after: Vec<EpisodeResult> = cohort_cases
        .iter()
        .zip(&cohort_before)
        .map(|(c, e)| run_episode(c, policy, config, e.seed))
        .collect::<Result<_>>()?;
    let (m_before, _) = metrics_from(&cohort_before)?;
    let (m_after, _) = metrics_from(&after)?;
    report.brier_before = Some(m_before.brier);
    report.brier_after = Some(m_after.brier);
    report.delta_brier = Some(m_after.brier - m_before.brier);
    report.ece_before = Some(m_before.ece);
    report.ece_after = Some(m_after.ece);
    report.delta_ece = Some(m_after.ece - m_before.ece);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSource {
    Gt,
    Pred,
}

impl FromStr for RoiSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gt" => Ok(RoiSource::Gt),
            "pred" => Ok(RoiSource::Pred),
            _ => Err(Error::Config(format!("unknown ROI source '{s}' (expected gt or pred)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionReport {
    pub roi_source: RoiSource,
    pub real_drop_mean: f64,
    pub rand_drop_mean: f64,
    pub diff: f64,
    pub cohens_d: f64,
    pub n_cases: usize,
    pub n_random: usize,
    pub skipped: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Standardised mean difference with the pooled sample standard deviation.
pub fn cohens_d(real: &[f64], rand: &[f64]) -> f64 {
    if real.is_empty() || rand.is_empty() {
        return 0.0;
    }
    let diff = mean(real) - mean(rand);
    let dof = (real.len() + rand.len()) as f64 - 2.0;
    let pooled = if dof > 0.0 {
        (((real.len() - 1) as f64 * sample_var(real) + (rand.len() - 1) as f64 * sample_var(rand)) / dof).sqrt()
    } else {
        0.0
    };
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        log::warn!("zero pooled standard deviation with mean difference {diff}; reporting sentinel");
        COHENS_D_SENTINEL.copysign(diff)
    }
}

/// Tool-level occlusion analysis: score drop when masking the source ROI versus random same-size ROIs.
pub fn occlusion_drop(
    dataset: &[Case],
    kbcs: &KbcsConfig,
    roi_source: RoiSource,
    n_random: usize,
    seed: u64,
) -> Result<OcclusionReport> {
    if roi_source == RoiSource::Pred && kbcs.backend != Backend::Fallback {
        return Err(Error::Config("predicted-ROI occlusion needs the fallback backend".into()));
    }
    let (mut real, mut rand) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for case in dataset {
        let base = probe(&case.image, &case.concept, kbcs, 0)?;
        let roi = match roi_source {
            RoiSource::Gt => match case.gt_roi {
                Some(r) => r,
                None => {
                    skipped += 1;
                    continue;
                }
            },
            RoiSource::Pred => base.roi.expect("fallback backend reports an ROI"),
        };
        let s0 = base.p_evidence;
        let masked = mask_roi(&case.image, &roi, MASK_FILL)?;
        real.push(s0 - probe(&masked, &case.concept, kbcs, 0)?.p_evidence);

        let mut rng = StreamKey::new(seed, "occlusion-random").text(&case.id).stream();
        let mut drops = Vec::with_capacity(n_random);
        for _ in 0..n_random {
            let r = random_roi(case.image.width, case.image.height, roi.w, roi.h, &mut rng);
            let m = mask_roi(&case.image, &r, MASK_FILL)?;
            drops.push(s0 - probe(&m, &case.concept, kbcs, 0)?.p_evidence);
        }
        rand.push(if drops.is_empty() { 0.0 } else { mean(&drops) });
    }
    if skipped > 0 {
        log::warn!("occlusion: skipped {skipped} cases without a ground-truth ROI");
    }
    if real.is_empty() {
        return Err(Error::Contract("occlusion analysis has no usable cases".into()));
    }
    let real_drop_mean = mean(&real);
    let rand_drop_mean = mean(&rand);
    Ok(OcclusionReport {
        roi_source,
        real_drop_mean,
        rand_drop_mean,
        diff: real_drop_mean - rand_drop_mean,
        cohens_d: cohens_d(&real, &rand),
        n_cases: real.len(),
        n_random,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub gate_threshold: f64,
    pub adoption_rate: f64,
    pub pg_rate: f64,
    pub brier: f64,
    pub ece: f64,
}

/// One gated evaluation per threshold, sharing seeds; rows sorted by threshold.
pub fn sweep_gate(
    dataset: &[Case],
    policy: &PolicyParams,
    base: &LoopConfig,
    taus: &[f64],
    seed: u64,
    workers: usize,
) -> Result<Vec<GateRow>> {
    let mut taus = taus.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.into_iter()
        .map(|tau| {
            let mut cfg = base.clone();
            cfg.fusion_mode = FusionMode::Gate;
            cfg.fusion.gate_threshold = tau;
            let ev = evaluate(dataset, policy, &cfg, seed, workers)?;
            Ok(GateRow {
                gate_threshold: tau,
                adoption_rate: ev.metrics.adoption_rate,
                pg_rate: ev.metrics.pg_rate,
                brier: ev.metrics.brier,
                ece: ev.metrics.ece,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t_max: usize,
    pub brier: f64,
    pub ece: f64,
    pub avg_steps: f64,
}

pub fn sweep_steps(
    dataset: &[Case],
    policy: &PolicyParams,
    base: &LoopConfig,
    t_maxes: &[usize],
    seed: u64,
    workers: usize,
) -> Result<Vec<StepRow>> {
    t_maxes
        .iter()
        .map(|&t_max| {
            let cfg = LoopConfig { t_max, ..base.clone() };
            let ev = evaluate(dataset, policy, &cfg, seed, workers)?;
            Ok(StepRow { t_max, brier: ev.metrics.brier, ece: ev.metrics.ece, avg_steps: ev.metrics.avg_steps })
        })
        .collect()
}

/// Per-concept overlay temperatures fitted on evaluated episodes.
pub fn fit_overlay(dataset: &[Case], episodes: &[EpisodeResult]) -> Result<BTreeMap<String, f64>> {
    let mut by_concept: BTreeMap<String, Vec<(f64, u8)>> = BTreeMap::new();
    for (case, e) in dataset.iter().zip(episodes) {
        by_concept.entry(case.concept.clone()).or_default().push((e.p_final, e.label));
    }
    by_concept
        .into_iter()
        .map(|(concept, pairs)| Ok((concept, fit_overlay_temperature(&pairs)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayReport {
    pub temperatures: BTreeMap<String, f64>,
    pub before: Metrics,
    pub after: Metrics,
    pub bins_before: Vec<ReliabilityBin>,
    pub bins_after: Vec<ReliabilityBin>,
    /// Episodes whose predicted class (p >= 0.5) changed; always 0.
    pub class_changes: usize,
}

/// Evaluates once, then rescores the final beliefs after the per-concept overlay.
pub fn overlay_eval(
    dataset: &[Case],
    policy: &PolicyParams,
    config: &LoopConfig,
    temperatures: &BTreeMap<String, f64>,
    seed: u64,
    workers: usize,
) -> Result<OverlayReport> {
    for case in dataset {
        if !temperatures.contains_key(&case.concept) {
            return Err(Error::Config(format!("no overlay temperature for concept '{}'", case.concept)));
        }
    }
    let ev = evaluate(dataset, policy, config, seed, workers)?;
    overlay_episodes(dataset, &ev.traces, temperatures)
}

pub fn overlay_episodes(
    dataset: &[Case],
    episodes: &[EpisodeResult],
    temperatures: &BTreeMap<String, f64>,
) -> Result<OverlayReport> {
    let concept_of: HashMap<&str, &str> = dataset.iter().map(|c| (c.id.as_str(), c.concept.as_str())).collect();
    let mut preds = Vec::with_capacity(episodes.len());
    let mut class_changes = 0;
    for e in episodes {
        let concept = concept_of
            .get(e.case_id.as_str())
            .ok_or_else(|| Error::Contract(format!("episode for unknown case {}", e.case_id)))?;
        let t = *temperatures
            .get(*concept)
            .ok_or_else(|| Error::Config(format!("no overlay temperature for concept '{concept}'")))?;
        let q = temperature_overlay(Belief::new(e.p_final)?, t)?.p();
        class_changes += usize::from((q >= 0.5) != (e.p_final >= 0.5));
        preds.push(q);
    }
    let labels: Vec<u8> = episodes.iter().map(|e| e.label).collect();
    let (before, bins_before) = metrics_from(episodes)?;
    let (after, bins_after) = metrics_with_preds(episodes, &preds, &labels)?;
    Ok(OverlayReport { temperatures: temperatures.clone(), before, after, bins_before, bins_after, class_changes })
}
