//! The reasoning loop: one episode per case, with a full audit trace.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{fuse_gate, fuse_mix, sharpen, Belief, FusionConfig};
use crate::environment::Case;
use crate::error::{Error, Result};
use crate::kbcs::{probe, proxy_score, EvidenceReport, KbcsConfig};
use crate::policy::{featurize, masked_logits, safe_sample, Action, PolicyParams};
use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    /// The case's pre-calibrated `prior_score`.
    Prior,
    Kbcs(KbcsConfig),
    Proxy { informativeness: f64 },
    /// ProbeGround is masked for the whole episode.
    Disabled,
}

impl EvidenceSource {
    pub fn probe_enabled(&self) -> bool {
        !matches!(self, EvidenceSource::Disabled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Mix,
    Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P0Source {
    Fixed(f64),
    ConceptPrevalence(BTreeMap<String, f64>),
}

impl P0Source {
    /// Positive-label rate per concept in `cases`.
    pub fn prevalence_from(cases: &[Case]) -> Self {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for c in cases {
            let e = counts.entry(c.concept.clone()).or_default();
            e.0 += usize::from(c.label);
            e.1 += 1;
        }
        P0Source::ConceptPrevalence(
            counts
                .into_iter()
                .map(|(k, (pos, n))| (k, pos as f64 / n as f64))
                .collect(),
        )
    }

    pub fn resolve(&self, concept: &str) -> Result<f64> {
        match self {
            P0Source::Fixed(p) => Ok(*p),
            P0Source::ConceptPrevalence(map) => map
                .get(concept)
                .copied()
                .ok_or_else(|| Error::Config(format!("no prevalence for concept '{concept}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub t_max: usize,
    pub fusion: FusionConfig,
    pub evidence: EvidenceSource,
    pub fusion_mode: FusionMode,
    pub p0: P0Source,
    /// Measure wall-clock time per episode. Off by default so traces are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            t_max: 3,
            fusion: FusionConfig::default(),
            evidence: EvidenceSource::Prior,
            fusion_mode: FusionMode::Mix,
            p0: P0Source::Fixed(0.5),
            record_timing: false,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("loop.t_max must be >= 1".into()));
        }
        self.fusion.validate()?;
        match &self.evidence {
            EvidenceSource::Kbcs(k) => k.validate()?,
            EvidenceSource::Proxy { informativeness } if !(*informativeness >= 0.0) => {
                return Err(Error::Config("proxy informativeness must be >= 0".into()))
            }
            _ => {}
        }
        let check = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("loop.p0 must be in [0, 1], got {p}")))
            }
        };
        match &self.p0 {
            P0Source::Fixed(p) => check(*p)?,
            P0Source::ConceptPrevalence(m) => m.values().try_for_each(|p| check(*p))?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub p_before: f64,
    pub probed_before: bool,
    pub action: Action,
    /// Evidence probability returned by a successful probe.
    pub p_evidence: Option<f64>,
    /// Full tool report, present for KBCS probes.
    pub report: Option<EvidenceReport>,
    /// Failure message for a probe that returned no evidence.
    pub error: Option<String>,
    pub adopted: bool,
    pub p_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub case_id: String,
    pub label: u8,
    pub p0: f64,
    pub steps: Vec<TraceStep>,
    pub p_final: f64,
    pub probed: bool,
    pub wall_ms: f64,
    pub seed: u64,
}

impl EpisodeResult {
    pub fn adopted(&self) -> bool {
        self.steps.iter().any(|s| s.adopted)
    }

    /// ROI of the first adopted, ROI-bearing probe.
    pub fn adopted_roi(&self) -> Option<crate::environment::Roi> {
        self.steps
            .iter()
            .filter(|s| s.adopted)
            .find_map(|s| s.report.as_ref().and_then(|r| r.roi))
    }

    pub fn terminal_step(&self) -> Option<&TraceStep> {
        self.steps.last()
    }
}

/// Seed of the episode for `case_id` under `master_seed`.
pub fn episode_seed(master_seed: u64, case_id: &str) -> u64 {
    StreamKey::new(master_seed, "episode").text(case_id).seed64()
}

fn obtain_evidence(
    case: &Case,
    config: &LoopConfig,
    seed: u64,
    t: usize,
    evidence_rng: &mut crate::rng::Stream,
) -> std::result::Result<(f64, Option<EvidenceReport>), String> {
    match &config.evidence {
        EvidenceSource::Prior => case
            .prior_score
            .map(|p| (p, None))
            .ok_or_else(|| format!("case {} has no prior_score", case.id)),
        EvidenceSource::Kbcs(kbcs) => {
            let call_seed = StreamKey::new(seed, "call").num(t as u64).seed64();
            probe(&case.image, &case.concept, kbcs, call_seed)
                .map(|r| (r.p_evidence, Some(r)))
                .map_err(|e| e.to_string())
        }
        EvidenceSource::Proxy { informativeness } => proxy_score(case, *informativeness, evidence_rng)
            .map(|p| (p, None))
            .map_err(|e| e.to_string()),
        EvidenceSource::Disabled => Err("evidence source disabled".to_string()),
    }
}

/// Runs one episode of the reasoning loop.
///
/// Action draws come from a stream keyed by `seed`, so a logged
/// `(case, policy, config, seed)` replays to the identical trace.
pub fn run_episode(case: &Case, policy: &PolicyParams, config: &LoopConfig, seed: u64) -> Result<EpisodeResult> {
    let started = config.record_timing.then(Instant::now);
    let p0 = config.p0.resolve(&case.concept)?;
    let probe_enabled = config.evidence.probe_enabled();
    let mut action_rng = StreamKey::new(seed, "actions").stream();
    let mut evidence_rng = StreamKey::new(seed, "evidence").stream();

    let mut p = Belief::new(p0)?;
    let mut probed = false;
    let mut steps = Vec::with_capacity(config.t_max);

    for t in 1..=config.t_max {
        let state = featurize(p.p(), t, probed, probe_enabled, policy);
        let action = safe_sample(&masked_logits(policy, &state), &mut action_rng);
        let mut step = TraceStep {
            t,
            p_before: p.p(),
            probed_before: probed,
            action,
            p_evidence: None,
            report: None,
            error: None,
            adopted: false,
            p_after: p.p(),
        };
        match action {
            Action::ProbeGround => {
                match obtain_evidence(case, config, seed, t, &mut evidence_rng) {
                    Ok((p_evidence, report)) => {
                        let (next, adopted) = match config.fusion_mode {
                            FusionMode::Mix => (fuse_mix(p, p_evidence, config.fusion.alpha), true),
                            FusionMode::Gate => {
                                fuse_gate(p, p_evidence, config.fusion.alpha, config.fusion.gate_threshold)
                            }
                        };
                        p = next;
                        step.p_evidence = Some(p_evidence);
                        step.report = report;
                        step.adopted = adopted;
                    }
                    Err(message) => step.error = Some(message),
                }
                probed = true;
                step.p_after = p.p();
                steps.push(step);
            }
            terminal => {
                match terminal {
                    Action::Claim => p = sharpen(p, config.fusion.gamma)?,
                    Action::Abstain => p = Belief::neutral(),
                    _ => {}
                }
                step.p_after = p.p();
                steps.push(step);
                break;
            }
        }
    }

    let p_final = if probed { p.p() } else { p0 };
    Ok(EpisodeResult {
        case_id: case.id.clone(),
        label: case.label,
        p0,
        steps,
        p_final,
        probed,
        wall_ms: started.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3),
        seed,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// One episode per case with seeds keyed by `(master_seed, case id)`; results follow input order.
pub fn run_batch(
    cases: &[Case],
    policy: &PolicyParams,
    config: &LoopConfig,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<EpisodeResult>> {
    config.validate()?;
    policy.validate()?;
    if workers <= 1 {
        return cases
            .iter()
            .map(|c| run_episode(c, policy, config, episode_seed(master_seed, &c.id)))
            .collect();
    }
    pool(workers)?.install(|| {
        cases
            .par_iter()
            .map(|c| run_episode(c, policy, config, episode_seed(master_seed, &c.id)))
            .collect()
    })
}

pub fn save_traces(episodes: &[EpisodeResult], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_traces(path: &Path) -> Result<Vec<EpisodeResult>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}
