//! Command-line front door.
//!
//! Every command writes its outputs into one directory together with
//! `resolved-config.txt` and `manifest.json` (SHA-256 of every output).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::environment::{generate_dataset, load_dataset, save_dataset, Case};
use crate::episode::{save_traces, EvidenceSource};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, fit_overlay, intervene, occlusion_drop, overlay_episodes, sweep_gate, sweep_steps, Metrics,
    ReliabilityBin, Variant,
};
use crate::kbcs::fit_calibrations;
use crate::policy::{PolicyParams, DEFAULT_BINS};
use crate::report::{bins_csv, gate_csv, reliability_svg, steps_csv, summary_table};
use crate::rl::train;

#[derive(Debug, Parser)]
#[command(name = "hbox", version, about = "Evidence-seeking diagnostic agent toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat key = value run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Parallel episode workers; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args, Clone)]
pub struct DataRun {
    #[command(flatten)]
    pub common: Common,
    /// Dataset (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Policy file; overrides the `policy` config key. Zero logits when neither is set.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        roi_size: Option<usize>,
        #[arg(long)]
        pos_rate: Option<f64>,
        #[arg(long)]
        peaks: Option<usize>,
        #[arg(long)]
        prior_info: Option<f64>,
        /// Prior-score logit multiplier (2 gives the shifted domain).
        #[arg(long)]
        score_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-concept KBCS calibration on a dataset.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align a policy with the conservative policy-gradient trainer.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step training log (JSON lines), written next to the policy under this file name.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a policy under the configured variant.
    Eval(DataRun),
    /// Agent-level ROI-masking intervention on the adopted cohort.
    Intervene(DataRun),
    /// Tool-level occlusion-drop analysis.
    Occlusion(DataRun),
    /// Sweep the gate threshold.
    SweepGate(DataRun),
    /// Sweep the step budget.
    SweepSteps(DataRun),
    /// Post-hoc temperature overlay.
    Overlay(DataRun),
    /// Summarise metrics files into a table and reliability diagrams.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub variant: String,
    pub metrics: Metrics,
    pub bins: Vec<ReliabilityBin>,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    files: Vec<ManifestEntry>,
}

/// Collects the files written by one command.
struct RunOutput {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunOutput {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn for_file(path: &Path) -> Result<(Self, String)> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("'{}' is not a file path", path.display())))?
            .to_string_lossy()
            .into_owned();
        Ok((Self::new(&dir)?, name))
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(path, contents)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn finish(mut self, command: &str, config: &RunConfig, inputs: &[(&str, &Path)]) -> Result<()> {
        let mut text = format!("# command: {command}\n");
        for (k, p) in inputs {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            let digest = hex::encode(Sha256::digest(std::fs::read(p)?));
            text.push_str(&format!("# input {k}: {name} sha256={digest}\n"));
        }
        text.push_str(&config.resolved());
        self.write("resolved-config.txt", text)?;

        let mut files: Vec<String> = self.files.clone();
        files.sort();
        let mut entries = Vec::with_capacity(files.len());
        for f in files {
            let bytes = std::fs::read(self.dir.join(&f))?;
            entries.push(ManifestEntry { path: f, sha256: hex::encode(Sha256::digest(&bytes)) });
        }
        let mut text = serde_json::to_string_pretty(&Manifest { files: entries })?;
        text.push('\n');
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.set_assignment(o)?;
    }
    Ok(cfg)
}

fn load_policy(run: &DataRun, cfg: &RunConfig, t_max: usize) -> Result<PolicyParams> {
    let path = run
        .policy
        .clone()
        .or_else(|| (!cfg.raw("policy").is_empty()).then(|| PathBuf::from(cfg.raw("policy"))));
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Error::Config(format!("cannot read policy '{}': {e}", p.display())))?;
            let policy: PolicyParams = serde_json::from_str(&text)?;
            policy.validate()?;
            Ok(policy)
        }
        None => Ok(PolicyParams::zeros(DEFAULT_BINS, t_max)),
    }
}

struct Prepared {
    cfg: RunConfig,
    cases: Vec<Case>,
    policy: PolicyParams,
    seed: u64,
}

fn prepare(run: &DataRun) -> Result<Prepared> {
    let cfg = load_config(&run.common)?;
    let cases = load_dataset(&run.data)?;
    let t_max: usize = cfg.get("loop.t_max")?;
    let policy = load_policy(run, &cfg, t_max)?;
    let seed = cfg.seed()?;
    Ok(Prepared { cfg, cases, policy, seed })
}

fn variant_loop(p: &Prepared, variant: Variant) -> Result<crate::episode::LoopConfig> {
    let base = p.cfg.loop_base(&p.cases)?;
    let kbcs = p.cfg.kbcs(Path::new(""), &p.cases)?;
    Ok(variant.loop_config(&base, &kbcs))
}

fn inputs(run: &DataRun) -> Vec<(&'static str, &Path)> {
    let mut v: Vec<(&'static str, &Path)> = vec![("data", run.data.as_path())];
    if let Some(p) = &run.policy {
        v.push(("policy", p.as_path()));
    }
    v
}

fn cmd_eval(run: &DataRun) -> Result<()> {
    let p = prepare(run)?;
    let variant = p.cfg.variant()?;
    let loop_cfg = variant_loop(&p, variant)?;
    let ev = evaluate(&p.cases, &p.policy, &loop_cfg, p.seed, run.common.workers)?;
    let mut out = RunOutput::new(&run.out_dir)?;
    out.write_json(
        "metrics.json",
        &MetricsFile { variant: variant.name().to_string(), metrics: ev.metrics.clone(), bins: ev.bins.clone() },
    )?;
    out.write("bins.csv", bins_csv(&ev.bins))?;
    let traces = out.path("traces.jsonl");
    save_traces(&ev.traces, &traces)?;
    out.write("reliability.svg", reliability_svg(&[(variant.name(), &ev.bins)]))?;
    log::info!(
        "{}: brier {:.4} ece {:.4} pg_rate {:.3} adoption {:.3} (n = {})",
        variant,
        ev.metrics.brier,
        ev.metrics.ece,
        ev.metrics.pg_rate,
        ev.metrics.adoption_rate,
        ev.metrics.n
    );
    out.finish("eval", &p.cfg, &inputs(run))
}

fn cmd_intervene(run: &DataRun) -> Result<()> {
    let p = prepare(run)?;
    let loop_cfg = variant_loop(&p, p.cfg.variant()?)?;
    let report = intervene(&p.cases, &p.policy, &loop_cfg, p.seed, run.common.workers, p.cfg.mask_target()?)?;
    let mut out = RunOutput::new(&run.out_dir)?;
    out.write_json("intervention.json", &report)?;
    out.finish("intervene", &p.cfg, &inputs(run))
}

fn cmd_occlusion(run: &DataRun) -> Result<()> {
    let p = prepare(run)?;
    let kbcs = p.cfg.kbcs(Path::new(""), &p.cases)?;
    let report = occlusion_drop(&p.cases, &kbcs, p.cfg.roi_source()?, p.cfg.n_random()?, p.seed)?;
    let mut out = RunOutput::new(&run.out_dir)?;
    out.write_json("occlusion.json", &report)?;
    out.finish("occlusion", &p.cfg, &inputs(run))
}

fn cmd_sweep_gate(run: &DataRun) -> Result<()> {
    let p = prepare(run)?;
    let loop_cfg = variant_loop(&p, Variant::KbcsGate)?;
    let rows = sweep_gate(&p.cases, &p.policy, &loop_cfg, &p.cfg.gate_taus()?, p.seed, run.common.workers)?;
    let mut out = RunOutput::new(&run.out_dir)?;
    out.write("sweep_gate.csv", gate_csv(&rows))?;
    out.finish("sweep-gate", &p.cfg, &inputs(run))
}

fn cmd_sweep_steps(run: &DataRun) -> Result<()> {
    let p = prepare(run)?;
    let loop_cfg = variant_loop(&p, p.cfg.variant()?)?;
    let rows = sweep_steps(&p.cases, &p.policy, &loop_cfg, &p.cfg.t_max_list()?, p.seed, run.common.workers)?;
    let mut out = RunOutput::new(&run.out_dir)?;
    out.write("sweep_steps.csv", steps_csv(&rows))?;
    out.finish("sweep-steps", &p.cfg, &inputs(run))
}

fn cmd_overlay(run: &DataRun) -> Result<()> {
    let p = prepare(run)?;
    let loop_cfg = variant_loop(&p, p.cfg.variant()?)?;
    let split = p.cfg.overlay_fit_split()?;
    let (temps, held_out) = if split > 0 {
        if split >= p.cases.len() {
            return Err(Error::Config(format!(
                "overlay.fit_split ({split}) leaves no held-out cases out of {}",
                p.cases.len()
            )));
        }
        let (fit_cases, rest) = p.cases.split_at(split);
        let fit_ev = evaluate(fit_cases, &p.policy, &loop_cfg, p.seed, run.common.workers)?;
        (fit_overlay(fit_cases, &fit_ev.traces)?, rest)
    } else {
        (p.cfg.overlay_temperatures()?, p.cases.as_slice())
    };
    for c in held_out {
        if !temps.contains_key(&c.concept) {
            return Err(Error::Config(format!("no overlay temperature for concept '{}'", c.concept)));
        }
    }
    let ev = evaluate(held_out, &p.policy, &loop_cfg, p.seed, run.common.workers)?;
    let report = overlay_episodes(held_out, &ev.traces, &temps)?;
    let mut out = RunOutput::new(&run.out_dir)?;
    out.write_json("overlay.json", &report)?;
    out.write("bins_before.csv", bins_csv(&report.bins_before))?;
    out.write("bins_after.csv", bins_csv(&report.bins_after))?;
    out.finish("overlay", &p.cfg, &inputs(run))
}

fn cmd_report(metrics: &[PathBuf], out_dir: &Path) -> Result<()> {
    let mut files = Vec::with_capacity(metrics.len());
    for path in metrics {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read metrics '{}': {e}", path.display())))?;
        let file: MetricsFile = serde_json::from_str(&text)?;
        files.push(file);
    }
    let mut out = RunOutput::new(out_dir)?;
    let rows: Vec<(String, Metrics)> = files.iter().map(|f| (f.variant.clone(), f.metrics.clone())).collect();
    out.write("summary.txt", summary_table(&rows))?;
    for (i, f) in files.iter().enumerate() {
        let slug: String = f
            .variant
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        out.write(&format!("reliability_{i}_{slug}.svg"), reliability_svg(&[(f.variant.as_str(), &f.bins)]))?;
    }
    let inputs: Vec<(&str, &Path)> = metrics.iter().map(|p| ("metrics", p.as_path())).collect();
    out.finish("report", &RunConfig::default(), &inputs)
}

/// Runs a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            n,
            seed,
            width,
            height,
            noise,
            amplitude,
            roi_size,
            pos_rate,
            peaks,
            prior_info,
            score_scale,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            let flags: [(&str, Option<String>); 10] = [
                ("seed", seed.map(|v| v.to_string())),
                ("gen.width", width.map(|v| v.to_string())),
                ("gen.height", height.map(|v| v.to_string())),
                ("gen.noise", noise.map(|v| v.to_string())),
                ("gen.amplitude", amplitude.map(|v| v.to_string())),
                ("gen.roi_size", roi_size.map(|v| v.to_string())),
                ("gen.pos_rate", pos_rate.map(|v| v.to_string())),
                ("gen.peaks", peaks.map(|v| v.to_string())),
                ("gen.prior_info", prior_info.map(|v| v.to_string())),
                ("gen.score_scale", score_scale.map(|v| v.to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    cfg.set(k, &v)?;
                }
            }
            let spec = cfg.gen_spec()?;
            let cases = generate_dataset(&spec, n)?;
            let (mut output, name) = RunOutput::for_file(&out)?;
            let path = output.path(&name);
            save_dataset(&cases, &path)?;
            output.finish(&format!("gen-data --n {n}"), &cfg, &[])
        }
        Command::Calibrate { common, data, out } => {
            let cfg = load_config(&common)?;
            let cases = load_dataset(&data)?;
            let calibrations = fit_calibrations(&cases, &cfg.kbcs_base()?)?;
            let (mut output, name) = RunOutput::for_file(&out)?;
            output.write_json(&name, &calibrations)?;
            output.finish("calibrate", &cfg, &[("data", data.as_path())])
        }
        Command::Train { common, data, out, log } => {
            let cfg = load_config(&common)?;
            let cases = load_dataset(&data)?;
            let mut loop_cfg = cfg.loop_base(&cases)?;
            loop_cfg.evidence = EvidenceSource::Proxy { informativeness: cfg.proxy_informativeness()? };
            let (policy, entries) = train(&cases, &cfg.train()?, &loop_cfg, common.workers)?;
            let (mut output, name) = RunOutput::for_file(&out)?;
            output.write_json(&name, &policy)?;
            if let Some(log_path) = log {
                let log_name = log_path
                    .file_name()
                    .ok_or_else(|| Error::Config("--log must name a file".into()))?
                    .to_string_lossy()
                    .into_owned();
                let mut text = String::new();
                for e in &entries {
                    text.push_str(&serde_json::to_string(e)?);
                    text.push('\n');
                }
                output.write(&log_name, text)?;
            }
            output.finish("train", &cfg, &[("data", data.as_path())])
        }
        Command::Eval(run) => cmd_eval(&run),
        Command::Intervene(run) => cmd_intervene(&run),
        Command::Occlusion(run) => cmd_occlusion(&run),
        Command::SweepGate(run) => cmd_sweep_gate(&run),
        Command::SweepSteps(run) => cmd_sweep_steps(&run),
        Command::Overlay(run) => cmd_overlay(&run),
        Command::Report { metrics, out_dir } => cmd_report(&metrics, &out_dir),
    }
}

/// Parses `argv` and runs it, returning the process exit status:
/// 0 on success, 2 on usage errors, 1 on any other failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
