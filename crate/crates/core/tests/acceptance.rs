//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use hbox::belief::{fit_calibration, CalibrationParams};
use hbox::environment::{generate_dataset, Case, GenSpec};
use hbox::episode::{run_episode, EvidenceSource, FusionMode, LoopConfig};
use hbox::eval::{
    brier, ece, evaluate, fit_overlay, intervene, occlusion_drop, overlay_episodes, reliability_bins, sweep_gate,
    sweep_steps, MaskTarget, RoiSource, Variant, ECE_BINS,
};
use hbox::kbcs::{fit_calibrations, KbcsConfig};
use hbox::policy::{
    featurize, grad_log_prob, log_prob, masked_logits, Action, AgentState, PolicyParams, DEFAULT_BINS,
};
use hbox::rl::{loss_and_gradient, self_critical_advantages, standardize, train, RolloutRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spec(n_peaks: usize, noise: f64, info: f64, seed: u64) -> GenSpec {
    GenSpec { n_peaks, noise_sigma: noise, prior_informativeness: info, seed, ..GenSpec::default() }
}

fn random_policy(rng: &mut ChaCha8Rng, t_max: usize, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::zeros(DEFAULT_BINS, t_max);
    for row in &mut p.theta {
        for v in row.iter_mut() {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

fn random_state(rng: &mut ChaCha8Rng, p: &PolicyParams) -> AgentState {
    featurize(rng.gen(), rng.gen_range(1..=p.t_max), rng.gen(), rng.gen_bool(0.8), p)
}

fn random_valid_action(rng: &mut ChaCha8Rng, p: &PolicyParams, s: &AgentState) -> Action {
    let logits = masked_logits(p, s);
    let valid: Vec<Action> = Action::ALL.iter().copied().filter(|a| logits[a.index()].is_some()).collect();
    valid[rng.gen_range(0..valid.len())]
}

fn calibrated_kbcs(seed: u64) -> KbcsConfig {
    let calib = generate_dataset(&spec(1, 1.0, 3.0, seed ^ 0xC0FFEE), 300).unwrap();
    let base = KbcsConfig::default();
    let fits = fit_calibrations(&calib, &base).unwrap();
    base.with_calibrations(fits)
}

fn no_probe_and_claim_masking() -> (Outcome, Outcome) {
    let cases = generate_dataset(&spec(1, 1.0, 3.0, 101), 150).unwrap();
    let identity = KbcsConfig::default().with_calibrations([CalibrationParams::identity("effusion")]);
    let sources = [
        EvidenceSource::Prior,
        EvidenceSource::Kbcs(identity),
        EvidenceSource::Proxy { informativeness: 3.0 },
        EvidenceSource::Disabled,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut episodes, mut unprobed, mut invariance_violations, mut claim_violations) = (0, 0, 0, 0);
    for (si, source) in sources.iter().enumerate() {
        for mode in [FusionMode::Mix, FusionMode::Gate] {
            let policy = random_policy(&mut rng, 4, 2.0);
            let cfg = LoopConfig { t_max: 4, evidence: source.clone(), fusion_mode: mode, ..LoopConfig::default() };
            for (i, case) in cases.iter().enumerate() {
                let e = run_episode(case, &policy, &cfg, (si * 100_000 + i) as u64).unwrap();
                episodes += 1;
                if !e.steps.iter().any(|s| s.action == Action::ProbeGround) {
                    unprobed += 1;
                    if e.p_final != e.p0 {
                        invariance_violations += 1;
                    }
                }
                claim_violations +=
                    e.steps.iter().filter(|s| s.action == Action::Claim && !s.probed_before).count();
            }
        }
    }
    (
        check(
            episodes >= 1000 && unprobed > 0 && invariance_violations == 0,
            format!("{episodes} episodes, {unprobed} without a probe, {invariance_violations} with p_final != p0"),
        ),
        check(claim_violations == 0, format!("{claim_violations} unprobed Claims in {episodes} episodes")),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(a.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

fn flatten(p: &PolicyParams) -> Vec<f64> {
    p.theta.iter().flat_map(|r| r.iter().copied()).collect()
}

fn gradient_checks() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst_lp: f64 = 0.0;
    for _ in 0..60 {
        let p = random_policy(&mut rng, 3, 1.5);
        let s = random_state(&mut rng, &p);
        let a = random_valid_action(&mut rng, &p, &s);
        let analytic = flatten(&grad_log_prob(&p, &s, a).unwrap());
        let mut numeric = vec![0.0; analytic.len()];
        for (idx, slot) in numeric.iter_mut().enumerate() {
            let (r, c) = (idx / 4, idx % 4);
            let (mut hi, mut lo) = (p.clone(), p.clone());
            hi.theta[r][c] += H;
            lo.theta[r][c] -= H;
            *slot = (log_prob(&hi, &s, a).unwrap() - log_prob(&lo, &s, a).unwrap()) / (2.0 * H);
        }
        worst_lp = worst_lp.max(rel_err(&analytic, &numeric));
    }

    let config = TrainConfig::default();
    let mut worst_loss: f64 = 0.0;
    for _ in 0..60 {
        let theta = random_policy(&mut rng, 3, 1.0);
        let behavior = random_policy(&mut rng, 3, 1.0);
        let batch: Vec<RolloutRecord> = (0..8)
            .map(|_| {
                let state = random_state(&mut rng, &theta);
                let action = random_valid_action(&mut rng, &theta, &state);
                RolloutRecord {
                    advantage: 0.0,
                    standardized: rng.sample(StandardNormal),
                    state,
                    action,
                    logp_theta: 0.0,
                    logp_beta: 0.0,
                    weight: rng.gen_range(0.1..2.0),
                    entropy: 0.0,
                    kl: 0.0,
                }
            })
            .collect();
        let (_, grad) = loss_and_gradient(&batch, &theta, &behavior, &config).unwrap();
        let analytic = flatten(&grad);
        let mut numeric = vec![0.0; analytic.len()];
        for (idx, slot) in numeric.iter_mut().enumerate() {
            let (r, c) = (idx / 4, idx % 4);
            let (mut hi, mut lo) = (theta.clone(), theta.clone());
            hi.theta[r][c] += H;
            lo.theta[r][c] -= H;
            let fh = loss_and_gradient(&batch, &hi, &behavior, &config).unwrap().0;
            let fl = loss_and_gradient(&batch, &lo, &behavior, &config).unwrap().0;
            *slot = (fh - fl) / (2.0 * H);
        }
        worst_loss = worst_loss.max(rel_err(&analytic, &numeric));
    }
    check(
        worst_lp <= 1e-4 && worst_loss <= 1e-4,
        format!("max rel err grad_log_prob {worst_lp:.2e}, loss_and_gradient {worst_loss:.2e} (60 instances each)"),
    )
}

fn advantage_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_group: f64 = 0.0;
    let (mut worst_mean, mut worst_std): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let k = rng.gen_range(2..8);
        let rewards: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>()).collect();
        let adv = self_critical_advantages(&rewards).unwrap();
        worst_group = worst_group.max(adv.iter().sum::<f64>().abs());

        let values: Vec<f64> = (0..rng.gen_range(2..64)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64 >= 1e-8 {
            let z = standardize(&values);
            let n = z.len() as f64;
            let zm = z.iter().sum::<f64>() / n;
            let zs = (z.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n).sqrt();
            worst_mean = worst_mean.max(zm.abs());
            worst_std = worst_std.max((zs - 1.0).abs());
        }
    }

    let cases = generate_dataset(&spec(1, 1.0, 3.0, 404), 64).unwrap();
    let loop_cfg = LoopConfig { evidence: EvidenceSource::Proxy { informativeness: 3.0 }, ..LoopConfig::default() };
    let cfg = TrainConfig { steps: 25, sync_period: 5, seed: 4, ..TrainConfig::default() };
    let (_, log) = train(&cases, &cfg, &loop_cfg, 2).unwrap();
    let mut after_sync = vec![&log[0]];
    for w in log.windows(2) {
        if w[0].synced_after {
            after_sync.push(&w[1]);
        }
    }
    let unit_weights = after_sync.iter().all(|e| e.min_weight == 1.0 && e.max_weight == 1.0);
    let train_groups = log.iter().map(|e| e.max_group_advantage_sum).fold(0.0, f64::max);
    worst_group = worst_group.max(train_groups);
    check(
        worst_group <= 1e-12 && worst_mean <= 1e-9 && worst_std <= 1e-6 && unit_weights && after_sync.len() == 5,
        format!(
            "group sum {worst_group:.1e}, std-batch mean {worst_mean:.1e}, std dev {worst_std:.1e}, \
             w=1 on {} post-sync steps: {unit_weights}",
            after_sync.len()
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..300);
        let preds: Vec<f64> = (0..n)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                2 => rng.gen_range(0..=15) as f64 / 15.0,
                _ => rng.gen(),
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        // brute force: one full scan per bin
        let ref_brier = preds.iter().zip(&labels).map(|(p, &g)| (p - g as f64) * (p - g as f64)).sum::<f64>() / n as f64;
        let mut ref_ece = 0.0;
        for b in 0..ECE_BINS {
            let members: Vec<usize> = (0..n)
                .filter(|&i| {
                    let idx = ((preds[i] * ECE_BINS as f64).floor() as usize).min(ECE_BINS - 1);
                    idx == b
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let conf = members.iter().map(|&i| preds[i]).sum::<f64>() / m;
            let acc = members.iter().map(|&i| labels[i] as f64).sum::<f64>() / m;
            ref_ece += m / n as f64 * (conf - acc).abs();
        }
        let got_brier = brier(&preds, &labels).unwrap();
        let got_ece = ece(&reliability_bins(&preds, &labels, ECE_BINS).unwrap());
        worst = worst.max((got_brier - ref_brier).abs()).max((got_ece - ref_ece).abs());
    }
    let e = |p: &[f64], l: &[u8]| ece(&reliability_bins(p, l, ECE_BINS).unwrap());
    let trivial = brier(&[1.0, 0.0], &[1, 0]).unwrap() == 0.0
        && brier(&[0.5; 4], &[1, 0, 0, 1]).unwrap() == 0.25
        && (brier(&[0.8], &[1]).unwrap() - 0.04).abs() < 1e-15
        && e(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]) == 0.0
        && e(&[1.0, 1.0], &[1, 0]) == 0.5
        && (e(&[0.9, 0.9, 0.9], &[1, 1, 0]) - (0.9 - 2.0 / 3.0)).abs() < 1e-9;
    check(worst <= 1e-12 && trivial, format!("max deviation {worst:.1e}, trivial examples hold: {trivial}"))
}

struct Gains {
    outcome: Outcome,
    trained: PolicyParams,
}

fn prior_mix_and_training_gains() -> Gains {
    let train_cases = generate_dataset(&spec(1, 1.0, 3.0, 601), 500).unwrap();
    let test_cases = generate_dataset(&spec(1, 1.0, 3.0, 602), 500).unwrap();
    let base = LoopConfig::default();
    let train_loop = LoopConfig { evidence: EvidenceSource::Proxy { informativeness: 3.0 }, ..base.clone() };
    let (trained, _) = train(&train_cases, &TrainConfig { seed: 6, ..TrainConfig::default() }, &train_loop, 4).unwrap();
    let zero = PolicyParams::zeros(DEFAULT_BINS, base.t_max);
    let kbcs = KbcsConfig::default();
    let prior_mix = Variant::PriorMix.loop_config(&base, &kbcs);
    let no_pg = Variant::NoProbe.loop_config(&base, &kbcs);
    let seed = 66;
    let nopg = evaluate(&test_cases, &trained, &no_pg, seed, 4).unwrap().metrics;
    let t = evaluate(&test_cases, &trained, &prior_mix, seed, 4).unwrap().metrics;
    let z = evaluate(&test_cases, &zero, &prior_mix, seed, 4).unwrap().metrics;
    let outcome = check(
        t.brier <= nopg.brier - 0.05 && t.brier <= z.brier && t.pg_rate > z.pg_rate,
        format!(
            "noP&G brier {:.4}; Prior-Mix zero-init brier {:.4} pg {:.3}; trained brier {:.4} pg {:.3}",
            nopg.brier, z.brier, z.pg_rate, t.brier, t.pg_rate
        ),
    );
    Gains { outcome, trained }
}

fn negative_transfer() -> Outcome {
    let cases = generate_dataset(&spec(1, 1.0, 3.0, 701), 500).unwrap();
    let base = LoopConfig::default();
    let kbcs = KbcsConfig { score_scale: 10.0, ..KbcsConfig::default() }
        .with_calibrations([CalibrationParams::identity("effusion")]);
    let policy = PolicyParams::zeros(DEFAULT_BINS, base.t_max);
    let nopg = evaluate(&cases, &policy, &Variant::NoProbe.loop_config(&base, &kbcs), 77, 4).unwrap().metrics;
    let mix = evaluate(&cases, &policy, &Variant::KbcsMix.loop_config(&base, &kbcs), 77, 4).unwrap().metrics;
    check(
        mix.brier >= nopg.brier - 0.01,
        format!("KBCS-Mix (identity, scale 10) brier {:.4} vs noP&G {:.4}", mix.brier, nopg.brier),
    )
}

fn causal_faithfulness(policy: &PolicyParams) -> Outcome {
    let base = LoopConfig::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [81u64, 82, 83] {
        let cases = generate_dataset(&spec(1, 1.0, 3.0, seed), 300).unwrap();
        let cfg = Variant::KbcsMix.loop_config(&base, &calibrated_kbcs(seed));
        let real = intervene(&cases, policy, &cfg, seed, 4, MaskTarget::AdoptedRoi).unwrap();
        let placebo = intervene(&cases, policy, &cfg, seed, 4, MaskTarget::DisjointPlacebo).unwrap();
        let d = real.delta_brier.unwrap_or(f64::NAN);
        let pd = placebo.delta_brier.unwrap_or(f64::NAN);
        ok &= real.cohort_size >= 30 && d > 0.0 && pd.abs() <= 0.005;
        lines.push(format!("seed {seed}: N={} delta {d:+.4}, placebo N={} delta {pd:+.4}", real.cohort_size, placebo.cohort_size));
    }
    check(ok, lines.join("; "))
}

fn zero_drop() -> Outcome {
    let two_peak = generate_dataset(&spec(2, 0.0, 3.0, 901), 200).unwrap();
    let kbcs = calibrated_kbcs(901);
    let pred = occlusion_drop(&two_peak, &kbcs, RoiSource::Pred, 20, 9).unwrap();
    let single = generate_dataset(&spec(1, 1.0, 3.0, 902), 300).unwrap();
    let positives: Vec<Case> = single.into_iter().filter(|c| c.label == 1).collect();
    let gt = occlusion_drop(&positives, &kbcs, RoiSource::Gt, 20, 9).unwrap();
    check(
        pred.real_drop_mean == 0.0 && pred.cohens_d == 0.0 && gt.real_drop_mean > gt.rand_drop_mean,
        format!(
            "two-peak Pred real drop {:e}, d {}; single-peak Gt real {:.4} vs rand {:.4} (d {:.2}, n {})",
            pred.real_drop_mean, pred.cohens_d, gt.real_drop_mean, gt.rand_drop_mean, gt.cohens_d, gt.n_cases
        ),
    )
}

fn gate_sweep(policy: &PolicyParams) -> Outcome {
    let cases = generate_dataset(&spec(1, 1.0, 3.0, 1001), 300).unwrap();
    let base = LoopConfig::default();
    let kbcs = calibrated_kbcs(1001);
    let gate = Variant::KbcsGate.loop_config(&base, &kbcs);
    let taus = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5];
    let rows = sweep_gate(&cases, policy, &gate, &taus, 10, 4).unwrap();
    let monotone = rows.windows(2).all(|w| w[1].adoption_rate <= w[0].adoption_rate);
    let zero_above_one = rows.iter().filter(|r| r.gate_threshold >= 1.0).all(|r| r.adoption_rate == 0.0);
    let mix = evaluate(&cases, policy, &Variant::KbcsMix.loop_config(&base, &kbcs), 10, 4).unwrap();
    let mut g0 = gate.clone();
    g0.fusion.gate_threshold = 0.0;
    let g0 = evaluate(&cases, policy, &g0, 10, 4).unwrap();
    let bit_exact = mix.traces.iter().zip(&g0.traces).all(|(a, b)| a.p_final.to_bits() == b.p_final.to_bits())
        && mix.metrics.brier.to_bits() == rows[0].brier.to_bits();
    let rates: Vec<String> = rows.iter().map(|r| format!("{}:{:.3}", r.gate_threshold, r.adoption_rate)).collect();
    check(
        monotone && zero_above_one && bit_exact && rows[0].adoption_rate > 0.0,
        format!("adoption {} ; tau=0 equals KBCS-Mix bitwise: {bit_exact}", rates.join(" ")),
    )
}

fn step_sweep(policy: &PolicyParams) -> Outcome {
    let cases = generate_dataset(&spec(1, 1.0, 3.0, 1101), 300).unwrap();
    let cfg = Variant::PriorMix.loop_config(&LoopConfig::default(), &KbcsConfig::default());
    let rows = sweep_steps(&cases, policy, &cfg, &[1, 2, 3, 4, 6], 11, 4).unwrap();
    let one = rows.iter().find(|r| r.t_max == 1).map(|r| r.avg_steps);
    let bounded = rows.iter().all(|r| r.avg_steps <= r.t_max as f64);
    let summary: Vec<String> = rows.iter().map(|r| format!("T{}:{:.3}", r.t_max, r.avg_steps)).collect();
    check(one == Some(1.0) && bounded, format!("avg_steps {}", summary.join(" ")))
}

fn calibration_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pairs: Vec<(f64, u8)> = (0..10_000)
        .map(|_| {
            let m: f64 = 6.0 * rng.sample::<f64, _>(StandardNormal);
            let p = 1.0 / (1.0 + (-(m / 4.0 + 0.5)).exp());
            (m, u8::from(rng.gen::<f64>() < p))
        })
        .collect();
    let fit = fit_calibration(&pairs, "c").unwrap();
    check(
        (fit.temperature - 4.0).abs() <= 0.4 && (fit.bias - 0.5).abs() <= 0.1,
        format!("T = {:.4}, b = {:.4}", fit.temperature, fit.bias),
    )
}

fn temperature_overlay(policy: &PolicyParams) -> Outcome {
    let shifted = GenSpec { score_scale: 2.0, domain_tag: "shifted".into(), ..spec(1, 1.0, 3.0, 1301) };
    let cases = generate_dataset(&shifted, 500).unwrap();
    let cfg = Variant::PriorMix.loop_config(&LoopConfig::default(), &KbcsConfig::default());
    let (fit_cases, held_out) = cases.split_at(100);
    let fit_ev = evaluate(fit_cases, policy, &cfg, 13, 4).unwrap();
    let temps: BTreeMap<String, f64> = fit_overlay(fit_cases, &fit_ev.traces).unwrap();
    let ev = evaluate(held_out, policy, &cfg, 13, 4).unwrap();
    let report = overlay_episodes(held_out, &ev.traces, &temps).unwrap();
    check(
        report.after.ece < report.before.ece
            && report.class_changes == 0
            && report.after.pg_rate == report.before.pg_rate,
        format!(
            "T = {:.3}; held-out ECE {:.4} -> {:.4}; class changes {}; pg_rate {:.3} -> {:.3}",
            temps["effusion"],
            report.before.ece,
            report.after.ece,
            report.class_changes,
            report.before.pg_rate,
            report.after.pg_rate
        ),
    )
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hbox")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("hbox {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_contents(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let inputs = root.join("inputs");
    let data = inputs.join("data.jsonl");
    let shifted = inputs.join("shifted.jsonl");
    run_cli(&["gen-data", "--n", "200", "--seed", "3", "--out", &s(&data)])?;
    run_cli(&["gen-data", "--n", "200", "--seed", "4", "--score-scale", "2", "--set", "gen.domain_tag=shifted", "--out", &s(&shifted)])?;
    let calib = inputs.join("calib.json");
    run_cli(&["calibrate", "--data", &s(&data), "--out", &s(&calib)])?;
    let policy = inputs.join("policy.json");
    run_cli(&["train", "--data", &s(&data), "--set", "train.steps=30", "--out", &s(&policy), "--log", &s(&inputs.join("log.jsonl")), "--workers", "2"])?;

    let calib_set = format!("kbcs.calibration={}", s(&calib));
    let mut mismatches = Vec::new();
    let mut compared = 0;
    let run_all = |dir: &Path, workers: &str| -> Result<(), String> {
        let w = ["--workers", workers];
        let o = |name: &str| s(&dir.join(name));
        run_cli(&["gen-data", "--n", "50", "--seed", "9", "--out", &o("gen/data.jsonl")])?;
        run_cli(&["calibrate", "--data", &s(&data), "--out", &o("calibrate/calib.json")])?;
        run_cli(&[&["train", "--data", &s(&data), "--set", "train.steps=20", "--out", &o("train/policy.json"), "--log", &o("train/log.jsonl")][..], &w].concat())?;
        for variant in ["noP&G", "Prior-Mix", "KBCS-Mix", "KBCS-Gate"] {
            let vset = format!("variant={variant}");
            let slug: String = variant.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
            run_cli(&[&["eval", "--data", &s(&data), "--policy", &s(&policy), "--set", &calib_set, "--set", &vset, "--out-dir", &o(&format!("eval-{slug}"))][..], &w].concat())?;
        }
        let common = |cmd: &'static str, sub: &str, extra: &[&str]| -> Result<(), String> {
            let mut args = vec![cmd.to_string(), "--data".into(), s(&data), "--policy".into(), s(&policy), "--set".into(), calib_set.clone(), "--set".into(), "variant=KBCS-Mix".into(), "--out-dir".into(), o(sub), "--workers".into(), workers.into()];
            args.extend(extra.iter().map(|x| x.to_string()));
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            run_cli(&refs)
        };
        common("intervene", "intervene", &[])?;
        common("intervene", "placebo", &["--set", "eval.intervention=placebo"])?;
        common("occlusion", "occlusion", &[])?;
        common("sweep-gate", "sweep-gate", &[])?;
        common("sweep-steps", "sweep-steps", &[])?;
        let ov = ["overlay", "--data", &s(&shifted), "--policy", &s(&policy), "--set", "variant=Prior-Mix", "--out-dir", &o("overlay"), "--workers", workers];
        run_cli(&ov)?;
        let metrics: Vec<String> = ["noPG", "PriorMix", "KBCSMix", "KBCSGate"].iter().map(|v| o(&format!("eval-{v}/metrics.json"))).collect();
        let mut args = vec!["report".to_string(), "--metrics".into()];
        args.extend(metrics);
        args.extend(["--out-dir".to_string(), o("report")]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        run_cli(&refs)
    };
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    let mut contents = Vec::new();
    for (name, workers) in runs {
        let dir = root.join(name);
        run_all(&dir, workers)?;
        contents.push(dir_contents(&dir));
    }
    for other in &contents[1..] {
        if other.keys().ne(contents[0].keys()) {
            mismatches.push("file sets differ".to_string());
        }
        for (path, bytes) in &contents[0] {
            compared += 1;
            if other.get(path) != Some(bytes) {
                mismatches.push(path.display().to_string());
            }
        }
    }
    check(
        mismatches.is_empty() && compared > 30,
        if mismatches.is_empty() {
            format!("{compared} file comparisons across reruns and --workers 1/4, all byte-identical")
        } else {
            format!("differing outputs: {}", mismatches.join(", "))
        },
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let (a1, a2) = no_probe_and_claim_masking();
    results.push((1, "no-probe invariance", a1));
    results.push((2, "claim masking", a2));
    results.push((3, "gradient correctness", gradient_checks()));
    results.push((4, "advantage identities", advantage_identities()));
    results.push((5, "metric oracle equivalence", metric_oracle()));
    let gains = prior_mix_and_training_gains();
    results.push((6, "trained policy and Prior-Mix gains", gains.outcome));
    results.push((7, "negative transfer with miscalibrated scores", negative_transfer()));
    results.push((8, "causal faithfulness of adopted ROIs", causal_faithfulness(&gains.trained)));
    results.push((9, "zero-drop phenomenon", zero_drop()));
    results.push((10, "gate sweep", gate_sweep(&gains.trained)));
    results.push((11, "step sweep", step_sweep(&gains.trained)));
    results.push((12, "calibration recovery", calibration_recovery()));
    results.push((13, "temperature overlay", temperature_overlay(&gains.trained)));
    results.push((14, "determinism", determinism()));

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("AC{n:<2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("AC{n:<2} FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.1}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
