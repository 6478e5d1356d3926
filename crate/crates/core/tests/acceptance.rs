//! Acceptance run: prints one PASS/FAIL line per criterion and fails if any
//! criterion fails.
//!
//! Lines go straight to stdout so they survive libtest output capture.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use moe_rl_lab::cli::cmd_train;
use moe_rl_lab::dual_engine::EngineConfig;
use moe_rl_lab::objectives::{apply_tis, clip_mask, group_advantages, AdvantageNorm};
use moe_rl_lab::rollout::{generate_rollouts, CopyTask, RolloutRecord, Task};
use moe_rl_lab::policy::PolicyParams;
use moe_rl_lab::trainer::{stream_rng, TrainConfig, Trainer, METRICS_FILE};
use moe_rl_lab::verification::{
    approximation_order_study, first_token_task, is_necessity, on_policy_gap, r2_mismatches, r3_flips,
    random_contexts, random_direction, random_graph_check, replay_policy, study_domain, study_policy,
    study_task, STUDY_ALPHAS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn report(id: usize, name: &str, limit: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = run();
    let elapsed = start.elapsed();
    if elapsed > limit {
        o.passed = false;
        o.detail.push_str(&format!("; runtime {elapsed:.1?} over {limit:?}"));
    }
    let line = format!(
        "{} criterion {id:>2} {name}: {} ({:.1?})",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        elapsed
    );
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    o.passed
}

fn autodiff() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let r = random_graph_check(100, 1e-5, None, &mut rng).unwrap();
    outcome(
        r.graphs == 100 && r.max_relative_error <= 1e-6,
        format!("max relative error {:.3e} over {} graphs (<= 1e-6)", r.max_relative_error, r.graphs),
    )
}

fn on_policy_identity() -> Outcome {
    let gap = on_policy_gap(&study_policy(SEED), &study_domain(), &study_task()).unwrap();
    outcome(gap <= 1e-10, format!("||token - seq|| = {gap:.3e} (<= 1e-10)"))
}

fn order_study() -> Outcome {
    let params = study_policy(SEED);
    let direction = random_direction(&params, SEED + 1);
    let study = approximation_order_study(&params, &study_domain(), &study_task(), &direction, &STUDY_ALPHAS).unwrap();
    let e = study.error_at(1e-3).unwrap();
    let errors: Vec<String> = study.rows.iter().map(|r| format!("{:.2e}", r.error)).collect();
    outcome(
        study.monotone() && e <= 0.02 && (0.7..=1.3).contains(&study.slope),
        format!(
            "e = [{}], monotone {}, e(1e-3) {e:.3e} (<= 0.02), slope {:.4} (in [0.7, 1.3])",
            errors.join(", "),
            study.monotone(),
            study.slope
        ),
    )
}

fn is_correction() -> Outcome {
    let nec = is_necessity(
        &study_policy(SEED),
        &study_domain(),
        &first_token_task(),
        &EngineConfig::logits_only(3),
    )
    .unwrap();
    outcome(
        nec.without_is > 0.0 && nec.without_is >= 10.0 * nec.with_is,
        format!("no-IS gap {:.3e} vs with-IS gap {:.3e} (ratio >= 10)", nec.without_is, nec.with_is),
    )
}

fn replay() -> Outcome {
    let params = replay_policy(SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let contexts = random_contexts(&params.config, 1000, &mut rng);
    let r2 = r2_mismatches(&params, &contexts).unwrap();
    let flips = r3_flips(&params, &contexts, &EngineConfig::router_only(2)).unwrap();
    outcome(
        r2 == 0 && !flips.is_empty(),
        format!("R2 mismatches {r2}/1000 (= 0), R3 flip instances changing the forward {} (>= 1)", flips.len()),
    )
}

fn surrogate_mechanics() -> Outcome {
    let (lo, hi) = (0.2, 0.27);
    // (advantage, ratio, expected mask)
    let table = [
        (1.0, 1.0 + hi + 1e-9, 0.0),
        (1.0, 1.0 + hi, 1.0),
        (1.0, 0.5, 1.0),
        (-1.0, 1.0 - lo - 1e-9, 0.0),
        (-1.0, 1.0 - lo, 1.0),
        (-1.0, 2.0, 1.0),
        (0.0, 10.0, 1.0),
        (0.0, 0.01, 1.0),
    ];
    let mask_ok = table.iter().all(|&(a, r, m)| clip_mask(a, r, lo, hi) == m);
    let tis_ok = apply_tis(7.5, Some(5.0)) == 5.0 && apply_tis(3.0, Some(5.0)) == 3.0 && apply_tis(5.0, Some(5.0)) == 5.0;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_sum: f64 = 0.0;
    let mut sum_ok = true;
    for g in [2usize, 4, 8, 16, 64] {
        for _ in 0..50 {
            let rewards: Vec<f64> = (0..g).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
            let s: f64 = group_advantages(&rewards, AdvantageNorm::MeanOnly).unwrap().iter().sum();
            worst_sum = worst_sum.max(s.abs());
            sum_ok &= s.abs() <= 1e-12 * g as f64;
        }
    }
    let grpo = group_advantages(&[1.0, 0.0], AdvantageNorm::MeanStd).unwrap();
    let grpo_ok = grpo == [1.0, -1.0];
    outcome(
        mask_ok && tis_ok && sum_ok && grpo_ok,
        format!(
            "mask table {mask_ok}, TIS cap 5 {tis_ok}, max |sum A| {worst_sum:.1e} (<= 1e-12 G), mean_std {{1,0}} -> {grpo:?}"
        ),
    )
}

fn copy_policy() -> (PolicyParams, CopyTask) {
    let config = TrainConfig::load(&config_path("copy_minirl.toml")).unwrap();
    let params = PolicyParams::init(config.policy.clone(), &mut stream_rng(SEED, 1)).unwrap();
    let task = CopyTask::new(16, 8, None, 0).unwrap();
    (params, task)
}

fn token_diffs(records: &[RolloutRecord]) -> Vec<f64> {
    records
        .iter()
        .flat_map(|r| r.mu_old_log_probs.iter().zip(&r.pi_old_log_probs).map(|(m, p)| m - p))
        .collect()
}

fn sample_tokens(params: &PolicyParams, task: &CopyTask, engine: &EngineConfig, min_tokens: usize) -> Vec<RolloutRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut records = Vec::new();
    let mut tokens = 0;
    while tokens < min_tokens {
        let batch = generate_rollouts(params, task, 64, 8, task.max_response_len(), engine, 0, &mut rng).unwrap();
        tokens += batch.num_tokens();
        records.extend(batch.records);
    }
    records
}

fn emulation_sanity() -> Outcome {
    let (params, task) = copy_policy();
    let off = sample_tokens(&params, &task, &EngineConfig::exact(), 10_000);
    let kl_off = moe_rl_lab::diagnostics::train_infer_kl(&off);
    let flips_off = moe_rl_lab::diagnostics::routing_flip_rate(&off);
    let mut passed = kl_off.to_bits() == 0.0f64.to_bits() && flips_off.to_bits() == 0.0f64.to_bits();
    let mut detail = format!("off: KL {kl_off:e}, flip rate {flips_off:e}");
    for bits in [3u32, 5, 8] {
        let records = sample_tokens(&params, &task, &EngineConfig::all_targets(bits), 10_000);
        let d = token_diffs(&records);
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sigma = (var / n).sqrt();
        let ok = mean >= -3.0 * sigma;
        passed &= ok;
        detail.push_str(&format!("; {bits} bits: KL {mean:.3e} +- {sigma:.1e} over {} tokens", d.len()));
    }
    outcome(passed, detail)
}

fn desk_scale_learning() -> Outcome {
    let config = TrainConfig::load(&config_path("copy_minirl.toml")).unwrap();
    let params = config.policy.num_params();
    let mut passes = 0;
    let mut parts = Vec::new();
    for seed in 1..=3u64 {
        let start = Instant::now();
        let mut c = config.clone();
        c.seed = seed;
        let steps = c.steps.min(500);
        let mut trainer = Trainer::new(c.clone()).unwrap();
        trainer.cold_start().unwrap();
        let mut reached = None;
        let mut min_entropy = f64::INFINITY;
        for step in 0..steps {
            let report = trainer.train_step().unwrap();
            for m in &report.metrics {
                min_entropy = min_entropy.min(m.entropy);
            }
            if report.reward_mean >= 0.8 {
                reached = Some(step + 1);
                break;
            }
        }
        let elapsed = start.elapsed();
        let ok = reached.is_some() && min_entropy >= 0.05 && elapsed <= Duration::from_secs(30 * 60);
        passes += ok as usize;
        parts.push(format!(
            "seed {seed}: {} min entropy {min_entropy:.3} in {elapsed:.0?}",
            reached.map_or("not reached,".to_string(), |s| format!("0.8 at step {s},"))
        ));
    }
    let n_ok = config.rollout.minibatches == 1 && config.task.vocab_size() == 16 && params <= 100_000;
    outcome(
        passes >= 2 && n_ok,
        format!("{passes}/3 seeds (>= 2), {params} parameters; {}", parts.join("; ")),
    )
}

fn staleness_trend() -> Outcome {
    let mut config = TrainConfig::load(&config_path("copy_minirl_n4.toml")).unwrap();
    config.seed = 1;
    let n = config.rollout.minibatches;
    let steps = 20;
    let mut trainer = Trainer::new(config).unwrap();
    trainer.cold_start().unwrap();
    let mut sums = vec![0.0; n];
    for _ in 0..steps {
        let report = trainer.train_step().unwrap();
        for m in &report.metrics {
            sums[m.minibatch] += m.log_staleness.std;
        }
    }
    let avg: Vec<f64> = sums.iter().map(|s| s / steps as f64).collect();
    let shown: Vec<String> = avg.iter().map(|a| format!("{a:.3e}")).collect();
    let trend = avg.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        n == 4 && trend,
        format!("mean std of log staleness per mini-batch [{}] (non-decreasing)", shown.join(", ")),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut config = TrainConfig::load(&config_path("copy_minirl_n4.toml")).unwrap();
    config.steps = 6;
    config.checkpoint_every = 0;
    config.engine.mantissa_bits = 5;
    if let Some(cs) = config.cold_start.as_mut() {
        cs.steps = 20;
    }
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config.to_toml()).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    cmd_train(&path, &a, None, false).unwrap();
    cmd_train(&path, &b, None, false).unwrap();
    let ma = std::fs::read(a.join(METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.join(METRICS_FILE)).unwrap();
    let manifests = std::fs::read(a.join("manifest.json")).unwrap() == std::fs::read(b.join("manifest.json")).unwrap();
    outcome(
        manifests && !ma.is_empty() && ma == mb,
        format!("{} metric bytes, identical {}", ma.len(), ma == mb),
    )
}

#[test]
fn acceptance_criteria() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let _ = writeln!(std::io::stdout().lock());
    let results = [
        report(1, "autodiff vs finite differences", min(1), autodiff),
        report(2, "on-policy gradient identity", min(1), on_policy_identity),
        report(3, "first-order approximation study", min(5), order_study),
        report(4, "IS-correction necessity", min(2), is_correction),
        report(5, "routing replay identities", min(1), replay),
        report(6, "surrogate mechanics", min(1), surrogate_mechanics),
        report(7, "discrepancy emulation sanity", min(2), emulation_sanity),
        report(8, "desk-scale learning", min(90), desk_scale_learning),
        report(9, "off-policy staleness trend", min(30), staleness_trend),
        report(10, "determinism", min(10), determinism),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
