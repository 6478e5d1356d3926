//! Independent oracles: finite differences, exact enumeration of the
//! sequence-level objective and its gradient, the first-order study and the
//! routing-replay identities.

mod enumeration;
mod gradcheck;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::Fault;
use crate::dual_engine::{inference_forward, EngineConfig};
use crate::error::{Error, Result};
use crate::objectives::ReplayMode;
use crate::policy::{
    evaluate_response, policy_forward_logits, GateReplay, PolicyConfig, PolicyParams, Token,
};
use crate::rollout::{FnTask, Task};

pub use enumeration::{
    approximation_order_study, enumerate_expected_reward, enumerate_seq_gradient,
    enumerate_token_gradient, enumeration_mass, l2_distance, l2_norm, loglog_slope, relative_gap,
    EnumerationDomain, OrderRow, OrderStudy, TokenWeighting,
};
pub use gradcheck::{finite_diff_gradient, max_relative_error, random_graph_check, GradCheckReport, RandomGraph};

/// α values of the first-order study.
pub const STUDY_ALPHAS: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];

/// Prompt of the default enumeration domain.
pub const STUDY_PROMPT: [Token; 2] = [2, 1];

/// Default enumeration domain: V = 3, responses up to 4 tokens.
pub fn study_domain() -> EnumerationDomain {
    EnumerationDomain::new(3, 4, STUDY_PROMPT.to_vec())
}

/// One MoE layer, E = 4, k = 2, d = 8, sized for [`study_domain`].
pub fn study_policy(seed: u64) -> PolicyParams {
    let config = PolicyConfig {
        vocab_size: 3,
        d_model: 8,
        d_hidden: 8,
        num_experts: 4,
        top_k: 2,
        num_layers: 1,
        max_positions: STUDY_PROMPT.len() + 4,
        init_scale: 1.0,
    };
    PolicyParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid study config")
}

/// Reward 1 when any token after the first is token 1.
pub fn study_task() -> impl Task {
    FnTask::new("late-one", 3, 4, STUDY_PROMPT.to_vec(), |_: &[Token], y: &[Token]| {
        y.iter().skip(1).any(|&t| t == 1) as u8 as f64
    })
}

/// Reward 1 when the first token is token 1.
pub fn first_token_task() -> impl Task {
    FnTask::new("first-one", 3, 4, STUDY_PROMPT.to_vec(), |_: &[Token], y: &[Token]| {
        (y.first() == Some(&1)) as u8 as f64
    })
}

/// Constant reward.
pub fn constant_task(c: f64) -> impl Task {
    FnTask::new("constant", 3, 4, STUDY_PROMPT.to_vec(), move |_: &[Token], _: &[Token]| c)
}

/// Unit-norm Gaussian direction in parameter space.
pub fn random_direction(params: &PolicyParams, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d: Vec<f64> = (0..params.num_params())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = l2_norm(&d);
    d.iter_mut().for_each(|x| *x /= norm);
    d
}

/// `‖∇J^token − ∇J^seq‖` at θ = θ_old with emulation off.
pub fn on_policy_gap(params: &PolicyParams, domain: &EnumerationDomain, task: &dyn Task) -> Result<f64> {
    let exact = EngineConfig::exact();
    let seq = enumerate_seq_gradient(params, params, domain, task, &exact)?;
    let token = enumerate_token_gradient(
        params,
        params,
        domain,
        task,
        &exact,
        ReplayMode::None,
        TokenWeighting::FullIs,
    )?;
    Ok(l2_distance(&token, &seq))
}

/// Relative gaps to `∇J^seq` of the token gradient with and without the
/// train–inference IS factor, at θ = θ_old under `engine`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IsNecessity {
    pub with_is: f64,
    pub without_is: f64,
}

pub fn is_necessity(
    params: &PolicyParams,
    domain: &EnumerationDomain,
    task: &dyn Task,
    engine: &EngineConfig,
) -> Result<IsNecessity> {
    let seq = enumerate_seq_gradient(params, params, domain, task, engine)?;
    let token = |w| enumerate_token_gradient(params, params, domain, task, engine, ReplayMode::None, w);
    Ok(IsNecessity {
        with_is: relative_gap(&token(TokenWeighting::FullIs)?, &seq)?,
        without_is: relative_gap(&token(TokenWeighting::StalenessOnly)?, &seq)?,
    })
}

/// Random contexts for the replay checks.
pub fn random_contexts<R: Rng + ?Sized>(config: &PolicyConfig, count: usize, rng: &mut R) -> Vec<Vec<Token>> {
    (0..count)
        .map(|_| {
            let len = rng.gen_range(1..=config.max_positions);
            (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect()
        })
        .collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Number of contexts on which replaying the natural routing changes any
/// logit bit or the routing itself.
pub fn r2_mismatches(params: &PolicyParams, contexts: &[Vec<Token>]) -> Result<usize> {
    let exact = EngineConfig::exact();
    let mut bad = 0;
    for ctx in contexts {
        let (natural, route) = policy_forward_logits(params, ctx, None, &exact)?;
        let (replayed, route2) = policy_forward_logits(params, ctx, Some(&route), &exact)?;
        if bits(&natural) != bits(&replayed) || route != route2 {
            bad += 1;
        }
    }
    Ok(bad)
}

/// A context where the inference engine routes differently from the
/// training engine, and the training forward under that replayed routing.
#[derive(Clone, Debug, Serialize)]
pub struct RoutingFlip {
    pub context: Vec<Token>,
    pub max_logit_change: f64,
}

/// Searches `contexts` for inference-side routing flips and returns those
/// where the R3-replayed training forward differs from the natural one.
pub fn r3_flips(params: &PolicyParams, contexts: &[Vec<Token>], engine: &EngineConfig) -> Result<Vec<RoutingFlip>> {
    let exact = EngineConfig::exact();
    let mut out = Vec::new();
    for ctx in contexts {
        let (_, mu_route) = inference_forward(params, ctx, engine)?;
        let (natural, route) = policy_forward_logits(params, ctx, None, &exact)?;
        let flipped = route.iter().zip(&mu_route).any(|(a, b)| !a.same_experts(b));
        if !flipped {
            continue;
        }
        let (replayed, _) = policy_forward_logits(params, ctx, Some(&mu_route), &exact)?;
        let change = natural
            .iter()
            .zip(&replayed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change > 0.0 {
            out.push(RoutingFlip {
                context: ctx.clone(),
                max_logit_change: change,
            });
        }
    }
    Ok(out)
}

/// Policy for the replay checks: two MoE layers over a V = 8 vocabulary.
pub fn replay_policy(seed: u64) -> PolicyParams {
    let config = PolicyConfig {
        vocab_size: 8,
        d_model: 8,
        d_hidden: 8,
        num_experts: 4,
        top_k: 2,
        num_layers: 2,
        max_positions: 12,
        init_scale: 1.0,
    };
    PolicyParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid replay config")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Autodiff,
    Enumeration,
    OrderStudy,
    ReplayIdentity,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Autodiff,
        Suite::Enumeration,
        Suite::OrderStudy,
        Suite::ReplayIdentity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Autodiff => "autodiff",
            Suite::Enumeration => "enumeration",
            Suite::OrderStudy => "order-study",
            Suite::ReplayIdentity => "replay-identity",
        }
    }

    pub fn parse_selector(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .iter()
            .find(|x| x.name() == s)
            .map(|&x| vec![x])
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|x| x.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown suite `{s}`; expected one of: {}, all",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub requirement: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub order_study: Option<OrderStudy>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, suite: Suite, name: &str, value: f64, passed: bool, requirement: impl Into<String>) {
        self.checks.push(CheckResult {
            suite: suite.name(),
            name: name.to_string(),
            passed,
            value,
            requirement: requirement.into(),
        });
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {}/{}: {:.3e} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.value,
                c.requirement
            );
        }
        if let Some(study) = &self.order_study {
            let _ = writeln!(out, "order study:");
            let _ = writeln!(out, "  {:>8}  {:>12}", "alpha", "rel_error");
            for r in &study.rows {
                let _ = writeln!(out, "  {:>8.0e}  {:>12.6e}", r.alpha, r.error);
            }
            let _ = writeln!(out, "  fitted slope = {:.4}", study.slope);
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(out, "{} checks, {} failed", self.checks.len(), failed);
        out
    }
}

fn autodiff_suite(report: &mut VerifyReport, options: &VerifyOptions) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let fault = options.inject_fault.then_some(Fault::MatmulLhsSignFlip);
    let r = random_graph_check(100, 1e-5, fault, &mut rng)?;
    report.push(
        Suite::Autodiff,
        "random-graphs-vs-central-differences",
        r.max_relative_error,
        r.max_relative_error <= 1e-6,
        "max relative error over 100 graphs <= 1e-6",
    );
    Ok(())
}

fn enumeration_suite(report: &mut VerifyReport, options: &VerifyOptions) -> Result<()> {
    let s = Suite::Enumeration;
    let params = study_policy(options.seed);
    let domain = study_domain();
    let task = study_task();

    for (label, engine) in [
        ("exact", EngineConfig::exact()),
        ("logits-3bit", EngineConfig::logits_only(3)),
        ("all-3bit", EngineConfig::all_targets(3)),
    ] {
        let mass = enumeration_mass(&params, &domain, &engine)?;
        report.push(s, &format!("normalisation-{label}"), (mass - 1.0).abs(), (mass - 1.0).abs() <= 1e-9, "|sum - 1| <= 1e-9");
    }

    let uniform = PolicyParams::zeros(PolicyConfig {
        vocab_size: 2,
        ..params.config.clone()
    })?;
    let d2 = EnumerationDomain::new(2, 2, vec![1]);
    let target = FnTask::new("ones", 2, 2, vec![1], |_: &[Token], y: &[Token]| (y == [1, 1]) as u8 as f64);
    let j = enumerate_expected_reward(&uniform, &d2, &target, &EngineConfig::exact())?;
    report.push(s, "uniform-v2-l2-expected-reward", j, (j - 0.25).abs() <= 1e-12, "J = 0.25");
    let j = enumerate_expected_reward(&params, &domain, &constant_task(1.0), &EngineConfig::exact())?;
    report.push(s, "unit-reward-expected-reward", j, (j - 1.0).abs() <= 1e-9, "J = 1");

    let exact = EngineConfig::exact();
    let analytic = enumerate_seq_gradient(&params, &params, &domain, &task, &exact)?;
    let flat = params.to_flat();
    let numeric = finite_diff_gradient(
        |x| enumerate_expected_reward(&params.with_flat(x)?, &domain, &task, &exact),
        &flat,
        1e-5,
    )?;
    let err = max_relative_error(&analytic, &numeric);
    report.push(s, "seq-gradient-vs-finite-differences", err, err <= 1e-6, "max relative error <= 1e-6");

    let g = enumerate_seq_gradient(&params, &params, &domain, &constant_task(2.0), &exact)?;
    let n = l2_norm(&g);
    report.push(s, "constant-reward-zero-gradient", n, n <= 1e-9, "||grad|| <= 1e-9");

    let gap = on_policy_gap(&params, &domain, &task)?;
    report.push(s, "on-policy-token-equals-seq", gap, gap <= 1e-10, "||token - seq|| <= 1e-10");

    let nec = is_necessity(&params, &domain, &first_token_task(), &EngineConfig::logits_only(3))?;
    let ratio = nec.without_is / nec.with_is.max(f64::MIN_POSITIVE);
    report.push(
        s,
        "is-correction-necessity",
        ratio,
        nec.without_is >= 10.0 * nec.with_is && nec.without_is > 0.0,
        format!(
            "no-IS gap {:.3e} >= 10x with-IS gap {:.3e}",
            nec.without_is, nec.with_is
        ),
    );
    Ok(())
}

fn order_suite(report: &mut VerifyReport, options: &VerifyOptions) -> Result<()> {
    let s = Suite::OrderStudy;
    let params = study_policy(options.seed);
    let domain = study_domain();
    let task = study_task();
    let direction = random_direction(&params, options.seed.wrapping_add(1));

    let zero = approximation_order_study(&params, &domain, &task, &direction, &[0.0])?;
    report.push(s, "alpha-zero", zero.rows[0].error, zero.rows[0].error <= 1e-10, "e(0) <= 1e-10");

    let study = approximation_order_study(&params, &domain, &task, &direction, &STUDY_ALPHAS)?;
    report.push(s, "monotone", study.monotone() as u8 as f64, study.monotone(), "e strictly decreasing as alpha decreases");
    let e = study.error_at(1e-3).unwrap_or(f64::INFINITY);
    report.push(s, "error-at-1e-3", e, e <= 0.02, "e(1e-3) <= 0.02");
    report.push(
        s,
        "loglog-slope",
        study.slope,
        (0.7..=1.3).contains(&study.slope),
        "slope in [0.7, 1.3]",
    );
    report.order_study = Some(study);
    Ok(())
}

fn replay_suite(report: &mut VerifyReport, options: &VerifyOptions) -> Result<()> {
    let s = Suite::ReplayIdentity;
    let params = replay_policy(options.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let contexts = random_contexts(&params.config, 1000, &mut rng);
    let bad = r2_mismatches(&params, &contexts)?;
    report.push(s, "r2-bit-identical-on-1000-contexts", bad as f64, bad == 0, "0 mismatching contexts");

    // whole responses: replaying the recorded training routing is a no-op
    let exact = EngineConfig::exact();
    let mut bad = 0;
    for ctx in contexts.iter().filter(|c| c.len() >= 2).take(200) {
        let split = ctx.len() / 2;
        let (prompt, response) = ctx.split_at(split.max(1));
        let natural = evaluate_response(&params, prompt, response, None, &exact)?;
        let replayed = evaluate_response(&params, prompt, response, Some((&natural.routing, GateReplay::Recompute)), &exact)?;
        if bits(&natural.token_log_probs) != bits(&replayed.token_log_probs) {
            bad += 1;
        }
    }
    report.push(s, "r2-bit-identical-responses", bad as f64, bad == 0, "0 mismatching responses");

    let flips = r3_flips(&params, &contexts, &EngineConfig::router_only(2))?;
    report.push(
        s,
        "r3-differs-on-routing-flip",
        flips.len() as f64,
        !flips.is_empty(),
        "at least one flip instance changes the target forward",
    );
    Ok(())
}

/// Runs the selected suites in order.
pub fn run_suites(suites: &[Suite], options: &VerifyOptions) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for suite in suites {
        match suite {
            Suite::Autodiff => autodiff_suite(&mut report, options)?,
            Suite::Enumeration => enumeration_suite(&mut report, options)?,
            Suite::OrderStudy => order_suite(&mut report, options)?,
            Suite::ReplayIdentity => replay_suite(&mut report, options)?,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector() {
        assert_eq!(Suite::parse_selector("all").unwrap().len(), 4);
        assert_eq!(Suite::parse_selector("order-study").unwrap(), vec![Suite::OrderStudy]);
        let err = Suite::parse_selector("bogus").unwrap_err().to_string();
        assert!(err.contains("autodiff") && err.contains("replay-identity"));
    }

    #[test]
    fn enumerated_reward_matches_sampling() {
        use crate::rollout::sample_response;
        let params = study_policy(3);
        let domain = study_domain();
        let task = study_task();
        let exact = EngineConfig::exact();
        let j = enumerate_expected_reward(&params, &domain, &task, &exact).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mut total = 0.0;
        for _ in 0..n {
            let (y, ..) = sample_response(&params, &domain.prompt, domain.max_len, &exact, &mut rng).unwrap();
            total += task.reward(&domain.prompt, &y);
        }
        let mc = total / n as f64;
        let sigma = (j * (1.0 - j) / n as f64).sqrt();
        assert!((mc - j).abs() <= 4.0 * sigma, "mc {mc} vs enumerated {j}");
    }

    #[test]
    fn suites_pass() {
        let report = run_suites(&Suite::ALL, &VerifyOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
    }
}
