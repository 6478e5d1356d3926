//! Per-step measurements of the policy and of the train/inference gap.

use serde::{Deserialize, Serialize};

use crate::dual_engine::EngineConfig;
use crate::error::{Error, Result};
use crate::objectives::TokenDiagnostics;
use crate::policy::{next_token_log_probs, PolicyParams, Token};
use crate::rollout::RolloutRecord;

/// Exact entropy of a log-probability vector.
pub fn entropy_of(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|&l| l.exp() * l).sum::<f64>()
}

/// Mean exact next-token entropy under the training engine over `contexts`.
pub fn entropy_estimate(params: &PolicyParams, contexts: &[Vec<Token>]) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("no contexts to measure entropy on".into()));
    }
    let exact = EngineConfig::exact();
    let mut total = 0.0;
    for context in contexts {
        let (lp, _) = next_token_log_probs(params, context, &exact)?;
        total += entropy_of(&lp);
    }
    Ok(total / contexts.len() as f64)
}

/// Response-step contexts (`prompt ++ response[..t]`) of some records.
pub fn response_contexts(records: &[RolloutRecord]) -> Vec<Vec<Token>> {
    let mut out = Vec::new();
    for r in records {
        for t in 0..r.len() {
            let mut c = r.prompt.clone();
            c.extend_from_slice(&r.response[..t]);
            out.push(c);
        }
    }
    out
}

/// Monte-Carlo estimate of `KL(μ_old ‖ π_old)` on sampled tokens:
/// the mean of `log μ_old − log π_old` over all tokens (0 with no tokens).
pub fn train_infer_kl(records: &[RolloutRecord]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for r in records {
        for (mu, pi) in r.mu_old_log_probs.iter().zip(&r.pi_old_log_probs) {
            total += mu - pi;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fraction of tokens whose clip mask is 0.
pub fn clip_fraction(masks: &[f64]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    masks.iter().filter(|&&m| m == 0.0).count() as f64 / masks.len() as f64
}

/// Fraction of tokens whose inference-time expert set differs from the
/// training engine's at any layer.
pub fn routing_flip_rate(records: &[RolloutRecord]) -> f64 {
    let mut flips = 0usize;
    let mut count = 0usize;
    for r in records {
        let n = r.mu_old_routing.len().min(r.pi_old_routing.len());
        for t in 0..n {
            flips += r.mu_old_routing.differs_at(&r.pi_old_routing, t) as usize;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        flips as f64 / count as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mean: f64,
    pub max: f64,
    /// Nearest-rank 99th percentile.
    pub p99: f64,
}

pub fn weight_stats(weights: &[f64]) -> WeightStats {
    if weights.is_empty() {
        return WeightStats::default();
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    WeightStats {
        mean: weights.iter().sum::<f64>() / n as f64,
        max: sorted[n - 1],
        p99: sorted[rank - 1],
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let (mean, std) = crate::rollout::group_stats(values);
    MeanStd { mean, std }
}

/// One line of `metrics.jsonl`, written after every optimizer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub minibatch: usize,
    pub update: u64,
    /// Mean reward of the whole rollout batch of this step.
    pub reward_mean: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean exact entropy at the mini-batch's response steps.
    pub entropy: f64,
    pub train_infer_kl: f64,
    /// Untruncated `π_θ/μ_old` over the mini-batch tokens.
    pub is_weight: WeightStats,
    pub log_discrepancy: MeanStd,
    pub log_staleness: MeanStd,
    pub clip_fraction: f64,
    pub routing_flip_rate: f64,
    pub tokens: usize,
    pub mean_response_len: f64,
}

/// Token-level part of a metrics line.
pub struct TokenSummary {
    pub entropy: f64,
    pub is_weight: WeightStats,
    pub log_discrepancy: MeanStd,
    pub log_staleness: MeanStd,
    pub clip_fraction: f64,
}

pub fn summarize_tokens(tokens: &[TokenDiagnostics]) -> TokenSummary {
    let entropy = if tokens.is_empty() {
        0.0
    } else {
        tokens.iter().map(|t| t.entropy).sum::<f64>() / tokens.len() as f64
    };
    let full: Vec<f64> = tokens.iter().map(|t| t.factors.full).collect();
    let disc: Vec<f64> = tokens.iter().map(|t| t.factors.log_discrepancy).collect();
    let stale: Vec<f64> = tokens.iter().map(|t| t.factors.log_staleness).collect();
    let masks: Vec<f64> = tokens.iter().map(|t| t.mask).collect();
    TokenSummary {
        entropy,
        is_weight: weight_stats(&full),
        log_discrepancy: mean_std(&disc),
        log_staleness: mean_std(&stale),
        clip_fraction: clip_fraction(&masks),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{LayerRoute, PolicyConfig, RoutingTrace};

    fn record(mu: Vec<f64>, pi: Vec<f64>, mu_experts: &[usize], pi_experts: &[usize]) -> RolloutRecord {
        let trace = |experts: &[usize]| {
            RoutingTrace::new(
                experts
                    .iter()
                    .map(|&e| {
                        vec![LayerRoute {
                            experts: vec![e],
                            gates: vec![1.0],
                        }]
                    })
                    .collect(),
            )
        };
        RolloutRecord {
            prompt: vec![2],
            response: vec![3; mu.len()],
            pi_old_log_probs_mu_routing: pi.clone(),
            mu_old_log_probs: mu,
            pi_old_log_probs: pi,
            mu_old_routing: trace(mu_experts),
            pi_old_routing: trace(pi_experts),
            reward: 0.0,
            policy_version: 0,
            group_id: 0,
            group_reward_mean: 0.0,
            group_reward_std: 0.0,
            truncated: false,
        }
    }

    #[test]
    fn uniform_entropy_is_log_v() {
        let v = 8;
        let lp = vec![-(v as f64).ln(); v];
        assert!((entropy_of(&lp) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_policy_has_maximal_entropy() {
        let config = PolicyConfig {
            vocab_size: 5,
            d_model: 4,
            d_hidden: 4,
            num_experts: 2,
            top_k: 1,
            num_layers: 1,
            max_positions: 8,
            init_scale: 1.0,
        };
        let params = PolicyParams::zeros(config).unwrap();
        let h = entropy_estimate(&params, &[vec![1, 2], vec![3]]).unwrap();
        assert!((h - 5f64.ln()).abs() < 1e-12);
        assert!(entropy_estimate(&params, &[]).is_err());
    }

    #[test]
    fn weight_stats_nearest_rank() {
        let w: Vec<f64> = (1..=200).map(|i| i as f64).collect();
        let s = weight_stats(&w);
        assert_eq!(s.max, 200.0);
        assert_eq!(s.p99, 198.0);
        assert_eq!(s.mean, 100.5);
        assert_eq!(weight_stats(&[]), WeightStats::default());
    }

    #[test]
    fn clip_fraction_counts_zeros() {
        assert_eq!(clip_fraction(&[1.0, 0.0, 1.0, 0.0]), 0.5);
        assert_eq!(clip_fraction(&[]), 0.0);
    }

    #[test]
    fn kl_of_halved_probability_is_ln2() {
        let r = record(vec![0.5f64.ln()], vec![0.25f64.ln()], &[0], &[0]);
        assert!((train_infer_kl(&[r]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(train_infer_kl(&[]), 0.0);
    }

    #[test]
    fn flip_rate_counts_tokens() {
        let a = record(vec![0.0; 4], vec![0.0; 4], &[0, 1, 2, 3], &[0, 1, 0, 3]);
        let b = record(vec![0.0; 4], vec![0.0; 4], &[1, 1, 1, 1], &[1, 1, 1, 1]);
        assert_eq!(routing_flip_rate(&[a, b]), 1.0 / 8.0);
    }

    #[test]
    fn response_contexts_are_prefixes() {
        let mut r = record(vec![0.0; 2], vec![0.0; 2], &[0, 0], &[0, 0]);
        r.response = vec![4, 5];
        assert_eq!(response_contexts(&[r]), vec![vec![2], vec![2, 4]]);
    }
}
