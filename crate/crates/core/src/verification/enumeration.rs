use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::dual_engine::EngineConfig;
use crate::error::{Error, Result};
use crate::objectives::ReplayMode;
use crate::policy::{evaluate_response, score_response, GateReplay, PolicyParams, Token, EOS};
use crate::rollout::Task;

/// Every terminal response to one prompt: EOS-terminated of length ≤ L, or
/// EOS-free of length exactly L (truncated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationDomain {
    pub vocab_size: usize,
    pub max_len: usize,
    pub prompt: Vec<Token>,
    /// Largest number of sequences the enumeration may visit.
    pub budget: u128,
}

impl EnumerationDomain {
    pub fn new(vocab_size: usize, max_len: usize, prompt: Vec<Token>) -> Self {
        Self {
            vocab_size,
            max_len,
            prompt,
            budget: 1_000_000,
        }
    }

    /// Number of terminal sequences, saturating.
    pub fn count(&self) -> u128 {
        let b = (self.vocab_size as u128).saturating_sub(1);
        let mut total: u128 = 0;
        let mut pow: u128 = 1;
        for _ in 0..self.max_len {
            total = total.saturating_add(pow);
            pow = pow.saturating_mul(b);
        }
        total.saturating_add(pow)
    }

    pub fn sequences(&self) -> Result<Vec<Vec<Token>>> {
        if self.vocab_size < 2 || self.max_len == 0 {
            return Err(Error::InvalidArgument(
                "enumeration needs a vocabulary of at least 2 and max_len ≥ 1".into(),
            ));
        }
        let count = self.count();
        if count > self.budget {
            return Err(Error::BudgetExceeded {
                count,
                budget: self.budget,
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut prefixes: Vec<Vec<Token>> = vec![Vec::new()];
        for depth in 0..self.max_len {
            let mut next = Vec::new();
            for prefix in &prefixes {
                let mut done = prefix.clone();
                done.push(EOS);
                out.push(done);
                for t in 1..self.vocab_size {
                    let mut p = prefix.clone();
                    p.push(t);
                    if depth + 1 == self.max_len {
                        out.push(p);
                    } else {
                        next.push(p);
                    }
                }
            }
            prefixes = next;
        }
        Ok(out)
    }
}

/// How each token's score-function term is weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenWeighting {
    /// `π_θ/μ_old`: corrects both discrepancy and staleness.
    FullIs,
    /// `π_θ/π_old`: staleness only, dropping the train–inference factor.
    StalenessOnly,
}

struct SeqEval {
    response: Vec<Token>,
    reward: f64,
    mu_lp: Vec<f64>,
    pi_old_lp: Vec<f64>,
    mu_routing: crate::policy::RoutingTrace,
    pi_old_routing: crate::policy::RoutingTrace,
}

fn rollout_side(
    rollout: &PolicyParams,
    domain: &EnumerationDomain,
    task: &dyn Task,
    engine: &EngineConfig,
) -> Result<Vec<SeqEval>> {
    check_vocab(rollout, domain)?;
    let exact = EngineConfig::exact();
    domain
        .sequences()?
        .into_par_iter()
        .map(|response| {
            let mu = evaluate_response(rollout, &domain.prompt, &response, None, engine)?;
            let pi = if engine.is_exact() {
                mu.clone()
            } else {
                evaluate_response(rollout, &domain.prompt, &response, None, &exact)?
            };
            Ok(SeqEval {
                reward: task.reward(&domain.prompt, &response),
                response,
                mu_lp: mu.token_log_probs,
                pi_old_lp: pi.token_log_probs,
                mu_routing: mu.routing,
                pi_old_routing: pi.routing,
            })
        })
        .collect()
}

fn check_vocab(params: &PolicyParams, domain: &EnumerationDomain) -> Result<()> {
    if params.config.vocab_size != domain.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "policy vocabulary {} differs from the domain's {}",
            params.config.vocab_size, domain.vocab_size
        )));
    }
    Ok(())
}

/// Total probability the engine assigns to the terminal sequences; 1 up to
/// rounding for any parameters.
pub fn enumeration_mass(params: &PolicyParams, domain: &EnumerationDomain, engine: &EngineConfig) -> Result<f64> {
    check_vocab(params, domain)?;
    let probs: Vec<f64> = domain
        .sequences()?
        .par_iter()
        .map(|y| {
            let e = evaluate_response(params, &domain.prompt, y, None, engine)?;
            Ok(e.token_log_probs.iter().sum::<f64>().exp())
        })
        .collect::<Result<_>>()?;
    Ok(probs.iter().sum())
}

/// Exact `J = Σ_y π(y|x)·R(x, y)` under the given engine.
pub fn enumerate_expected_reward(
    params: &PolicyParams,
    domain: &EnumerationDomain,
    task: &dyn Task,
    engine: &EngineConfig,
) -> Result<f64> {
    check_vocab(params, domain)?;
    let terms: Vec<f64> = domain
        .sequences()?
        .par_iter()
        .map(|y| {
            let e = evaluate_response(params, &domain.prompt, y, None, engine)?;
            Ok(e.token_log_probs.iter().sum::<f64>().exp() * task.reward(&domain.prompt, y))
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// Σ over sequences of `Σ_t c_t ∇ log π_θ(y_t | ·)`, with `coef` giving the
/// per-token constants from the sequence's target log-probs.
fn weighted_gradient<F>(
    target: &PolicyParams,
    seqs: &[SeqEval],
    domain: &EnumerationDomain,
    replay: ReplayMode,
    coef: F,
) -> Result<Vec<f64>>
where
    F: Fn(&SeqEval, &[f64]) -> Vec<f64> + Sync,
{
    check_vocab(target, domain)?;
    let exact = EngineConfig::exact();
    let parts: Vec<Vec<f64>> = seqs
        .par_iter()
        .map(|s| {
            let trace = match replay {
                ReplayMode::None => None,
                ReplayMode::R2 => Some(&s.pi_old_routing),
                ReplayMode::R3 => Some(&s.mu_routing),
            };
            let mut graph = Graph::new();
            let bound = target.bind(&mut graph, true);
            let scored = score_response(
                &mut graph,
                &bound,
                &target.config,
                &domain.prompt,
                &s.response,
                trace.map(|t| (t, GateReplay::Recompute)),
                &exact,
            )?;
            let lp = graph.value(scored.token_log_probs).data().to_vec();
            let c = graph.constant(Tensor::column(coef(s, &lp)));
            let weighted = graph.mul(scored.token_log_probs, c)?;
            let loss = graph.sum(weighted);
            let mut grads = graph.backward(loss)?;
            let mut flat = Vec::with_capacity(target.num_params());
            for id in bound.node_ids() {
                match grads.take(id) {
                    Some(t) => flat.extend_from_slice(t.data()),
                    None => flat.extend(std::iter::repeat(0.0).take(graph.value(id).len())),
                }
            }
            Ok(flat)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; target.num_params()];
    for part in &parts {
        for (a, b) in total.iter_mut().zip(part) {
            *a += b;
        }
    }
    Ok(total)
}

/// Exact sequence-level gradient
/// `Σ_y μ_old(y)·(π_θ(y)/μ_old(y))·R(y)·∇ log π_θ(y)`, with `μ_old` from
/// the (possibly emulated) inference engine on the rollout parameters and
/// `π_θ` from the training engine on the target parameters.
pub fn enumerate_seq_gradient(
    target: &PolicyParams,
    rollout: &PolicyParams,
    domain: &EnumerationDomain,
    task: &dyn Task,
    engine: &EngineConfig,
) -> Result<Vec<f64>> {
    let seqs = rollout_side(rollout, domain, task, engine)?;
    weighted_gradient(target, &seqs, domain, ReplayMode::None, |s, lp| {
        let log_mu: f64 = s.mu_lp.iter().sum();
        let log_pi: f64 = lp.iter().sum();
        let c = log_mu.exp() * (log_pi - log_mu).exp() * s.reward;
        vec![c; lp.len()]
    })
}

/// Exact token-level surrogate gradient
/// `Σ_y μ_old(y)·Σ_t w_t·R(y)·∇ log π_θ(y_t | ·)`, with the target forward
/// under the routing override of `replay`.
pub fn enumerate_token_gradient(
    target: &PolicyParams,
    rollout: &PolicyParams,
    domain: &EnumerationDomain,
    task: &dyn Task,
    engine: &EngineConfig,
    replay: ReplayMode,
    weighting: TokenWeighting,
) -> Result<Vec<f64>> {
    let mut seqs = rollout_side(rollout, domain, task, engine)?;
    if weighting == TokenWeighting::StalenessOnly && replay != ReplayMode::None {
        // the proximal policy shares the target's routing
        let exact = EngineConfig::exact();
        for s in &mut seqs {
            let trace = match replay {
                ReplayMode::R2 => &s.pi_old_routing,
                _ => &s.mu_routing,
            };
            s.pi_old_lp = evaluate_response(
                rollout,
                &domain.prompt,
                &s.response,
                Some((trace, GateReplay::Recompute)),
                &exact,
            )?
            .token_log_probs;
        }
    }
    weighted_gradient(target, &seqs, domain, replay, |s, lp| {
        let mu_seq = s.mu_lp.iter().sum::<f64>().exp();
        lp.iter()
            .enumerate()
            .map(|(t, &l)| {
                let w = match weighting {
                    TokenWeighting::FullIs => (l - s.mu_lp[t]).exp(),
                    TokenWeighting::StalenessOnly => (l - s.pi_old_lp[t]).exp(),
                };
                mu_seq * w * s.reward
            })
            .collect()
    })
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `‖a − b‖ / ‖b‖`; errors when `‖b‖` is below 1e−12.
pub fn relative_gap(a: &[f64], reference: &[f64]) -> Result<f64> {
    let norm = l2_norm(reference);
    if norm < 1e-12 {
        return Err(Error::DegenerateDirection { norm });
    }
    Ok(l2_distance(a, reference) / norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub alpha: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderStudy {
    pub rows: Vec<OrderRow>,
    /// Least-squares slope of `log e` against `log α` over rows with α > 0.
    pub slope: f64,
}

impl OrderStudy {
    /// `e` decreases strictly as `α` decreases.
    pub fn monotone(&self) -> bool {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        rows.windows(2).all(|w| w[0].error < w[1].error)
    }

    pub fn error_at(&self, alpha: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.alpha == alpha).map(|r| r.error)
    }
}

pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Relative gap between the token-level and sequence-level gradients with
/// rollout `θ_old = params` and target `θ_old + αΔ`, exact engine.
pub fn approximation_order_study(
    params: &PolicyParams,
    domain: &EnumerationDomain,
    task: &dyn Task,
    direction: &[f64],
    alphas: &[f64],
) -> Result<OrderStudy> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("no α values".into()));
    }
    let exact = EngineConfig::exact();
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let target = params.perturbed(direction, alpha)?;
        let seq = enumerate_seq_gradient(&target, params, domain, task, &exact)?;
        let token = enumerate_token_gradient(
            &target,
            params,
            domain,
            task,
            &exact,
            ReplayMode::None,
            TokenWeighting::FullIs,
        )?;
        rows.push(OrderRow {
            alpha,
            error: relative_gap(&token, &seq)?,
        });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.error)).collect();
    Ok(OrderStudy {
        slope: loglog_slope(&points),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rollout::FnTask;

    fn tiny(v: usize) -> PolicyParams {
        PolicyParams::zeros(PolicyConfig {
            vocab_size: v,
            d_model: 4,
            d_hidden: 4,
            num_experts: 2,
            top_k: 1,
            num_layers: 1,
            max_positions: 8,
            init_scale: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn counts_terminal_sequences() {
        let d = EnumerationDomain::new(3, 4, vec![1]);
        assert_eq!(d.count(), 31);
        let seqs = d.sequences().unwrap();
        assert_eq!(seqs.len(), 31);
        let mut sorted = seqs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 31);
        assert!(seqs.iter().all(|s| s.len() == 4 || s.last() == Some(&EOS)));
    }

    #[test]
    fn budget_guard() {
        let mut d = EnumerationDomain::new(16, 9, vec![1]);
        d.budget = 1000;
        assert!(matches!(d.sequences(), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn uniform_policy_two_by_two() {
        // sequences [0], [1,0], [1,1] with probabilities 1/2, 1/4, 1/4
        let params = tiny(2);
        let d = EnumerationDomain::new(2, 2, vec![1]);
        let task = FnTask::new("t", 2, 2, vec![1], |_: &[Token], y: &[Token]| (y == [1, 1]) as u8 as f64);
        let j = enumerate_expected_reward(&params, &d, &task, &EngineConfig::exact()).unwrap();
        assert!((j - 0.25).abs() < 1e-15);
        let one = FnTask::new("t", 2, 2, vec![1], |_: &[Token], _: &[Token]| 1.0);
        let j = enumerate_expected_reward(&params, &d, &one, &EngineConfig::exact()).unwrap();
        assert!((j - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3].iter().map(|&a| (a, 3.0 * a * a)).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }
}
