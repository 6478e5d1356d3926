//! Token-level surrogate objectives: MiniRL, GRPO and CISPO.
//!
//! Every loss is a scalar graph node whose gradient is the surrogate's
//! policy gradient. Coefficients that carry a stop-gradient (IS weights,
//! clip masks, advantages) enter as constants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::dual_engine::{decompose_is_weight, EngineConfig, IsWeightFactors};
use crate::error::{Error, Result};
use crate::policy::{score_response, BoundParams, GateReplay, PolicyParams, RoutingTrace};
use crate::rollout::RolloutRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveFamily {
    #[default]
    Minirl,
    Grpo,
    Cispo,
}

/// Which recorded routing the training forward replays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    #[default]
    None,
    /// Replay the training engine's routing at the rollout parameters.
    R2,
    /// Replay the inference engine's routing from sampling time.
    R3,
}

impl ReplayMode {
    pub fn label(self) -> &'static str {
        match self {
            ReplayMode::None => "none",
            ReplayMode::R2 => "R2",
            ReplayMode::R3 => "R3",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    /// `r − mean(group)`.
    #[default]
    MeanOnly,
    /// `(r − mean) / std`, with 0 for a constant-reward group.
    MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSpec {
    pub family: ObjectiveFamily,
    /// Divide each response's token sum by its length (MiniRL only).
    pub length_norm: bool,
    /// Weight by `π_θ/μ_old`; when off, MiniRL weights by `π_θ/π_old`.
    pub train_infer_is: bool,
    pub clip: bool,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Upper cap on the IS weight (MiniRL only); `None` leaves it raw.
    pub tis_cap: Option<f64>,
    pub replay: ReplayMode,
    pub advantage_norm: AdvantageNorm,
    pub gate_replay: GateReplay,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            family: ObjectiveFamily::Minirl,
            length_norm: false,
            train_infer_is: true,
            clip: true,
            eps_low: 0.2,
            eps_high: 0.27,
            tis_cap: Some(5.0),
            replay: ReplayMode::None,
            advantage_norm: AdvantageNorm::MeanOnly,
            gate_replay: GateReplay::Recompute,
        }
    }
}

impl ObjectiveSpec {
    pub fn minirl() -> Self {
        Self::default()
    }

    pub fn grpo() -> Self {
        Self {
            family: ObjectiveFamily::Grpo,
            length_norm: true,
            train_infer_is: false,
            advantage_norm: AdvantageNorm::MeanStd,
            tis_cap: None,
            ..Self::default()
        }
    }

    pub fn cispo() -> Self {
        Self {
            family: ObjectiveFamily::Cispo,
            train_infer_is: false,
            tis_cap: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(Error::config("objective.eps_low", "must lie in (0, 1)"));
        }
        if !(self.eps_high > 0.0 && self.eps_high.is_finite()) {
            return Err(Error::config("objective.eps_high", "must be positive"));
        }
        if let Some(cap) = self.tis_cap {
            if !(cap >= 1.0 && cap.is_finite()) {
                return Err(Error::config("objective.tis_cap", "must be finite and at least 1"));
            }
        }
        Ok(())
    }
}

/// Advantage from carried group statistics.
pub fn advantage(reward: f64, mean: f64, std: f64, norm: AdvantageNorm) -> f64 {
    match norm {
        AdvantageNorm::MeanOnly => reward - mean,
        AdvantageNorm::MeanStd if std == 0.0 => 0.0,
        AdvantageNorm::MeanStd => (reward - mean) / std,
    }
}

/// Group-relative advantages of one group's rewards.
pub fn group_advantages(rewards: &[f64], norm: AdvantageNorm) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    let (mean, std) = crate::rollout::group_stats(rewards);
    Ok(rewards.iter().map(|&r| advantage(r, mean, std, norm)).collect())
}

/// `M_t`: 0 when the ratio has already moved past the trust region in the
/// direction the advantage pushes it, else 1.
pub fn clip_mask(advantage: f64, ratio: f64, eps_low: f64, eps_high: f64) -> f64 {
    if (advantage > 0.0 && ratio > 1.0 + eps_high) || (advantage < 0.0 && ratio < 1.0 - eps_low) {
        0.0
    } else {
        1.0
    }
}

/// Truncated importance sampling: `min(w, cap)`.
pub fn apply_tis(weight: f64, cap: Option<f64>) -> f64 {
    match cap {
        Some(c) => weight.min(c),
        None => weight,
    }
}

/// Normalisers of one optimizer update, fixed before any chunking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossScale {
    pub records: usize,
    pub tokens: usize,
}

impl LossScale {
    pub fn of(records: &[RolloutRecord]) -> Self {
        Self {
            records: records.len(),
            tokens: records.iter().map(|r| r.len()).sum(),
        }
    }
}

/// Per-token quantities seen while building a loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenDiagnostics {
    pub log_prob: f64,
    pub proximal_log_prob: f64,
    /// `π_θ / π_prox`.
    pub ratio: f64,
    /// `π_θ/μ_old` split into discrepancy × staleness.
    pub factors: IsWeightFactors,
    /// Weight after truncation, as used in the coefficient.
    pub weight: f64,
    pub mask: f64,
    /// Exact entropy of the next-token distribution at this step.
    pub entropy: f64,
}

/// A surrogate loss on its own graph.
pub struct SurrogateLoss<'p> {
    pub graph: Graph<'p>,
    pub loss: NodeId,
    pub bound: BoundParams,
    pub tokens: Vec<TokenDiagnostics>,
}

impl SurrogateLoss<'_> {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).item()
    }

    /// Gradients in [`PolicyParams::named_tensors`] order.
    pub fn gradients(&self) -> Result<Vec<Tensor>> {
        let mut grads = self.graph.backward(self.loss)?;
        Ok(self
            .bound
            .node_ids()
            .into_iter()
            .map(|id| {
                grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(id).shape()))
            })
            .collect())
    }
}

fn replay_trace<'r>(record: &'r RolloutRecord, mode: ReplayMode) -> Result<Option<&'r RoutingTrace>> {
    let trace = match mode {
        ReplayMode::None => return Ok(None),
        ReplayMode::R2 => &record.pi_old_routing,
        ReplayMode::R3 => &record.mu_old_routing,
    };
    if trace.len() != record.len() {
        return Err(Error::MissingReplayTrace { mode: mode.label() });
    }
    Ok(Some(trace))
}

fn proximal(record: &RolloutRecord, mode: ReplayMode) -> &[f64] {
    match mode {
        ReplayMode::R3 => &record.pi_old_log_probs_mu_routing,
        _ => &record.pi_old_log_probs,
    }
}

fn check_record(record: &RolloutRecord) -> Result<()> {
    if record.is_empty() {
        return Err(Error::EmptyResponse);
    }
    for (what, len) in [
        ("μ_old log-probs", record.mu_old_log_probs.len()),
        ("π_old log-probs", record.pi_old_log_probs.len()),
        ("π_old log-probs under μ routing", record.pi_old_log_probs_mu_routing.len()),
    ] {
        if len != record.len() {
            return Err(Error::LengthMismatch {
                what,
                left: record.len(),
                right: len,
            });
        }
    }
    Ok(())
}

/// Builds the scalar surrogate loss of `records`, normalised by `scale`
/// (usually [`LossScale::of`] the whole mini-batch).
pub fn build_surrogate<'p>(
    params: &'p PolicyParams,
    records: &[RolloutRecord],
    spec: &ObjectiveSpec,
    scale: LossScale,
) -> Result<SurrogateLoss<'p>> {
    spec.validate()?;
    if records.is_empty() || scale.records == 0 || scale.tokens == 0 {
        return Err(Error::InvalidArgument("a surrogate needs at least one record".into()));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, true);
    let exact = EngineConfig::exact();
    let mut terms: Vec<NodeId> = Vec::with_capacity(records.len());
    let mut constant = 0.0;
    let mut tokens = Vec::new();

    for record in records {
        check_record(record)?;
        let n = record.len();
        let trace = replay_trace(record, spec.replay)?;
        let scored = score_response(
            &mut graph,
            &bound,
            &params.config,
            &record.prompt,
            &record.response,
            trace.map(|t| (t, spec.gate_replay)),
            &exact,
        )?;
        let lp: Vec<f64> = graph.value(scored.token_log_probs).data().to_vec();
        let prox = proximal(record, spec.replay);
        let factors = decompose_is_weight(&lp, prox, &record.mu_old_log_probs)?;
        let adv = advantage(
            record.reward,
            record.group_reward_mean,
            record.group_reward_std,
            spec.advantage_norm,
        );
        let rows = graph.value(scored.row_log_probs);
        let entropies: Vec<f64> = (0..n)
            .map(|t| -rows.row_slice(t).iter().map(|&l| l.exp() * l).sum::<f64>())
            .collect();

        let mut coef = vec![0.0; n];
        for t in 0..n {
            let ratio = (lp[t] - prox[t]).exp();
            let (weight, mask) = match spec.family {
                ObjectiveFamily::Minirl => {
                    let raw = if spec.train_infer_is {
                        factors[t].full
                    } else {
                        ratio
                    };
                    let mask = if spec.clip {
                        clip_mask(adv, ratio, spec.eps_low, spec.eps_high)
                    } else {
                        1.0
                    };
                    (apply_tis(raw, spec.tis_cap), mask)
                }
                ObjectiveFamily::Grpo => {
                    let mask = if spec.clip {
                        clip_mask(adv, ratio, spec.eps_low, spec.eps_high)
                    } else {
                        1.0
                    };
                    (ratio, mask)
                }
                ObjectiveFamily::Cispo => {
                    let w = if spec.clip {
                        ratio.clamp(1.0 - spec.eps_low, 1.0 + spec.eps_high)
                    } else {
                        ratio
                    };
                    (w, 1.0)
                }
            };
            tokens.push(TokenDiagnostics {
                log_prob: lp[t],
                proximal_log_prob: prox[t],
                ratio,
                factors: factors[t],
                weight,
                mask,
                entropy: entropies[t],
            });
            coef[t] = match spec.family {
                ObjectiveFamily::Minirl => {
                    let len_scale = if spec.length_norm { 1.0 / n as f64 } else { 1.0 };
                    mask * weight * adv * len_scale / scale.records as f64
                }
                ObjectiveFamily::Grpo => {
                    let per = adv / (n as f64 * scale.records as f64);
                    if mask == 0.0 {
                        // the clipped branch is a constant in θ
                        let bound = if adv > 0.0 {
                            1.0 + spec.eps_high
                        } else {
                            1.0 - spec.eps_low
                        };
                        constant += bound * per;
                        0.0
                    } else {
                        per
                    }
                }
                ObjectiveFamily::Cispo => weight * adv / scale.tokens as f64,
            };
        }

        let coef = graph.constant(Tensor::column(coef));
        let term = match spec.family {
            ObjectiveFamily::Grpo => {
                let prox = graph.constant(Tensor::column(prox.to_vec()));
                let log_ratio = graph.sub(scored.token_log_probs, prox)?;
                let ratio = graph.exp(log_ratio);
                graph.mul(ratio, coef)?
            }
            _ => graph.mul(scored.token_log_probs, coef)?,
        };
        terms.push(graph.sum(term));
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = graph.add(total, t)?;
    }
    if constant != 0.0 {
        let c = graph.constant(Tensor::scalar(constant));
        total = graph.add(total, c)?;
    }
    let loss = graph.scale(total, -1.0);
    Ok(SurrogateLoss {
        graph,
        loss,
        bound,
        tokens,
    })
}

fn with_family(spec: &ObjectiveSpec, family: ObjectiveFamily) -> ObjectiveSpec {
    ObjectiveSpec {
        family,
        ..spec.clone()
    }
}

/// MiniRL surrogate over a mini-batch.
pub fn minirl_loss<'p>(
    params: &'p PolicyParams,
    records: &[RolloutRecord],
    spec: &ObjectiveSpec,
) -> Result<SurrogateLoss<'p>> {
    build_surrogate(params, records, &with_family(spec, ObjectiveFamily::Minirl), LossScale::of(records))
}

/// GRPO clipped-ratio surrogate over a mini-batch.
pub fn grpo_loss<'p>(
    params: &'p PolicyParams,
    records: &[RolloutRecord],
    spec: &ObjectiveSpec,
) -> Result<SurrogateLoss<'p>> {
    build_surrogate(params, records, &with_family(spec, ObjectiveFamily::Grpo), LossScale::of(records))
}

/// CISPO clipped-weight surrogate over a mini-batch.
pub fn cispo_loss<'p>(
    params: &'p PolicyParams,
    records: &[RolloutRecord],
    spec: &ObjectiveSpec,
) -> Result<SurrogateLoss<'p>> {
    build_surrogate(params, records, &with_family(spec, ObjectiveFamily::Cispo), LossScale::of(records))
}

/// Loss value, gradients and token diagnostics of a whole mini-batch.
#[derive(Clone, Debug)]
pub struct SurrogateEval {
    pub loss: f64,
    pub gradients: Vec<Tensor>,
    pub tokens: Vec<TokenDiagnostics>,
}

/// Evaluates the mini-batch surrogate in fixed-size chunks on the rayon
/// pool and sums the chunk gradients in chunk order, so the result does not
/// depend on the number of workers.
pub fn surrogate_gradient(
    params: &PolicyParams,
    records: &[RolloutRecord],
    spec: &ObjectiveSpec,
    chunk_size: usize,
) -> Result<SurrogateEval> {
    let scale = LossScale::of(records);
    let parts: Vec<(f64, Vec<Tensor>, Vec<TokenDiagnostics>)> = records
        .par_chunks(chunk_size.max(1))
        .map(|chunk| {
            let loss = build_surrogate(params, chunk, spec, scale)?;
            Ok((loss.value(), loss.gradients()?, loss.tokens))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut gradients, mut tokens) = iter
        .next()
        .ok_or_else(|| Error::InvalidArgument("a surrogate needs at least one record".into()))?;
    for (l, g, t) in iter {
        loss += l;
        for (acc, part) in gradients.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
        tokens.extend(t);
    }
    Ok(SurrogateEval {
        loss,
        gradients,
        tokens,
    })
}
