use serde::{Deserialize, Serialize};

use super::params::{BoundParams, PolicyConfig, PolicyParams};
use super::routing::{validate_route, LayerRoute, PositionRoute, RoutingTrace};
use crate::autodiff::{log_softmax_row, top_k_indices, Graph, NodeId, Tensor};
use crate::dual_engine::{EngineConfig, QuantTarget};
use crate::error::{Error, Result};

pub type Token = usize;

/// Token id 0 terminates a response.
pub const EOS: Token = 0;

/// What Routing Replay fixes when an override is supplied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReplay {
    /// Fix the expert sets; gate weights come from the current router
    /// restricted to those experts, so the router keeps learning.
    #[default]
    Recompute,
    /// Experimental: also replay the recorded gate values as constants.
    Frozen,
}

/// Routing override for the rows being computed, one entry per row.
#[derive(Clone, Copy, Debug)]
pub struct RoutingOverride<'t> {
    pub positions: &'t [PositionRoute],
    pub gates: GateReplay,
}

/// Result of running the policy over some rows of a context.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[rows × V]` next-token logits.
    pub logits: NodeId,
    /// `[rows × V]` next-token log-probabilities.
    pub log_probs: NodeId,
    /// Routing actually used by each requested row.
    pub routing: Vec<PositionRoute>,
}

fn check_tokens(config: &PolicyConfig, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyContext);
    }
    if tokens.len() > config.max_positions {
        return Err(Error::ContextTooLong {
            len: tokens.len(),
            max: config.max_positions,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Runs embedding → causal mean-pool mixer → MoE blocks → output projection
/// for the selected `rows` of `tokens`. Row `i` only sees tokens `0..=i`.
///
/// Every row is computed independently after the mixer, so the values of a
/// row do not depend on which other rows were requested.
#[allow(clippy::too_many_arguments)]
pub fn forward_rows<'a>(
    graph: &mut Graph<'a>,
    params: &BoundParams,
    config: &PolicyConfig,
    tokens: &[Token],
    rows: &[usize],
    routing_override: Option<RoutingOverride<'_>>,
    engine: &EngineConfig,
) -> Result<ForwardOutput> {
    check_tokens(config, tokens)?;
    let t_len = tokens.len();
    if let Some(&bad) = rows.iter().find(|&&r| r >= t_len) {
        return Err(Error::InvalidArgument(format!(
            "row {bad} outside context of length {t_len}"
        )));
    }
    if let Some(ov) = &routing_override {
        if ov.positions.len() != rows.len() {
            return Err(Error::OverrideLengthMismatch {
                expected: rows.len(),
                found: ov.positions.len(),
            });
        }
        for position in ov.positions {
            if position.len() != config.num_layers {
                return Err(Error::OverrideLayerMismatch {
                    expected: config.num_layers,
                    found: position.len(),
                });
            }
            for route in position {
                validate_route(route, config.num_experts)?;
            }
        }
    }

    let positions: Vec<usize> = (0..t_len).collect();
    let tok = graph.gather_rows(params.token_embedding, tokens)?;
    let pos = graph.gather_rows(params.position_embedding, &positions)?;
    let embedded = graph.add(tok, pos)?;
    let embedded = engine.apply(graph, embedded, QuantTarget::Activations);

    let mixed = graph.matmul(embedded, params.mixer)?;
    let features = graph.relu(mixed);
    let features = engine.apply(graph, features, QuantTarget::Activations);

    let mut pool = vec![0.0; rows.len() * t_len];
    for (i, &r) in rows.iter().enumerate() {
        let w = 1.0 / (r + 1) as f64;
        pool[i * t_len..i * t_len + r + 1].fill(w);
    }
    let pool = graph.constant(Tensor::matrix(rows.len(), t_len, pool)?);
    let pooled = graph.matmul(pool, features)?;
    let own = graph.gather_rows(embedded, rows)?;
    let mut hidden = graph.add(own, pooled)?;
    hidden = engine.apply(graph, hidden, QuantTarget::Activations);

    let e = config.num_experts;
    let mut routing: Vec<PositionRoute> = vec![Vec::with_capacity(config.num_layers); rows.len()];
    for (l, layer) in params.layers.iter().enumerate() {
        let router_logits = graph.matmul(hidden, layer.router)?;
        let router_logits = engine.apply(graph, router_logits, QuantTarget::RouterLogits);

        let selections: Vec<Vec<usize>> = match &routing_override {
            Some(ov) => ov.positions.iter().map(|p| p[l].experts.clone()).collect(),
            None => {
                let values = graph.value(router_logits);
                (0..rows.len())
                    .map(|i| top_k_indices(values.row_slice(i), config.top_k))
                    .collect::<Result<_>>()?
            }
        };

        let gates = match &routing_override {
            Some(ov) if ov.gates == GateReplay::Frozen => {
                let mut g = vec![0.0; rows.len() * e];
                for (i, p) in ov.positions.iter().enumerate() {
                    for (&x, &w) in p[l].experts.iter().zip(&p[l].gates) {
                        g[i * e + x] = w;
                    }
                }
                graph.constant(Tensor::matrix(rows.len(), e, g)?)
            }
            _ => {
                let mut mask = vec![super::routing::GATE_MASK; rows.len() * e];
                for (i, sel) in selections.iter().enumerate() {
                    for &x in sel {
                        mask[i * e + x] = 0.0;
                    }
                }
                let mask = graph.constant(Tensor::matrix(rows.len(), e, mask)?);
                let masked = graph.add(router_logits, mask)?;
                graph.softmax_rows(masked)?
            }
        };

        {
            let gate_values = graph.value(gates);
            for (i, sel) in selections.iter().enumerate() {
                let row = gate_values.row_slice(i);
                routing[i].push(LayerRoute {
                    experts: sel.clone(),
                    gates: sel.iter().map(|&x| row[x]).collect(),
                });
            }
        }

        let mut used: Vec<usize> = selections.iter().flatten().copied().collect();
        used.sort_unstable();
        used.dedup();

        let mut acc = hidden;
        for x in used {
            let (w_in, w_out) = layer.experts[x];
            let inner = graph.matmul(hidden, w_in)?;
            let inner = graph.relu(inner);
            let inner = engine.apply(graph, inner, QuantTarget::Activations);
            let out = graph.matmul(inner, w_out)?;
            let mut pick = vec![0.0; e];
            pick[x] = 1.0;
            let pick = graph.constant(Tensor::column(pick));
            let gate_col = graph.matmul(gates, pick)?;
            let contribution = graph.mul(out, gate_col)?;
            acc = graph.add(acc, contribution)?;
        }
        hidden = engine.apply(graph, acc, QuantTarget::Activations);
    }

    let logits = graph.matmul(hidden, params.output)?;
    let logits = engine.apply(graph, logits, QuantTarget::Logits);
    let log_probs = graph.log_softmax_rows(logits)?;
    Ok(ForwardOutput {
        logits,
        log_probs,
        routing,
    })
}

/// Differentiable score of one response.
#[derive(Clone, Debug)]
pub struct ScoredResponse {
    /// `[n × 1]` log-probability of each response token.
    pub token_log_probs: NodeId,
    /// `[n × V]` full next-token log-distributions at each response step.
    pub row_log_probs: NodeId,
    pub routing: RoutingTrace,
}

/// Scores `response` after `prompt` on an existing graph. Row `t` of the
/// result conditions on `prompt ++ response[..t]`.
#[allow(clippy::too_many_arguments)]
pub fn score_response<'a>(
    graph: &mut Graph<'a>,
    params: &BoundParams,
    config: &PolicyConfig,
    prompt: &[Token],
    response: &[Token],
    routing_override: Option<(&RoutingTrace, GateReplay)>,
    engine: &EngineConfig,
) -> Result<ScoredResponse> {
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    if prompt.is_empty() {
        return Err(Error::EmptyContext);
    }
    let n = response.len();
    let mut context = Vec::with_capacity(prompt.len() + n - 1);
    context.extend_from_slice(prompt);
    context.extend_from_slice(&response[..n - 1]);
    let rows: Vec<usize> = (prompt.len() - 1..prompt.len() - 1 + n).collect();
    let ov = routing_override.map(|(trace, gates)| RoutingOverride {
        positions: &trace.positions,
        gates,
    });
    if let Some(token) = response.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: *token,
            vocab: config.vocab_size,
        });
    }
    let out = forward_rows(graph, params, config, &context, &rows, ov, engine)?;

    let v = config.vocab_size;
    let mut one_hot = vec![0.0; n * v];
    for (t, &y) in response.iter().enumerate() {
        one_hot[t * v + y] = 1.0;
    }
    let one_hot = graph.constant(Tensor::matrix(n, v, one_hot)?);
    let picked = graph.mul(out.log_probs, one_hot)?;
    let ones = graph.constant(Tensor::full(&[v, 1], 1.0));
    let token_log_probs = graph.matmul(picked, ones)?;
    Ok(ScoredResponse {
        token_log_probs,
        row_log_probs: out.log_probs,
        routing: RoutingTrace::new(out.routing),
    })
}

/// Non-differentiable evaluation of one response.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseEval {
    pub token_log_probs: Vec<f64>,
    pub routing: RoutingTrace,
    /// Full next-token log-distribution at each response step.
    pub row_log_probs: Tensor,
}

pub fn evaluate_response(
    params: &PolicyParams,
    prompt: &[Token],
    response: &[Token],
    routing_override: Option<(&RoutingTrace, GateReplay)>,
    engine: &EngineConfig,
) -> Result<ResponseEval> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let scored = score_response(
        &mut graph,
        &bound,
        &params.config,
        prompt,
        response,
        routing_override,
        engine,
    )?;
    Ok(ResponseEval {
        token_log_probs: graph.value(scored.token_log_probs).data().to_vec(),
        routing: scored.routing,
        row_log_probs: graph.value(scored.row_log_probs).clone(),
    })
}

/// Per-token `log π(y_t | x, y_<t)` under the training engine.
pub fn sequence_logprob(
    params: &PolicyParams,
    prompt: &[Token],
    response: &[Token],
    routing_override: Option<&RoutingTrace>,
) -> Result<Vec<f64>> {
    let ov = routing_override.map(|t| (t, GateReplay::Recompute));
    Ok(evaluate_response(params, prompt, response, ov, &EngineConfig::exact())?.token_log_probs)
}

/// Next-token logits after `context` together with the routing used.
pub fn policy_forward_logits(
    params: &PolicyParams,
    context: &[Token],
    routing_override: Option<&PositionRoute>,
    engine: &EngineConfig,
) -> Result<(Vec<f64>, PositionRoute)> {
    if context.is_empty() {
        return Err(Error::EmptyContext);
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let positions = routing_override.map(std::slice::from_ref);
    let ov = positions.map(|positions| RoutingOverride {
        positions,
        gates: GateReplay::Recompute,
    });
    let last = context.len() - 1;
    let mut out = forward_rows(&mut graph, &bound, &params.config, context, &[last], ov, engine)?;
    let logits = graph.value(out.logits).data().to_vec();
    Ok((logits, out.routing.remove(0)))
}

/// Next-token log-probabilities after `context`, with the routing used.
pub fn next_token_log_probs(
    params: &PolicyParams,
    context: &[Token],
    engine: &EngineConfig,
) -> Result<(Vec<f64>, PositionRoute)> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    check_tokens(&params.config, context)?;
    let last = context.len() - 1;
    let mut out = forward_rows(&mut graph, &bound, &params.config, context, &[last], None, engine)?;
    let lp = graph.value(out.log_probs).data().to_vec();
    Ok((lp, out.routing.remove(0)))
}

/// Log-softmax of a plain logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_row(logits, &mut out);
    out
}
