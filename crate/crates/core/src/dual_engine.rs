//! Training-engine vs inference-engine emulation.
//!
//! Both engines run the same policy graph on the same parameters. The
//! inference engine additionally rounds selected op outputs to a reduced
//! mantissa width, which perturbs log-probabilities and, through the
//! router logits, can change which experts a token is sent to.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::policy::{
    evaluate_response, next_token_log_probs, PolicyParams, PositionRoute, ResponseEval, Token,
};

/// Rounds `x` to `mantissa_bits` explicit fraction bits, ties to even.
///
/// Sign and exponent are kept; a carry out of the mantissa bumps the
/// exponent as usual. `mantissa_bits == 0` (or ≥ 52) leaves `x` untouched,
/// as do zeros and non-finite values.
pub fn quantize_value(x: f64, mantissa_bits: u32) -> f64 {
    if mantissa_bits == 0 || mantissa_bits >= 52 || x == 0.0 || !x.is_finite() {
        return x;
    }
    let drop = 52 - mantissa_bits;
    let bits = x.to_bits();
    let mask = (1u64 << drop) - 1;
    let half = 1u64 << (drop - 1);
    let rem = bits & mask;
    let base = bits & !mask;
    let odd = (base >> drop) & 1 == 1;
    let rounded = if rem > half || (rem == half && odd) {
        base + (1u64 << drop)
    } else {
        base
    };
    f64::from_bits(rounded)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stochastic rounding keyed by `(stream, x)`: rounds away from zero with
/// probability equal to the discarded fraction. Stateless, so the same
/// input always rounds the same way within a stream.
pub fn quantize_value_stochastic(x: f64, mantissa_bits: u32, stream: u64) -> f64 {
    if mantissa_bits == 0 || mantissa_bits >= 52 || x == 0.0 || !x.is_finite() {
        return x;
    }
    let drop = 52 - mantissa_bits;
    let bits = x.to_bits();
    let mask = (1u64 << drop) - 1;
    let rem = bits & mask;
    let base = bits & !mask;
    let u = splitmix64(stream ^ splitmix64(bits)) & mask;
    if u < rem {
        f64::from_bits(base + (1u64 << drop))
    } else {
        f64::from_bits(base)
    }
}

/// Where the inference engine applies rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantTarget {
    Activations,
    Logits,
    RouterLogits,
}

/// Numerical configuration of the inference engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Fraction bits kept at each targeted op output; 0 disables emulation.
    #[serde(default)]
    pub mantissa_bits: u32,
    #[serde(default = "yes")]
    pub activations: bool,
    #[serde(default = "yes")]
    pub logits: bool,
    #[serde(default = "yes")]
    pub router_logits: bool,
    /// Switches to stochastic rounding on the given stream.
    #[serde(default)]
    pub stochastic_stream: Option<u64>,
}

fn yes() -> bool {
    true
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::exact()
    }
}

impl EngineConfig {
    /// No emulation: the training engine.
    pub fn exact() -> Self {
        Self {
            mantissa_bits: 0,
            activations: true,
            logits: true,
            router_logits: true,
            stochastic_stream: None,
        }
    }

    /// Rounds every target to `mantissa_bits`.
    pub fn all_targets(mantissa_bits: u32) -> Self {
        Self {
            mantissa_bits,
            ..Self::exact()
        }
    }

    /// Rounds only the output logits.
    pub fn logits_only(mantissa_bits: u32) -> Self {
        Self {
            mantissa_bits,
            activations: false,
            logits: true,
            router_logits: false,
            stochastic_stream: None,
        }
    }

    /// Rounds only the router logits.
    pub fn router_only(mantissa_bits: u32) -> Self {
        Self {
            mantissa_bits,
            activations: false,
            logits: false,
            router_logits: true,
            stochastic_stream: None,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.mantissa_bits == 0 || !(self.activations || self.logits || self.router_logits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mantissa_bits >= 52 {
            return Err(Error::config(
                "engine.mantissa_bits",
                "must be below 52 (0 disables emulation)",
            ));
        }
        Ok(())
    }

    fn targets(&self, target: QuantTarget) -> bool {
        match target {
            QuantTarget::Activations => self.activations,
            QuantTarget::Logits => self.logits,
            QuantTarget::RouterLogits => self.router_logits,
        }
    }

    pub fn round(&self, x: f64) -> f64 {
        match self.stochastic_stream {
            Some(stream) => quantize_value_stochastic(x, self.mantissa_bits, stream),
            None => quantize_value(x, self.mantissa_bits),
        }
    }

    /// Inserts rounding after `node` when this engine targets it; otherwise
    /// returns `node` itself so the exact path stays bit-identical.
    pub fn apply(&self, graph: &mut Graph<'_>, node: NodeId, target: QuantTarget) -> NodeId {
        if self.mantissa_bits == 0 || !self.targets(target) {
            return node;
        }
        graph.quantize(node, |x| self.round(x))
    }
}

/// Inference-engine next-token log-probabilities and routing.
pub fn inference_forward(
    params: &PolicyParams,
    context: &[Token],
    config: &EngineConfig,
) -> Result<(Vec<f64>, PositionRoute)> {
    next_token_log_probs(params, context, config)
}

/// Inference-engine evaluation of a whole response (no routing override).
pub fn inference_evaluate(
    params: &PolicyParams,
    prompt: &[Token],
    response: &[Token],
    config: &EngineConfig,
) -> Result<ResponseEval> {
    evaluate_response(params, prompt, response, None, config)
}

/// Factors of one token's importance weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsWeightFactors {
    /// `π_θ / μ_old`
    pub full: f64,
    /// `π_old / μ_old`, the training–inference discrepancy.
    pub discrepancy: f64,
    /// `π_θ / π_old`, the policy staleness.
    pub staleness: f64,
    pub log_full: f64,
    pub log_discrepancy: f64,
    pub log_staleness: f64,
}

/// Splits the per-token weight `π_θ/μ_old` into discrepancy × staleness.
pub fn decompose_is_weight(
    pi_new_lp: &[f64],
    pi_old_lp: &[f64],
    mu_old_lp: &[f64],
) -> Result<Vec<IsWeightFactors>> {
    if pi_new_lp.len() != pi_old_lp.len() {
        return Err(Error::LengthMismatch {
            what: "π_θ vs π_old log-probs",
            left: pi_new_lp.len(),
            right: pi_old_lp.len(),
        });
    }
    if pi_new_lp.len() != mu_old_lp.len() {
        return Err(Error::LengthMismatch {
            what: "π_θ vs μ_old log-probs",
            left: pi_new_lp.len(),
            right: mu_old_lp.len(),
        });
    }
    Ok(pi_new_lp
        .iter()
        .zip(pi_old_lp)
        .zip(mu_old_lp)
        .map(|((&new, &old), &mu)| {
            let log_full = new - mu;
            let log_discrepancy = old - mu;
            // defined as the remainder so `full − discrepancy − staleness`
            // is exactly zero in log space
            let log_staleness = log_full - log_discrepancy;
            IsWeightFactors {
                full: log_full.exp(),
                discrepancy: log_discrepancy.exp(),
                staleness: log_staleness.exp(),
                log_full,
                log_discrepancy,
                log_staleness,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent reference: scale to an integer grid, round half to even.
    fn reference_round(x: f64, bits: u32) -> f64 {
        let exponent = x.abs().log2().floor();
        let scale = 2f64.powf(bits as f64 - exponent);
        (x * scale).round_ties_even() / scale
    }

    #[test]
    fn powers_of_two_are_fixed() {
        for m in 1..52 {
            assert_eq!(quantize_value(1.0, m), 1.0);
            assert_eq!(quantize_value(-0.25, m), -0.25);
        }
    }

    #[test]
    fn disabled_is_identity() {
        assert_eq!(quantize_value(0.3, 0), 0.3);
        assert_eq!(quantize_value(0.0, 3), 0.0);
    }

    #[test]
    fn point_three_with_two_bits() {
        assert_eq!(quantize_value(0.3, 2), reference_round(0.3, 2));
        assert_eq!(quantize_value(0.3, 2), 0.3125);
    }

    #[test]
    fn ties_go_to_even() {
        // 1.125 = 1.001b; with two bits the candidates 1.00b and 1.01b tie
        assert_eq!(quantize_value(1.125, 2), 1.0);
        // 1.375 = 1.011b ties between 1.01b and 1.10b
        assert_eq!(quantize_value(1.375, 2), 1.5);
    }

    #[test]
    fn decomposition_example() {
        let f = decompose_is_weight(&[0.6f64.ln()], &[0.5f64.ln()], &[0.4f64.ln()]).unwrap();
        assert!((f[0].discrepancy - 1.25).abs() < 1e-12);
        assert!((f[0].staleness - 1.2).abs() < 1e-12);
        assert!((f[0].full - 1.5).abs() < 1e-12);
    }

    #[test]
    fn on_policy_factors_are_one() {
        let lp = [-0.3, -1.2, -2.0];
        for f in decompose_is_weight(&lp, &lp, &lp).unwrap() {
            assert_eq!((f.full, f.discrepancy, f.staleness), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn decomposition_length_mismatch() {
        assert!(decompose_is_weight(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_reference(x in -1e6f64..1e6, bits in 1u32..30) {
            prop_assume!(x != 0.0);
            prop_assert_eq!(quantize_value(x, bits), reference_round(x, bits));
        }

        #[test]
        fn log_space_identity(a in -20.0f64..0.0, b in -20.0f64..0.0, c in -20.0f64..0.0) {
            let f = decompose_is_weight(&[a], &[b], &[c]).unwrap()[0];
            prop_assert_eq!(f.log_full - f.log_discrepancy - f.log_staleness, 0.0);
        }

        #[test]
        fn stochastic_rounding_brackets(x in -1e3f64..1e3, bits in 1u32..20, stream in 0u64..100) {
            prop_assume!(x != 0.0);
            let y = quantize_value_stochastic(x, bits, stream);
            let lo = quantize_value(x, bits).min(y);
            prop_assert!((y - x).abs() <= (x.abs() * 2f64.powi(-(bits as i32))) );
            prop_assert!(lo.is_finite());
        }
    }
}
