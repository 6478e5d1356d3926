use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, top_k_indices};
use crate::error::{Error, Result};

/// Additive mask applied to unselected router logits before the gate
/// softmax. `exp` of anything this negative is exactly zero.
pub(crate) const GATE_MASK: f64 = -1e30;

/// The experts one token used in one MoE layer, with their gate weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRoute {
    /// Distinct expert indices ordered by descending router logit.
    pub experts: Vec<usize>,
    /// Gate weight of each entry of `experts`.
    pub gates: Vec<f64>,
}

impl LayerRoute {
    /// Same expert *set*, regardless of order.
    pub fn same_experts(&self, other: &LayerRoute) -> bool {
        let mut a = self.experts.clone();
        let mut b = other.experts.clone();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

/// Routing of one token position, one entry per MoE layer.
pub type PositionRoute = Vec<LayerRoute>;

/// Per-token, per-layer routing of one response.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub positions: Vec<PositionRoute>,
}

impl RoutingTrace {
    pub fn new(positions: Vec<PositionRoute>) -> Self {
        Self { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Whether token `t` used a different expert set than `other` at any layer.
    pub fn differs_at(&self, other: &RoutingTrace, t: usize) -> bool {
        self.positions[t]
            .iter()
            .zip(&other.positions[t])
            .any(|(a, b)| !a.same_experts(b))
    }

    /// Checks the structural invariants against a layer/expert count.
    pub fn validate(&self, num_layers: usize, num_experts: usize) -> Result<()> {
        for position in &self.positions {
            if position.len() != num_layers {
                return Err(Error::OverrideLayerMismatch {
                    expected: num_layers,
                    found: position.len(),
                });
            }
            for route in position {
                validate_route(route, num_experts)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_route(route: &LayerRoute, num_experts: usize) -> Result<()> {
    if route.experts.len() != route.gates.len() || route.experts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "route has {} experts and {} gates",
            route.experts.len(),
            route.gates.len()
        )));
    }
    for (i, &e) in route.experts.iter().enumerate() {
        if e >= num_experts || route.experts[..i].contains(&e) {
            return Err(Error::InvalidArgument(format!(
                "route experts {:?} must be distinct and below {num_experts}",
                route.experts
            )));
        }
    }
    Ok(())
}

/// Full-width gate row: softmax over the selected logits, zero elsewhere.
/// Uses exactly the arithmetic of the graph forward so both agree bitwise.
pub(crate) fn masked_gate_row(router_logits: &[f64], experts: &[usize]) -> Vec<f64> {
    let masked: Vec<f64> = router_logits
        .iter()
        .enumerate()
        .map(|(i, &x)| x + if experts.contains(&i) { 0.0 } else { GATE_MASK })
        .collect();
    let mut gates = vec![0.0; masked.len()];
    softmax_row(&masked, &mut gates);
    gates
}

/// Picks the `k` experts with the largest router logits (ties to the lower
/// index) and renormalises their gates with a softmax over the selection.
pub fn route_topk(router_logits: &[f64], k: usize) -> Result<LayerRoute> {
    let experts = top_k_indices(router_logits, k)?;
    let row = masked_gate_row(router_logits, &experts);
    let gates = experts.iter().map(|&e| row[e]).collect();
    Ok(LayerRoute { experts, gates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn picks_largest_two() {
        let route = route_topk(&[2.0, 1.0, 3.0, 0.5], 2).unwrap();
        assert_eq!(route.experts, vec![2, 0]);
        let z = 3f64.exp() + 2f64.exp();
        assert!((route.gates[0] - 3f64.exp() / z).abs() < 1e-15);
        assert!((route.gates[1] - 2f64.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let route = route_topk(&[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(route.experts, vec![0]);
        assert_eq!(route.gates, vec![1.0]);
    }

    #[test]
    fn k_above_expert_count_is_an_error() {
        assert!(matches!(
            route_topk(&[1.0, 2.0], 3),
            Err(Error::TopKTooLarge { k: 3, available: 2 })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn gates_are_normalised(
            logits in prop::collection::vec(-20.0f64..20.0, 1..9),
            k_frac in 0.0f64..1.0,
        ) {
            let k = 1 + ((logits.len() - 1) as f64 * k_frac) as usize;
            let route = route_topk(&logits, k).unwrap();
            let total: f64 = route.gates.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(route.gates.iter().all(|&g| g > 0.0));
            validate_route(&route, logits.len()).unwrap();
        }
    }
}
