use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Fault, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max|a − n| / max(max|n|, 1e−12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

#[derive(Clone, Debug)]
enum Step {
    MatMulLeaf(usize),
    AddLeaf(usize),
    MulLeaf(usize),
    SubLeaf(usize),
    Relu,
    Exp,
    Scale(f64),
    LogSoftmax,
    Softmax,
    Gather(Vec<usize>),
    /// `h + h ⊙ h`, which reuses one node on both sides.
    SelfMul,
}

/// A randomly generated differentiable program over a few leaves.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    leaves: Vec<Tensor>,
    steps: Vec<Step>,
    readout: Tensor,
    mean: bool,
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl RandomGraph {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let m = rng.gen_range(2..5);
        let n = rng.gen_range(2..5);
        let p = rng.gen_range(2..5);
        // leaf 0: [m×n], leaf 1: [n×p]; the rest are [m×p], [1×p], [m×1], [p×p]
        let leaves = vec![
            normal_tensor(rng, &[m, n], 1.0),
            normal_tensor(rng, &[n, p], 1.0),
            normal_tensor(rng, &[m, p], 1.0),
            normal_tensor(rng, &[1, p], 1.0),
            normal_tensor(rng, &[m, 1], 1.0),
            normal_tensor(rng, &[p, p], 0.7),
        ];
        let broadcastable = [2usize, 3, 4];
        let mut steps = Vec::new();
        for _ in 0..rng.gen_range(3..8) {
            let step = match rng.gen_range(0..11) {
                0 => Step::MatMulLeaf(5),
                1 => Step::AddLeaf(*broadcastable.choose(rng).unwrap()),
                2 => Step::MulLeaf(*broadcastable.choose(rng).unwrap()),
                3 => Step::SubLeaf(*broadcastable.choose(rng).unwrap()),
                4 => Step::Relu,
                5 => Step::Exp,
                6 => Step::Scale(rng.gen_range(-1.5..1.5)),
                7 => Step::LogSoftmax,
                8 => Step::Softmax,
                9 => Step::Gather((0..m).map(|_| rng.gen_range(0..m)).collect()),
                _ => Step::SelfMul,
            };
            steps.push(step);
        }
        let readout = normal_tensor(rng, &[m, p], 1.0);
        let mean = rng.gen_bool(0.5);
        Self {
            leaves,
            steps,
            readout,
            mean,
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.leaves.iter().map(Tensor::len).sum()
    }

    pub fn flat_inputs(&self) -> Vec<f64> {
        self.leaves.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    fn with_inputs(&self, flat: &[f64]) -> Vec<Tensor> {
        let mut offset = 0;
        self.leaves
            .iter()
            .map(|t| {
                let data = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::new(t.shape().to_vec(), data).expect("shape matches")
            })
            .collect()
    }

    /// Builds the program; returns the graph, the loss, the leaf ids and the
    /// smallest |input| seen by any relu.
    fn build(&self, leaves: Vec<Tensor>, fault: Option<Fault>) -> Result<(Graph<'static>, NodeId, Vec<NodeId>, f64)> {
        let mut g = Graph::with_fault(fault);
        let ids: Vec<NodeId> = leaves.into_iter().map(|t| g.param(t)).collect();
        let mut h = g.matmul(ids[0], ids[1])?;
        let mut relu_margin = f64::INFINITY;
        for step in &self.steps {
            h = match step {
                Step::MatMulLeaf(i) => g.matmul(h, ids[*i])?,
                Step::AddLeaf(i) => g.add(h, ids[*i])?,
                Step::MulLeaf(i) => g.mul(h, ids[*i])?,
                Step::SubLeaf(i) => g.sub(h, ids[*i])?,
                Step::Relu => {
                    let m = g.value(h).data().iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
                    relu_margin = relu_margin.min(m);
                    g.relu(h)
                }
                Step::Exp => {
                    // keep magnitudes tame
                    let s = g.scale(h, 0.3);
                    g.exp(s)
                }
                Step::Scale(c) => g.scale(h, *c),
                Step::LogSoftmax => g.log_softmax_rows(h)?,
                Step::Softmax => g.softmax_rows(h)?,
                Step::Gather(idx) => g.gather_rows(h, idx)?,
                Step::SelfMul => {
                    let sq = g.mul(h, h)?;
                    g.add(h, sq)?
                }
            };
        }
        let r = g.constant(self.readout.clone());
        let weighted = g.mul(h, r)?;
        let loss = if self.mean { g.mean(weighted) } else { g.sum(weighted) };
        Ok((g, loss, ids, relu_margin))
    }

    pub fn value_at(&self, flat: &[f64]) -> Result<f64> {
        let (g, loss, _, _) = self.build(self.with_inputs(flat), None)?;
        Ok(g.value(loss).item())
    }

    /// Tape gradient at the generated inputs, flattened leaf by leaf, and
    /// the relu margin.
    pub fn tape_gradient(&self, fault: Option<Fault>) -> Result<(Vec<f64>, f64)> {
        let (g, loss, ids, margin) = self.build(self.leaves.clone(), fault)?;
        let grads = g.backward(loss)?;
        let mut flat = Vec::with_capacity(self.num_inputs());
        for (id, leaf) in ids.iter().zip(&self.leaves) {
            match grads.get(*id) {
                Some(t) => flat.extend_from_slice(t.data()),
                None => flat.extend(std::iter::repeat(0.0).take(leaf.len())),
            }
        }
        Ok((flat, margin))
    }

    pub fn all_finite(&self) -> bool {
        self.value_at(&self.flat_inputs()).map_or(false, f64::is_finite)
    }
}

/// Result of the randomized gradient check.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub graphs: usize,
    pub max_relative_error: f64,
    pub worst_graph: usize,
    /// Graphs regenerated because an input sat too close to a relu kink.
    pub rejected: usize,
}

/// Smallest distance to a relu kink accepted for a finite-difference probe.
const RELU_MARGIN: f64 = 1e-3;

/// Checks tape gradients against central differences on `count` random
/// graphs.
pub fn random_graph_check<R: Rng + ?Sized>(
    count: usize,
    h: f64,
    fault: Option<Fault>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut worst = 0.0;
    let mut worst_graph = 0;
    let mut rejected = 0;
    for i in 0..count {
        let (graph, tape) = loop {
            let graph = RandomGraph::generate(rng);
            if !graph.all_finite() {
                rejected += 1;
                continue;
            }
            let (tape, margin) = graph.tape_gradient(fault)?;
            if margin < RELU_MARGIN {
                rejected += 1;
                continue;
            }
            break (graph, tape);
        };
        let numeric = finite_diff_gradient(|x| graph.value_at(x), &graph.flat_inputs(), h)?;
        let err = max_relative_error(&tape, &numeric);
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_graph = i;
        }
    }
    Ok(GradCheckReport {
        graphs: count,
        max_relative_error: worst,
        worst_graph,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_is_exact_up_to_rounding() {
        let g = finite_diff_gradient(|x| Ok(2.0 * x[0] - 0.5 * x[1]), &[0.3, -1.0], 1e-3).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn bad_step_rejected() {
        assert!(finite_diff_gradient(|x| Ok(x[0]), &[1.0], 0.0).is_err());
    }

    #[test]
    fn random_graphs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = random_graph_check(20, 1e-5, None, &mut rng).unwrap();
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn injected_fault_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = random_graph_check(20, 1e-5, Some(Fault::MatmulLhsSignFlip), &mut rng).unwrap();
        assert!(report.max_relative_error > 1e-2);
    }
}
