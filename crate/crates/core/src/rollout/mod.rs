//! Group rollouts from the inference engine, with the training engine's
//! re-evaluation recorded alongside.

mod task;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual_engine::{inference_forward, EngineConfig};
use crate::error::{Error, Result};
use crate::policy::{
    evaluate_response, sample_token, GateReplay, PolicyParams, RoutingTrace, Token, EOS,
};

pub use task::{CopyTask, FnTask, ParityTask, Task, TaskConfig, SEP};

/// One sampled response with everything the objectives need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// Per-token log-probabilities under the inference engine at sampling time.
    pub mu_old_log_probs: Vec<f64>,
    /// Per-token log-probabilities of the same parameters under the training
    /// engine, each engine using its own routing.
    pub pi_old_log_probs: Vec<f64>,
    /// Training-engine log-probabilities with the inference routing replayed;
    /// the proximal values for R3.
    pub pi_old_log_probs_mu_routing: Vec<f64>,
    pub mu_old_routing: RoutingTrace,
    pub pi_old_routing: RoutingTrace,
    pub reward: f64,
    /// Optimizer step count of the parameters that produced this record.
    pub policy_version: u64,
    pub group_id: usize,
    pub group_reward_mean: f64,
    pub group_reward_std: f64,
    /// Ended by reaching the length limit rather than EOS.
    pub truncated: bool,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// `B` prompts × `G` responses, stored group by group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub policy_version: u64,
    pub group_size: usize,
    pub records: Vec<RolloutRecord>,
}

impl RolloutBatch {
    pub fn num_groups(&self) -> usize {
        self.records.len() / self.group_size.max(1)
    }

    pub fn group(&self, g: usize) -> &[RolloutRecord] {
        &self.records[g * self.group_size..(g + 1) * self.group_size]
    }

    pub fn mean_reward(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.reward).sum::<f64>() / self.records.len() as f64
    }

    pub fn num_tokens(&self) -> usize {
        self.records.iter().map(|r| r.len()).sum()
    }
}

/// Population mean and standard deviation of a group's rewards.
pub fn group_stats(rewards: &[f64]) -> (f64, f64) {
    if rewards.is_empty() {
        return (0.0, 0.0);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Samples one response from the inference engine.
///
/// Returns the tokens, their inference log-probabilities, the routing at
/// each step and whether the length limit was hit.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[Token],
    max_len: usize,
    engine: &EngineConfig,
    rng: &mut R,
) -> Result<(Vec<Token>, Vec<f64>, RoutingTrace, bool)> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    let mut context = prompt.to_vec();
    let mut response = Vec::with_capacity(max_len);
    let mut log_probs = Vec::with_capacity(max_len);
    let mut routing = Vec::with_capacity(max_len);
    while response.len() < max_len {
        let (lp, route) = inference_forward(params, &context, engine)?;
        let token = sample_token(&lp, rng, 1.0);
        response.push(token);
        log_probs.push(lp[token]);
        routing.push(route);
        if token == EOS {
            return Ok((response, log_probs, RoutingTrace::new(routing), false));
        }
        context.push(token);
    }
    Ok((response, log_probs, RoutingTrace::new(routing), true))
}

/// Samples `group_size` responses for each of `num_prompts` prompts.
///
/// Prompts and per-prompt seeds are drawn sequentially from `rng`; groups
/// are then generated in parallel on their own streams, so the batch does
/// not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn generate_rollouts<R: Rng + ?Sized>(
    params: &PolicyParams,
    task: &dyn Task,
    num_prompts: usize,
    group_size: usize,
    max_len: usize,
    engine: &EngineConfig,
    policy_version: u64,
    rng: &mut R,
) -> Result<RolloutBatch> {
    if num_prompts == 0 || group_size == 0 {
        return Err(Error::InvalidArgument(
            "num_prompts and group_size must be positive".into(),
        ));
    }
    engine.validate()?;
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let jobs: Vec<(Vec<Token>, u64)> = (0..num_prompts)
        .map(|_| (task.sample_prompt(&mut prompt_rng), rng.gen()))
        .collect();

    let groups: Vec<Vec<RolloutRecord>> = jobs
        .par_iter()
        .enumerate()
        .map(|(group_id, (prompt, seed))| {
            let mut group_rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut records = Vec::with_capacity(group_size);
            for _ in 0..group_size {
                records.push(rollout_one(
                    params,
                    task,
                    prompt,
                    max_len,
                    engine,
                    policy_version,
                    group_id,
                    &mut group_rng,
                )?);
            }
            let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
            let (mean, std) = group_stats(&rewards);
            for record in &mut records {
                record.group_reward_mean = mean;
                record.group_reward_std = std;
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;

    Ok(RolloutBatch {
        policy_version,
        group_size,
        records: groups.into_iter().flatten().collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn rollout_one(
    params: &PolicyParams,
    task: &dyn Task,
    prompt: &[Token],
    max_len: usize,
    engine: &EngineConfig,
    policy_version: u64,
    group_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutRecord> {
    let (response, mu_old_log_probs, mu_old_routing, truncated) =
        sample_response(params, prompt, max_len, engine, rng)?;
    let exact = EngineConfig::exact();
    let pi_old = evaluate_response(params, prompt, &response, None, &exact)?;
    let pi_old_log_probs_mu_routing = if engine.is_exact() {
        pi_old.token_log_probs.clone()
    } else {
        evaluate_response(
            params,
            prompt,
            &response,
            Some((&mu_old_routing, GateReplay::Recompute)),
            &exact,
        )?
        .token_log_probs
    };
    let reward = task.reward(prompt, &response);
    Ok(RolloutRecord {
        prompt: prompt.to_vec(),
        response,
        mu_old_log_probs,
        pi_old_log_probs: pi_old.token_log_probs,
        pi_old_log_probs_mu_routing,
        mu_old_routing,
        pi_old_routing: pi_old.routing,
        reward,
        policy_version,
        group_id,
        group_reward_mean: 0.0,
        group_reward_std: 0.0,
        truncated,
    })
}

/// Shuffles the records and cuts them into `n` equal mini-batches.
/// With `n == 1` the batch is returned in its original order.
pub fn split_minibatches<R: Rng + ?Sized>(
    batch: &RolloutBatch,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<RolloutRecord>>> {
    let total = batch.records.len();
    if n == 0 || total % n != 0 {
        return Err(Error::NotDivisible { total, parts: n });
    }
    if n == 1 {
        return Ok(vec![batch.records.clone()]);
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let size = total / n;
    Ok(order
        .chunks(size)
        .map(|chunk| chunk.iter().map(|&i| batch.records[i].clone()).collect())
        .collect())
}

/// Writes one JSON object per record.
pub fn write_rollouts_jsonl(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rollouts_jsonl(path: &Path) -> Result<Vec<RolloutRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual_engine::inference_evaluate;
    use crate::policy::PolicyConfig;

    fn small_policy(seed: u64) -> PolicyParams {
        let config = PolicyConfig {
            vocab_size: 8,
            d_model: 8,
            d_hidden: 8,
            num_experts: 4,
            top_k: 2,
            num_layers: 1,
            max_positions: 16,
            init_scale: 1.0,
        };
        PolicyParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(engine: &EngineConfig, seed: u64) -> RolloutBatch {
        let params = small_policy(3);
        let task = CopyTask::new(8, 3, None, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_rollouts(&params, &task, 3, 4, 4, engine, 0, &mut rng).unwrap()
    }

    #[test]
    fn shapes_and_group_layout() {
        let b = batch(&EngineConfig::exact(), 1);
        assert_eq!(b.records.len(), 12);
        assert_eq!(b.num_groups(), 3);
        for g in 0..3 {
            let group = b.group(g);
            assert!(group.iter().all(|r| r.prompt == group[0].prompt && r.group_id == g));
        }
        for r in &b.records {
            assert!(!r.response.is_empty() && r.response.len() <= 4);
            assert_eq!(r.mu_old_log_probs.len(), r.len());
            assert_eq!(r.pi_old_log_probs.len(), r.len());
            assert_eq!(r.mu_old_routing.len(), r.len());
            assert_eq!(r.truncated, *r.response.last().unwrap() != EOS);
        }
    }

    #[test]
    fn exact_engine_agrees_bitwise() {
        let b = batch(&EngineConfig::exact(), 2);
        for r in &b.records {
            assert_eq!(r.mu_old_log_probs, r.pi_old_log_probs);
            assert_eq!(r.mu_old_routing, r.pi_old_routing);
        }
    }

    #[test]
    fn recorded_inference_values_match_reevaluation() {
        let engine = EngineConfig::all_targets(7);
        let params = small_policy(3);
        let b = batch(&engine, 5);
        for r in &b.records {
            let eval = inference_evaluate(&params, &r.prompt, &r.response, &engine).unwrap();
            assert_eq!(eval.token_log_probs, r.mu_old_log_probs);
            assert_eq!(eval.routing, r.mu_old_routing);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let e = EngineConfig::all_targets(6);
        assert_eq!(batch(&e, 9), batch(&e, 9));
        assert_ne!(batch(&e, 9), batch(&e, 10));
    }

    #[test]
    fn group_statistics_are_carried() {
        let b = batch(&EngineConfig::exact(), 4);
        for g in 0..b.num_groups() {
            let rewards: Vec<f64> = b.group(g).iter().map(|r| r.reward).collect();
            let (m, s) = group_stats(&rewards);
            assert!(b.group(g).iter().all(|r| r.group_reward_mean == m && r.group_reward_std == s));
        }
        assert_eq!(group_stats(&[1.0, 0.0, 1.0, 0.0]), (0.5, 0.5));
    }

    #[test]
    fn minibatch_split_partitions_the_batch() {
        let b = batch(&EngineConfig::exact(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let parts = split_minibatches(&b, 4, &mut rng).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.len() == 3));
        let mut seen: Vec<_> = parts.iter().flatten().map(|r| serde_json::to_string(r).unwrap()).collect();
        let mut all: Vec<_> = b.records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        seen.sort();
        all.sort();
        assert_eq!(seen, all);
        assert_eq!(split_minibatches(&b, 1, &mut rng).unwrap()[0], b.records);
        assert!(matches!(
            split_minibatches(&b, 5, &mut rng),
            Err(Error::NotDivisible { total: 12, parts: 5 })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let b = batch(&EngineConfig::all_targets(5), 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_rollouts_jsonl(&path, &b.records).unwrap();
        assert_eq!(read_rollouts_jsonl(&path).unwrap(), b.records);
    }
}
