//! Synchronous RL loop: rollout, split into `N` mini-batches, `N`
//! sequential updates, repeat.

mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::diagnostics::{routing_flip_rate, summarize_tokens, train_infer_kl, MetricsRecord};
use crate::dual_engine::EngineConfig;
use crate::error::{Error, Result};
use crate::objectives::{surrogate_gradient, ObjectiveSpec};
use crate::policy::{save_checkpoint, score_response, PolicyConfig, PolicyParams, Token};
use crate::rollout::{generate_rollouts, split_minibatches, RolloutBatch, Task, TaskConfig};

pub use optim::{adam_update, grad_norm, sgd_update, Optimizer, OptimizerConfig, OptimizerKind};

pub const SCHEMA_VERSION: u32 = 1;

/// Records per parallel gradient chunk. Fixed so results do not depend on
/// the worker count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Prompts per global step (`B`).
    pub prompts_per_step: usize,
    /// Responses per prompt (`G`).
    pub group_size: usize,
    /// Mini-batches per global step (`N`).
    #[serde(default = "one")]
    pub minibatches: usize,
    /// Response length limit; defaults to the task's.
    #[serde(default)]
    pub max_len: Option<usize>,
}

fn one() -> usize {
    1
}

/// Supervised warm-up on reference responses before RL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColdStartConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
}

/// Reporting thresholds for the collapse flag; they never alter training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    pub entropy_floor: f64,
    pub kl_ceiling: f64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            entropy_floor: 0.05,
            kl_ceiling: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub steps: u64,
    /// Save a checkpoint every this many steps (0: initial and final only).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_threshold")]
    pub reward_threshold: f64,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub rollout: RolloutConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub cold_start: Option<ColdStartConfig>,
    #[serde(default)]
    pub collapse: CollapseConfig,
}

fn default_threshold() -> f64 {
    0.8
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<root>")
                .to_string();
            Error::Config {
                field,
                message: e.to_string().trim().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.policy.validate()?;
        self.optimizer.validate()?;
        self.objective.validate()?;
        self.engine.validate()?;
        if self.task.vocab_size() != self.policy.vocab_size {
            return Err(Error::config(
                "policy.vocab_size",
                format!("must equal task.vocab_size ({})", self.task.vocab_size()),
            ));
        }
        let r = &self.rollout;
        if r.prompts_per_step == 0 || r.group_size == 0 {
            return Err(Error::config("rollout", "prompts_per_step and group_size must be positive"));
        }
        if r.minibatches == 0 || (r.prompts_per_step * r.group_size) % r.minibatches != 0 {
            return Err(Error::config(
                "rollout.minibatches",
                "must divide prompts_per_step × group_size",
            ));
        }
        if r.max_len == Some(0) {
            return Err(Error::config("rollout.max_len", "must be positive"));
        }
        if let Some(c) = &self.cold_start {
            if c.batch_size == 0 || !(c.lr > 0.0) {
                return Err(Error::config("cold_start", "batch_size and lr must be positive"));
            }
        }
        Ok(())
    }
}

/// Deterministic per-purpose random stream derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 1;
const COLD_START_STREAM: u64 = 2;
const STEP_STREAM_BASE: u64 = 1 << 32;

/// Metrics of all updates of a batch; `step` labels the records.
pub fn train_on_batch(
    params: &mut PolicyParams,
    optimizer: &mut Optimizer,
    batch: &RolloutBatch,
    spec: &ObjectiveSpec,
    minibatches: usize,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MetricsRecord>> {
    let parts = split_minibatches(batch, minibatches, rng)?;
    let reward_mean = batch.mean_reward();
    let kl = train_infer_kl(&batch.records);
    let flips = routing_flip_rate(&batch.records);
    let mut metrics = Vec::with_capacity(parts.len());
    for (i, part) in parts.iter().enumerate() {
        let eval = surrogate_gradient(params, part, spec, CHUNK)?;
        let norm = optimizer.apply(params, &eval.gradients)?;
        let summary = summarize_tokens(&eval.tokens);
        metrics.push(MetricsRecord {
            step,
            minibatch: i,
            update: optimizer.step,
            reward_mean,
            loss: eval.loss,
            grad_norm: norm,
            entropy: summary.entropy,
            train_infer_kl: kl,
            is_weight: summary.is_weight,
            log_discrepancy: summary.log_discrepancy,
            log_staleness: summary.log_staleness,
            clip_fraction: summary.clip_fraction,
            routing_flip_rate: flips,
            tokens: eval.tokens.len(),
            mean_response_len: eval.tokens.len() as f64 / part.len() as f64,
        });
    }
    Ok(metrics)
}

/// Negative log-likelihood of `responses` and its gradient, averaged over
/// the pairs.
pub fn supervised_gradient(
    params: &PolicyParams,
    pairs: &[(Vec<Token>, Vec<Token>)],
) -> Result<(f64, Vec<Tensor>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no supervised pairs".into()));
    }
    let scale = -1.0 / pairs.len() as f64;
    let exact = EngineConfig::exact();
    let parts: Vec<(f64, Vec<Tensor>)> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut graph = Graph::new();
            let bound = params.bind(&mut graph, true);
            let mut total = None;
            for (prompt, response) in chunk {
                let scored = score_response(
                    &mut graph,
                    &bound,
                    &params.config,
                    prompt,
                    response,
                    None,
                    &exact,
                )?;
                let s = graph.sum(scored.token_log_probs);
                total = Some(match total {
                    None => s,
                    Some(t) => graph.add(t, s)?,
                });
            }
            let loss = graph.scale(total.expect("non-empty chunk"), scale);
            let mut grads = graph.backward(loss)?;
            let g = bound
                .node_ids()
                .into_iter()
                .map(|id| {
                    grads
                        .take(id)
                        .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
                })
                .collect();
            Ok((graph.value(loss).item(), g))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        for (acc, part) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
    }
    Ok((loss, grads))
}

/// Outcome of one global step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub reward_mean: f64,
    pub metrics: Vec<MetricsRecord>,
}

/// Trainer state for one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub task: Box<dyn Task>,
    pub params: PolicyParams,
    pub optimizer: Optimizer,
    /// Global steps completed.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let task = config.task.build()?;
        let params = PolicyParams::init(config.policy.clone(), &mut stream_rng(config.seed, INIT_STREAM))?;
        let optimizer = Optimizer::new(config.optimizer.clone(), &params)?;
        Ok(Self {
            config,
            task,
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn max_len(&self) -> usize {
        self.config
            .rollout
            .max_len
            .unwrap_or_else(|| self.task.max_response_len())
    }

    /// Runs the configured supervised warm-up with its own Adam state.
    /// Returns the loss of every warm-up step.
    pub fn cold_start(&mut self) -> Result<Vec<f64>> {
        let Some(cs) = self.config.cold_start.clone() else {
            return Ok(Vec::new());
        };
        let mut rng = stream_rng(self.config.seed, COLD_START_STREAM);
        let mut optimizer = Optimizer::new(
            OptimizerConfig {
                lr: cs.lr,
                ..self.config.optimizer.clone()
            },
            &self.params,
        )?;
        let mut losses = Vec::with_capacity(cs.steps as usize);
        for _ in 0..cs.steps {
            let pairs: Vec<(Vec<Token>, Vec<Token>)> = (0..cs.batch_size)
                .map(|_| {
                    let prompt = self.task.sample_warmup_prompt(&mut rng);
                    let response = self.task.reference_response(&prompt);
                    (prompt, response)
                })
                .collect();
            let (loss, grads) = supervised_gradient(&self.params, &pairs)?;
            optimizer.apply(&mut self.params, &grads)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Rollouts for the current parameters on this step's stream.
    pub fn rollouts(&self, rng: &mut ChaCha8Rng) -> Result<RolloutBatch> {
        let r = &self.config.rollout;
        generate_rollouts(
            &self.params,
            self.task.as_ref(),
            r.prompts_per_step,
            r.group_size,
            self.max_len(),
            &self.config.engine,
            self.optimizer.step,
            rng,
        )
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let mut rng = stream_rng(self.config.seed, STEP_STREAM_BASE + self.step);
        let batch = self.rollouts(&mut rng)?;
        let metrics = train_on_batch(
            &mut self.params,
            &mut self.optimizer,
            &batch,
            &self.config.objective,
            self.config.rollout.minibatches,
            self.step,
            &mut rng,
        )?;
        self.step += 1;
        Ok(StepReport {
            reward_mean: batch.mean_reward(),
            metrics,
        })
    }
}

/// Written before any training side effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub code_version: String,
    pub metrics_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub summary_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub updates: u64,
    pub cold_start_final_loss: Option<f64>,
    pub initial_reward: Option<f64>,
    pub final_reward: Option<f64>,
    pub peak_reward: Option<f64>,
    pub reward_threshold: f64,
    pub steps_to_threshold: Option<u64>,
    /// Lowest update entropy seen before the threshold was first reached.
    pub min_entropy_before_threshold: Option<f64>,
    pub collapsed: bool,
    pub collapse_step: Option<u64>,
    pub collapse_reason: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs a whole experiment under `out_dir`.
pub fn run_experiment(config: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let manifest = RunManifest {
        config: config.clone(),
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        metrics_path: PathBuf::from(METRICS_FILE),
        checkpoint_dir: PathBuf::from(CHECKPOINT_DIR),
        summary_path: PathBuf::from(SUMMARY_FILE),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;

    let mut trainer = Trainer::new(config.clone())?;
    let cold = trainer.cold_start()?;
    save_checkpoint(&trainer.params, &checkpoint_path(out_dir, 0))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics_out = std::io::BufWriter::new(file);

    let mut summary = RunSummary {
        steps: 0,
        updates: 0,
        cold_start_final_loss: cold.last().copied(),
        initial_reward: None,
        final_reward: None,
        peak_reward: None,
        reward_threshold: config.reward_threshold,
        steps_to_threshold: None,
        min_entropy_before_threshold: None,
        collapsed: false,
        collapse_step: None,
        collapse_reason: None,
    };

    for step in 0..config.steps {
        let report = trainer.train_step()?;
        for m in &report.metrics {
            let line = serde_json::to_string(m).map_err(|e| Error::Format {
                path: metrics_path.clone(),
                message: e.to_string(),
            })?;
            writeln!(metrics_out, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            if summary.steps_to_threshold.is_none() {
                let low = summary.min_entropy_before_threshold.map_or(m.entropy, |h| h.min(m.entropy));
                summary.min_entropy_before_threshold = Some(low);
            }
            if !summary.collapsed {
                let reason = if m.entropy < config.collapse.entropy_floor {
                    Some(format!("entropy {:.4} below {}", m.entropy, config.collapse.entropy_floor))
                } else if m.train_infer_kl > config.collapse.kl_ceiling {
                    Some(format!("train-infer KL {:.4} above {}", m.train_infer_kl, config.collapse.kl_ceiling))
                } else {
                    None
                };
                if let Some(reason) = reason {
                    summary.collapsed = true;
                    summary.collapse_step = Some(step);
                    summary.collapse_reason = Some(reason);
                }
            }
        }
        let r = report.reward_mean;
        summary.initial_reward.get_or_insert(r);
        summary.final_reward = Some(r);
        summary.peak_reward = Some(summary.peak_reward.map_or(r, |p: f64| p.max(r)));
        if summary.steps_to_threshold.is_none() && r >= config.reward_threshold {
            summary.steps_to_threshold = Some(step + 1);
        }
        summary.steps = step + 1;
        summary.updates = trainer.optimizer.step;
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            save_checkpoint(&trainer.params, &checkpoint_path(out_dir, step + 1))?;
        }
    }
    metrics_out.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if config.steps > 0 {
        save_checkpoint(&trainer.params, &checkpoint_path(out_dir, config.steps))?;
    }
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig::from_toml(
            r#"
schema_version = 1
seed = 3
steps = 2

[task]
kind = "copy"
vocab_size = 6
payload_len = 2

[policy]
vocab_size = 6
d_model = 8
d_hidden = 8
num_experts = 4
top_k = 2
max_positions = 8

[rollout]
prompts_per_step = 2
group_size = 4
minibatches = 2

[optimizer]
lr = 0.01
"#,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let c = tiny_config();
        assert_eq!(c.objective, ObjectiveSpec::default());
        assert_eq!(c.engine, EngineConfig::exact());
        assert_eq!(c.collapse, CollapseConfig::default());
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_the_field() {
        let text = tiny_config().to_toml().replace("lr = 0.01", "lr = 0.01\nlearning_rate = 1.0");
        match TrainConfig::from_toml(&text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn indivisible_minibatches_rejected() {
        let mut c = tiny_config();
        c.rollout.minibatches = 3;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let c = tiny_config();
        let t = Trainer::new(c).unwrap();
        let mut p = t.params.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &p).unwrap();
        let zeros: Vec<Tensor> = p.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        opt.apply(&mut p, &zeros).unwrap();
        assert_eq!(p, t.params);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let c = tiny_config();
        let t = Trainer::new(c).unwrap();
        let mut p = t.params.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &p).unwrap();
        let ones: Vec<Tensor> = p.named_tensors().iter().map(|(_, t)| Tensor::full(t.shape(), 1.0)).collect();
        opt.apply(&mut p, &ones).unwrap();
        for (a, b) in p.to_flat().iter().zip(t.params.to_flat()) {
            assert!(((b - a) - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn first_minibatch_is_on_policy() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        for _ in 0..2 {
            let report = t.train_step().unwrap();
            assert_eq!(report.metrics[0].clip_fraction, 0.0);
            assert_eq!(report.metrics[0].log_staleness.std, 0.0);
            assert_eq!(report.metrics.len(), 2);
        }
    }

    #[test]
    fn cold_start_lowers_nll() {
        let mut c = tiny_config();
        c.cold_start = Some(ColdStartConfig {
            steps: 30,
            batch_size: 8,
            lr: 0.01,
        });
        let mut t = Trainer::new(c).unwrap();
        let losses = t.cold_start().unwrap();
        assert_eq!(losses.len(), 30);
        assert!(losses[29] < losses[0]);
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let mut c = tiny_config();
        c.steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&c, dir.path()).unwrap();
        assert_eq!(summary.steps, 0);
        assert_eq!(std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
        let ckpts: Vec<_> = std::fs::read_dir(dir.path().join(CHECKPOINT_DIR)).unwrap().collect();
        assert_eq!(ckpts.len(), 1);
        assert!(checkpoint_path(dir.path(), 0).exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let c = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&c, a.path()).unwrap();
        run_experiment(&c, b.path()).unwrap();
        for f in [METRICS_FILE, SUMMARY_FILE, MANIFEST_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(checkpoint_path(a.path(), 2)).unwrap(),
            std::fs::read(checkpoint_path(b.path(), 2)).unwrap()
        );
    }
}
