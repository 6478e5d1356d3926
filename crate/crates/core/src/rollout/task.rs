use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, EOS};

/// Separator token closing every prompt.
pub const SEP: Token = 1;

/// A verifiable task with a binary, deterministic reward.
pub trait Task: Send + Sync {
    fn name(&self) -> &str;
    fn vocab_size(&self) -> usize;
    /// Longest response the task ever needs, including the closing EOS.
    fn max_response_len(&self) -> usize;
    /// Prompt for an RL step.
    fn sample_prompt(&self, rng: &mut dyn RngCore) -> Vec<Token>;
    /// Prompt for supervised warm-up; may be drawn more broadly than
    /// [`Task::sample_prompt`].
    fn sample_warmup_prompt(&self, rng: &mut dyn RngCore) -> Vec<Token> {
        self.sample_prompt(rng)
    }
    /// The unique response with reward 1.
    fn reference_response(&self, prompt: &[Token]) -> Vec<Token>;
    fn reward(&self, prompt: &[Token], response: &[Token]) -> f64 {
        if response == self.reference_response(prompt).as_slice() {
            1.0
        } else {
            0.0
        }
    }
}

/// Copy: the prompt is a payload followed by `SEP`; the response must
/// repeat the payload and then emit EOS.
#[derive(Clone, Debug)]
pub struct CopyTask {
    vocab_size: usize,
    payload_len: usize,
    pool: Option<Vec<Vec<Token>>>,
}

impl CopyTask {
    /// With `prompt_pool = Some(n)`, RL prompts come from a fixed set of `n`
    /// payloads drawn once from `pool_seed`.
    pub fn new(
        vocab_size: usize,
        payload_len: usize,
        prompt_pool: Option<usize>,
        pool_seed: u64,
    ) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::config("task.vocab_size", "copy needs at least 3 tokens"));
        }
        if payload_len == 0 {
            return Err(Error::config("task.payload_len", "must be positive"));
        }
        let mut task = Self {
            vocab_size,
            payload_len,
            pool: None,
        };
        if let Some(n) = prompt_pool {
            if n == 0 {
                return Err(Error::config("task.prompt_pool", "must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(pool_seed);
            task.pool = Some((0..n).map(|_| task.random_prompt(&mut rng)).collect());
        }
        Ok(task)
    }

    fn random_prompt(&self, rng: &mut dyn RngCore) -> Vec<Token> {
        let mut prompt: Vec<Token> = (0..self.payload_len)
            .map(|_| rng.gen_range(2..self.vocab_size))
            .collect();
        prompt.push(SEP);
        prompt
    }

    pub fn payload_len(&self) -> usize {
        self.payload_len
    }
}

impl Task for CopyTask {
    fn name(&self) -> &str {
        "copy"
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_response_len(&self) -> usize {
        self.payload_len + 1
    }

    fn sample_prompt(&self, rng: &mut dyn RngCore) -> Vec<Token> {
        match &self.pool {
            Some(pool) => pool[rng.gen_range(0..pool.len())].clone(),
            None => self.random_prompt(rng),
        }
    }

    fn sample_warmup_prompt(&self, rng: &mut dyn RngCore) -> Vec<Token> {
        self.random_prompt(rng)
    }

    fn reference_response(&self, prompt: &[Token]) -> Vec<Token> {
        let mut out = prompt[..prompt.len().saturating_sub(1)].to_vec();
        out.push(EOS);
        out
    }
}

/// Digit-sum parity: the prompt is a digit string followed by `SEP`; the
/// response is a single answer token (`2` for even, `3` for odd) then EOS.
/// Digit tokens are `2..V`, with value `token − 2`.
#[derive(Clone, Debug)]
pub struct ParityTask {
    vocab_size: usize,
    digits: usize,
}

impl ParityTask {
    pub fn new(vocab_size: usize, digits: usize) -> Result<Self> {
        if vocab_size < 4 {
            return Err(Error::config("task.vocab_size", "parity needs at least 4 tokens"));
        }
        if digits == 0 {
            return Err(Error::config("task.digits", "must be positive"));
        }
        Ok(Self { vocab_size, digits })
    }

    pub fn answer_token(prompt: &[Token]) -> Token {
        let sum: usize = prompt
            .iter()
            .filter(|&&t| t >= 2)
            .map(|&t| t - 2)
            .sum();
        2 + sum % 2
    }
}

impl Task for ParityTask {
    fn name(&self) -> &str {
        "parity"
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_response_len(&self) -> usize {
        2
    }

    fn sample_prompt(&self, rng: &mut dyn RngCore) -> Vec<Token> {
        let mut prompt: Vec<Token> = (0..self.digits)
            .map(|_| rng.gen_range(2..self.vocab_size))
            .collect();
        prompt.push(SEP);
        prompt
    }

    fn reference_response(&self, prompt: &[Token]) -> Vec<Token> {
        vec![Self::answer_token(prompt), EOS]
    }
}

/// Reward given by an arbitrary function; used by the exact oracles.
pub struct FnTask<F> {
    name: String,
    vocab_size: usize,
    max_len: usize,
    prompt: Vec<Token>,
    reward: F,
}

impl<F> FnTask<F>
where
    F: Fn(&[Token], &[Token]) -> f64 + Send + Sync,
{
    pub fn new(name: &str, vocab_size: usize, max_len: usize, prompt: Vec<Token>, reward: F) -> Self {
        Self {
            name: name.to_string(),
            vocab_size,
            max_len,
            prompt,
            reward,
        }
    }
}

impl<F> Task for FnTask<F>
where
    F: Fn(&[Token], &[Token]) -> f64 + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_response_len(&self) -> usize {
        self.max_len
    }

    fn sample_prompt(&self, _rng: &mut dyn RngCore) -> Vec<Token> {
        self.prompt.clone()
    }

    fn reference_response(&self, _prompt: &[Token]) -> Vec<Token> {
        vec![EOS]
    }

    fn reward(&self, prompt: &[Token], response: &[Token]) -> f64 {
        (self.reward)(prompt, response)
    }
}

/// Serialized task selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Copy {
        vocab_size: usize,
        payload_len: usize,
        #[serde(default)]
        prompt_pool: Option<usize>,
        #[serde(default)]
        pool_seed: u64,
    },
    Parity {
        vocab_size: usize,
        digits: usize,
    },
}

impl TaskConfig {
    pub fn build(&self) -> Result<Box<dyn Task>> {
        Ok(match self {
            TaskConfig::Copy {
                vocab_size,
                payload_len,
                prompt_pool,
                pool_seed,
            } => Box::new(CopyTask::new(*vocab_size, *payload_len, *prompt_pool, *pool_seed)?),
            TaskConfig::Parity { vocab_size, digits } => {
                Box::new(ParityTask::new(*vocab_size, *digits)?)
            }
        })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            TaskConfig::Copy { vocab_size, .. } | TaskConfig::Parity { vocab_size, .. } => {
                *vocab_size
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_rewards_exact_payload_then_eos() {
        let task = CopyTask::new(16, 3, None, 0).unwrap();
        let prompt = vec![5, 9, 2, SEP];
        assert_eq!(task.reward(&prompt, &[5, 9, 2, EOS]), 1.0);
        assert_eq!(task.reward(&prompt, &[5, 9, 3, EOS]), 0.0);
        assert_eq!(task.reward(&prompt, &[5, 9, 2]), 0.0);
        assert_eq!(task.reward(&prompt, &[5, 9, 2, 4]), 0.0);
    }

    #[test]
    fn copy_pool_is_fixed() {
        let task = CopyTask::new(16, 4, Some(3), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool = task.pool.clone().unwrap();
        for _ in 0..20 {
            assert!(pool.contains(&task.sample_prompt(&mut rng)));
        }
    }

    #[test]
    fn parity_answer() {
        let task = ParityTask::new(12, 3).unwrap();
        // digits 3, 4, 0 → sum 7, odd
        let prompt = vec![5, 6, 2, SEP];
        assert_eq!(task.reference_response(&prompt), vec![3, EOS]);
        assert_eq!(task.reward(&prompt, &[3, EOS]), 1.0);
        assert_eq!(task.reward(&prompt, &[2, EOS]), 0.0);
    }

    #[test]
    fn parity_chance_level_for_random_answers() {
        // a policy answering uniformly among the V−1 non-EOS tokens and then
        // stopping is right with probability 1/(V−1)
        let v = 8;
        let task = ParityTask::new(v, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 20_000;
        let hits: f64 = (0..n)
            .map(|_| {
                let prompt = task.sample_prompt(&mut rng);
                let answer = rng.gen_range(1..v);
                task.reward(&prompt, &[answer, EOS])
            })
            .sum();
        let p = 1.0 / (v - 1) as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits / n as f64 - p).abs() <= 3.0 * sigma);
    }
}
