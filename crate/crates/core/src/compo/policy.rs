//! Desk-scale policies: a softmax table over enumerable outcomes and an
//! autoregressive token table for scoring trajectory token sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CompoError;

/// Prompt identifier; rows of the policy tables.
pub type PromptId = usize;

/// What a policy scores: a single outcome id (toy policies) or a token
/// sequence (trajectory policies).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Id(usize),
    Seq(Vec<u32>),
}

/// Anything exposing log-probability of an outcome given a prompt.
///
/// `enumerate_outcomes` returns the finite outcome universe for prompts of
/// toy policies and `None` where enumeration is unavailable.
pub trait Policy: Send + Sync {
    fn log_prob(&self, prompt: PromptId, outcome: &Outcome) -> Result<f64, CompoError>;

    fn enumerate_outcomes(&self, _prompt: PromptId) -> Option<Vec<Outcome>> {
        None
    }
}

/// A policy with a flat parameter vector and an analytic log-prob gradient;
/// what the training loop updates.
pub trait TrainablePolicy: Policy {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Accumulate `scale * d log_prob(prompt, outcome) / d params` into
    /// `grad` (same layout as [`TrainablePolicy::params`]).
    fn accumulate_logprob_grad(
        &self,
        prompt: PromptId,
        outcome: &Outcome,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), CompoError>;
}

/// Max-shifted log-sum-exp; the one exponentiation route in this module.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax policy over a finite outcome universe per prompt.
///
/// `log_prob(x, y) = logits[x][y] - logsumexp(logits[x][.])`, so rows are
/// normalized by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySoftmaxPolicy {
    num_prompts: usize,
    num_outcomes: usize,
    /// Row-major `[num_prompts * num_outcomes]`.
    logits: Vec<f64>,
}

impl ToySoftmaxPolicy {
    pub fn uniform(num_prompts: usize, num_outcomes: usize) -> Self {
        assert!(num_prompts > 0 && num_outcomes > 0);
        Self {
            num_prompts,
            num_outcomes,
            logits: vec![0.0; num_prompts * num_outcomes],
        }
    }

    pub fn from_logits(num_prompts: usize, num_outcomes: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), num_prompts * num_outcomes);
        Self {
            num_prompts,
            num_outcomes,
            logits,
        }
    }

    pub fn random(num_prompts: usize, num_outcomes: usize, rng: &mut impl Rng) -> Self {
        let logits = (0..num_prompts * num_outcomes)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Self::from_logits(num_prompts, num_outcomes, logits)
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_outcomes(&self) -> usize {
        self.num_outcomes
    }

    fn row(&self, prompt: PromptId) -> Result<&[f64], CompoError> {
        if prompt >= self.num_prompts {
            return Err(CompoError::UnknownPrompt(prompt));
        }
        let start = prompt * self.num_outcomes;
        Ok(&self.logits[start..start + self.num_outcomes])
    }

    /// Normalized probabilities of one row.
    pub fn distribution(&self, prompt: PromptId) -> Result<Vec<f64>, CompoError> {
        let row = self.row(prompt)?;
        let lse = log_sum_exp(row);
        Ok(row.iter().map(|l| (l - lse).exp()).collect())
    }
}

impl Policy for ToySoftmaxPolicy {
    fn log_prob(&self, prompt: PromptId, outcome: &Outcome) -> Result<f64, CompoError> {
        let Outcome::Id(y) = outcome else {
            return Err(CompoError::UnsupportedOutcome(
                "softmax policy scores outcome ids, not sequences",
            ));
        };
        let row = self.row(prompt)?;
        if *y >= row.len() {
            return Err(CompoError::UnknownOutcome(*y));
        }
        Ok(row[*y] - log_sum_exp(row))
    }

    fn enumerate_outcomes(&self, prompt: PromptId) -> Option<Vec<Outcome>> {
        if prompt >= self.num_prompts {
            return None;
        }
        Some((0..self.num_outcomes).map(Outcome::Id).collect())
    }
}

impl TrainablePolicy for ToySoftmaxPolicy {
    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn accumulate_logprob_grad(
        &self,
        prompt: PromptId,
        outcome: &Outcome,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), CompoError> {
        let Outcome::Id(y) = outcome else {
            return Err(CompoError::UnsupportedOutcome(
                "softmax policy scores outcome ids, not sequences",
            ));
        };
        let probs = self.distribution(prompt)?;
        if *y >= probs.len() {
            return Err(CompoError::UnknownOutcome(*y));
        }
        let start = prompt * self.num_outcomes;
        for (j, p) in probs.iter().enumerate() {
            let indicator = if j == *y { 1.0 } else { 0.0 };
            grad[start + j] += scale * (indicator - p);
        }
        Ok(())
    }
}

/// Autoregressive token table: per-prompt logits over a token vocabulary.
/// A sequence's log-probability is the sum of per-token log-probabilities;
/// length-normalized scoring is available for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTablePolicy {
    num_prompts: usize,
    vocab_size: usize,
    /// Row-major `[num_prompts * vocab_size]`.
    logits: Vec<f64>,
    /// When true, `log_prob` divides by sequence length.
    #[serde(default)]
    length_normalized: bool,
}

impl TokenTablePolicy {
    pub fn uniform(num_prompts: usize, vocab_size: usize) -> Self {
        assert!(num_prompts > 0 && vocab_size > 0);
        Self {
            num_prompts,
            vocab_size,
            logits: vec![0.0; num_prompts * vocab_size],
            length_normalized: false,
        }
    }

    pub fn with_length_normalization(mut self, on: bool) -> Self {
        self.length_normalized = on;
        self
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn row(&self, prompt: PromptId) -> Result<&[f64], CompoError> {
        if prompt >= self.num_prompts {
            return Err(CompoError::UnknownPrompt(prompt));
        }
        let start = prompt * self.vocab_size;
        Ok(&self.logits[start..start + self.vocab_size])
    }

    fn check_seq<'a>(&self, outcome: &'a Outcome) -> Result<&'a [u32], CompoError> {
        let Outcome::Seq(seq) = outcome else {
            return Err(CompoError::UnsupportedOutcome(
                "token-table policy scores sequences, not outcome ids",
            ));
        };
        if seq.is_empty() {
            return Err(CompoError::UnsupportedOutcome("empty token sequence"));
        }
        if let Some(bad) = seq.iter().find(|t| **t as usize >= self.vocab_size) {
            return Err(CompoError::UnknownOutcome(*bad as usize));
        }
        Ok(seq)
    }
}

impl Policy for TokenTablePolicy {
    fn log_prob(&self, prompt: PromptId, outcome: &Outcome) -> Result<f64, CompoError> {
        let seq = self.check_seq(outcome)?;
        let row = self.row(prompt)?;
        let lse = log_sum_exp(row);
        let sum: f64 = seq.iter().map(|t| row[*t as usize] - lse).sum();
        if self.length_normalized {
            Ok(sum / seq.len() as f64)
        } else {
            Ok(sum)
        }
    }
}

impl TrainablePolicy for TokenTablePolicy {
    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn accumulate_logprob_grad(
        &self,
        prompt: PromptId,
        outcome: &Outcome,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), CompoError> {
        let seq = self.check_seq(outcome)?;
        let row = self.row(prompt)?;
        let lse = log_sum_exp(row);
        let norm = if self.length_normalized {
            seq.len() as f64
        } else {
            1.0
        };
        let start = prompt * self.vocab_size;
        // d/d logit_j of sum_t (logit_{y_t} - lse) = count_j - len * softmax_j
        let len = seq.len() as f64;
        for (j, logit) in row.iter().enumerate() {
            let softmax = (logit - lse).exp();
            grad[start + j] += scale * (-len * softmax) / norm;
        }
        for t in seq {
            grad[start + *t as usize] += scale / norm;
        }
        Ok(())
    }
}
