//! The preference-optimization core: the conflict-pair loss, its analytic
//! gradient, a deterministic training loop over desk-scale policies, and
//! the KL-regularized objective with its closed-form optimum.

mod policy;
mod train;

pub use policy::{log_sum_exp, Outcome, Policy, PromptId, TokenTablePolicy, ToySoftmaxPolicy, TrainablePolicy};
pub use train::{
    load_policy_file, save_policy_file, trace_to_csv, train, PolicyFile, TraceRow, TrainOutcome,
    POLICY_SCHEMA,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompoError {
    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),
    #[error("non-finite value at training step {step}: {detail}")]
    NonFiniteAtStep { step: usize, detail: String },
    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),
    #[error("unknown outcome id {0}")]
    UnknownOutcome(usize),
    #[error("{0}")]
    UnsupportedOutcome(&'static str),
    #[error("dataset must be nonempty")]
    EmptyDataset,
    #[error("policy assigns probability mass where the reference has none (outcome {0})")]
    ReferenceSupportViolation(usize),
    #[error("policies disagree on the outcome universe for prompt {0}")]
    OutcomeUniverseMismatch(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy file: {0}")]
    PolicyFile(String),
}

/// Training hyperparameters. `beta` scales the log-ratio margin; the
/// defaults are the desk-scale settings (the full-scale learning rate of
/// 5e-6 belongs to backbone fine-tuning, out of scope here).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CompoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 0.1,
            batch_size: 4,
            steps: 500,
            seed: 0,
        }
    }
}

impl CompoConfig {
    pub fn validate(&self) -> Result<(), CompoError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(CompoError::NonFinite("beta must be finite and > 0"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CompoError::NonFinite("learning_rate must be finite and > 0"));
        }
        if self.batch_size == 0 {
            return Err(CompoError::NonFinite("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// A reward map over (prompt, outcome), finite on every enumerated outcome.
pub trait RewardFn {
    fn reward(&self, prompt: PromptId, outcome: &Outcome) -> f64;
}

impl<F: Fn(PromptId, &Outcome) -> f64> RewardFn for F {
    fn reward(&self, prompt: PromptId, outcome: &Outcome) -> f64 {
        self(prompt, outcome)
    }
}

/// One preference comparison ready for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub prompt: PromptId,
    pub win: Outcome,
    pub lose: Outcome,
}

/// Numerically stable `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn finite(value: f64, what: &'static str) -> Result<f64, CompoError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(CompoError::NonFinite(what))
    }
}

/// The scaled log-ratio margin of one pair:
/// `beta * ((log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l)))`.
pub fn pair_margin(
    policy: &dyn Policy,
    reference: &dyn Policy,
    pair: &ScoredPair,
    beta: f64,
) -> Result<f64, CompoError> {
    let lp_w = finite(policy.log_prob(pair.prompt, &pair.win)?, "policy log-prob of winner")?;
    let lp_l = finite(policy.log_prob(pair.prompt, &pair.lose)?, "policy log-prob of loser")?;
    let lr_w = finite(
        reference.log_prob(pair.prompt, &pair.win)?,
        "reference log-prob of winner",
    )?;
    let lr_l = finite(
        reference.log_prob(pair.prompt, &pair.lose)?,
        "reference log-prob of loser",
    )?;
    finite(beta * ((lp_w - lr_w) - (lp_l - lr_l)), "margin")
}

/// Preference loss of one pair: `-log sigmoid(margin)`, i.e.
/// `softplus(-margin)`. Zero margin gives `ln 2`; the loss is never
/// negative.
pub fn compo_loss_pair(
    policy: &dyn Policy,
    reference: &dyn Policy,
    pair: &ScoredPair,
    beta: f64,
) -> Result<f64, CompoError> {
    Ok(softplus(-pair_margin(policy, reference, pair, beta)?))
}

/// Mean preference loss over a batch.
pub fn compo_loss(
    policy: &dyn Policy,
    reference: &dyn Policy,
    batch: &[ScoredPair],
    beta: f64,
) -> Result<f64, CompoError> {
    if batch.is_empty() {
        return Err(CompoError::EmptyDataset);
    }
    let mut total = 0.0;
    for pair in batch {
        total += compo_loss_pair(policy, reference, pair, beta)?;
    }
    finite(total / batch.len() as f64, "batch loss")
}

/// Analytic gradient of [`compo_loss`] with respect to the policy
/// parameters: per pair `-beta * sigmoid(-m) * (dlogp(y_w) - dlogp(y_l))`,
/// averaged over the batch.
pub fn compo_grad<P: TrainablePolicy>(
    policy: &P,
    reference: &dyn Policy,
    batch: &[ScoredPair],
    beta: f64,
) -> Result<Vec<f64>, CompoError> {
    if batch.is_empty() {
        return Err(CompoError::EmptyDataset);
    }
    let mut grad = vec![0.0; policy.params().len()];
    let inv = 1.0 / batch.len() as f64;
    for pair in batch {
        let margin = pair_margin(policy, reference, pair, beta)?;
        let coeff = beta * sigmoid(-margin) * inv;
        policy.accumulate_logprob_grad(pair.prompt, &pair.win, -coeff, &mut grad)?;
        policy.accumulate_logprob_grad(pair.prompt, &pair.lose, coeff, &mut grad)?;
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        let _ = bad;
        return Err(CompoError::NonFinite("gradient"));
    }
    Ok(grad)
}

/// Mean margin over a batch; positive once winners carry more implied
/// reward than losers.
pub fn mean_margin(
    policy: &dyn Policy,
    reference: &dyn Policy,
    batch: &[ScoredPair],
    beta: f64,
) -> Result<f64, CompoError> {
    if batch.is_empty() {
        return Err(CompoError::EmptyDataset);
    }
    let mut total = 0.0;
    for pair in batch {
        total += pair_margin(policy, reference, pair, beta)?;
    }
    Ok(total / batch.len() as f64)
}

/// Fraction of pairs whose winner has strictly larger implied reward.
pub fn preference_accuracy(
    policy: &dyn Policy,
    reference: &dyn Policy,
    batch: &[ScoredPair],
    beta: f64,
) -> Result<f64, CompoError> {
    if batch.is_empty() {
        return Err(CompoError::EmptyDataset);
    }
    let mut correct = 0usize;
    for pair in batch {
        if pair_margin(policy, reference, pair, beta)? > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Reparameterized reward of the DPO derivation:
/// `beta * (log pi(y|x) - log ref(y|x))`.
pub fn implied_reward(
    policy: &dyn Policy,
    reference: &dyn Policy,
    prompt: PromptId,
    outcome: &Outcome,
    beta: f64,
) -> Result<f64, CompoError> {
    let lp = finite(policy.log_prob(prompt, outcome)?, "policy log-prob")?;
    let lr = finite(reference.log_prob(prompt, outcome)?, "reference log-prob")?;
    finite(beta * (lp - lr), "implied reward")
}

/// The optimal policy of the KL-constrained reward objective, computed by
/// exact summation: `pi*(y|x) = ref(y|x) * exp(r(x,y)/beta) / Z(x)`.
///
/// Returns (outcome, probability) in enumeration order.
pub fn closed_form_policy(
    reference: &dyn Policy,
    reward: &dyn RewardFn,
    beta: f64,
    prompt: PromptId,
) -> Result<Vec<(Outcome, f64)>, CompoError> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(CompoError::NonFinite("beta must be finite and > 0"));
    }
    let outcomes = reference
        .enumerate_outcomes(prompt)
        .ok_or(CompoError::UnsupportedOutcome(
            "closed-form policy needs an enumerable outcome space",
        ))?;
    let mut weights = Vec::with_capacity(outcomes.len());
    for outcome in &outcomes {
        let lr = finite(reference.log_prob(prompt, outcome)?, "reference log-prob")?;
        let r = finite(reward.reward(prompt, outcome), "reward")?;
        weights.push(lr + r / beta);
    }
    let lse = log_sum_exp(&weights);
    if !lse.is_finite() {
        return Err(CompoError::NonFinite("partition function"));
    }
    Ok(outcomes
        .into_iter()
        .zip(weights)
        .map(|(outcome, w)| (outcome, (w - lse).exp()))
        .collect())
}

/// KL-constrained reward objective, by exact summation over the outcome
/// universe: `E_{y~pi}[r(x,y)] - beta * KL(pi || ref)`.
///
/// Errors if the policy puts mass on an outcome the reference excludes.
pub fn kl_objective(
    policy: &dyn Policy,
    reference: &dyn Policy,
    reward: &dyn RewardFn,
    beta: f64,
    prompt: PromptId,
) -> Result<f64, CompoError> {
    let outcomes = policy
        .enumerate_outcomes(prompt)
        .ok_or(CompoError::UnsupportedOutcome(
            "kl objective needs an enumerable outcome space",
        ))?;
    if let Some(ref_outcomes) = reference.enumerate_outcomes(prompt) {
        if ref_outcomes != outcomes {
            return Err(CompoError::OutcomeUniverseMismatch(prompt));
        }
    }
    let mut objective = 0.0;
    for (idx, outcome) in outcomes.iter().enumerate() {
        let lp = policy.log_prob(prompt, outcome)?;
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        let lr = reference.log_prob(prompt, outcome)?;
        if lr == f64::NEG_INFINITY || lr.exp() == 0.0 {
            return Err(CompoError::ReferenceSupportViolation(idx));
        }
        let r = finite(reward.reward(prompt, outcome), "reward")?;
        objective += p * r - beta * p * (lp - lr);
    }
    finite(objective, "objective")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Fixed log-prob table; lets tests pin margins exactly.
    pub(crate) struct FixedPolicy {
        table: HashMap<(PromptId, Outcome), f64>,
    }

    impl FixedPolicy {
        pub(crate) fn new(entries: &[(PromptId, usize, f64)]) -> Self {
            Self {
                table: entries
                    .iter()
                    .map(|(p, y, lp)| ((*p, Outcome::Id(*y)), *lp))
                    .collect(),
            }
        }
    }

    impl Policy for FixedPolicy {
        fn log_prob(&self, prompt: PromptId, outcome: &Outcome) -> Result<f64, CompoError> {
            self.table
                .get(&(prompt, outcome.clone()))
                .copied()
                .ok_or(CompoError::UnknownPrompt(prompt))
        }
    }

    fn pair() -> ScoredPair {
        ScoredPair {
            prompt: 0,
            win: Outcome::Id(0),
            lose: Outcome::Id(1),
        }
    }

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn zero_margin_loss_is_ln_two() {
        let policy = ToySoftmaxPolicy::from_logits(1, 2, vec![0.7, -0.4]);
        let loss = compo_loss_pair(&policy, &policy.clone(), &pair(), 0.5).unwrap();
        assert!((loss - LN_2).abs() < 1e-12);
    }

    #[test]
    fn frozen_margin_values() {
        // Winner gains 0.5 nats over the reference, loser drops 0.5.
        let policy = FixedPolicy::new(&[(0, 0, -1.0), (0, 1, -2.0)]);
        let reference = FixedPolicy::new(&[(0, 0, -1.5), (0, 1, -1.5)]);
        let m1 = pair_margin(&policy, &reference, &pair(), 1.0).unwrap();
        assert!((m1 - 1.0).abs() < 1e-12);
        let loss_b1 = compo_loss_pair(&policy, &reference, &pair(), 1.0).unwrap();
        assert!((loss_b1 - 0.3132616875182228).abs() < 1e-12, "{loss_b1}");
        let loss_b2 = compo_loss_pair(&policy, &reference, &pair(), 2.0).unwrap();
        assert!((loss_b2 - 0.1269280110429726).abs() < 1e-12, "{loss_b2}");
    }

    #[test]
    fn loss_floor_and_batch_mean() {
        let policy = FixedPolicy::new(&[(0, 0, -0.1), (0, 1, -5.0)]);
        let reference = FixedPolicy::new(&[(0, 0, -3.0), (0, 1, -0.2)]);
        let single = compo_loss_pair(&policy, &reference, &pair(), 1.0).unwrap();
        assert!(single >= 0.0);
        let batch = vec![pair(), pair(), pair()];
        let mean = compo_loss(&policy, &reference, &batch, 1.0).unwrap();
        assert!((mean - single).abs() < 1e-12);
    }

    #[test]
    fn softplus_stability_at_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn non_finite_log_prob_is_reported() {
        let policy = FixedPolicy::new(&[(0, 0, f64::NEG_INFINITY), (0, 1, -1.0)]);
        let reference = FixedPolicy::new(&[(0, 0, -1.0), (0, 1, -1.0)]);
        assert!(matches!(
            compo_loss_pair(&policy, &reference, &pair(), 1.0),
            Err(CompoError::NonFinite(_))
        ));
    }

    #[test]
    fn saturated_pair_has_vanishing_gradient() {
        // Policy already prefers the winner by a huge margin.
        let policy = ToySoftmaxPolicy::from_logits(1, 2, vec![40.0, -40.0]);
        let reference = ToySoftmaxPolicy::uniform(1, 2);
        let grad = compo_grad(&policy, &reference, &[pair()], 1.0).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-12), "{grad:?}");
    }

    #[test]
    fn uniform_start_gradient_is_symmetric() {
        let policy = ToySoftmaxPolicy::uniform(1, 2);
        let reference = ToySoftmaxPolicy::uniform(1, 2);
        let grad = compo_grad(&policy, &reference, &[pair()], 1.0).unwrap();
        // -beta * sigmoid(0) * (dlp(y_w) - dlp(y_l)) with jacobian rows
        // (0.5, -0.5) and (-0.5, 0.5): the winner logit is pushed up and the
        // loser down by beta/2 each.
        assert!((grad[0] + 0.5).abs() < 1e-12, "{grad:?}");
        assert!((grad[1] - 0.5).abs() < 1e-12, "{grad:?}");
    }

    #[test]
    fn implied_reward_contract() {
        let policy = FixedPolicy::new(&[(0, 0, -1.0)]);
        let reference = FixedPolicy::new(&[(0, 0, -1.75)]);
        let y = Outcome::Id(0);
        let r1 = implied_reward(&policy, &reference, 0, &y, 1.0).unwrap();
        assert!((r1 - 0.75).abs() < 1e-12);
        let r2 = implied_reward(&policy, &reference, 0, &y, 2.0).unwrap();
        assert!((r2 - 1.5).abs() < 1e-12);
        let same = implied_reward(&policy, &policy, 0, &y, 3.0).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn closed_form_constant_reward_recovers_reference() {
        let reference = ToySoftmaxPolicy::from_logits(1, 4, vec![0.2, -0.3, 1.4, 0.0]);
        let dist = closed_form_policy(&reference, &|_, _: &Outcome| 2.5, 1.0, 0).unwrap();
        let expected = reference.distribution(0).unwrap();
        for ((_, p), e) in dist.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_frozen_value() {
        let reference = ToySoftmaxPolicy::uniform(1, 4);
        let reward = |_: PromptId, y: &Outcome| match y {
            Outcome::Id(0) => 1.0,
            _ => 0.0,
        };
        let dist = closed_form_policy(&reference, &reward, 1.0, 0).unwrap();
        let expected = std::f64::consts::E / (std::f64::consts::E + 3.0);
        assert!((dist[0].1 - expected).abs() < 1e-12);
        assert!((dist[0].1 - 0.4753668864159723).abs() < 1e-9);
    }

    #[test]
    fn closed_form_large_beta_approaches_reference() {
        let reference = ToySoftmaxPolicy::from_logits(1, 5, vec![0.1, 0.4, -0.2, 0.9, 0.0]);
        let reward = |_: PromptId, y: &Outcome| match y {
            Outcome::Id(i) => (*i as f64) - 2.0,
            _ => 0.0,
        };
        let dist = closed_form_policy(&reference, &reward, 1e6, 0).unwrap();
        let base = reference.distribution(0).unwrap();
        let tv: f64 = dist
            .iter()
            .zip(base)
            .map(|((_, p), q)| (p - q).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-5, "total variation {tv}");
    }

    #[test]
    fn closed_form_survives_extreme_rewards() {
        // Max-shift keeps exp(r/beta) from overflowing.
        let reference = ToySoftmaxPolicy::uniform(1, 3);
        let reward = |_: PromptId, y: &Outcome| match y {
            Outcome::Id(i) => 500.0 * (*i as f64),
            _ => 0.0,
        };
        let dist = closed_form_policy(&reference, &reward, 1.0, 0).unwrap();
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(dist.iter().all(|(_, p)| p.is_finite()));
    }

    #[test]
    fn kl_objective_at_reference_is_expected_reward() {
        let reference = ToySoftmaxPolicy::from_logits(1, 3, vec![0.5, 0.0, -0.5]);
        let reward = |_: PromptId, y: &Outcome| match y {
            Outcome::Id(i) => *i as f64,
            _ => 0.0,
        };
        let obj = kl_objective(&reference, &reference, &reward, 0.7, 0).unwrap();
        let expected: f64 = reference
            .distribution(0)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, p)| p * i as f64)
            .sum();
        assert!((obj - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_objective_frozen_two_outcome_value() {
        // Uniform reference, zero reward, policy [0.9, 0.1]:
        // objective = -KL = -(0.9 ln 1.8 + 0.1 ln 0.2), computed by direct
        // summation.
        let reference = ToySoftmaxPolicy::uniform(1, 2);
        let policy =
            ToySoftmaxPolicy::from_logits(1, 2, vec![(0.9f64).ln(), (0.1f64).ln()]);
        let obj = kl_objective(&policy, &reference, &|_, _: &Outcome| 0.0, 1.0, 0).unwrap();
        let oracle = -(0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln());
        assert!((obj - oracle).abs() < 1e-12);
        assert!((obj - (-0.3680642071684971)).abs() < 1e-12, "{obj}");
    }

    #[test]
    fn beta_never_flips_the_preferred_side() {
        let policy = FixedPolicy::new(&[(0, 0, -0.3), (0, 1, -2.1)]);
        let reference = FixedPolicy::new(&[(0, 0, -1.0), (0, 1, -1.0)]);
        let y_w = Outcome::Id(0);
        let y_l = Outcome::Id(1);
        for beta in [0.01, 0.1, 1.0, 7.5, 300.0] {
            let rw = implied_reward(&policy, &reference, 0, &y_w, beta).unwrap();
            let rl = implied_reward(&policy, &reference, 0, &y_l, beta).unwrap();
            assert!(rw > rl, "beta {beta}");
        }
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn logits(len: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-4.0..4.0f64, len)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // Loss floor: never negative, ln 2 exactly at zero margin.
            #[test]
            fn loss_floor_holds(
                theta in logits(4),
                reference in logits(4),
                win in 0..4usize,
                beta in 0.01..5.0f64,
            ) {
                let lose = (win + 1) % 4;
                let policy = ToySoftmaxPolicy::from_logits(1, 4, theta);
                let ref_policy = ToySoftmaxPolicy::from_logits(1, 4, reference);
                let pair = ScoredPair { prompt: 0, win: Outcome::Id(win), lose: Outcome::Id(lose) };
                let loss = compo_loss_pair(&policy, &ref_policy, &pair, beta).unwrap();
                prop_assert!(loss >= 0.0);
                let margin = pair_margin(&policy, &ref_policy, &pair, beta).unwrap();
                if margin.abs() < 1e-12 {
                    prop_assert!((loss - LN_2).abs() < 1e-10);
                } else {
                    prop_assert!((loss - LN_2).abs() > 0.0);
                }
            }

            // Scaling beta rescales margins but never flips their sign.
            #[test]
            fn beta_scaling_preserves_preference_order(
                theta in logits(3),
                reference in logits(3),
                beta_a in 0.01..10.0f64,
                beta_b in 0.01..10.0f64,
            ) {
                let policy = ToySoftmaxPolicy::from_logits(1, 3, theta);
                let ref_policy = ToySoftmaxPolicy::from_logits(1, 3, reference);
                let pair = ScoredPair { prompt: 0, win: Outcome::Id(0), lose: Outcome::Id(1) };
                let m_a = pair_margin(&policy, &ref_policy, &pair, beta_a).unwrap();
                let m_b = pair_margin(&policy, &ref_policy, &pair, beta_b).unwrap();
                prop_assert!(m_a.signum() == m_b.signum() || m_a == 0.0 || m_b == 0.0);
            }
        }
    }
}
