//! Deterministic gradient-descent training loop with a frozen reference
//! snapshot, per-step loss trace, and policy/trace file formats.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{
    compo_grad, compo_loss, mean_margin, preference_accuracy, CompoConfig, CompoError, ScoredPair,
    TrainablePolicy,
};

/// One row of the training trace. `loss` and `mean_margin` are measured on
/// the step's batch before the parameter update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
}

/// Result of a training run: the frozen reference, the trace, and final
/// whole-dataset statistics.
#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub reference: P,
    pub trace: Vec<TraceRow>,
    pub final_loss: f64,
    pub final_mean_margin: f64,
    pub preference_accuracy: f64,
}

/// Plain gradient descent over the policy parameters.
///
/// The reference policy is a deep copy frozen at entry. Batches come from
/// seeded shuffling, reshuffled each epoch; runs are bit-reproducible given
/// the seed. Non-finite losses abort with the offending step index.
pub fn train<P: TrainablePolicy + Clone>(
    policy: &mut P,
    dataset: &[ScoredPair],
    config: &CompoConfig,
) -> Result<TrainOutcome<P>, CompoError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CompoError::EmptyDataset);
    }
    let reference = policy.clone();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size.min(dataset.len()));
        for _ in 0..config.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }

        let loss = compo_loss(policy, &reference, &batch, config.beta).map_err(|e| {
            CompoError::NonFiniteAtStep {
                step,
                detail: e.to_string(),
            }
        })?;
        let margin = mean_margin(policy, &reference, &batch, config.beta)?;
        let grad = compo_grad(policy, &reference, &batch, config.beta).map_err(|e| {
            CompoError::NonFiniteAtStep {
                step,
                detail: e.to_string(),
            }
        })?;
        trace.push(TraceRow {
            step,
            loss,
            mean_margin: margin,
        });

        let params = policy.params_mut();
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CompoError::NonFiniteAtStep {
                step,
                detail: "parameters left the finite range".into(),
            });
        }
    }

    let final_loss = compo_loss(policy, &reference, dataset, config.beta)?;
    let final_mean_margin = mean_margin(policy, &reference, dataset, config.beta)?;
    let accuracy = preference_accuracy(policy, &reference, dataset, config.beta)?;
    Ok(TrainOutcome {
        reference,
        trace,
        final_loss,
        final_mean_margin,
        preference_accuracy: accuracy,
    })
}

/// Render the loss trace as CSV: `step,loss,mean_margin`.
pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,mean_margin\n");
    for row in trace {
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, row.mean_margin));
    }
    out
}

/// Serialized trained policy: the parameter matrix plus enough context to
/// rebuild scoring (prompt keys, config hash).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub schema: String,
    pub config_hash: String,
    pub beta: f64,
    /// Prompt key per row, in row order.
    pub prompts: Vec<String>,
    pub vocab_size: usize,
    /// Row-major policy logits, one row per prompt.
    pub policy_logits: Vec<Vec<f64>>,
    /// Frozen reference logits with the same layout.
    pub reference_logits: Vec<Vec<f64>>,
}

pub const POLICY_SCHEMA: &str = "claw-policy-v1";

pub fn save_policy_file(path: impl AsRef<Path>, file: &PolicyFile) -> Result<(), CompoError> {
    let json = serde_json::to_string_pretty(file)
        .map_err(|e| CompoError::PolicyFile(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_policy_file(path: impl AsRef<Path>) -> Result<PolicyFile, CompoError> {
    let text = fs::read_to_string(path)?;
    let file: PolicyFile =
        serde_json::from_str(&text).map_err(|e| CompoError::PolicyFile(e.to_string()))?;
    if file.schema != POLICY_SCHEMA {
        return Err(CompoError::PolicyFile(format!(
            "schema {:?}, expected {POLICY_SCHEMA:?}",
            file.schema
        )));
    }
    Ok(file)
}
