//! Python bindings for the diagnostic workflow engine: label extraction
//! and scoring, the evaluation metrics, the preference-loss core with its
//! toy policy, and the end-to-end synthetic demo.
//!
//! Build as a cdylib and import as `claw_py`; `python/smoke_test.py` in the
//! repository root shows the expected usage.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use claw_core::compo::{
    self, CompoConfig, Outcome, Policy as _, ScoredPair, ToySoftmaxPolicy, TrainablePolicy as _,
};
use claw_core::domain::{self, LabelSet, PathologyLabel, StructuredReport};
use claw_core::metrics;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn labels_to_dict(labels: &LabelSet) -> HashMap<String, bool> {
    PathologyLabel::ALL
        .iter()
        .map(|l| (l.canonical_name().to_string(), labels.get(*l)))
        .collect()
}

fn labels_from_dict(map: &HashMap<String, bool>) -> PyResult<LabelSet> {
    let mut labels = LabelSet::all_false();
    for label in PathologyLabel::ALL {
        let value = map.get(label.canonical_name()).ok_or_else(|| {
            value_err(format!("label set missing {:?}", label.canonical_name()))
        })?;
        labels.set(label, *value);
    }
    if map.len() != PathologyLabel::ALL.len() {
        return Err(value_err("label set carries unknown keys"));
    }
    Ok(labels)
}

/// Keyword/negation label extraction over a report impression.
#[pyfunction]
fn extract_labels(findings: &str, impression: &str) -> PyResult<HashMap<String, bool>> {
    let report = StructuredReport::new(findings, impression).map_err(value_err)?;
    Ok(labels_to_dict(&domain::extract_labels(&report)))
}

/// Fraction of the five labels on which the two sets agree.
#[pyfunction]
fn score_vs_gt(pred: HashMap<String, bool>, gt: HashMap<String, bool>) -> PyResult<f64> {
    Ok(domain::score_vs_gt(
        &labels_from_dict(&pred)?,
        &labels_from_dict(&gt)?,
    ))
}

#[pyfunction]
fn bleu4(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    metrics::bleu4(&candidates, &references).map_err(value_err)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> PyResult<f64> {
    metrics::rouge_l(candidate, reference).map_err(value_err)
}

#[pyfunction]
fn meteor(candidate: &str, reference: &str) -> PyResult<f64> {
    metrics::meteor(candidate, reference).map_err(value_err)
}

#[pyfunction]
fn cider(candidates: Vec<String>, reference_sets: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::cider(&candidates, &reference_sets).map_err(value_err)
}

/// Per-label accuracy and its unweighted mean.
#[pyfunction]
fn multilabel_accuracy(
    preds: Vec<HashMap<String, bool>>,
    gts: Vec<HashMap<String, bool>>,
) -> PyResult<(HashMap<String, f64>, f64)> {
    let preds: Vec<LabelSet> = preds.iter().map(labels_from_dict).collect::<PyResult<_>>()?;
    let gts: Vec<LabelSet> = gts.iter().map(labels_from_dict).collect::<PyResult<_>>()?;
    let (per_label, avg) = metrics::multilabel_accuracy(&preds, &gts).map_err(value_err)?;
    Ok((
        per_label
            .into_iter()
            .map(|(l, v)| (l.canonical_name().to_string(), v))
            .collect(),
        avg,
    ))
}

fn pairs_from_tuples(pairs: &[(usize, usize, usize)]) -> Vec<ScoredPair> {
    pairs
        .iter()
        .map(|(prompt, win, lose)| ScoredPair {
            prompt: *prompt,
            win: Outcome::Id(*win),
            lose: Outcome::Id(*lose),
        })
        .collect()
}

/// Softmax policy over a finite outcome universe per prompt.
#[pyclass(name = "ToyPolicy", from_py_object)]
#[derive(Clone)]
struct PyToyPolicy {
    inner: ToySoftmaxPolicy,
}

#[pymethods]
impl PyToyPolicy {
    /// Uniform policy: all logits zero.
    #[new]
    fn new(num_prompts: usize, num_outcomes: usize) -> PyResult<Self> {
        if num_prompts == 0 || num_outcomes == 0 {
            return Err(value_err("num_prompts and num_outcomes must be positive"));
        }
        Ok(Self {
            inner: ToySoftmaxPolicy::uniform(num_prompts, num_outcomes),
        })
    }

    #[staticmethod]
    fn from_logits(num_prompts: usize, num_outcomes: usize, logits: Vec<f64>) -> PyResult<Self> {
        if logits.len() != num_prompts * num_outcomes {
            return Err(value_err(format!(
                "expected {} logits, got {}",
                num_prompts * num_outcomes,
                logits.len()
            )));
        }
        Ok(Self {
            inner: ToySoftmaxPolicy::from_logits(num_prompts, num_outcomes, logits),
        })
    }

    fn log_prob(&self, prompt: usize, outcome: usize) -> PyResult<f64> {
        self.inner
            .log_prob(prompt, &Outcome::Id(outcome))
            .map_err(value_err)
    }

    fn distribution(&self, prompt: usize) -> PyResult<Vec<f64>> {
        self.inner.distribution(prompt).map_err(value_err)
    }

    fn logits(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    fn clone_policy(&self) -> Self {
        self.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "ToyPolicy(num_prompts={}, num_outcomes={})",
            self.inner.num_prompts(),
            self.inner.num_outcomes()
        )
    }
}

/// Mean preference loss over (prompt, winner, loser) id triples.
#[pyfunction]
fn compo_loss(
    policy: &PyToyPolicy,
    reference: &PyToyPolicy,
    pairs: Vec<(usize, usize, usize)>,
    beta: f64,
) -> PyResult<f64> {
    compo::compo_loss(
        &policy.inner,
        &reference.inner,
        &pairs_from_tuples(&pairs),
        beta,
    )
    .map_err(value_err)
}

/// Analytic gradient of the preference loss over the policy logits.
#[pyfunction]
fn compo_grad(
    policy: &PyToyPolicy,
    reference: &PyToyPolicy,
    pairs: Vec<(usize, usize, usize)>,
    beta: f64,
) -> PyResult<Vec<f64>> {
    compo::compo_grad(
        &policy.inner,
        &reference.inner,
        &pairs_from_tuples(&pairs),
        beta,
    )
    .map_err(value_err)
}

/// `beta * (log pi(y|x) - log ref(y|x))`.
#[pyfunction]
fn implied_reward(
    policy: &PyToyPolicy,
    reference: &PyToyPolicy,
    prompt: usize,
    outcome: usize,
    beta: f64,
) -> PyResult<f64> {
    compo::implied_reward(
        &policy.inner,
        &reference.inner,
        prompt,
        &Outcome::Id(outcome),
        beta,
    )
    .map_err(value_err)
}

/// Optimal KL-constrained policy: probabilities over the outcome universe.
#[pyfunction]
fn closed_form_policy(
    reference: &PyToyPolicy,
    rewards: Vec<f64>,
    beta: f64,
    prompt: usize,
) -> PyResult<Vec<f64>> {
    if rewards.len() != reference.inner.num_outcomes() {
        return Err(value_err(format!(
            "expected {} rewards, got {}",
            reference.inner.num_outcomes(),
            rewards.len()
        )));
    }
    let reward = move |_: usize, y: &Outcome| match y {
        Outcome::Id(i) => rewards[*i],
        Outcome::Seq(_) => 0.0,
    };
    let dist = compo::closed_form_policy(&reference.inner, &reward, beta, prompt)
        .map_err(value_err)?;
    Ok(dist.into_iter().map(|(_, p)| p).collect())
}

/// `E_pi[r] - beta * KL(pi || ref)` by exact summation.
#[pyfunction]
fn kl_objective(
    policy: &PyToyPolicy,
    reference: &PyToyPolicy,
    rewards: Vec<f64>,
    beta: f64,
    prompt: usize,
) -> PyResult<f64> {
    if rewards.len() != policy.inner.num_outcomes() {
        return Err(value_err(format!(
            "expected {} rewards, got {}",
            policy.inner.num_outcomes(),
            rewards.len()
        )));
    }
    let reward = move |_: usize, y: &Outcome| match y {
        Outcome::Id(i) => rewards[*i],
        Outcome::Seq(_) => 0.0,
    };
    compo::kl_objective(&policy.inner, &reference.inner, &reward, beta, prompt)
        .map_err(value_err)
}

/// Gradient-descent training over preference triples. Returns the trained
/// policy, the frozen reference, and a summary dict.
#[pyfunction]
#[pyo3(signature = (policy, pairs, beta=0.1, learning_rate=0.1, batch_size=4, steps=500, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_toy(
    py: Python<'_>,
    policy: &PyToyPolicy,
    pairs: Vec<(usize, usize, usize)>,
    beta: f64,
    learning_rate: f64,
    batch_size: usize,
    steps: usize,
    seed: u64,
) -> PyResult<(PyToyPolicy, PyToyPolicy, Py<PyAny>)> {
    let config = CompoConfig {
        beta,
        learning_rate,
        batch_size,
        steps,
        seed,
    };
    let mut trained = policy.inner.clone();
    let outcome = compo::train(&mut trained, &pairs_from_tuples(&pairs), &config)
        .map_err(runtime_err)?;

    let summary = pyo3::types::PyDict::new(py);
    summary.set_item("final_loss", outcome.final_loss)?;
    summary.set_item("preference_accuracy", outcome.preference_accuracy)?;
    summary.set_item("mean_margin", outcome.final_mean_margin)?;
    summary.set_item("steps", outcome.trace.len())?;
    Ok((
        PyToyPolicy { inner: trained },
        PyToyPolicy {
            inner: outcome.reference,
        },
        summary.into(),
    ))
}

/// Full synthetic pipeline into `out_dir`; returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, cases=24, steps=400))]
fn run_demo(
    py: Python<'_>,
    out_dir: PathBuf,
    seed: u64,
    cases: usize,
    steps: usize,
) -> PyResult<Py<PyAny>> {
    let summary = claw_core::cli::run_demo(&out_dir, seed, cases, steps).map_err(runtime_err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("cases", summary.cases)?;
    dict.set_item("conflicts", summary.conflicts)?;
    dict.set_item("ties_discarded", summary.ties_discarded)?;
    dict.set_item("pairs", summary.pairs)?;
    dict.set_item("coop_wins", summary.coop_wins)?;
    dict.set_item("comp_wins", summary.comp_wins)?;
    dict.set_item("final_loss", summary.final_loss)?;
    dict.set_item("preference_accuracy", summary.preference_accuracy)?;
    dict.set_item("mean_margin", summary.mean_margin)?;
    dict.set_item("bleu4", summary.metrics.bleu4)?;
    dict.set_item("rouge_l", summary.metrics.rouge_l)?;
    dict.set_item("meteor", summary.metrics.meteor)?;
    dict.set_item("cider", summary.metrics.cider)?;
    dict.set_item("avg_acc", summary.metrics.avg_acc)?;
    Ok(dict.into())
}

#[pymodule]
fn claw_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(extract_labels, m)?)?;
    m.add_function(wrap_pyfunction!(score_vs_gt, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    m.add_function(wrap_pyfunction!(multilabel_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(compo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compo_grad, m)?)?;
    m.add_function(wrap_pyfunction!(implied_reward, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_policy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_objective, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(run_demo, m)?)?;
    m.add_class::<PyToyPolicy>()?;
    Ok(())
}
