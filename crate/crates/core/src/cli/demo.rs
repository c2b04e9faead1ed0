//! End-to-end synthetic pipeline: generate a scripted corpus, run both
//! pathways, mine preferences, train, evaluate, and verify the run's
//! end-to-end properties. Any stage failure exits nonzero naming the stage.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::backend::ScriptedBackend;
use crate::compo::CompoConfig;
use crate::manifest::{write_cases_jsonl, RunManifest};
use crate::metrics::{evaluate, BleuAggregation, MetricReport};
use crate::orchestrator::{validate_evidence_chain, ExecMode, Orchestrator};
use crate::preference::{self, verify_dataset};
use crate::synth;

use super::{
    build_prefs_from_manifest, guard_out, join_eval_records, run_dataset_to_manifest,
    scored_pairs, train_on_pairs, usage, write_metric_report, PredictionRecord, ReferenceRecord,
};

/// Deterministic summary of one demo run; identical for identical seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSummary {
    pub seed: u64,
    pub cases: usize,
    pub conflicts: usize,
    pub ties_discarded: usize,
    pub pairs: usize,
    pub coop_wins: usize,
    pub comp_wins: usize,
    pub final_loss: f64,
    pub preference_accuracy: f64,
    pub mean_margin: f64,
    pub metrics: MetricReport,
}

impl fmt::Display for DemoSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "demo summary (seed {})", self.seed)?;
        writeln!(
            f,
            "  cases {}, conflicts {}, ties discarded {}, pairs {} (coop {}, comp {})",
            self.cases,
            self.conflicts,
            self.ties_discarded,
            self.pairs,
            self.coop_wins,
            self.comp_wins
        )?;
        writeln!(
            f,
            "  final loss {:.6}, preference accuracy {:.4}, mean margin {:.6}",
            self.final_loss, self.preference_accuracy, self.mean_margin
        )?;
        writeln!(
            f,
            "  bleu4 {:.2}, rouge_l {:.2}, meteor {:.2}, cider {:.2}, avg_acc {:.2} (x100)",
            self.metrics.bleu4 * 100.0,
            self.metrics.rouge_l * 100.0,
            self.metrics.meteor * 100.0,
            self.metrics.cider * 100.0,
            self.metrics.avg_acc * 100.0
        )
    }
}

fn stage_err(stage: &str, detail: impl fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("demo stage {stage}: {detail}")
}

/// Write the eval inputs derived from a manifest plus the source cases.
pub(crate) fn write_eval_inputs(
    out_dir: &Path,
    manifest: &RunManifest,
    cases: &[crate::domain::CaseRecord],
) -> anyhow::Result<(PathBuf, PathBuf)> {
    let mut predictions = Vec::new();
    for report in &manifest.cases {
        if let Some(coop) = &report.coop {
            predictions.push(PredictionRecord {
                case_id: report.case_id.clone(),
                candidate: coop.report.full_text(),
                pred_labels: coop.extracted_labels,
            });
        }
    }
    let mut references = Vec::new();
    for case in cases {
        let text = case
            .reference_report
            .clone()
            .ok_or_else(|| usage(format!("case {} lacks a reference report", case.case_id)))?;
        references.push(ReferenceRecord {
            case_id: case.case_id.clone(),
            references: vec![text],
            gt_labels: case.ground_truth,
        });
    }

    let predictions_path = out_dir.join("predictions.jsonl");
    let references_path = out_dir.join("references.jsonl");
    let mut pred_text = String::new();
    for p in &predictions {
        pred_text.push_str(&serde_json::to_string(p)?);
        pred_text.push('\n');
    }
    std::fs::write(&predictions_path, pred_text)?;
    let mut ref_text = String::new();
    for r in &references {
        ref_text.push_str(&serde_json::to_string(r)?);
        ref_text.push('\n');
    }
    std::fs::write(&references_path, ref_text)?;
    Ok((predictions_path, references_path))
}

/// Library form of the demo; the acceptance suite calls this directly.
pub fn run_demo(out_dir: &Path, seed: u64, case_count: usize, steps: usize) -> anyhow::Result<DemoSummary> {
    std::fs::create_dir_all(out_dir)?;

    // Corpus generation.
    let corpus = synth::generate(seed, case_count);
    if corpus.cases.len() < 20 || corpus.expected.conflicts < 6 {
        return Err(stage_err(
            "generate",
            format!(
                "corpus too small: {} cases, {} conflicts",
                corpus.cases.len(),
                corpus.expected.conflicts
            ),
        ));
    }
    write_cases_jsonl(out_dir.join("cases.jsonl"), &corpus.cases)
        .map_err(|e| stage_err("generate", e))?;
    synth::write_script_jsonl(out_dir.join("script.jsonl"), &corpus.script)
        .map_err(|e| stage_err("generate", e))?;

    // Run both pathways.
    let backend = ScriptedBackend::from_entries(corpus.script.clone())
        .map_err(|e| stage_err("run", e))?;
    let orchestrator = Orchestrator::default();
    let config_text = format!("demo-seed-{seed}-cases-{case_count}");
    let manifest = run_dataset_to_manifest(
        config_text,
        &orchestrator,
        &corpus.cases,
        &backend,
        ExecMode::Concurrent,
        4,
    );
    if manifest.summary.failed > 0 {
        return Err(stage_err(
            "run",
            format!("{} case(s) failed", manifest.summary.failed),
        ));
    }
    for report in &manifest.cases {
        for trajectory in [&report.coop, &report.comp].into_iter().flatten() {
            validate_evidence_chain(trajectory).map_err(|e| stage_err("run", e))?;
        }
    }
    manifest
        .save(out_dir.join("manifest.json"))
        .map_err(|e| stage_err("run", e))?;

    // Preference mining with hand-computable expected counts.
    let dataset =
        build_prefs_from_manifest(&manifest, &corpus.cases).map_err(|e| stage_err("build-prefs", e))?;
    let expected = corpus.expected;
    if dataset.counts.conflicts != expected.conflicts
        || dataset.counts.ties_discarded != expected.ties_discarded
        || dataset.counts.pairs != expected.pairs
        || dataset.counts.coop_wins != expected.coop_wins
        || dataset.counts.comp_wins != expected.comp_wins
    {
        return Err(stage_err(
            "build-prefs",
            format!(
                "counts {:?} do not match the generator's expectation {:?}",
                dataset.counts, expected
            ),
        ));
    }
    verify_dataset(&dataset, |id| {
        corpus
            .cases
            .iter()
            .find(|c| c.case_id == id)
            .map(|c| c.ground_truth)
    })
    .map_err(|e| stage_err("build-prefs", e))?;
    preference::persist(&dataset, out_dir.join("prefs.jsonl"))
        .map_err(|e| stage_err("build-prefs", e))?;

    // Training.
    let config = CompoConfig {
        beta: 0.1,
        learning_rate: 0.1,
        batch_size: 4,
        steps,
        seed,
    };
    let (prompts, pairs) = scored_pairs(&dataset).map_err(|e| stage_err("train", e))?;
    let (policy_file, outcome, _policy) =
        train_on_pairs(prompts, &pairs, &config).map_err(|e| stage_err("train", e))?;
    crate::compo::save_policy_file(out_dir.join("policy.json"), &policy_file)
        .map_err(|e| stage_err("train", e))?;
    std::fs::write(
        out_dir.join("loss.csv"),
        crate::compo::trace_to_csv(&outcome.trace),
    )
    .map_err(|e| stage_err("train", e))?;

    // End-to-end property: winners carry more implied reward than losers.
    if outcome.preference_accuracy < 0.95 {
        return Err(stage_err(
            "verify",
            format!("preference accuracy {:.4} < 0.95", outcome.preference_accuracy),
        ));
    }
    if outcome.final_mean_margin <= 0.0 {
        return Err(stage_err(
            "verify",
            format!("mean margin {:.6} not positive", outcome.final_mean_margin),
        ));
    }

    // Evaluation of cooperative reports against the reference reports.
    let (pred_path, ref_path) =
        write_eval_inputs(out_dir, &manifest, &corpus.cases).map_err(|e| stage_err("eval", e))?;
    let predictions: Vec<PredictionRecord> =
        super::read_jsonl(&pred_path).map_err(|e| stage_err("eval", e))?;
    let references: Vec<ReferenceRecord> =
        super::read_jsonl(&ref_path).map_err(|e| stage_err("eval", e))?;
    let records = join_eval_records(predictions, references).map_err(|e| stage_err("eval", e))?;
    let metrics = evaluate(&records, BleuAggregation::Corpus).map_err(|e| stage_err("eval", e))?;
    write_metric_report(&out_dir.join("metrics.json"), &metrics)
        .map_err(|e| stage_err("eval", e))?;

    Ok(DemoSummary {
        seed,
        cases: corpus.cases.len(),
        conflicts: dataset.counts.conflicts,
        ties_discarded: dataset.counts.ties_discarded,
        pairs: dataset.counts.pairs,
        coop_wins: dataset.counts.coop_wins,
        comp_wins: dataset.counts.comp_wins,
        final_loss: outcome.final_loss,
        preference_accuracy: outcome.preference_accuracy,
        mean_margin: outcome.final_mean_margin,
        metrics,
    })
}

pub(super) fn cmd_demo(
    out: PathBuf,
    seed: u64,
    cases: usize,
    steps: usize,
    force: bool,
) -> anyhow::Result<u8> {
    std::fs::create_dir_all(&out)
        .map_err(|e| usage(format!("out: cannot create {}: {e}", out.display())))?;
    guard_out(&out.join("manifest.json"), force)?;
    let summary = run_demo(&out, seed, cases, steps)?;
    print!("{summary}");
    println!("artifacts: {}", out.display());
    Ok(0)
}
