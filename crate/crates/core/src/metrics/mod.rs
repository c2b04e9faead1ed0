//! From-scratch evaluation suite: BLEU-4, ROUGE-L, METEOR, CIDEr, and
//! per-pathology Top-1 accuracy, with the shared tokenizer from the domain
//! module so every score is computed over the same token stream.

mod accuracy;
mod bleu;
mod cider;
mod meteor;
mod rouge;

pub use accuracy::multilabel_accuracy;
pub use bleu::{bleu4, bleu4_detailed, bleu4_smoothed, BleuDetail};
pub use cider::{cider, cider_per_case, CIDER_MAX_N};
pub use meteor::{meteor, meteor_detailed, MeteorDetail};
pub use rouge::rouge_l;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{LabelSet, PathologyLabel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("input lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("corpus of {size} case(s) is too small for IDF statistics")]
    CorpusTooSmall { size: usize },
    #[error("record {0}: case needs at least one reference")]
    MissingReference(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
}

/// One scored case: generated text, reference texts, and both label sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub candidate: String,
    pub references: Vec<String>,
    pub pred_labels: LabelSet,
    pub gt_labels: LabelSet,
}

/// How BLEU-4 aggregates over the corpus. ROUGE-L and METEOR are always
/// means over cases; CIDEr is inherently corpus-level through its IDF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BleuAggregation {
    /// Pooled n-gram counts over the whole corpus.
    #[default]
    Corpus,
    /// Mean of per-case BLEU-4 scores.
    MeanOverCases,
}

/// Per-corpus scores. Text metrics are on the [0,1] scale except CIDEr on
/// [0,10]; the display table multiplies by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub per_label_acc: BTreeMap<PathologyLabel, f64>,
    pub avg_acc: f64,
}

impl MetricReport {
    /// Aligned plain-text table on the x100 display scale.
    pub fn display_table(&self) -> String {
        let mut rows: Vec<(String, f64)> = vec![
            ("BLEU-4".into(), self.bleu4),
            ("ROUGE-L".into(), self.rouge_l),
            ("METEOR".into(), self.meteor),
            ("CIDEr".into(), self.cider),
        ];
        for (label, value) in &self.per_label_acc {
            rows.push((format!("Acc[{label}]"), *value));
        }
        rows.push(("Acc[Avg]".into(), self.avg_acc));

        let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (name, value) in rows {
            out.push_str(&format!("{name:<width$}  {:>8.2}\n", value * 100.0));
        }
        out
    }
}

/// Score a corpus of records. Single-reference metrics (BLEU-4, ROUGE-L,
/// METEOR) use the first reference of each case; CIDEr uses the full
/// reference sets.
pub fn evaluate(records: &[EvalRecord], bleu_mode: BleuAggregation) -> Result<MetricReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput("evaluation records"));
    }
    for r in records {
        if r.references.is_empty() {
            return Err(MetricsError::MissingReference(r.case_id.clone()));
        }
    }

    let candidates: Vec<String> = records.iter().map(|r| r.candidate.clone()).collect();
    let first_refs: Vec<String> = records.iter().map(|r| r.references[0].clone()).collect();
    let reference_sets: Vec<Vec<String>> = records.iter().map(|r| r.references.clone()).collect();

    let bleu = match bleu_mode {
        BleuAggregation::Corpus => bleu4(&candidates, &first_refs)?,
        BleuAggregation::MeanOverCases => {
            let mut total = 0.0;
            for (c, r) in candidates.iter().zip(&first_refs) {
                total += bleu4(std::slice::from_ref(c), std::slice::from_ref(r))?;
            }
            total / candidates.len() as f64
        }
    };

    let mut rouge_total = 0.0;
    let mut meteor_total = 0.0;
    for (c, r) in candidates.iter().zip(&first_refs) {
        rouge_total += rouge_l(c, r)?;
        meteor_total += meteor(c, r)?;
    }

    let cider_score = cider(&candidates, &reference_sets)?;

    let preds: Vec<LabelSet> = records.iter().map(|r| r.pred_labels).collect();
    let gts: Vec<LabelSet> = records.iter().map(|r| r.gt_labels).collect();
    let (per_label_acc, avg_acc) = multilabel_accuracy(&preds, &gts)?;

    Ok(MetricReport {
        bleu4: bleu,
        rouge_l: rouge_total / records.len() as f64,
        meteor: meteor_total / records.len() as f64,
        cider: cider_score,
        per_label_acc,
        avg_acc,
    })
}

/// Read the JSONL record format: one [`EvalRecord`] per line.
pub fn read_eval_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(line)
            .map_err(|e| MetricsError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_eval_records(
    path: impl AsRef<Path>,
    records: &[EvalRecord],
) -> Result<(), MetricsError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).map_err(|e| MetricsError::Parse(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
