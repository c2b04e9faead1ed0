//! Turns (cooperative, competitive, ground-truth) triples into the
//! preference dataset and persists it as JSONL with a schema header.
//!
//! Pairs exist only for conflicting cases whose ground-truth scores differ;
//! ties are discarded rather than broken by a secondary oracle.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    score_vs_gt, CaseRecord, DiagnosticTrajectory, LabelSet, StructuredReport, TrajectorySource,
};
use crate::orchestrator::detect_conflict;

pub const PREF_SCHEMA: &str = "claw-pref-v1";

/// Name recorded in each pair's adjudication metadata.
pub const ADJUDICATION_ORACLE: &str = "hamming-vs-ground-truth";

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("trajectories belong to different cases: {0} vs {1}")]
    CaseMismatch(String, String),
    #[error("duplicate case {0} in dataset construction")]
    DuplicateCase(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
    #[error("schema {found:?}, expected {PREF_SCHEMA:?}")]
    SchemaVersion { found: String },
    #[error("pair for case {case_id} violates {check}")]
    Violation { case_id: String, check: &'static str },
}

/// One side of a pair: which pathway produced it, its scorable token
/// sequence, and enough of the trajectory to re-check adjudication later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSide {
    pub source: TrajectorySource,
    pub token_seq: Vec<u32>,
    pub labels: LabelSet,
    pub report: StructuredReport,
}

impl PairSide {
    fn from_trajectory(trajectory: &DiagnosticTrajectory) -> Self {
        Self {
            source: trajectory.source,
            token_seq: trajectory.token_seq.clone(),
            labels: trajectory.extracted_labels,
            report: trajectory.report.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjudication {
    pub score_w: f64,
    pub score_l: f64,
    pub oracle: String,
}

/// An (x, y_w, y_l) tuple with adjudication metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub case_id: String,
    pub prompt_x: String,
    pub y_w: PairSide,
    pub y_l: PairSide,
    pub adjudication: Adjudication,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub conflicts: usize,
    pub ties_discarded: usize,
    pub pairs: usize,
    pub coop_wins: usize,
    pub comp_wins: usize,
}

/// The mined dataset plus its provenance (run manifest id) and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub provenance: String,
    pub counts: DatasetCounts,
}

/// Canonical serialization of the case context the policy conditions on:
/// the image reference and the clinical context, never pixels.
pub fn canonical_prompt(case: &CaseRecord) -> String {
    #[derive(Serialize)]
    struct PromptContext<'a> {
        image_ref: &'a str,
        clinical_context: &'a str,
    }
    serde_json::to_string(&PromptContext {
        image_ref: &case.image_ref,
        clinical_context: &case.clinical_context,
    })
    .expect("prompt context serializes")
}

/// Ground-truth adjudication of one case. A pair is produced iff the two
/// pathways conflict on at least `conflict_threshold` labels and their
/// ground-truth scores differ; the higher score wins, ties yield nothing.
pub fn adjudicate(
    case: &CaseRecord,
    coop: &DiagnosticTrajectory,
    comp: &DiagnosticTrajectory,
    conflict_threshold: u32,
) -> Result<Option<PreferencePair>, PreferenceError> {
    if coop.case_id != comp.case_id {
        return Err(PreferenceError::CaseMismatch(
            coop.case_id.clone(),
            comp.case_id.clone(),
        ));
    }
    if coop.case_id != case.case_id {
        return Err(PreferenceError::CaseMismatch(
            case.case_id.clone(),
            coop.case_id.clone(),
        ));
    }
    let conflict = detect_conflict(coop, comp, conflict_threshold)
        .map_err(|e| PreferenceError::Parse(e.to_string()))?;
    if conflict.is_none() {
        return Ok(None);
    }

    let gt = &case.ground_truth;
    let score_coop = score_vs_gt(&coop.extracted_labels, gt);
    let score_comp = score_vs_gt(&comp.extracted_labels, gt);
    if score_coop == score_comp {
        return Ok(None);
    }
    let (winner, loser, score_w, score_l) = if score_coop > score_comp {
        (coop, comp, score_coop, score_comp)
    } else {
        (comp, coop, score_comp, score_coop)
    };
    Ok(Some(PreferencePair {
        case_id: case.case_id.clone(),
        prompt_x: canonical_prompt(case),
        y_w: PairSide::from_trajectory(winner),
        y_l: PairSide::from_trajectory(loser),
        adjudication: Adjudication {
            score_w,
            score_l,
            oracle: ADJUDICATION_ORACLE.to_string(),
        },
    }))
}

/// Apply [`adjudicate`] across a run. Items must arrive in the order the
/// dataset should keep (callers sort by case id); at most one pair per case.
pub fn build_dataset<'a>(
    items: impl IntoIterator<Item = (&'a CaseRecord, &'a DiagnosticTrajectory, &'a DiagnosticTrajectory)>,
    conflict_threshold: u32,
    provenance: impl Into<String>,
) -> Result<PreferenceDataset, PreferenceError> {
    let mut seen = HashSet::new();
    let mut counts = DatasetCounts::default();
    let mut pairs = Vec::new();
    for (case, coop, comp) in items {
        if !seen.insert(case.case_id.clone()) {
            return Err(PreferenceError::DuplicateCase(case.case_id.clone()));
        }
        let conflict = detect_conflict(coop, comp, conflict_threshold)
            .map_err(|e| PreferenceError::Parse(e.to_string()))?;
        if conflict.is_none() {
            continue;
        }
        counts.conflicts += 1;
        match adjudicate(case, coop, comp, conflict_threshold)? {
            Some(pair) => {
                match pair.y_w.source {
                    TrajectorySource::Cooperative => counts.coop_wins += 1,
                    TrajectorySource::Competitive => counts.comp_wins += 1,
                }
                counts.pairs += 1;
                pairs.push(pair);
            }
            None => counts.ties_discarded += 1,
        }
    }
    Ok(PreferenceDataset {
        pairs,
        provenance: provenance.into(),
        counts,
    })
}

/// Re-check the dataset invariants from stored pairs alone: oracle
/// dominance (winner strictly closer to ground truth) and conflict gating
/// (the two sides disagree on at least one label and come from different
/// sources).
pub fn verify_dataset(
    dataset: &PreferenceDataset,
    gt_by_case: impl Fn(&str) -> Option<LabelSet>,
) -> Result<(), PreferenceError> {
    for pair in &dataset.pairs {
        let violation = |check: &'static str| PreferenceError::Violation {
            case_id: pair.case_id.clone(),
            check,
        };
        if pair.y_w.source == pair.y_l.source {
            return Err(violation("source distinctness"));
        }
        if pair.y_w.labels == pair.y_l.labels {
            return Err(violation("conflict gating"));
        }
        if pair.adjudication.score_w <= pair.adjudication.score_l {
            return Err(violation("recorded score ordering"));
        }
        if let Some(gt) = gt_by_case(&pair.case_id) {
            let score_w = score_vs_gt(&pair.y_w.labels, &gt);
            let score_l = score_vs_gt(&pair.y_l.labels, &gt);
            if score_w <= score_l {
                return Err(violation("oracle dominance"));
            }
            if (score_w - pair.adjudication.score_w).abs() > 1e-12
                || (score_l - pair.adjudication.score_l).abs() > 1e-12
            {
                return Err(violation("recorded scores match recomputation"));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    provenance: String,
    counts: DatasetCounts,
}

/// Write the dataset: a schema header line, then one pair per line.
pub fn persist(dataset: &PreferenceDataset, path: impl AsRef<Path>) -> Result<(), PreferenceError> {
    let header = Header {
        schema: PREF_SCHEMA.to_string(),
        provenance: dataset.provenance.clone(),
        counts: dataset.counts,
    };
    let mut out = serde_json::to_string(&header).map_err(|e| PreferenceError::Parse(e.to_string()))?;
    out.push('\n');
    for pair in &dataset.pairs {
        out.push_str(&serde_json::to_string(pair).map_err(|e| PreferenceError::Parse(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<PreferenceDataset, PreferenceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| PreferenceError::Parse(format!("{}: missing header", path.display())))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| PreferenceError::Parse(format!("{}: header: {e}", path.display())))?;
    if header.schema != PREF_SCHEMA {
        return Err(PreferenceError::SchemaVersion {
            found: header.schema,
        });
    }
    let mut pairs = Vec::new();
    for (offset, line) in lines.enumerate() {
        let pair: PreferencePair = serde_json::from_str(line).map_err(|e| {
            PreferenceError::Parse(format!("{}: pair {}: {e}", path.display(), offset + 1))
        })?;
        pairs.push(pair);
    }
    Ok(PreferenceDataset {
        pairs,
        provenance: header.provenance,
        counts: header.counts,
    })
}
