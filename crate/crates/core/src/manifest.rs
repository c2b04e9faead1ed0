//! Run execution over a case dataset and the run manifest file: per-case
//! transcripts, conflicts, the run vocabulary, and timings.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::domain::{AgentMessage, AgentStage, CaseRecord, DiagnosticTrajectory, Vocabulary};
use crate::orchestrator::{ConflictSignal, ExecMode, Orchestrator};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseErrorReport {
    pub stage: AgentStage,
    pub message: String,
}

/// One case's transcript: both trajectories on success, partial message
/// logs on failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub status: CaseStatus,
    pub coop: Option<DiagnosticTrajectory>,
    pub comp: Option<DiagnosticTrajectory>,
    pub conflict: Option<ConflictSignal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<CaseErrorReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partial_coop: Vec<AgentMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partial_comp: Vec<AgentMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cases: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub conflicts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTiming {
    pub case_id: String,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimings {
    pub total_ms: u64,
    pub per_case: Vec<CaseTiming>,
}

/// JSON file written per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub conflict_threshold: u32,
    pub vocab: Vocabulary,
    pub cases: Vec<CaseReport>,
    pub conflicts: Vec<ConflictSignal>,
    pub summary: RunSummary,
    pub timings: RunTimings,
}

impl RunManifest {
    /// The portion of the manifest that must be bit-identical across
    /// schedulings: per-case transcripts and conflicts, no timings.
    pub fn transcripts_json(&self) -> String {
        serde_json::to_string(&self.cases).expect("case reports serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| ManifestError::Parse(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ManifestError::Parse(e.to_string()))
    }
}

/// FNV-1a over a canonical config string; hex form used as the run's
/// config fingerprint.
pub fn config_hash(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: ExecMode,
    pub workers: usize,
    pub run_id: String,
    pub config_hash: String,
}

/// Drive every case through both pathways, then fix the run vocabulary and
/// fill the trajectory token sequences. Case order in the manifest follows
/// the dataset order regardless of worker scheduling.
pub fn execute_run(
    orchestrator: &Orchestrator,
    cases: &[CaseRecord],
    backend: &dyn Backend,
    options: &RunOptions,
) -> RunManifest {
    let started = Instant::now();
    let worker_count = options.workers.clamp(1, 8);

    let mut indexed: Vec<(usize, CaseReport, u64)> = if worker_count == 1 || cases.len() <= 1 {
        cases
            .iter()
            .enumerate()
            .map(|(idx, case)| run_one(orchestrator, case, backend, options.mode, idx))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let results = Mutex::new(Vec::with_capacity(cases.len()));
        std::thread::scope(|scope| {
            for _ in 0..worker_count.min(cases.len()) {
                scope.spawn(|| loop {
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= cases.len() {
                        break;
                    }
                    let report = run_one(orchestrator, &cases[idx], backend, options.mode, idx);
                    results.lock().expect("results lock").push(report);
                });
            }
        });
        results.into_inner().expect("results lock")
    };
    indexed.sort_by_key(|(idx, _, _)| *idx);

    // Deterministic run-level vocabulary: dataset texts first, then the
    // produced reports in case order.
    let mut texts: Vec<String> = Vec::new();
    for case in cases {
        texts.push(case.clinical_context.clone());
        if let Some(reference) = &case.reference_report {
            texts.push(reference.clone());
        }
    }
    for (_, report, _) in &indexed {
        for trajectory in [&report.coop, &report.comp].into_iter().flatten() {
            texts.push(trajectory.report.full_text());
        }
    }
    let vocab = Vocabulary::build(texts.iter().map(|t| t.as_str()));

    let mut reports = Vec::with_capacity(indexed.len());
    let mut per_case = Vec::with_capacity(indexed.len());
    let mut conflicts = Vec::new();
    let mut succeeded = 0usize;
    for (_, mut report, elapsed_ms) in indexed {
        for trajectory in [&mut report.coop, &mut report.comp].into_iter().flatten() {
            trajectory.assign_token_seq(&vocab);
        }
        if report.status == CaseStatus::Ok {
            succeeded += 1;
        }
        if let Some(conflict) = &report.conflict {
            conflicts.push(conflict.clone());
        }
        per_case.push(CaseTiming {
            case_id: report.case_id.clone(),
            elapsed_ms,
        });
        reports.push(report);
    }

    let summary = RunSummary {
        cases: cases.len(),
        succeeded,
        failed: cases.len() - succeeded,
        conflicts: conflicts.len(),
    };
    RunManifest {
        run_id: options.run_id.clone(),
        config_hash: options.config_hash.clone(),
        conflict_threshold: orchestrator_threshold(orchestrator),
        vocab,
        cases: reports,
        conflicts,
        summary,
        timings: RunTimings {
            total_ms: started.elapsed().as_millis() as u64,
            per_case,
        },
    }
}

fn orchestrator_threshold(orchestrator: &Orchestrator) -> u32 {
    orchestrator.conflict_threshold()
}

fn run_one(
    orchestrator: &Orchestrator,
    case: &CaseRecord,
    backend: &dyn Backend,
    mode: ExecMode,
    idx: usize,
) -> (usize, CaseReport, u64) {
    let started = Instant::now();
    let report = match orchestrator.run_case(case, backend, mode) {
        Ok(outcome) => CaseReport {
            case_id: case.case_id.clone(),
            status: CaseStatus::Ok,
            coop: Some(outcome.coop),
            comp: Some(outcome.comp),
            conflict: outcome.conflict,
            error: None,
            partial_coop: Vec::new(),
            partial_comp: Vec::new(),
        },
        Err(failure) => CaseReport {
            case_id: case.case_id.clone(),
            status: CaseStatus::Failed,
            coop: None,
            comp: None,
            conflict: None,
            error: Some(CaseErrorReport {
                stage: failure.stage,
                message: failure.message,
            }),
            partial_coop: failure.partial_coop,
            partial_comp: failure.partial_comp,
        },
    };
    (idx, report, started.elapsed().as_millis() as u64)
}

/// Read a case dataset: one [`CaseRecord`] per JSONL line, ids unique and
/// nonempty.
pub fn read_cases_jsonl(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ManifestError::Dataset(format!("{}: {e}", path.display())))?;
    let mut cases = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let case: CaseRecord = serde_json::from_str(line).map_err(|e| {
            ManifestError::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        case.validate()
            .map_err(|e| ManifestError::Dataset(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if !seen.insert(case.case_id.clone()) {
            return Err(ManifestError::Dataset(format!(
                "{}:{}: duplicate case_id {:?}",
                path.display(),
                lineno + 1,
                case.case_id
            )));
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn write_cases_jsonl(
    path: impl AsRef<Path>,
    cases: &[CaseRecord],
) -> Result<(), ManifestError> {
    let mut out = String::new();
    for case in cases {
        out.push_str(&serde_json::to_string(case).map_err(|e| ManifestError::Parse(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
