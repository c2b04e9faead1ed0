//! Core vocabulary of cases, labels, findings, reports, and trajectories,
//! plus deterministic label extraction and ground-truth scoring.
//!
//! All domain types are immutable after construction and safe to share
//! across concurrent flows. Each type has a canonical JSON form; datasets
//! are JSONL files, one record per line, UTF-8.

mod labels;
mod tokenize;

pub use labels::{extract_labels, score_vs_gt, LabelSet, PathologyLabel, KEYWORD_RULES_VERSION};
pub use tokenize::{tokenize, Vocabulary, UNK_TOKEN};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Invariant violations raised by domain-type constructors.
#[derive(Debug, Error)]
pub enum DomainError {
    #[error("case_id must be nonempty")]
    EmptyCaseId,
    #[error("ranked and excluded diagnoses overlap on {0}")]
    OverlappingDiagnoses(PathologyLabel),
    #[error("message payload does not match stage {0:?}")]
    PayloadStageMismatch(AgentStage),
    #[error("report section {0} is empty")]
    EmptyReportSection(&'static str),
    #[error("{flow:?} trajectory has invalid message sequence: {detail}")]
    InvalidMessageSequence {
        flow: TrajectorySource,
        detail: String,
    },
    #[error("salience {0} outside [0,1]")]
    SalienceOutOfRange(f64),
}

/// One diagnostic case: image reference, clinical context, ground truth.
///
/// `image_ref` is opaque; no pixel data is ever parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_ref: String,
    #[serde(default)]
    pub clinical_context: String,
    pub ground_truth: LabelSet,
    #[serde(default)]
    pub reference_report: Option<String>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.case_id.is_empty() {
            return Err(DomainError::EmptyCaseId);
        }
        Ok(())
    }
}

/// A global abnormality lead produced by the scanning stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanLead {
    pub lead_id: u32,
    pub anatomical_region: String,
    pub description: String,
    pub salience: f64,
}

impl ScanLead {
    pub fn new(
        lead_id: u32,
        anatomical_region: impl Into<String>,
        description: impl Into<String>,
        salience: f64,
    ) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&salience) {
            return Err(DomainError::SalienceOutOfRange(salience));
        }
        Ok(Self {
            lead_id,
            anatomical_region: anatomical_region.into(),
            description: description.into(),
            salience,
        })
    }
}

/// Fine-grained characterization of one lead: morphology, margins, density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionFinding {
    pub lead_id: u32,
    pub morphology: String,
    pub margins: String,
    pub density: String,
    #[serde(default)]
    pub candidate_pathologies: Vec<PathologyLabel>,
}

/// Ranked differential with exclusionary reasoning.
///
/// Ranked and excluded label sets are disjoint by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialAssessment {
    ranked_diagnoses: Vec<(PathologyLabel, String)>,
    excluded: Vec<(PathologyLabel, String)>,
}

impl DifferentialAssessment {
    pub fn new(
        ranked_diagnoses: Vec<(PathologyLabel, String)>,
        excluded: Vec<(PathologyLabel, String)>,
    ) -> Result<Self, DomainError> {
        for (label, _) in &ranked_diagnoses {
            if excluded.iter().any(|(l, _)| l == label) {
                return Err(DomainError::OverlappingDiagnoses(*label));
            }
        }
        Ok(Self {
            ranked_diagnoses,
            excluded,
        })
    }

    pub fn ranked_diagnoses(&self) -> &[(PathologyLabel, String)] {
        &self.ranked_diagnoses
    }

    pub fn excluded(&self) -> &[(PathologyLabel, String)] {
        &self.excluded
    }
}

/// A formal report with the two standard sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub findings: String,
    pub impression: String,
}

impl StructuredReport {
    /// Both sections must be nonempty for a completed trajectory.
    pub fn new(findings: impl Into<String>, impression: impl Into<String>) -> Result<Self, DomainError> {
        let findings = findings.into();
        let impression = impression.into();
        if findings.trim().is_empty() {
            return Err(DomainError::EmptyReportSection("findings"));
        }
        if impression.trim().is_empty() {
            return Err(DomainError::EmptyReportSection("impression"));
        }
        Ok(Self {
            findings,
            impression,
        })
    }

    /// Section texts joined for tokenization and scoring.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.findings, self.impression)
    }
}

/// Pipeline stage that produced a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentStage {
    Scan,
    Lesion,
    Differential,
    Report,
    Omni,
}

impl AgentStage {
    /// Canonical default instance tag for single-instance stages.
    pub fn default_instance(self) -> Option<&'static str> {
        match self {
            AgentStage::Scan => Some("scan"),
            AgentStage::Lesion => None,
            AgentStage::Differential => Some("differential"),
            AgentStage::Report => Some("report"),
            AgentStage::Omni => Some("omni"),
        }
    }
}

impl std::fmt::Display for AgentStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AgentStage::Scan => "Scan",
            AgentStage::Lesion => "Lesion",
            AgentStage::Differential => "Differential",
            AgentStage::Report => "Report",
            AgentStage::Omni => "Omni",
        };
        f.write_str(name)
    }
}

/// Structured payload attached to a stage message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MessagePayload {
    Leads(Vec<ScanLead>),
    Finding(LesionFinding),
    Assessment(DifferentialAssessment),
    Report(StructuredReport),
}

impl MessagePayload {
    fn matches_stage(&self, stage: AgentStage) -> bool {
        matches!(
            (self, stage),
            (MessagePayload::Leads(_), AgentStage::Scan)
                | (MessagePayload::Finding(_), AgentStage::Lesion)
                | (MessagePayload::Assessment(_), AgentStage::Differential)
                | (MessagePayload::Report(_), AgentStage::Report)
                | (MessagePayload::Report(_), AgentStage::Omni)
        )
    }
}

/// One entry of the evidence chain: raw agent output plus parsed payload.
///
/// Messages without a payload record failed parse attempts for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub stage: AgentStage,
    pub agent_instance: String,
    pub content: String,
    #[serde(default)]
    pub payload: Option<MessagePayload>,
}

impl AgentMessage {
    pub fn new(
        stage: AgentStage,
        agent_instance: impl Into<String>,
        content: impl Into<String>,
        payload: Option<MessagePayload>,
    ) -> Result<Self, DomainError> {
        if let Some(p) = &payload {
            if !p.matches_stage(stage) {
                return Err(DomainError::PayloadStageMismatch(stage));
            }
        }
        Ok(Self {
            stage,
            agent_instance: agent_instance.into(),
            content: content.into(),
            payload,
        })
    }
}

/// Which pathway produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrajectorySource {
    Cooperative,
    Competitive,
}

impl std::fmt::Display for TrajectorySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrajectorySource::Cooperative => f.write_str("cooperative"),
            TrajectorySource::Competitive => f.write_str("competitive"),
        }
    }
}

/// A complete pathway output: ordered agent messages, the structured report,
/// a scorable token sequence, and the labels extracted from the report.
///
/// `extracted_labels` is computed from the report at construction and never
/// drifts from it. `token_seq` is filled in by a run-level pass once the
/// run's vocabulary is fixed; it is empty until then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticTrajectory {
    pub case_id: String,
    pub source: TrajectorySource,
    pub messages: Vec<AgentMessage>,
    pub report: StructuredReport,
    #[serde(default)]
    pub token_seq: Vec<u32>,
    pub extracted_labels: LabelSet,
}

impl DiagnosticTrajectory {
    pub fn new(
        case_id: impl Into<String>,
        source: TrajectorySource,
        messages: Vec<AgentMessage>,
        report: StructuredReport,
    ) -> Result<Self, DomainError> {
        validate_message_sequence(source, &messages)?;
        let extracted_labels = extract_labels(&report);
        Ok(Self {
            case_id: case_id.into(),
            source,
            messages,
            report,
            token_seq: Vec::new(),
            extracted_labels,
        })
    }

    /// Encode the report under `vocab` and cache the token sequence.
    pub fn assign_token_seq(&mut self, vocab: &Vocabulary) {
        self.token_seq = vocab.encode(&self.report.full_text());
    }

    /// Re-derive labels from the stored report and compare with the cache.
    pub fn label_cache_consistent(&self) -> bool {
        extract_labels(&self.report) == self.extracted_labels
    }
}

/// Stage-sequence check shared by the constructor and transcript audits.
///
/// Cooperative: one or more Scan messages (re-prompt attempts included),
/// then Lesion messages, then Differential, then Report; at least one of
/// each required stage. Competitive: exactly one Omni message.
fn validate_message_sequence(
    source: TrajectorySource,
    messages: &[AgentMessage],
) -> Result<(), DomainError> {
    let fail = |detail: String| DomainError::InvalidMessageSequence { flow: source, detail };
    match source {
        TrajectorySource::Competitive => {
            if messages.len() != 1 || messages[0].stage != AgentStage::Omni {
                return Err(fail(format!(
                    "expected exactly one Omni message, got {} message(s)",
                    messages.len()
                )));
            }
        }
        TrajectorySource::Cooperative => {
            let rank = |s: AgentStage| match s {
                AgentStage::Scan => 0,
                AgentStage::Lesion => 1,
                AgentStage::Differential => 2,
                AgentStage::Report => 3,
                AgentStage::Omni => 4,
            };
            let mut prev = 0;
            for m in messages {
                if m.stage == AgentStage::Omni {
                    return Err(fail("Omni message in cooperative trajectory".into()));
                }
                let r = rank(m.stage);
                if r < prev {
                    return Err(fail(format!("stage {} out of order", m.stage)));
                }
                prev = r;
            }
            for required in [AgentStage::Scan, AgentStage::Differential, AgentStage::Report] {
                if !messages.iter().any(|m| m.stage == required) {
                    return Err(fail(format!("missing {required} stage")));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> StructuredReport {
        StructuredReport::new("Clear lungs.", "No acute findings.").unwrap()
    }

    fn msg(stage: AgentStage, instance: &str) -> AgentMessage {
        AgentMessage::new(stage, instance, "text", None).unwrap()
    }

    #[test]
    fn structured_report_rejects_empty_sections() {
        assert!(matches!(
            StructuredReport::new("", "imp"),
            Err(DomainError::EmptyReportSection("findings"))
        ));
        assert!(matches!(
            StructuredReport::new("f", "  "),
            Err(DomainError::EmptyReportSection("impression"))
        ));
    }

    #[test]
    fn differential_rejects_overlap() {
        let err = DifferentialAssessment::new(
            vec![(PathologyLabel::Pneumonia, "likely".into())],
            vec![(PathologyLabel::Pneumonia, "excluded".into())],
        );
        assert!(matches!(
            err,
            Err(DomainError::OverlappingDiagnoses(PathologyLabel::Pneumonia))
        ));
    }

    #[test]
    fn payload_must_match_stage() {
        let finding = LesionFinding {
            lead_id: 0,
            morphology: "patchy".into(),
            margins: "ill-defined".into(),
            density: "low".into(),
            candidate_pathologies: vec![],
        };
        let err = AgentMessage::new(
            AgentStage::Scan,
            "scan",
            "x",
            Some(MessagePayload::Finding(finding)),
        );
        assert!(matches!(err, Err(DomainError::PayloadStageMismatch(_))));
    }

    #[test]
    fn scan_lead_salience_bounds() {
        assert!(ScanLead::new(0, "r", "d", 1.0).is_ok());
        assert!(ScanLead::new(0, "r", "d", -0.1).is_err());
        assert!(ScanLead::new(0, "r", "d", 1.5).is_err());
    }

    #[test]
    fn cooperative_trajectory_requires_stage_order() {
        let ok = DiagnosticTrajectory::new(
            "c1",
            TrajectorySource::Cooperative,
            vec![
                msg(AgentStage::Scan, "scan"),
                msg(AgentStage::Lesion, "lesion-0"),
                msg(AgentStage::Differential, "differential"),
                msg(AgentStage::Report, "report"),
            ],
            report(),
        );
        assert!(ok.is_ok());

        let out_of_order = DiagnosticTrajectory::new(
            "c1",
            TrajectorySource::Cooperative,
            vec![
                msg(AgentStage::Differential, "differential"),
                msg(AgentStage::Scan, "scan"),
                msg(AgentStage::Report, "report"),
            ],
            report(),
        );
        assert!(out_of_order.is_err());
    }

    #[test]
    fn cooperative_trajectory_allows_zero_leads() {
        let traj = DiagnosticTrajectory::new(
            "c1",
            TrajectorySource::Cooperative,
            vec![
                msg(AgentStage::Scan, "scan"),
                msg(AgentStage::Differential, "differential"),
                msg(AgentStage::Report, "report"),
            ],
            report(),
        )
        .unwrap();
        assert_eq!(traj.messages.len(), 3);
    }

    #[test]
    fn competitive_trajectory_is_single_message() {
        let ok = DiagnosticTrajectory::new(
            "c1",
            TrajectorySource::Competitive,
            vec![msg(AgentStage::Omni, "omni")],
            report(),
        );
        assert!(ok.is_ok());

        let too_many = DiagnosticTrajectory::new(
            "c1",
            TrajectorySource::Competitive,
            vec![msg(AgentStage::Omni, "omni"), msg(AgentStage::Omni, "omni")],
            report(),
        );
        assert!(too_many.is_err());
    }

    #[test]
    fn trajectory_caches_extracted_labels() {
        let rep = StructuredReport::new("f", "Large right pneumothorax. No edema.").unwrap();
        let traj = DiagnosticTrajectory::new(
            "c1",
            TrajectorySource::Competitive,
            vec![msg(AgentStage::Omni, "omni")],
            rep,
        )
        .unwrap();
        assert!(traj.extracted_labels.get(PathologyLabel::Pneumothorax));
        assert!(!traj.extracted_labels.get(PathologyLabel::Edema));
        assert!(traj.label_cache_consistent());
    }
}
