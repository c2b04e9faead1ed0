//! Executes the four-stage cooperative pipeline and the one-shot competitive
//! flow per case, maintains the append-only evidence chain, and raises
//! conflict signals on label disagreement between the two pathways.

mod parse;
mod prompts;

pub use prompts::{PromptLibrary, PROMPT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BudgetedBackend, CallTag, ChatMessage, CompletionRequest, GenerationParams};
use crate::domain::{
    AgentMessage, AgentStage, CaseRecord, DiagnosticTrajectory, DifferentialAssessment, LabelSet,
    LesionFinding, MessagePayload, PathologyLabel, ScanLead, StructuredReport, TrajectorySource,
};

/// Append-only ordered transcript one flow reads and extends. Entries never
/// mutate or reorder after append; cooperative stage order is enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBuffer {
    case_id: String,
    entries: Vec<AgentMessage>,
}

impl ContextBuffer {
    pub fn new(case_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn entries(&self) -> &[AgentMessage] {
        &self.entries
    }

    /// Append one message; stage rank must not decrease.
    pub fn append(&mut self, message: AgentMessage) -> Result<(), OrchestratorErrorKind> {
        if let Some(last) = self.entries.last() {
            if stage_rank(message.stage) < stage_rank(last.stage) {
                return Err(OrchestratorErrorKind::Precondition(format!(
                    "stage {} may not follow {}",
                    message.stage, last.stage
                )));
            }
        }
        self.entries.push(message);
        Ok(())
    }

    /// Plain-text rendering injected into downstream prompts.
    pub fn render(&self) -> String {
        if self.entries.is_empty() {
            return "(empty)".to_string();
        }
        self.entries
            .iter()
            .map(|m| format!("[{}/{}] {}", m.stage, m.agent_instance, m.content))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Scan leads recorded in this buffer, if the scan stage completed.
    pub fn scan_leads(&self) -> Option<&[ScanLead]> {
        self.entries.iter().rev().find_map(|m| match &m.payload {
            Some(MessagePayload::Leads(leads)) => Some(leads.as_slice()),
            _ => None,
        })
    }
}

fn stage_rank(stage: AgentStage) -> u8 {
    match stage {
        AgentStage::Scan => 0,
        AgentStage::Lesion => 1,
        AgentStage::Differential => 2,
        AgentStage::Report => 3,
        AgentStage::Omni => 4,
    }
}

/// A detected label disagreement between the two pathways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictSignal {
    pub case_id: String,
    pub coop_labels: LabelSet,
    pub comp_labels: LabelSet,
    pub disagreement_count: u32,
}

/// Error classes raised while driving a case.
#[derive(Debug, Error)]
pub enum OrchestratorErrorKind {
    #[error("parse failure: {0}")]
    Parse(String),
    #[error("ranked and excluded diagnoses overlap on {0}")]
    Disjointness(PathologyLabel),
    #[error("report section {0} is empty")]
    EmptySection(&'static str),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
    #[error("trajectories belong to different cases: {0} vs {1}")]
    CaseMismatch(String, String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
}

/// A stage error with its case and failing stage attached.
#[derive(Debug, Error)]
#[error("case {case_id}, stage {stage}: {kind}")]
pub struct OrchestratorError {
    pub case_id: String,
    pub stage: AgentStage,
    #[source]
    pub kind: OrchestratorErrorKind,
}

/// Case abort: failing stage plus both partial transcripts for the manifest.
#[derive(Debug)]
pub struct CaseFailure {
    pub case_id: String,
    pub stage: AgentStage,
    pub message: String,
    pub partial_coop: Vec<AgentMessage>,
    pub partial_comp: Vec<AgentMessage>,
}

/// Successful case outcome: both trajectories and the optional conflict.
#[derive(Debug, Clone)]
pub struct CaseOutcome {
    pub coop: DiagnosticTrajectory,
    pub comp: DiagnosticTrajectory,
    pub conflict: Option<ConflictSignal>,
}

/// Scheduling of the per-case flows; results are identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Concurrent,
    Sequential,
}

/// Drives both diagnostic pathways over a backend.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    prompts: PromptLibrary,
    params: GenerationParams,
    /// Minimum disagreement count that raises a conflict.
    conflict_threshold: u32,
    /// Fan-out bound for the lesion stage.
    lead_cap: usize,
    /// Per-case completion call budget across both flows.
    budget_per_case: u32,
}

impl Default for Orchestrator {
    fn default() -> Self {
        Self {
            prompts: PromptLibrary::builtin(),
            params: GenerationParams::default(),
            conflict_threshold: 1,
            lead_cap: 8,
            budget_per_case: 64,
        }
    }
}

/// Parse-class issues; everything except disjointness earns one re-prompt.
enum ParseIssue {
    Json(String),
    EmptySection(&'static str),
    Referential(String),
    Disjointness(PathologyLabel),
}

impl ParseIssue {
    fn retryable(&self) -> bool {
        !matches!(self, ParseIssue::Disjointness(_))
    }

    fn into_kind(self) -> OrchestratorErrorKind {
        match self {
            ParseIssue::Json(e) => OrchestratorErrorKind::Parse(e),
            ParseIssue::EmptySection(which) => OrchestratorErrorKind::EmptySection(which),
            ParseIssue::Referential(e) => {
                OrchestratorErrorKind::Parse(format!("referential check failed: {e}"))
            }
            ParseIssue::Disjointness(label) => OrchestratorErrorKind::Disjointness(label),
        }
    }

    fn describe(&self) -> String {
        match self {
            ParseIssue::Json(e) => format!("invalid JSON: {e}"),
            ParseIssue::EmptySection(which) => format!("empty {which} section"),
            ParseIssue::Referential(e) => format!("referential check failed: {e}"),
            ParseIssue::Disjointness(label) => format!("{label} both ranked and excluded"),
        }
    }
}

#[derive(Deserialize)]
struct RawLead {
    #[serde(default)]
    lead_id: Option<u32>,
    anatomical_region: String,
    description: String,
    salience: f64,
}

#[derive(Deserialize)]
struct RawFinding {
    #[serde(default)]
    lead_id: Option<u32>,
    morphology: String,
    margins: String,
    density: String,
    #[serde(default)]
    candidate_pathologies: Vec<String>,
}

#[derive(Deserialize)]
struct RawDiagnosis {
    label: String,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct RawAssessment {
    #[serde(default)]
    ranked: Vec<RawDiagnosis>,
    #[serde(default)]
    excluded: Vec<RawDiagnosis>,
}

impl Orchestrator {
    pub fn new(prompts: PromptLibrary, params: GenerationParams) -> Self {
        Self {
            prompts,
            params,
            ..Self::default()
        }
    }

    pub fn with_conflict_threshold(mut self, threshold: u32) -> Self {
        self.conflict_threshold = threshold.max(1);
        self
    }

    pub fn with_budget_per_case(mut self, budget: u32) -> Self {
        self.budget_per_case = budget;
        self
    }

    pub fn with_lead_cap(mut self, cap: usize) -> Self {
        self.lead_cap = cap.min(8);
        self
    }

    pub fn conflict_threshold(&self) -> u32 {
        self.conflict_threshold
    }

    /// One completion with a single corrective re-prompt on parse-class
    /// failure. Returns every raw attempt (for the evidence chain) plus the
    /// parse result of the last attempt.
    fn call_with_retry<T>(
        &self,
        backend: &dyn Backend,
        tag: CallTag,
        system: String,
        user: String,
        parse: impl Fn(&str) -> Result<T, ParseIssue>,
    ) -> (Vec<String>, Result<T, OrchestratorErrorKind>) {
        let mut attempts = Vec::new();
        let mut user_text = user;
        for attempt in 0u32..2 {
            let tag = tag.clone().with_attempt(attempt);
            let messages = [
                ChatMessage::system(system.clone()),
                ChatMessage::user(user_text.clone()),
            ];
            let request = CompletionRequest {
                messages: &messages,
                params: &self.params,
                tag: &tag,
            };
            let completion = match backend.complete(&request) {
                Ok(text) => text,
                Err(e) => return (attempts, Err(e.into())),
            };
            attempts.push(completion.clone());
            match parse(&completion) {
                Ok(value) => return (attempts, Ok(value)),
                Err(issue) if issue.retryable() && attempt == 0 => {
                    user_text = format!(
                        "{user_text}\n\nYour previous reply could not be used ({}). \
                         Follow the required output format exactly.",
                        issue.describe()
                    );
                }
                Err(issue) => return (attempts, Err(issue.into_kind())),
            }
        }
        unreachable!("retry loop returns on the second attempt")
    }

    fn stage_err(case_id: &str, stage: AgentStage, kind: OrchestratorErrorKind) -> OrchestratorError {
        OrchestratorError {
            case_id: case_id.to_string(),
            stage,
            kind,
        }
    }

    /// Append raw attempts to the buffer: all but the last carry no payload,
    /// the last carries `payload` when parsing succeeded.
    fn record_attempts(
        buffer: &mut ContextBuffer,
        stage: AgentStage,
        instance: &str,
        attempts: &[String],
        final_payload: Option<MessagePayload>,
    ) -> Result<(), OrchestratorErrorKind> {
        for (i, content) in attempts.iter().enumerate() {
            let payload = if i + 1 == attempts.len() {
                final_payload.clone()
            } else {
                None
            };
            buffer.append(AgentMessage::new(stage, instance, content.clone(), payload)?)?;
        }
        Ok(())
    }

    fn parse_leads(&self, text: &str) -> Result<Vec<ScanLead>, ParseIssue> {
        let raw: Vec<RawLead> = parse::extract_json(text).map_err(ParseIssue::Json)?;
        let mut leads = Vec::new();
        for (index, lead) in raw.into_iter().enumerate().take(self.lead_cap) {
            if let Some(id) = lead.lead_id {
                if id as usize != index {
                    return Err(ParseIssue::Json(format!(
                        "lead ids must run 0..n-1; found {id} at position {index}"
                    )));
                }
            }
            let lead = ScanLead::new(
                index as u32,
                lead.anatomical_region,
                lead.description,
                lead.salience,
            )
            .map_err(|e| ParseIssue::Json(e.to_string()))?;
            leads.push(lead);
        }
        Ok(leads)
    }

    /// Scanning stage: global abnormality leads with ids `0..n-1`.
    pub fn run_scan(
        &self,
        case: &CaseRecord,
        backend: &dyn Backend,
        buffer: &mut ContextBuffer,
    ) -> Result<Vec<ScanLead>, OrchestratorError> {
        let stage = AgentStage::Scan;
        let on_err = |kind| Self::stage_err(&case.case_id, stage, kind);
        let user = self.prompts.user(
            stage,
            &[
                ("case_id", case.case_id.as_str()),
                ("image_ref", case.image_ref.as_str()),
                ("clinical_context", case.clinical_context.as_str()),
            ],
        );
        let (attempts, result) = self.call_with_retry(
            backend,
            CallTag::new(&case.case_id, stage, "scan"),
            self.prompts.system(stage),
            user,
            |text| self.parse_leads(text),
        );
        match result {
            Ok(leads) => {
                Self::record_attempts(
                    buffer,
                    stage,
                    "scan",
                    &attempts,
                    Some(MessagePayload::Leads(leads.clone())),
                )
                .map_err(on_err)?;
                Ok(leads)
            }
            Err(kind) => {
                Self::record_attempts(buffer, stage, "scan", &attempts, None).map_err(on_err)?;
                Err(on_err(kind))
            }
        }
    }

    fn parse_finding(lead: &ScanLead, text: &str) -> Result<LesionFinding, ParseIssue> {
        let raw: RawFinding = parse::extract_json(text).map_err(ParseIssue::Json)?;
        let lead_id = raw.lead_id.unwrap_or(lead.lead_id);
        if lead_id != lead.lead_id {
            return Err(ParseIssue::Referential(format!(
                "finding references lead {lead_id}, expected {}",
                lead.lead_id
            )));
        }
        let mut candidates = Vec::new();
        for name in raw.candidate_pathologies {
            candidates.push(name.parse::<PathologyLabel>().map_err(ParseIssue::Json)?);
        }
        Ok(LesionFinding {
            lead_id,
            morphology: raw.morphology,
            margins: raw.margins,
            density: raw.density,
            candidate_pathologies: candidates,
        })
    }

    /// One lesion call against a fixed evidence snapshot. Every lead gets
    /// the post-scan buffer, which keeps concurrent and sequential fan-out
    /// byte-identical.
    fn lesion_call(
        &self,
        case: &CaseRecord,
        lead: &ScanLead,
        snapshot: &ContextBuffer,
        backend: &dyn Backend,
    ) -> (Vec<String>, Result<LesionFinding, OrchestratorErrorKind>) {
        let stage = AgentStage::Lesion;
        let instance = format!("lesion-{}", lead.lead_id);
        let lead_json = serde_json::to_string(lead).expect("lead serializes");
        let user = self.prompts.user(
            stage,
            &[
                ("case_id", case.case_id.as_str()),
                ("image_ref", case.image_ref.as_str()),
                ("evidence_chain", snapshot.render().as_str()),
                ("lead_json", lead_json.as_str()),
            ],
        );
        self.call_with_retry(
            backend,
            CallTag::new(&case.case_id, stage, instance),
            self.prompts.system(stage),
            user,
            |text| Self::parse_finding(lead, text),
        )
    }

    /// Lesion stage for one lead, appending to the live buffer.
    pub fn run_lesion(
        &self,
        case: &CaseRecord,
        lead: &ScanLead,
        backend: &dyn Backend,
        buffer: &mut ContextBuffer,
    ) -> Result<LesionFinding, OrchestratorError> {
        let stage = AgentStage::Lesion;
        let on_err = |kind| Self::stage_err(&case.case_id, stage, kind);
        let known = buffer
            .scan_leads()
            .map(|leads| leads.iter().any(|l| l.lead_id == lead.lead_id))
            .unwrap_or(false);
        if !known {
            return Err(on_err(OrchestratorErrorKind::Precondition(format!(
                "lead {} does not belong to case {}",
                lead.lead_id, case.case_id
            ))));
        }
        let snapshot = buffer.clone();
        let instance = format!("lesion-{}", lead.lead_id);
        let (attempts, result) = self.lesion_call(case, lead, &snapshot, backend);
        match result {
            Ok(finding) => {
                Self::record_attempts(
                    buffer,
                    stage,
                    &instance,
                    &attempts,
                    Some(MessagePayload::Finding(finding.clone())),
                )
                .map_err(on_err)?;
                Ok(finding)
            }
            Err(kind) => {
                Self::record_attempts(buffer, stage, &instance, &attempts, None).map_err(on_err)?;
                Err(on_err(kind))
            }
        }
    }

    fn parse_assessment(text: &str) -> Result<DifferentialAssessment, ParseIssue> {
        let raw: RawAssessment = parse::extract_json(text).map_err(ParseIssue::Json)?;
        let parse_list = |items: Vec<RawDiagnosis>| -> Result<Vec<(PathologyLabel, String)>, ParseIssue> {
            items
                .into_iter()
                .map(|d| {
                    d.label
                        .parse::<PathologyLabel>()
                        .map(|label| (label, d.rationale))
                        .map_err(ParseIssue::Json)
                })
                .collect()
        };
        let ranked = parse_list(raw.ranked)?;
        let excluded = parse_list(raw.excluded)?;
        DifferentialAssessment::new(ranked, excluded).map_err(|e| match e {
            crate::domain::DomainError::OverlappingDiagnoses(label) => {
                ParseIssue::Disjointness(label)
            }
            other => ParseIssue::Json(other.to_string()),
        })
    }

    /// Differential stage over all findings plus the clinical context.
    pub fn run_differential(
        &self,
        case: &CaseRecord,
        findings: &[LesionFinding],
        backend: &dyn Backend,
        buffer: &mut ContextBuffer,
    ) -> Result<DifferentialAssessment, OrchestratorError> {
        let stage = AgentStage::Differential;
        let on_err = |kind| Self::stage_err(&case.case_id, stage, kind);
        let recorded: Vec<&LesionFinding> = buffer
            .entries()
            .iter()
            .filter_map(|m| match &m.payload {
                Some(MessagePayload::Finding(f)) => Some(f),
                _ => None,
            })
            .collect();
        for finding in findings {
            if !recorded.contains(&finding) {
                return Err(on_err(OrchestratorErrorKind::Precondition(format!(
                    "finding for lead {} missing from the buffer",
                    finding.lead_id
                ))));
            }
        }
        let findings_json = serde_json::to_string(findings).expect("findings serialize");
        let user = self.prompts.user(
            stage,
            &[
                ("case_id", case.case_id.as_str()),
                ("clinical_context", case.clinical_context.as_str()),
                ("evidence_chain", buffer.render().as_str()),
                ("findings_json", findings_json.as_str()),
            ],
        );
        let (attempts, result) = self.call_with_retry(
            backend,
            CallTag::new(&case.case_id, stage, "differential"),
            self.prompts.system(stage),
            user,
            Self::parse_assessment,
        );
        match result {
            Ok(assessment) => {
                Self::record_attempts(
                    buffer,
                    stage,
                    "differential",
                    &attempts,
                    Some(MessagePayload::Assessment(assessment.clone())),
                )
                .map_err(on_err)?;
                Ok(assessment)
            }
            Err(kind) => {
                Self::record_attempts(buffer, stage, "differential", &attempts, None)
                    .map_err(on_err)?;
                Err(on_err(kind))
            }
        }
    }

    fn parse_report(text: &str) -> Result<StructuredReport, ParseIssue> {
        let sections = parse::split_report_sections(text).map_err(ParseIssue::Json)?;
        let findings = sections.findings.filter(|s| !s.is_empty());
        let impression = sections.impression.filter(|s| !s.is_empty());
        let findings = findings.ok_or(ParseIssue::EmptySection("findings"))?;
        let impression = impression.ok_or(ParseIssue::EmptySection("impression"))?;
        StructuredReport::new(findings, impression).map_err(|e| ParseIssue::Json(e.to_string()))
    }

    /// Reporting stage: formal two-section report from the assessment.
    pub fn run_report(
        &self,
        case: &CaseRecord,
        assessment: &DifferentialAssessment,
        backend: &dyn Backend,
        buffer: &mut ContextBuffer,
    ) -> Result<StructuredReport, OrchestratorError> {
        let stage = AgentStage::Report;
        let on_err = |kind| Self::stage_err(&case.case_id, stage, kind);
        let has_differential = buffer
            .entries()
            .iter()
            .any(|m| matches!(m.payload, Some(MessagePayload::Assessment(_))));
        if !has_differential {
            return Err(on_err(OrchestratorErrorKind::Precondition(
                "report stage requires a differential message in the buffer".into(),
            )));
        }
        let assessment_json = serde_json::to_string(assessment).expect("assessment serializes");
        let user = self.prompts.user(
            stage,
            &[
                ("case_id", case.case_id.as_str()),
                ("evidence_chain", buffer.render().as_str()),
                ("assessment_json", assessment_json.as_str()),
            ],
        );
        let (attempts, result) = self.call_with_retry(
            backend,
            CallTag::new(&case.case_id, stage, "report"),
            self.prompts.system(stage),
            user,
            Self::parse_report,
        );
        match result {
            Ok(report) => {
                Self::record_attempts(
                    buffer,
                    stage,
                    "report",
                    &attempts,
                    Some(MessagePayload::Report(report.clone())),
                )
                .map_err(on_err)?;
                Ok(report)
            }
            Err(kind) => {
                Self::record_attempts(buffer, stage, "report", &attempts, None).map_err(on_err)?;
                Err(on_err(kind))
            }
        }
    }

    /// The analytical pathway: scan, lesion fan-out, differential, report.
    /// Lesion calls for distinct leads may run concurrently; findings are
    /// ordered by lead id before the differential either way.
    pub fn run_cooperative(
        &self,
        case: &CaseRecord,
        backend: &dyn Backend,
        mode: ExecMode,
    ) -> Result<DiagnosticTrajectory, (OrchestratorError, Vec<AgentMessage>)> {
        let mut buffer = ContextBuffer::new(&case.case_id);
        let partial = |buffer: &ContextBuffer| buffer.entries().to_vec();

        let leads = self
            .run_scan(case, backend, &mut buffer)
            .map_err(|e| (e, partial(&buffer)))?;

        let snapshot = buffer.clone();
        let mut lesion_results: Vec<(u32, Vec<String>, Result<LesionFinding, OrchestratorErrorKind>)> =
            match mode {
                ExecMode::Sequential => leads
                    .iter()
                    .map(|lead| {
                        let (attempts, result) = self.lesion_call(case, lead, &snapshot, backend);
                        (lead.lead_id, attempts, result)
                    })
                    .collect(),
                ExecMode::Concurrent => std::thread::scope(|scope| {
                    let handles: Vec<_> = leads
                        .iter()
                        .map(|lead| {
                            let snapshot = &snapshot;
                            scope.spawn(move || {
                                let (attempts, result) =
                                    self.lesion_call(case, lead, snapshot, backend);
                                (lead.lead_id, attempts, result)
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("lesion thread panicked"))
                        .collect()
                }),
            };
        lesion_results.sort_by_key(|(lead_id, _, _)| *lead_id);

        let mut findings = Vec::with_capacity(lesion_results.len());
        for (lead_id, attempts, result) in lesion_results {
            let instance = format!("lesion-{lead_id}");
            match result {
                Ok(finding) => {
                    Self::record_attempts(
                        &mut buffer,
                        AgentStage::Lesion,
                        &instance,
                        &attempts,
                        Some(MessagePayload::Finding(finding.clone())),
                    )
                    .map_err(|kind| {
                        (
                            Self::stage_err(&case.case_id, AgentStage::Lesion, kind),
                            partial(&buffer),
                        )
                    })?;
                    findings.push(finding);
                }
                Err(kind) => {
                    let _ = Self::record_attempts(
                        &mut buffer,
                        AgentStage::Lesion,
                        &instance,
                        &attempts,
                        None,
                    );
                    return Err((
                        Self::stage_err(&case.case_id, AgentStage::Lesion, kind),
                        partial(&buffer),
                    ));
                }
            }
        }

        let assessment = self
            .run_differential(case, &findings, backend, &mut buffer)
            .map_err(|e| (e, partial(&buffer)))?;
        let report = self
            .run_report(case, &assessment, backend, &mut buffer)
            .map_err(|e| (e, partial(&buffer)))?;

        DiagnosticTrajectory::new(
            &case.case_id,
            TrajectorySource::Cooperative,
            buffer.entries().to_vec(),
            report,
        )
        .map_err(|e| {
            (
                Self::stage_err(&case.case_id, AgentStage::Report, e.into()),
                partial(&buffer),
            )
        })
    }

    /// The holistic pathway: a single senior-attending call producing the
    /// report directly. The trajectory carries exactly one message; failed
    /// re-prompt attempts survive only in failure transcripts.
    pub fn run_competitive(
        &self,
        case: &CaseRecord,
        backend: &dyn Backend,
    ) -> Result<DiagnosticTrajectory, (OrchestratorError, Vec<AgentMessage>)> {
        let stage = AgentStage::Omni;
        let user = self.prompts.user(
            stage,
            &[
                ("case_id", case.case_id.as_str()),
                ("image_ref", case.image_ref.as_str()),
                ("clinical_context", case.clinical_context.as_str()),
            ],
        );
        let (attempts, result) = self.call_with_retry(
            backend,
            CallTag::new(&case.case_id, stage, "omni"),
            self.prompts.system(stage),
            user,
            Self::parse_report,
        );
        let as_messages = |attempts: &[String], final_payload: Option<MessagePayload>| {
            attempts
                .iter()
                .enumerate()
                .map(|(i, content)| {
                    let payload = if i + 1 == attempts.len() {
                        final_payload.clone()
                    } else {
                        None
                    };
                    AgentMessage::new(stage, "omni", content.clone(), payload)
                        .expect("omni payload matches stage")
                })
                .collect::<Vec<_>>()
        };
        match result {
            Ok(report) => {
                let message = as_messages(&attempts, Some(MessagePayload::Report(report.clone())))
                    .pop()
                    .expect("at least one attempt");
                DiagnosticTrajectory::new(
                    &case.case_id,
                    TrajectorySource::Competitive,
                    vec![message],
                    report,
                )
                .map_err(|e| {
                    (
                        Self::stage_err(&case.case_id, stage, e.into()),
                        as_messages(&attempts, None),
                    )
                })
            }
            Err(kind) => Err((
                Self::stage_err(&case.case_id, stage, kind),
                as_messages(&attempts, None),
            )),
        }
    }

    /// Runs both pathways for a case and detects conflicts. The flows share
    /// no mutable state, so concurrent and sequential execution produce
    /// identical results.
    pub fn run_case(
        &self,
        case: &CaseRecord,
        backend: &dyn Backend,
        mode: ExecMode,
    ) -> Result<CaseOutcome, CaseFailure> {
        let budgeted = BudgetedBackend::new(backend, self.budget_per_case);

        let (coop_result, comp_result) = match mode {
            ExecMode::Sequential => (
                self.run_cooperative(case, &budgeted, mode),
                self.run_competitive(case, &budgeted),
            ),
            ExecMode::Concurrent => std::thread::scope(|scope| {
                let budgeted = &budgeted;
                let comp = scope.spawn(move || self.run_competitive(case, budgeted));
                let coop = self.run_cooperative(case, budgeted, mode);
                (coop, comp.join().expect("competitive thread panicked"))
            }),
        };

        match (coop_result, comp_result) {
            (Ok(coop), Ok(comp)) => {
                let conflict = self
                    .detect_conflict(&coop, &comp)
                    .map_err(|e| CaseFailure {
                        case_id: case.case_id.clone(),
                        stage: AgentStage::Omni,
                        message: e.to_string(),
                        partial_coop: coop.messages.clone(),
                        partial_comp: comp.messages.clone(),
                    })?;
                Ok(CaseOutcome {
                    coop,
                    comp,
                    conflict,
                })
            }
            (Err((err, partial_coop)), Ok(comp)) => Err(CaseFailure {
                case_id: case.case_id.clone(),
                stage: err.stage,
                message: err.to_string(),
                partial_coop,
                partial_comp: comp.messages,
            }),
            (Ok(coop), Err((err, partial_comp))) => Err(CaseFailure {
                case_id: case.case_id.clone(),
                stage: err.stage,
                message: err.to_string(),
                partial_coop: coop.messages,
                partial_comp,
            }),
            (Err((coop_err, partial_coop)), Err((_, partial_comp))) => Err(CaseFailure {
                case_id: case.case_id.clone(),
                stage: coop_err.stage,
                message: coop_err.to_string(),
                partial_coop,
                partial_comp,
            }),
        }
    }

    /// Conflict iff the extracted label sets disagree on at least the
    /// configured number of labels.
    pub fn detect_conflict(
        &self,
        coop: &DiagnosticTrajectory,
        comp: &DiagnosticTrajectory,
    ) -> Result<Option<ConflictSignal>, OrchestratorError> {
        detect_conflict(coop, comp, self.conflict_threshold)
    }
}

/// Free-standing conflict detection with an explicit threshold (>= 1).
pub fn detect_conflict(
    coop: &DiagnosticTrajectory,
    comp: &DiagnosticTrajectory,
    threshold: u32,
) -> Result<Option<ConflictSignal>, OrchestratorError> {
    if coop.case_id != comp.case_id {
        return Err(OrchestratorError {
            case_id: coop.case_id.clone(),
            stage: AgentStage::Omni,
            kind: OrchestratorErrorKind::CaseMismatch(
                coop.case_id.clone(),
                comp.case_id.clone(),
            ),
        });
    }
    let disagreement_count =
        coop.extracted_labels.disagreeing_labels(&comp.extracted_labels).len() as u32;
    if disagreement_count >= threshold.max(1) {
        Ok(Some(ConflictSignal {
            case_id: coop.case_id.clone(),
            coop_labels: coop.extracted_labels,
            comp_labels: comp.extracted_labels,
            disagreement_count,
        }))
    } else {
        Ok(None)
    }
}

/// Evidence-chain audit failure.
#[derive(Debug, Error)]
#[error("evidence chain violated for case {case_id}: {detail}")]
pub struct ChainViolation {
    pub case_id: String,
    pub detail: String,
}

/// Audit a transcript: stage ordering, lead references, fan-out exactness,
/// and differential-before-report. Checkable on any stored trajectory.
pub fn validate_evidence_chain(trajectory: &DiagnosticTrajectory) -> Result<(), ChainViolation> {
    let fail = |detail: String| ChainViolation {
        case_id: trajectory.case_id.clone(),
        detail,
    };

    match trajectory.source {
        TrajectorySource::Competitive => {
            if trajectory.messages.len() != 1 {
                return Err(fail(format!(
                    "competitive trajectory has {} messages",
                    trajectory.messages.len()
                )));
            }
            let message = &trajectory.messages[0];
            if message.stage != AgentStage::Omni {
                return Err(fail(format!("competitive message has stage {}", message.stage)));
            }
            if !matches!(message.payload, Some(MessagePayload::Report(_))) {
                return Err(fail("competitive message lacks a report payload".into()));
            }
        }
        TrajectorySource::Cooperative => {
            let mut prev_rank = 0u8;
            for message in &trajectory.messages {
                let rank = stage_rank(message.stage);
                if rank == stage_rank(AgentStage::Omni) {
                    return Err(fail("omni message in cooperative trajectory".into()));
                }
                if rank < prev_rank {
                    return Err(fail(format!("stage {} out of order", message.stage)));
                }
                prev_rank = rank;
            }

            let mut leads: Option<&[ScanLead]> = None;
            let mut lesion_lead_ids = Vec::new();
            let mut differential_seen = false;
            let mut report_seen = false;
            for message in &trajectory.messages {
                match &message.payload {
                    Some(MessagePayload::Leads(l)) => leads = Some(l),
                    Some(MessagePayload::Finding(f)) => {
                        let known = leads
                            .map(|ls| ls.iter().any(|l| l.lead_id == f.lead_id))
                            .unwrap_or(false);
                        if !known {
                            return Err(fail(format!(
                                "lesion finding references unknown lead {}",
                                f.lead_id
                            )));
                        }
                        lesion_lead_ids.push(f.lead_id);
                    }
                    Some(MessagePayload::Assessment(_)) => differential_seen = true,
                    Some(MessagePayload::Report(_)) => {
                        if !differential_seen {
                            return Err(fail(
                                "report message precedes the differential".into(),
                            ));
                        }
                        report_seen = true;
                    }
                    None => {}
                }
            }
            let leads = leads.ok_or_else(|| fail("no scan message with leads".into()))?;
            if !differential_seen {
                return Err(fail("no differential message".into()));
            }
            if !report_seen {
                return Err(fail("no report message".into()));
            }
            let mut expected: Vec<u32> = leads.iter().map(|l| l.lead_id).collect();
            expected.sort_unstable();
            let mut actual = lesion_lead_ids;
            actual.sort_unstable();
            if expected != actual {
                return Err(fail(format!(
                    "lesion fan-out mismatch: leads {expected:?} vs findings {actual:?}"
                )));
            }
        }
    }

    if !trajectory.label_cache_consistent() {
        return Err(fail("extracted label cache drifted from the report".into()));
    }
    Ok(())
}
