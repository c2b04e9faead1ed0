//! Deterministic scripted backend: completion text is a pure lookup keyed
//! on (case_id, stage, instance, attempt). Same key, same bytes, forever.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::AgentStage;

use super::{validate_request, Backend, BackendError, CallTag, CompletionRequest};

/// One script line. `instance` defaults to the stage's canonical instance
/// tag; `attempt` defaults to 0. Retry attempts with no dedicated entry
/// fall back to the attempt-0 completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub case_id: String,
    pub stage: AgentStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
    #[serde(default)]
    pub attempt: u32,
    pub completion: String,
}

type ScriptKey = (String, AgentStage, String, u32);

/// Backend whose `complete()` is a pure lookup into a fixed script.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: HashMap<ScriptKey, String>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        let mut map = HashMap::new();
        for (idx, entry) in entries.into_iter().enumerate() {
            let key = Self::entry_key(entry.case_id, entry.stage, entry.instance, entry.attempt)
                .map_err(|e| BackendError::Script(format!("entry {}: {e}", idx + 1)))?;
            if map
                .insert(key.clone(), entry.completion)
                .is_some()
            {
                return Err(BackendError::Script(format!(
                    "duplicate key ({}, {}, {}, attempt {})",
                    key.0, key.1, key.2, key.3
                )));
            }
        }
        Ok(Self { entries: map })
    }

    /// Load a JSONL script; one [`ScriptEntry`] per line. An empty file is a
    /// valid script that fails every lookup.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            BackendError::Script(format!("cannot read script {}: {e}", path.display()))
        })?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                BackendError::Script(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            entries.push(entry);
        }
        Self::from_entries(entries).map_err(|e| match e {
            BackendError::Script(msg) => {
                BackendError::Script(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry_key(
        case_id: String,
        stage: AgentStage,
        instance: Option<String>,
        attempt: u32,
    ) -> Result<ScriptKey, String> {
        let instance = match instance {
            Some(i) => i,
            None => stage
                .default_instance()
                .ok_or_else(|| format!("stage {stage} requires an explicit instance tag"))?
                .to_string(),
        };
        Ok((case_id, stage, instance, attempt))
    }

    fn lookup(&self, tag: &CallTag) -> Option<&String> {
        let key = (
            tag.case_id.clone(),
            tag.stage,
            tag.instance.clone(),
            tag.attempt,
        );
        self.entries.get(&key).or_else(|| {
            // Retry attempts replay the base completion unless scripted.
            let base = (tag.case_id.clone(), tag.stage, tag.instance.clone(), 0);
            self.entries.get(&base)
        })
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, BackendError> {
        validate_request(request)?;
        self.lookup(request.tag).cloned().ok_or_else(|| {
            BackendError::MalformedResponse(format!("no script entry for {}", request.tag))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatMessage, GenerationParams};

    fn request<'a>(
        messages: &'a [ChatMessage],
        params: &'a GenerationParams,
        tag: &'a CallTag,
    ) -> CompletionRequest<'a> {
        CompletionRequest {
            messages,
            params,
            tag,
        }
    }

    fn entry(case: &str, stage: AgentStage, completion: &str) -> ScriptEntry {
        ScriptEntry {
            case_id: case.into(),
            stage,
            instance: None,
            attempt: 0,
            completion: completion.into(),
        }
    }

    #[test]
    fn lookup_returns_exact_bytes() {
        let backend = ScriptedBackend::from_entries(vec![
            entry("case_7", AgentStage::Scan, "[{\"anatomical_region\":\"left lung\"}]"),
            entry("case_7", AgentStage::Report, "Findings: a.\nImpression: b."),
            entry("case_8", AgentStage::Omni, "Findings: c.\nImpression: d."),
        ])
        .unwrap();
        let messages = [ChatMessage::system("s"), ChatMessage::user("u")];
        let params = GenerationParams::default();
        let tag = CallTag::new("case_7", AgentStage::Scan, "scan");
        let got = backend.complete(&request(&messages, &params, &tag)).unwrap();
        assert_eq!(got, "[{\"anatomical_region\":\"left lung\"}]");
    }

    #[test]
    fn missing_key_names_the_key() {
        let backend = ScriptedBackend::from_entries(vec![]).unwrap();
        assert!(backend.is_empty());
        let messages = [ChatMessage::system("s"), ChatMessage::user("u")];
        let params = GenerationParams::default();
        let tag = CallTag::new("case_9", AgentStage::Differential, "differential");
        let err = backend
            .complete(&request(&messages, &params, &tag))
            .unwrap_err();
        match err {
            BackendError::MalformedResponse(msg) => {
                assert!(msg.contains("case_9"), "{msg}");
                assert!(msg.contains("Differential"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected_by_name() {
        let err = ScriptedBackend::from_entries(vec![
            entry("case_1", AgentStage::Scan, "a"),
            entry("case_1", AgentStage::Scan, "b"),
        ])
        .unwrap_err();
        match err {
            BackendError::Script(msg) => {
                assert!(msg.contains("duplicate key"), "{msg}");
                assert!(msg.contains("case_1"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn lesion_entries_require_instance() {
        let err = ScriptedBackend::from_entries(vec![ScriptEntry {
            case_id: "c".into(),
            stage: AgentStage::Lesion,
            instance: None,
            attempt: 0,
            completion: "x".into(),
        }])
        .unwrap_err();
        assert!(matches!(err, BackendError::Script(_)));
    }

    #[test]
    fn retry_attempt_falls_back_to_base_entry() {
        let backend = ScriptedBackend::from_entries(vec![entry("c", AgentStage::Scan, "base")])
            .unwrap();
        let messages = [ChatMessage::system("s"), ChatMessage::user("u")];
        let params = GenerationParams::default();
        let tag = CallTag::new("c", AgentStage::Scan, "scan").with_attempt(1);
        let got = backend.complete(&request(&messages, &params, &tag)).unwrap();
        assert_eq!(got, "base");
    }

    #[test]
    fn file_round_trip_with_line_numbers_on_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        std::fs::write(
            &path,
            "{\"case_id\":\"c\",\"stage\":\"Scan\",\"completion\":\"[]\"}\nnot json\n",
        )
        .unwrap();
        let err = ScriptedBackend::from_file(&path).unwrap_err();
        match err {
            BackendError::Script(msg) => assert!(msg.contains(":2:"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }

        std::fs::write(
            &path,
            "{\"case_id\":\"c\",\"stage\":\"Scan\",\"completion\":\"[]\"}\n",
        )
        .unwrap();
        let backend = ScriptedBackend::from_file(&path).unwrap();
        assert_eq!(backend.len(), 1);
    }
}
