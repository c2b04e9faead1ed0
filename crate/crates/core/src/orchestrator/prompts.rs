//! Versioned prompt templates with `{placeholder}` substitution. The
//! builtin set ships with the crate; a directory of same-named files can
//! override it at run time.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::domain::AgentStage;

use super::OrchestratorErrorKind;

pub const PROMPT_VERSION: &str = "v1";

const FILE_NAMES: [&str; 10] = [
    "scan.system.txt",
    "scan.user.txt",
    "lesion.system.txt",
    "lesion.user.txt",
    "differential.system.txt",
    "differential.user.txt",
    "report.system.txt",
    "report.user.txt",
    "omni.system.txt",
    "omni.user.txt",
];

/// One system/user template pair per stage.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<&'static str, String>,
}

impl PromptLibrary {
    /// Templates compiled into the binary.
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(FILE_NAMES[0], include_str!("../../prompts/scan.system.txt").to_string());
        templates.insert(FILE_NAMES[1], include_str!("../../prompts/scan.user.txt").to_string());
        templates.insert(FILE_NAMES[2], include_str!("../../prompts/lesion.system.txt").to_string());
        templates.insert(FILE_NAMES[3], include_str!("../../prompts/lesion.user.txt").to_string());
        templates.insert(
            FILE_NAMES[4],
            include_str!("../../prompts/differential.system.txt").to_string(),
        );
        templates.insert(
            FILE_NAMES[5],
            include_str!("../../prompts/differential.user.txt").to_string(),
        );
        templates.insert(FILE_NAMES[6], include_str!("../../prompts/report.system.txt").to_string());
        templates.insert(FILE_NAMES[7], include_str!("../../prompts/report.user.txt").to_string());
        templates.insert(FILE_NAMES[8], include_str!("../../prompts/omni.system.txt").to_string());
        templates.insert(FILE_NAMES[9], include_str!("../../prompts/omni.user.txt").to_string());
        Self { templates }
    }

    /// Load all ten template files from a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, OrchestratorErrorKind> {
        let dir = dir.as_ref();
        let mut templates = BTreeMap::new();
        for name in FILE_NAMES {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| {
                OrchestratorErrorKind::Config(format!("prompt template {}: {e}", path.display()))
            })?;
            templates.insert(name, text);
        }
        Ok(Self { templates })
    }

    fn get(&self, stage: AgentStage, part: &str) -> &str {
        let stem = match stage {
            AgentStage::Scan => "scan",
            AgentStage::Lesion => "lesion",
            AgentStage::Differential => "differential",
            AgentStage::Report => "report",
            AgentStage::Omni => "omni",
        };
        let key = format!("{stem}.{part}.txt");
        self.templates
            .iter()
            .find(|(name, _)| **name == key)
            .map(|(_, text)| text.as_str())
            .expect("template set is complete by construction")
    }

    pub fn system(&self, stage: AgentStage) -> String {
        self.get(stage, "system").trim_end().to_string()
    }

    pub fn user(&self, stage: AgentStage, values: &[(&str, &str)]) -> String {
        render(self.get(stage, "user"), values)
    }
}

/// Replace `{name}` placeholders; unknown placeholders pass through.
fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.trim_end().to_string();
    for (name, value) in values {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
