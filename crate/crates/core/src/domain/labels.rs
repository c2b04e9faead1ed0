//! The five pathology labels, full label sets, keyword-based extraction
//! from report impressions, and ground-truth agreement scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::StructuredReport;

/// Version tag of the shipped keyword/negation rule file.
pub const KEYWORD_RULES_VERSION: &str = "v1";

const KEYWORD_RULES_JSON: &str = include_str!("../../data/pathology_keywords.json");

/// The five pulmonary pathologies scored by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathologyLabel {
    Consolidation,
    PleuralEffusion,
    Pneumonia,
    Pneumothorax,
    Edema,
}

impl PathologyLabel {
    /// Canonical label order used everywhere labels are enumerated.
    pub const ALL: [PathologyLabel; 5] = [
        PathologyLabel::Consolidation,
        PathologyLabel::PleuralEffusion,
        PathologyLabel::Pneumonia,
        PathologyLabel::Pneumothorax,
        PathologyLabel::Edema,
    ];

    /// Stable canonical string form, identical to the serialized form.
    pub fn canonical_name(self) -> &'static str {
        match self {
            PathologyLabel::Consolidation => "Consolidation",
            PathologyLabel::PleuralEffusion => "PleuralEffusion",
            PathologyLabel::Pneumonia => "Pneumonia",
            PathologyLabel::Pneumothorax => "Pneumothorax",
            PathologyLabel::Edema => "Edema",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|l| *l == self).unwrap()
    }
}

impl fmt::Display for PathologyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl FromStr for PathologyLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.canonical_name() == s)
            .ok_or_else(|| format!("unknown pathology label: {s:?}"))
    }
}

/// Presence flag for every one of the five labels; no partial maps.
///
/// Serializes as a JSON object with all five canonical label names as keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelSet {
    presence: [bool; 5],
}

impl LabelSet {
    pub fn all_false() -> Self {
        Self::default()
    }

    pub fn from_positive(labels: &[PathologyLabel]) -> Self {
        let mut set = Self::default();
        for label in labels {
            set.set(*label, true);
        }
        set
    }

    pub fn get(&self, label: PathologyLabel) -> bool {
        self.presence[label.index()]
    }

    pub fn set(&mut self, label: PathologyLabel, present: bool) {
        self.presence[label.index()] = present;
    }

    pub fn with(mut self, label: PathologyLabel, present: bool) -> Self {
        self.set(label, present);
        self
    }

    /// Number of labels on which the two sets agree (0..=5).
    pub fn agreement_count(&self, other: &LabelSet) -> u32 {
        PathologyLabel::ALL
            .iter()
            .filter(|l| self.get(**l) == other.get(**l))
            .count() as u32
    }

    /// Labels on which the two sets disagree, in canonical order.
    pub fn disagreeing_labels(&self, other: &LabelSet) -> Vec<PathologyLabel> {
        PathologyLabel::ALL
            .into_iter()
            .filter(|l| self.get(*l) != other.get(*l))
            .collect()
    }

    pub fn positives(&self) -> Vec<PathologyLabel> {
        PathologyLabel::ALL
            .into_iter()
            .filter(|l| self.get(*l))
            .collect()
    }

    pub fn complement(&self) -> LabelSet {
        let mut out = *self;
        for l in PathologyLabel::ALL {
            out.set(l, !self.get(l));
        }
        out
    }
}

impl Serialize for LabelSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(5))?;
        for label in PathologyLabel::ALL {
            map.serialize_entry(label.canonical_name(), &self.get(label))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct LabelSetVisitor;

        impl<'de> Visitor<'de> for LabelSetVisitor {
            type Value = LabelSet;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map with a boolean for each of the five pathology labels")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<LabelSet, A::Error> {
                let mut seen: BTreeMap<String, bool> = BTreeMap::new();
                while let Some((key, value)) = access.next_entry::<String, bool>()? {
                    if seen.insert(key.clone(), value).is_some() {
                        return Err(de::Error::custom(format!("duplicate label key {key:?}")));
                    }
                }
                let mut set = LabelSet::default();
                for label in PathologyLabel::ALL {
                    match seen.remove(label.canonical_name()) {
                        Some(v) => set.set(label, v),
                        None => {
                            return Err(de::Error::custom(format!(
                                "label set missing {:?}",
                                label.canonical_name()
                            )))
                        }
                    }
                }
                if let Some(extra) = seen.keys().next() {
                    return Err(de::Error::custom(format!("unknown label key {extra:?}")));
                }
                Ok(set)
            }
        }

        deserializer.deserialize_map(LabelSetVisitor)
    }
}

/// Ground-truth agreement score: fraction of the five labels on which the
/// two sets agree. Symmetric; equals 1 - (Hamming distance / 5).
pub fn score_vs_gt(pred: &LabelSet, gt: &LabelSet) -> f64 {
    f64::from(pred.agreement_count(gt)) / 5.0
}

struct KeywordRules {
    /// (label, phrase tokens) in canonical label order; longer phrases first
    /// per label so "pleural effusion" wins over "effusion" at the same spot.
    families: Vec<(PathologyLabel, Vec<Vec<String>>)>,
    negation_cues: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawRules {
    version: String,
    negation_cues: Vec<String>,
    families: BTreeMap<String, Vec<String>>,
}

fn keyword_rules() -> &'static KeywordRules {
    static RULES: OnceLock<KeywordRules> = OnceLock::new();
    RULES.get_or_init(|| {
        let raw: RawRules =
            serde_json::from_str(KEYWORD_RULES_JSON).expect("bundled keyword rules parse");
        assert_eq!(raw.version, KEYWORD_RULES_VERSION, "keyword rules version");
        let phrase_tokens = |p: &str| -> Vec<String> {
            p.split_whitespace().map(|t| t.to_lowercase()).collect()
        };
        let mut families = Vec::new();
        for label in PathologyLabel::ALL {
            let phrases = raw
                .families
                .get(label.canonical_name())
                .unwrap_or_else(|| panic!("keyword family missing for {label}"));
            let mut tokenized: Vec<Vec<String>> = phrases.iter().map(|p| phrase_tokens(p)).collect();
            tokenized.sort_by_key(|p| std::cmp::Reverse(p.len()));
            families.push((label, tokenized));
        }
        KeywordRules {
            families,
            negation_cues: raw.negation_cues.iter().map(|c| phrase_tokens(c)).collect(),
        }
    })
}

/// Deterministic keyword extraction over the report impression.
///
/// A label is present iff some sentence of the impression contains a
/// word-bounded mention of one of the label's keyword phrases with no
/// negation cue earlier in the same sentence. Sentences are split on
/// `.` `!` `?` `;`. Matching is case-insensitive on word tokens, so
/// "parapneumonic" never matches "pneumonic".
pub fn extract_labels(report: &StructuredReport) -> LabelSet {
    let rules = keyword_rules();
    let mut out = LabelSet::default();
    for sentence in split_sentences(&report.impression) {
        let tokens = word_tokens(sentence);
        if tokens.is_empty() {
            continue;
        }
        let cue_starts: Vec<usize> = (0..tokens.len())
            .filter(|&i| {
                rules
                    .negation_cues
                    .iter()
                    .any(|cue| phrase_matches_at(&tokens, i, cue))
            })
            .collect();
        let first_cue = cue_starts.first().copied();
        for (label, phrases) in &rules.families {
            if out.get(*label) {
                continue;
            }
            let positive = (0..tokens.len()).any(|i| {
                phrases.iter().any(|p| phrase_matches_at(&tokens, i, p))
                    && first_cue.is_none_or(|cue| cue >= i)
            });
            if positive {
                out.set(*label, true);
            }
        }
    }
    out
}

fn split_sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', '!', '?', ';']).filter(|s| !s.trim().is_empty())
}

/// Lowercased alphanumeric word tokens of one sentence.
fn word_tokens(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in sentence.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn phrase_matches_at(tokens: &[String], start: usize, phrase: &[String]) -> bool {
    tokens.len() >= start + phrase.len()
        && phrase
            .iter()
            .zip(&tokens[start..])
            .all(|(p, t)| p == t)
}
