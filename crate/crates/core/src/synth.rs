//! Deterministic synthetic corpus generator: cases plus a completion script
//! that drives the full pipeline offline. Conflict structure is fixed by
//! case position so the mined dataset has hand-computable counts; the seed
//! only varies ground truths and surface text.

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::backend::ScriptEntry;
use crate::domain::{AgentStage, CaseRecord, LabelSet, PathologyLabel};

/// Positive impression sentence whose extraction fires exactly one label.
pub fn positive_phrase(label: PathologyLabel) -> &'static str {
    match label {
        PathologyLabel::Consolidation => "Focal consolidation is present.",
        PathologyLabel::PleuralEffusion => "Moderate pleural effusion is present.",
        PathologyLabel::Pneumonia => "Findings consistent with pneumonia.",
        PathologyLabel::Pneumothorax => "Small apical pneumothorax is present.",
        PathologyLabel::Edema => "Interstitial edema is present.",
    }
}

/// Negated impression sentence for one label.
pub fn negative_phrase(label: PathologyLabel) -> &'static str {
    match label {
        PathologyLabel::Consolidation => "No consolidation.",
        PathologyLabel::PleuralEffusion => "No pleural effusion.",
        PathologyLabel::Pneumonia => "No pneumonia.",
        PathologyLabel::Pneumothorax => "No pneumothorax.",
        PathologyLabel::Edema => "No edema.",
    }
}

/// Impression text that extracts back to `labels` exactly.
pub fn impression_for(labels: &LabelSet) -> String {
    PathologyLabel::ALL
        .iter()
        .map(|l| {
            if labels.get(*l) {
                positive_phrase(*l)
            } else {
                negative_phrase(*l)
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn region_for(label: PathologyLabel) -> &'static str {
    match label {
        PathologyLabel::Consolidation => "right lower lobe",
        PathologyLabel::PleuralEffusion => "left costophrenic angle",
        PathologyLabel::Pneumonia => "right middle lobe",
        PathologyLabel::Pneumothorax => "left apex",
        PathologyLabel::Edema => "perihilar zones",
    }
}

const FINDINGS_OPENERS: [&str; 4] = [
    "Frontal and lateral views were obtained.",
    "Portable upright radiograph reviewed.",
    "Two projections of the chest were acquired.",
    "Comparison made with the prior study.",
];

const FINDINGS_FILLERS: [&str; 4] = [
    "Cardiomediastinal silhouette is within normal limits.",
    "Bony structures are intact.",
    "The trachea is midline.",
    "Visualized soft tissues are unremarkable.",
];

const CONTEXTS: [&str; 4] = [
    "Productive cough and fever for three days.",
    "Acute dyspnea after a fall.",
    "Routine follow-up of known cardiac disease.",
    "Pleuritic chest pain, rule out acute process.",
];

/// What the conflict pattern guarantees for a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExpectedCounts {
    pub conflicts: usize,
    pub ties_discarded: usize,
    pub pairs: usize,
    pub coop_wins: usize,
    pub comp_wins: usize,
}

/// A generated corpus: the dataset, the backend script, and the counts the
/// conflict pattern guarantees.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub cases: Vec<CaseRecord>,
    pub script: Vec<ScriptEntry>,
    pub expected: ExpectedCounts,
}

fn findings_body(rng: &mut StdRng, labels: &LabelSet) -> String {
    let mut sentences = vec![(*FINDINGS_OPENERS.choose(rng).expect("nonempty")).to_string()];
    for label in labels.positives() {
        sentences.push(format!(
            "There is an abnormality over the {} compatible with {}.",
            region_for(label),
            label.canonical_name().to_lowercase()
        ));
    }
    sentences.push((*FINDINGS_FILLERS.choose(rng).expect("nonempty")).to_string());
    sentences.join(" ")
}

fn report_completion(rng: &mut StdRng, labels: &LabelSet) -> String {
    format!(
        "Findings: {}\nImpression: {}",
        findings_body(rng, labels),
        impression_for(labels)
    )
}

fn random_labels(rng: &mut StdRng) -> LabelSet {
    let mut set = LabelSet::all_false();
    for label in PathologyLabel::ALL {
        set.set(label, rng.random_bool(0.5));
    }
    set
}

fn flip_labels(rng: &mut StdRng, base: &LabelSet, flips: usize) -> LabelSet {
    let mut pool: Vec<PathologyLabel> = PathologyLabel::ALL.to_vec();
    let mut out = *base;
    for _ in 0..flips.min(pool.len()) {
        let idx = rng.random_range(0..pool.len());
        let label = pool.swap_remove(idx);
        out.set(label, !out.get(label));
    }
    out
}

fn entry(case_id: &str, stage: AgentStage, instance: Option<String>, completion: String) -> ScriptEntry {
    ScriptEntry {
        case_id: case_id.to_string(),
        stage,
        instance,
        attempt: 0,
        completion,
    }
}

/// Generate `case_count` cases with the fixed conflict pattern per position
/// `i mod 4`: cooperative win, competitive win, tie (discarded), agreement.
pub fn generate(seed: u64, case_count: usize) -> SynthCorpus {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(case_count);
    let mut script = Vec::new();
    let mut expected = ExpectedCounts {
        conflicts: 0,
        ties_discarded: 0,
        pairs: 0,
        coop_wins: 0,
        comp_wins: 0,
    };

    for i in 0..case_count {
        let case_id = format!("synth-{i:03}");
        let gt = random_labels(&mut rng);
        let (coop, comp) = match i % 4 {
            0 => {
                expected.conflicts += 1;
                expected.pairs += 1;
                expected.coop_wins += 1;
                let flips = 1 + rng.random_range(0..2usize);
                (gt, flip_labels(&mut rng, &gt, flips))
            }
            1 => {
                expected.conflicts += 1;
                expected.pairs += 1;
                expected.comp_wins += 1;
                let flips = 1 + rng.random_range(0..2usize);
                (flip_labels(&mut rng, &gt, flips), gt)
            }
            2 => {
                expected.conflicts += 1;
                expected.ties_discarded += 1;
                // One flip each on distinct labels: equal scores, disjoint
                // disagreement.
                let a = PathologyLabel::ALL[rng.random_range(0..5)];
                let b = loop {
                    let candidate = PathologyLabel::ALL[rng.random_range(0..5)];
                    if candidate != a {
                        break candidate;
                    }
                };
                (
                    gt.with(a, !gt.get(a)),
                    gt.with(b, !gt.get(b)),
                )
            }
            _ => {
                // Agreement; half of them agree on a wrong answer.
                let both = if rng.random_bool(0.5) {
                    gt
                } else {
                    flip_labels(&mut rng, &gt, 1)
                };
                (both, both)
            }
        };

        let context = (*CONTEXTS.choose(&mut rng).expect("nonempty")).to_string();
        let reference_report = format!(
            "{} {}",
            findings_body(&mut rng, &gt),
            impression_for(&gt)
        );
        cases.push(CaseRecord {
            case_id: case_id.clone(),
            image_ref: format!("img://synthetic/{case_id}.png"),
            clinical_context: context,
            ground_truth: gt,
            reference_report: Some(reference_report),
        });

        // Scan leads: one per positive cooperative label.
        let positives = coop.positives();
        let leads: Vec<serde_json::Value> = positives
            .iter()
            .enumerate()
            .map(|(idx, label)| {
                serde_json::json!({
                    "lead_id": idx,
                    "anatomical_region": region_for(*label),
                    "description": format!(
                        "suspected {} over the {}",
                        label.canonical_name().to_lowercase(),
                        region_for(*label)
                    ),
                    "salience": (50 + rng.random_range(0..50)) as f64 / 100.0,
                })
            })
            .collect();
        script.push(entry(
            &case_id,
            AgentStage::Scan,
            None,
            serde_json::to_string(&leads).expect("leads serialize"),
        ));

        for (idx, label) in positives.iter().enumerate() {
            let finding = serde_json::json!({
                "lead_id": idx,
                "morphology": "patchy opacity",
                "margins": "ill-defined",
                "density": "moderate",
                "candidate_pathologies": [label.canonical_name()],
            });
            script.push(entry(
                &case_id,
                AgentStage::Lesion,
                Some(format!("lesion-{idx}")),
                finding.to_string(),
            ));
        }

        let ranked: Vec<serde_json::Value> = positives
            .iter()
            .map(|l| {
                serde_json::json!({
                    "label": l.canonical_name(),
                    "rationale": format!("supported by the {} lead", region_for(*l)),
                })
            })
            .collect();
        let excluded: Vec<serde_json::Value> = PathologyLabel::ALL
            .iter()
            .filter(|l| !coop.get(**l))
            .take(2)
            .map(|l| {
                serde_json::json!({
                    "label": l.canonical_name(),
                    "rationale": "no supporting radiographic evidence",
                })
            })
            .collect();
        script.push(entry(
            &case_id,
            AgentStage::Differential,
            None,
            serde_json::json!({"ranked": ranked, "excluded": excluded}).to_string(),
        ));

        script.push(entry(
            &case_id,
            AgentStage::Report,
            None,
            report_completion(&mut rng, &coop),
        ));
        script.push(entry(
            &case_id,
            AgentStage::Omni,
            None,
            report_completion(&mut rng, &comp),
        ));
    }

    SynthCorpus {
        cases,
        script,
        expected,
    }
}

/// Write the script as the backend's JSONL schema.
pub fn write_script_jsonl(
    path: impl AsRef<std::path::Path>,
    script: &[ScriptEntry],
) -> std::io::Result<()> {
    let mut out = String::new();
    for entry in script {
        out.push_str(&serde_json::to_string(entry).expect("script entry serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}
