//! Engine for a cooperative-competitive multi-agent chest X-ray diagnostic
//! workflow over pluggable text-model backends.
//!
//! A cooperative four-stage pipeline (scan, lesion analysis, differential
//! reasoning, structured report) and a competitive one-shot "senior attending"
//! flow run per case. Label disagreements between the two pathways raise
//! conflict signals, which are adjudicated against ground truth to mine
//! preference pairs. The pairs feed a DPO-form preference loss over a
//! desk-scale policy, with an integral BLEU-4 / ROUGE-L / METEOR / CIDEr /
//! per-pathology-accuracy evaluation suite.

pub mod backend;
pub mod cli;
pub mod compo;
pub mod domain;
pub mod manifest;
pub mod metrics;
pub mod orchestrator;
pub mod preference;
pub mod synth;
