//! ROUGE-L: longest-common-subsequence F-score with the weighted-harmonic
//! form F = (1 + w^2) P R / (R + w^2 P), w = 1.2.

use crate::domain::tokenize;

use super::MetricsError;

const WEIGHT: f64 = 1.2;

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    for token_a in a {
        for (j, token_b) in b.iter().enumerate() {
            current[j + 1] = if token_a == token_b {
                prev[j] + 1
            } else {
                current[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64, MetricsError> {
    let cand = tokenize(candidate);
    let reference_tokens = tokenize(reference);
    if cand.is_empty() {
        return Err(MetricsError::EmptyInput("candidate"));
    }
    if reference_tokens.is_empty() {
        return Err(MetricsError::EmptyInput("reference"));
    }
    let lcs = lcs_len(&cand, &reference_tokens) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / reference_tokens.len() as f64;
    let w2 = WEIGHT * WEIGHT;
    Ok((1.0 + w2) * precision * recall / (recall + w2 * precision))
}
