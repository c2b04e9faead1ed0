//! Corpus-level BLEU-4: modified n-gram precision for n = 1..4, geometric
//! mean, brevity penalty, no smoothing by default.

use std::collections::HashMap;

use crate::domain::tokenize;

use super::MetricsError;

const MAX_N: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-order precisions and length totals; exposed so tests can pin the
/// intermediate counts against independent hand counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuDetail {
    pub precisions: [f64; MAX_N],
    pub candidate_len: usize,
    pub reference_len: usize,
    pub brevity_penalty: f64,
    pub score: f64,
}

/// Corpus BLEU-4 with one reference per candidate.
pub fn bleu4(candidates: &[String], references: &[String]) -> Result<f64, MetricsError> {
    Ok(bleu4_detailed(candidates, references, false)?.score)
}

/// BLEU-4 with add-one smoothing of zero-count orders; off by default
/// because zero-precision corpora legitimately score 0.
pub fn bleu4_smoothed(candidates: &[String], references: &[String]) -> Result<f64, MetricsError> {
    Ok(bleu4_detailed(candidates, references, true)?.score)
}

pub fn bleu4_detailed(
    candidates: &[String],
    references: &[String],
    smoothing: bool,
) -> Result<BleuDetail, MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::EmptyInput("candidate corpus"));
    }

    let mut matched = [0u64; MAX_N];
    let mut total = [0u64; MAX_N];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;

    for (candidate, reference) in candidates.iter().zip(references) {
        let cand_tokens = tokenize(candidate);
        let ref_tokens = tokenize(reference);
        candidate_len += cand_tokens.len();
        reference_len += ref_tokens.len();
        for n in 1..=MAX_N {
            let ref_counts = ngram_counts(&ref_tokens, n);
            for (gram, count) in ngram_counts(&cand_tokens, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }

    let mut precisions = [0.0f64; MAX_N];
    for n in 0..MAX_N {
        precisions[n] = if total[n] == 0 {
            0.0
        } else if matched[n] == 0 && smoothing {
            1.0 / (total[n] + 1) as f64
        } else {
            matched[n] as f64 / total[n] as f64
        };
    }

    let brevity_penalty = if candidate_len == 0 {
        0.0
    } else if candidate_len < reference_len {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    } else {
        1.0
    };

    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64;
        brevity_penalty * log_mean.exp()
    };

    Ok(BleuDetail {
        precisions,
        candidate_len,
        reference_len,
        brevity_penalty,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn identity_corpus_scores_one() {
        let corpus = s(&[
            "focal consolidation in the right lower lobe",
            "no pneumothorax or pleural effusion is seen",
        ]);
        let score = bleu4(&corpus, &corpus).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_shared_fourgram_scores_zero() {
        let cand = s(&["alpha beta gamma delta"]);
        let reference = s(&["alpha beta gamma epsilon"]);
        assert_eq!(bleu4(&cand, &reference).unwrap(), 0.0);
    }

    #[test]
    fn cat_on_the_mat_matches_hand_count() {
        // Clipped counts by hand: 1-grams 5/6, 2-grams 3/5, 3-grams 1/4,
        // 4-grams 0/3; any zero order means score 0 without smoothing.
        let detail = bleu4_detailed(
            &s(&["the cat sat on the mat"]),
            &s(&["the cat is on the mat"]),
            false,
        )
        .unwrap();
        assert!((detail.precisions[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((detail.precisions[1] - 3.0 / 5.0).abs() < 1e-12);
        assert!((detail.precisions[2] - 1.0 / 4.0).abs() < 1e-12);
        assert_eq!(detail.precisions[3], 0.0);
        assert_eq!(detail.brevity_penalty, 1.0);
        assert_eq!(detail.score, 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let detail = bleu4_detailed(
            &s(&["the cat sat on the"]),
            &s(&["the cat sat on the mat"]),
            false,
        )
        .unwrap();
        assert!((detail.brevity_penalty - (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-12);
        let expected = detail.brevity_penalty
            * ((5.0f64 / 5.0).ln() / 4.0
                + (4.0f64 / 4.0).ln() / 4.0
                + (3.0f64 / 3.0).ln() / 4.0
                + (2.0f64 / 2.0).ln() / 4.0)
                .exp();
        assert!((detail.score - expected).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = bleu4(&s(&["a"]), &s(&["a", "b"])).unwrap_err();
        assert!(matches!(err, MetricsError::LengthMismatch { .. }));
    }

    #[test]
    fn smoothing_rescues_zero_orders() {
        let cand = s(&["alpha beta gamma delta"]);
        let reference = s(&["alpha beta gamma epsilon"]);
        let smoothed = bleu4_smoothed(&cand, &reference).unwrap();
        assert!(smoothed > 0.0);
    }
}
