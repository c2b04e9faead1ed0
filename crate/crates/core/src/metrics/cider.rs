//! Plain CIDEr: TF-IDF n-gram vectors for n = 1..4, cosine similarity
//! against each reference averaged over references and orders, scaled by 10.
//! Document frequencies come from the reference sets; a corpus of at least
//! two cases is required for the IDF to be meaningful.

use std::collections::{HashMap, HashSet};

use crate::domain::tokenize;

use super::MetricsError;

pub const CIDER_MAX_N: usize = 4;

type Gram = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> HashMap<Gram, f64> {
    let mut counts: HashMap<Gram, f64> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Per-case CIDEr scores; the corpus score is their mean.
pub fn cider_per_case(
    candidates: &[String],
    reference_sets: &[Vec<String>],
    n_max: usize,
) -> Result<Vec<f64>, MetricsError> {
    if candidates.len() != reference_sets.len() {
        return Err(MetricsError::LengthMismatch {
            left: candidates.len(),
            right: reference_sets.len(),
        });
    }
    let corpus_size = reference_sets.len();
    if corpus_size < 2 {
        return Err(MetricsError::CorpusTooSmall { size: corpus_size });
    }

    // Document frequency per order: number of cases whose reference set
    // contains the gram at least once.
    let mut df: Vec<HashMap<Gram, f64>> = vec![HashMap::new(); n_max];
    for refs in reference_sets {
        for n in 1..=n_max {
            let mut seen: HashSet<Gram> = HashSet::new();
            for reference in refs {
                let tokens = tokenize(reference);
                seen.extend(ngrams(&tokens, n).into_keys());
            }
            for gram in seen {
                *df[n - 1].entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, gram: &Gram| -> f64 {
        let d = df[n - 1].get(gram).copied().unwrap_or(0.0).max(1.0);
        (corpus_size as f64 / d).ln()
    };

    let tfidf = |tokens: &[String], n: usize| -> HashMap<Gram, f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(gram, count)| {
                let weight = count * idf(n, &gram);
                (gram, weight)
            })
            .collect()
    };

    let cosine = |a: &HashMap<Gram, f64>, b: &HashMap<Gram, f64>| -> f64 {
        let dot: f64 = a
            .iter()
            .filter_map(|(gram, wa)| b.get(gram).map(|wb| wa * wb))
            .sum();
        let norm_a: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
        let norm_b: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm_a == 0.0 || norm_b == 0.0 {
            0.0
        } else {
            dot / (norm_a * norm_b)
        }
    };

    let mut scores = Vec::with_capacity(corpus_size);
    for (candidate, refs) in candidates.iter().zip(reference_sets) {
        let cand_tokens = tokenize(candidate);
        let mut order_sum = 0.0;
        for n in 1..=n_max {
            let cand_vec = tfidf(&cand_tokens, n);
            let mut ref_sum = 0.0;
            for reference in refs {
                let ref_vec = tfidf(&tokenize(reference), n);
                ref_sum += cosine(&cand_vec, &ref_vec);
            }
            if !refs.is_empty() {
                order_sum += ref_sum / refs.len() as f64;
            }
        }
        scores.push(10.0 * order_sum / n_max as f64);
    }
    Ok(scores)
}

/// Corpus CIDEr: mean per-case score, in [0, 10].
pub fn cider(candidates: &[String], reference_sets: &[Vec<String>]) -> Result<f64, MetricsError> {
    let scores = cider_per_case(candidates, reference_sets, CIDER_MAX_N)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(texts: &[&str]) -> Vec<String> {
        texts.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn identity_with_positive_idf_scores_ten() {
        // Disjoint cases keep every document frequency below corpus size.
        let candidates = refs(&[
            "focal right lower lobe consolidation present",
            "stable small apical pneumothorax unchanged today",
        ]);
        let sets = vec![
            refs(&["focal right lower lobe consolidation present"]),
            refs(&["stable small apical pneumothorax unchanged today"]),
        ];
        let scores = cider_per_case(&candidates, &sets, CIDER_MAX_N).unwrap();
        assert!((scores[0] - 10.0).abs() < 1e-9, "{scores:?}");
        assert!((scores[1] - 10.0).abs() < 1e-9, "{scores:?}");
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let candidates = refs(&["entirely unrelated words here", "stable pneumothorax"]);
        let sets = vec![
            refs(&["focal consolidation in the lobe"]),
            refs(&["stable pneumothorax"]),
        ];
        let scores = cider_per_case(&candidates, &sets, CIDER_MAX_N).unwrap();
        assert_eq!(scores[0], 0.0);
    }

    #[test]
    fn corpus_of_one_is_rejected() {
        let err = cider(&refs(&["a b"]), &[refs(&["a b"])]).unwrap_err();
        assert!(matches!(err, MetricsError::CorpusTooSmall { size: 1 }));
    }

    #[test]
    fn multiple_references_average() {
        let candidates = refs(&["clear lungs without effusion", "dense consolidation noted"]);
        let sets = vec![
            refs(&["clear lungs without effusion", "no effusion lungs clear"]),
            refs(&["dense consolidation noted"]),
        ];
        let scores = cider_per_case(&candidates, &sets, CIDER_MAX_N).unwrap();
        assert!(scores[0] > 0.0 && scores[0] < 10.0 + 1e-9);
        assert!(scores[1] > 0.0);
    }

    #[test]
    fn shared_everywhere_grams_carry_zero_idf() {
        // "no" appears in every reference set, so its idf is ln(1) = 0 and
        // a candidate made only of it scores 0.
        let candidates = refs(&["no", "no acute findings"]);
        let sets = vec![refs(&["no effusion"]), refs(&["no acute findings"])];
        let scores = cider_per_case(&candidates, &sets, CIDER_MAX_N).unwrap();
        assert_eq!(scores[0], 0.0);
    }
}
