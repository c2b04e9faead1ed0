//! METEOR with exact unigram matching only: greedy minimal-chunk alignment,
//! Fmean = 10PR / (R + 9P), fragmentation penalty 0.5 (chunks/matches)^3.
//!
//! Stemming and synonymy stages are deliberately absent, so scores diverge
//! from full METEOR where morphology would have matched.

use crate::domain::tokenize;

use super::MetricsError;

/// Alignment internals, exposed for oracle comparison in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct MeteorDetail {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub score: f64,
}

pub fn meteor(candidate: &str, reference: &str) -> Result<f64, MetricsError> {
    Ok(meteor_detailed(candidate, reference)?.score)
}

pub fn meteor_detailed(candidate: &str, reference: &str) -> Result<MeteorDetail, MetricsError> {
    let cand = tokenize(candidate);
    let reference_tokens = tokenize(reference);
    if cand.is_empty() {
        return Err(MetricsError::EmptyInput("candidate"));
    }
    if reference_tokens.is_empty() {
        return Err(MetricsError::EmptyInput("reference"));
    }

    let alignment = align(&cand, &reference_tokens);
    let matches = alignment.iter().flatten().count();
    if matches == 0 {
        return Ok(MeteorDetail {
            matches: 0,
            chunks: 0,
            precision: 0.0,
            recall: 0.0,
            score: 0.0,
        });
    }
    let chunks = chunk_count(&alignment);
    let precision = matches as f64 / cand.len() as f64;
    let recall = matches as f64 / reference_tokens.len() as f64;
    let fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    Ok(MeteorDetail {
        matches,
        chunks,
        precision,
        recall,
        score: fmean * (1.0 - penalty),
    })
}

/// Greedy minimal-chunk alignment: each candidate token aligns to an unused
/// reference occurrence of the same word. Continuing the current chunk wins;
/// otherwise the start that yields the longest upcoming contiguous run is
/// chosen, earliest reference position breaking ties.
fn align(cand: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<Option<usize>> = vec![None; cand.len()];
    let mut prev: Option<usize> = None;

    let mut i = 0;
    while i < cand.len() {
        // Chunk continuation: previous candidate token aligned to prev, and
        // the next reference slot holds this token.
        if let Some(p) = prev {
            let next = p + 1;
            if next < reference.len() && !used[next] && reference[next] == cand[i] {
                used[next] = true;
                alignment[i] = Some(next);
                prev = Some(next);
                i += 1;
                continue;
            }
        }
        let mut best: Option<(usize, usize)> = None; // (run_len, pos)
        for pos in 0..reference.len() {
            if used[pos] || reference[pos] != cand[i] {
                continue;
            }
            let mut run = 0usize;
            while i + run < cand.len()
                && pos + run < reference.len()
                && !used[pos + run]
                && reference[pos + run] == cand[i + run]
            {
                run += 1;
            }
            if best.is_none_or(|(len, _)| run > len) {
                best = Some((run, pos));
            }
        }
        match best {
            Some((_, pos)) => {
                used[pos] = true;
                alignment[i] = Some(pos);
                prev = Some(pos);
            }
            None => prev = None,
        }
        i += 1;
    }
    alignment
}

/// Number of maximal runs contiguous in both sequences.
fn chunk_count(alignment: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for slot in alignment {
        match (prev, slot) {
            (Some(p), Some(r)) if *r == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *slot;
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_four_tokens() {
        // 4 matches in 1 chunk: score = 1 - 0.5 (1/4)^3 = 0.9921875.
        let detail = meteor_detailed("clear lungs no effusion", "clear lungs no effusion").unwrap();
        assert_eq!(detail.matches, 4);
        assert_eq!(detail.chunks, 1);
        assert!((detail.score - 0.9921875).abs() < 1e-12);
    }

    #[test]
    fn zero_overlap_scores_zero() {
        assert_eq!(meteor("alpha beta", "gamma delta").unwrap(), 0.0);
    }

    #[test]
    fn two_chunks_of_two() {
        // cand "a b c d" vs ref "c d a b": all four match in 2 chunks.
        // Penalty 0.5 (2/4)^3 = 0.0625, Fmean = 1, score = 0.9375.
        let detail = meteor_detailed("a b c d", "c d a b").unwrap();
        assert_eq!(detail.matches, 4);
        assert_eq!(detail.chunks, 2);
        assert!((detail.score - 0.9375).abs() < 1e-12);
    }

    #[test]
    fn repeated_tokens_prefer_longer_runs() {
        // First "a" should align into the "a b" run, giving one chunk.
        let detail = meteor_detailed("a b", "a x a b").unwrap();
        assert_eq!(detail.matches, 2);
        assert_eq!(detail.chunks, 1);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(meteor("", "a").is_err());
        assert!(meteor("a", " . ").is_err());
    }

    // Exhaustive oracle: enumerate every maximum-cardinality alignment and
    // take the minimum chunk count.
    fn oracle_min_chunks(cand: &[String], reference: &[String]) -> (usize, usize) {
        fn recurse(
            cand: &[String],
            reference: &[String],
            i: usize,
            used: &mut Vec<bool>,
            alignment: &mut Vec<Option<usize>>,
            best: &mut Option<usize>,
        ) {
            if i == cand.len() {
                let chunks = super::chunk_count(alignment);
                if best.is_none_or(|b| chunks < b) {
                    *best = Some(chunks);
                }
                return;
            }
            for pos in 0..reference.len() {
                if !used[pos] && reference[pos] == cand[i] {
                    used[pos] = true;
                    alignment[i] = Some(pos);
                    recurse(cand, reference, i + 1, used, alignment, best);
                    alignment[i] = None;
                    used[pos] = false;
                }
            }
            // Skipping is only allowed when no occurrence is available,
            // keeping cardinality maximal for exact matching.
            if !(0..reference.len()).any(|p| !used[p] && reference[p] == cand[i]) {
                recurse(cand, reference, i + 1, used, alignment, best);
            }
        }

        let mut used = vec![false; reference.len()];
        let mut alignment = vec![None; cand.len()];
        let mut best = None;
        recurse(cand, reference, 0, &mut used, &mut alignment, &mut best);
        let mut max_used = vec![false; reference.len()];
        let matches = cand
            .iter()
            .filter(|t| {
                if let Some(pos) = reference
                    .iter()
                    .enumerate()
                    .position(|(p, r)| !max_used[p] && r == *t)
                {
                    max_used[pos] = true;
                    true
                } else {
                    false
                }
            })
            .count();
        (matches, best.unwrap_or(0))
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn sentence() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec(
                proptest::sample::select(vec!["apex", "base", "dense", "faint", "lobe", "zone"]),
                1..7,
            )
            .prop_map(|words| words.into_iter().map(str::to_string).collect())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // Deleting a candidate token never increases the match count or
            // the recall. (The score itself can rise when the deletion heals
            // fragmentation, so that is deliberately not asserted.)
            #[test]
            fn deletions_never_raise_matches_or_recall(cand in sentence(), reference in sentence()) {
                let ref_text = reference.join(" ");
                let base = meteor_detailed(&cand.join(" "), &ref_text).unwrap();
                for i in 0..cand.len() {
                    if cand.len() == 1 {
                        continue;
                    }
                    let mut shorter = cand.clone();
                    shorter.remove(i);
                    let smaller = meteor_detailed(&shorter.join(" "), &ref_text).unwrap();
                    prop_assert!(smaller.matches <= base.matches);
                    prop_assert!(smaller.recall <= base.recall + 1e-12);
                }
            }

            #[test]
            fn junk_tokens_never_raise_the_score(cand in sentence(), reference in sentence()) {
                let ref_text = reference.join(" ");
                let base = meteor(&cand.join(" "), &ref_text).unwrap();
                for position in 0..=cand.len() {
                    let mut padded = cand.clone();
                    padded.insert(position, "zzzjunk".to_string());
                    let padded_score = meteor(&padded.join(" "), &ref_text).unwrap();
                    prop_assert!(padded_score <= base + 1e-12);
                }
            }

            #[test]
            fn score_stays_in_unit_interval(cand in sentence(), reference in sentence()) {
                let score = meteor(&cand.join(" "), &reference.join(" ")).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&score));
            }
        }
    }

    #[test]
    fn greedy_matches_exhaustive_oracle() {
        let samples = [
            ("a b c d", "c d a b"),
            ("a b", "a x a b"),
            ("the cat sat on the mat", "the cat is on the mat"),
            ("no acute findings", "no acute cardiopulmonary findings"),
            ("b a b a", "a b a b"),
            ("x y z", "z y x"),
            ("left pleural effusion noted", "effusion noted left pleural"),
        ];
        for (c, r) in samples {
            let cand = tokenize(c);
            let reference = tokenize(r);
            let detail = meteor_detailed(c, r).unwrap();
            let (matches, min_chunks) = oracle_min_chunks(&cand, &reference);
            assert_eq!(detail.matches, matches, "matches for {c:?} vs {r:?}");
            assert_eq!(detail.chunks, min_chunks, "chunks for {c:?} vs {r:?}");
        }
    }
}
