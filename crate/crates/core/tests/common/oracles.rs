//! Independent brute-force metric oracles. These share nothing with the
//! library implementations beyond the public record types: token streams
//! come from a different splitter, n-grams are joined strings in BTreeMaps,
//! the LCS is a recursive memo, and METEOR chunks are minimized by
//! exhaustive enumeration.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use claw_core::domain::PathologyLabel;
use claw_core::metrics::{EvalRecord, MetricReport};

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() < n {
        return counts;
    }
    for start in 0..=(tokens.len() - n) {
        let key = tokens[start..start + n].join("\u{1f}");
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

pub fn oracle_bleu4(candidates: &[String], references: &[String]) -> f64 {
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (candidate, reference) in candidates.iter().zip(references) {
        let c = tokens(candidate);
        let r = tokens(reference);
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4usize {
            let c_counts = ngram_counts(&c, n);
            let r_counts = ngram_counts(&r, n);
            for (gram, count) in c_counts {
                let clip = r_counts.get(&gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }
    let mut product = 1.0f64;
    for n in 0..4 {
        if total[n] == 0 || matched[n] == 0 {
            return 0.0;
        }
        product *= matched[n] as f64 / total[n] as f64;
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    bp * product.powf(0.25)
}

fn lcs_memo(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(v) = memo.get(&(i, j)) {
        return *v;
    }
    let value = if a[i] == b[j] {
        1 + lcs_memo(a, b, i + 1, j + 1, memo)
    } else {
        lcs_memo(a, b, i + 1, j, memo).max(lcs_memo(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), value);
    value
}

pub fn oracle_rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    let lcs = lcs_memo(&c, &r, 0, 0, &mut HashMap::new()) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / c.len() as f64;
    let recall = lcs / r.len() as f64;
    let w2 = 1.2f64 * 1.2;
    (1.0 + w2) * precision * recall / (recall + w2 * precision)
}

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

fn min_chunks_exhaustive(
    cand: &[String],
    reference: &[String],
    i: usize,
    used: &mut Vec<bool>,
    alignment: &mut Vec<Option<usize>>,
    best: &mut Option<usize>,
) {
    if i == cand.len() {
        let chunks = chunk_count(alignment);
        if best.is_none_or(|b| chunks < b) {
            *best = Some(chunks);
        }
        return;
    }
    let mut any = false;
    for pos in 0..reference.len() {
        if !used[pos] && reference[pos] == cand[i] {
            any = true;
            used[pos] = true;
            alignment[i] = Some(pos);
            min_chunks_exhaustive(cand, reference, i + 1, used, alignment, best);
            alignment[i] = None;
            used[pos] = false;
        }
    }
    // Skipping is allowed only when no unused occurrence remains, keeping
    // the alignment cardinality maximal.
    if !any {
        min_chunks_exhaustive(cand, reference, i + 1, used, alignment, best);
    }
}

pub fn oracle_meteor(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    // Maximum exact matches: multiset intersection size.
    let mut r_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for token in &r {
        *r_counts.entry(token).or_insert(0) += 1;
    }
    let mut matches = 0usize;
    for token in &c {
        if let Some(count) = r_counts.get_mut(token.as_str()) {
            if *count > 0 {
                *count -= 1;
                matches += 1;
            }
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let mut best = None;
    min_chunks_exhaustive(
        &c,
        &r,
        0,
        &mut vec![false; r.len()],
        &mut vec![None; c.len()],
        &mut best,
    );
    let chunks = best.expect("at least one alignment") as f64;
    let m = matches as f64;
    let precision = m / c.len() as f64;
    let recall = m / r.len() as f64;
    let fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks / m).powi(3);
    fmean * (1.0 - penalty)
}

pub fn oracle_cider(candidates: &[String], reference_sets: &[Vec<String>]) -> f64 {
    let n_cases = reference_sets.len();
    assert!(n_cases >= 2, "oracle cider needs a corpus");

    let mut df: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); 4];
    for refs in reference_sets {
        for n in 1..=4usize {
            let mut seen: BTreeMap<String, bool> = BTreeMap::new();
            for reference in refs {
                for gram in ngram_counts(&tokens(reference), n).into_keys() {
                    seen.insert(gram, true);
                }
            }
            for gram in seen.into_keys() {
                *df[n - 1].entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }

    let tfidf = |text: &str, n: usize| -> BTreeMap<String, f64> {
        ngram_counts(&tokens(text), n)
            .into_iter()
            .map(|(gram, count)| {
                let d = df[n - 1].get(&gram).copied().unwrap_or(0.0).max(1.0);
                (gram, count as f64 * (n_cases as f64 / d).ln())
            })
            .collect()
    };
    let cosine = |a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>| -> f64 {
        let dot: f64 = a
            .iter()
            .filter_map(|(g, wa)| b.get(g).map(|wb| wa * wb))
            .sum();
        let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let mut total = 0.0;
    for (candidate, refs) in candidates.iter().zip(reference_sets) {
        let mut per_n = 0.0;
        for n in 1..=4usize {
            let cand_vec = tfidf(candidate, n);
            let mut ref_total = 0.0;
            for reference in refs {
                ref_total += cosine(&cand_vec, &tfidf(reference, n));
            }
            per_n += ref_total / refs.len() as f64;
        }
        total += 10.0 * per_n / 4.0;
    }
    total / n_cases as f64
}

/// The full evaluation protocol, recomputed with the oracles: corpus BLEU-4
/// over first references, mean ROUGE-L/METEOR over first references, CIDEr
/// over the full reference sets, per-label accuracy.
pub fn oracle_report(records: &[EvalRecord]) -> MetricReport {
    let candidates: Vec<String> = records.iter().map(|r| r.candidate.clone()).collect();
    let first_refs: Vec<String> = records.iter().map(|r| r.references[0].clone()).collect();
    let sets: Vec<Vec<String>> = records.iter().map(|r| r.references.clone()).collect();

    let n = records.len() as f64;
    let rouge = candidates
        .iter()
        .zip(&first_refs)
        .map(|(c, r)| oracle_rouge_l(c, r))
        .sum::<f64>()
        / n;
    let meteor = candidates
        .iter()
        .zip(&first_refs)
        .map(|(c, r)| oracle_meteor(c, r))
        .sum::<f64>()
        / n;

    let mut per_label_acc = BTreeMap::new();
    for label in PathologyLabel::ALL {
        let correct = records
            .iter()
            .filter(|r| r.pred_labels.get(label) == r.gt_labels.get(label))
            .count();
        per_label_acc.insert(label, correct as f64 / n);
    }
    let avg_acc = per_label_acc.values().sum::<f64>() / 5.0;

    MetricReport {
        bleu4: oracle_bleu4(&candidates, &first_refs),
        rouge_l: rouge,
        meteor,
        cider: oracle_cider(&candidates, &sets),
        per_label_acc,
        avg_acc,
    }
}
