//! Task metrics: entity-level precision/recall/F1, edit distance, ANLS, and
//! classification accuracy.
//!
//! All of these are pure functions over prediction/gold pairs. Matching is
//! deliberately strict — an entity counts only on an exact
//! (start, end, category) match, with no partial credit — mirroring how the
//! benchmarks these tasks come from are scored.

use serde::Serialize;

use crate::doc::EntitySpan;

/// Entity-level precision, recall, and F1 under exact-boundary matching.
///
/// A prediction is a true positive iff an unmatched gold span with the same
/// `(start, end, category)` exists; duplicates each need their own partner.
/// Empty-denominator cases (no predictions, no gold, no true positives)
/// yield 0 rather than NaN.
pub fn entity_prf(gold: &[EntitySpan], pred: &[EntitySpan]) -> (f64, f64, f64) {
    prf_from_counts(true_positives(gold, pred), pred.len(), gold.len())
}

/// Micro-averaged PRF over per-document (gold, pred) pairs: true positives
/// and span counts are pooled across documents before the ratios are taken,
/// so spans never match across document boundaries.
pub fn entity_prf_micro(pairs: &[(Vec<EntitySpan>, Vec<EntitySpan>)]) -> (f64, f64, f64) {
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (gold, pred) in pairs {
        tp += true_positives(gold, pred);
        np += pred.len();
        ng += gold.len();
    }
    prf_from_counts(tp, np, ng)
}

fn true_positives(gold: &[EntitySpan], pred: &[EntitySpan]) -> usize {
    let mut unmatched: Vec<&EntitySpan> = gold.iter().collect();
    let mut tp = 0usize;
    for p in pred {
        if let Some(at) = unmatched.iter().position(|g| *g == p) {
            unmatched.swap_remove(at);
            tp += 1;
        }
    }
    tp
}

fn prf_from_counts(tp: usize, pred_n: usize, gold_n: usize) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let p = ratio(tp, pred_n);
    let r = ratio(tp, gold_n);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Unit-cost edit distance (insert, delete, substitute) over Unicode scalar
/// values, via the classic two-row dynamic program.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ca != cb);
            cur[j + 1] = substitute.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity of one prediction against the best of
/// several references.
///
/// Comparison is case-insensitive. Per reference, `NL = distance /
/// max(|pred|, |gold|)`; the similarity is `1 − NL` when `NL < 0.5` and 0
/// otherwise (the conventional answer-quality cutoff); the final score is
/// the maximum over references. Two empty strings are an exact match.
pub fn anls(pred: &str, golds: &[String]) -> f64 {
    assert!(!golds.is_empty(), "anls needs at least one reference answer");
    let pred = pred.to_lowercase();
    golds
        .iter()
        .map(|g| {
            let g = g.to_lowercase();
            let longest = pred.chars().count().max(g.chars().count());
            if longest == 0 {
                return 1.0;
            }
            let nl = levenshtein(&pred, &g) as f64 / longest as f64;
            if nl < 0.5 {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Mean [`anls`] over a question set.
pub fn dataset_anls(items: &[(String, Vec<String>)]) -> f64 {
    assert!(!items.is_empty(), "dataset ANLS over zero questions");
    items.iter().map(|(p, gs)| anls(p, gs)).sum::<f64>() / items.len() as f64
}

/// Exact-match fraction. Lengths must agree and be nonzero.
pub fn accuracy<T: PartialEq>(gold: &[T], pred: &[T]) -> f64 {
    assert_eq!(
        gold.len(),
        pred.len(),
        "accuracy needs one prediction per gold label"
    );
    assert!(!gold.is_empty(), "accuracy over zero labels is undefined");
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    hits as f64 / gold.len() as f64
}

// ---------------------------------------------------------------------------
// JSON reports

#[derive(Debug, Serialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfReport {
    pub fn new((precision, recall, f1): (f64, f64, f64)) -> Self {
        PrfReport { precision, recall, f1 }
    }
}

#[derive(Debug, Serialize)]
pub struct AnlsReport {
    pub anls: f64,
}

#[derive(Debug, Serialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
}
