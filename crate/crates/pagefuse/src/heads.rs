//! Fine-tuning heads over encoder outputs.
//!
//! Three task heads share the same pattern — a thin linear layer over the
//! relevant slice of the encoder output — and differ in what they read and
//! how predictions are decoded:
//!
//! * **Sequence labeling**: per-text-position BIO tags over a fixed entity
//!   category inventory; decoding reconstructs entity spans over the
//!   original token indices.
//! * **Extractive QA**: start/end logits per text position; decoding picks
//!   the best span inside the context segment, subject to `s ≤ e` and a
//!   length cap, with the earlier start winning ties.
//! * **Document classification**: mean-pooled pre-encoder visual rows,
//!   mean-pooled post-encoder visual rows, and the [CLS] output,
//!   concatenated into one `3d`-wide feature for a linear classifier.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::doc::{Document, EntitySpan, Token};
use crate::model::EncoderOutput;
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::tokenizer::{InputSequence, Segment};

/// Longest answer span (in subtokens) QA decoding will consider.
pub const DEFAULT_MAX_ANSWER_LEN: usize = 30;

/// Tag id reserved for tokens outside every entity.
pub const OUTSIDE: usize = 0;

// ---------------------------------------------------------------------------
// BIO sequence labeling

/// A fixed, ordered entity category inventory and its induced BIO tag ids:
/// tag 0 is `O`, then `B-cat`/`I-cat` pairs in category order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    categories: Vec<String>,
}

impl TagSet {
    pub fn new(categories: Vec<String>) -> TagSet {
        let distinct: BTreeSet<&String> = categories.iter().collect();
        assert_eq!(
            distinct.len(),
            categories.len(),
            "duplicate entity category"
        );
        TagSet { categories }
    }

    /// Collect the distinct categories appearing in a corpus, sorted, so the
    /// tag inventory is a pure function of the data.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a Document>) -> TagSet {
        let cats: BTreeSet<String> = docs
            .into_iter()
            .flat_map(|d| d.labels.entities.iter().map(|e| e.category.clone()))
            .collect();
        TagSet {
            categories: cats.into_iter().collect(),
        }
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// `2C + 1`: one `O` plus a B/I pair per category.
    pub fn tag_count(&self) -> usize {
        2 * self.categories.len() + 1
    }

    pub fn begin(&self, category: usize) -> usize {
        assert!(category < self.categories.len());
        1 + 2 * category
    }

    pub fn inside(&self, category: usize) -> usize {
        assert!(category < self.categories.len());
        2 + 2 * category
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Human-readable tag name: `O`, `B-header`, `I-header`, …
    pub fn name(&self, tag: usize) -> String {
        if tag == OUTSIDE {
            return "O".into();
        }
        let category = &self.categories[(tag - 1) / 2];
        if tag % 2 == 1 {
            format!("B-{category}")
        } else {
            format!("I-{category}")
        }
    }
}

/// Per-position training targets for sequence labeling.
///
/// Specials and pads get `None` (excluded from the loss). A real position
/// looks up its source token: outside every span it is `O`; inside a span,
/// the word-level tag is `B-cat` at the span's first token and `I-cat`
/// after, the word's first subtoken carries that tag, and continuation
/// subtokens always carry `I-cat`.
pub fn bio_targets(
    seq: &InputSequence,
    spans: &[EntitySpan],
    tags: &TagSet,
) -> Vec<Option<usize>> {
    (0..seq.len())
        .map(|i| {
            let (tok, _) = seq.source_map[i]?;
            let span = spans.iter().find(|s| s.start <= tok && tok < s.end);
            let Some(span) = span else {
                return Some(OUTSIDE);
            };
            let category = tags
                .category_index(&span.category)
                .unwrap_or_else(|| panic!("unknown entity category {:?}", span.category));
            let first_subtoken = i == 0
                || match seq.source_map[i - 1] {
                    Some((prev, _)) => prev != tok,
                    None => true,
                };
            if first_subtoken && tok == span.start {
                Some(tags.begin(category))
            } else {
                Some(tags.inside(category))
            }
        })
        .collect()
}

pub fn register_seq_label<T: Scalar, R: Rng>(
    d: usize,
    tag_count: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let std = crate::embed::INIT_STD;
    store.init_normal("head.seq_label.weight", vec![d, tag_count], std, rng);
    store.init_zeros("head.seq_label.bias", vec![tag_count]);
}

/// Per-text-position tag logits, `[L × tag_count]`.
pub fn seq_label_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &EncoderOutput,
) -> Var {
    let text = out.text_part(g);
    let w = g.param(store, "head.seq_label.weight");
    let b = g.param(store, "head.seq_label.bias");
    g.linear(text, w, b)
}

/// Mean cross-entropy over labeled positions; `None` targets are excluded
/// from loss and gradient alike.
pub fn seq_label_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[Option<usize>],
) -> (Var, usize) {
    g.cross_entropy_rows(logits, targets)
}

/// Reconstruct entity spans (over original token indices) from per-position
/// tag ids.
///
/// Word-level tags are read off each word's first subtoken. The sweep is the
/// usual BIO automaton with the standard repair: an `I-x` that does not
/// continue an open `x` span starts a new one.
pub fn decode_bio(tag_ids: &[usize], seq: &InputSequence, tags: &TagSet) -> Vec<EntitySpan> {
    assert_eq!(tag_ids.len(), seq.len(), "one tag per position");
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize, usize)> = None; // (category, start, last)
    let close = |open: &mut Option<(usize, usize, usize)>, spans: &mut Vec<EntitySpan>| {
        if let Some((category, start, last)) = open.take() {
            spans.push(EntitySpan {
                start,
                end: last + 1,
                category: tags.categories[category].clone(),
            });
        }
    };
    let mut prev_tok: Option<usize> = None;
    for i in 0..seq.len() {
        let Some((tok, _)) = seq.source_map[i] else {
            continue;
        };
        if prev_tok == Some(tok) {
            continue; // continuation subtoken: the word is already decided
        }
        prev_tok = Some(tok);
        let tag = tag_ids[i];
        if tag == OUTSIDE {
            close(&mut open, &mut spans);
            continue;
        }
        let category = (tag - 1) / 2;
        let begins = tag % 2 == 1;
        match open {
            Some((cat, _, last)) if !begins && cat == category && tok == last + 1 => {
                open = Some((cat, open.unwrap().1, tok));
            }
            _ => {
                close(&mut open, &mut spans);
                open = Some((category, tok, tok));
            }
        }
    }
    close(&mut open, &mut spans);
    spans
}

/// Word-level tag names aligned to a document's token list, for prediction
/// dumps. Words outside the assembled window stay `O`.
pub fn document_tags(
    tag_ids: &[usize],
    seq: &InputSequence,
    tags: &TagSet,
    token_count: usize,
) -> Vec<String> {
    let mut out = vec!["O".to_string(); token_count];
    let mut prev_tok: Option<usize> = None;
    for i in 0..seq.len() {
        let Some((tok, _)) = seq.source_map[i] else {
            continue;
        };
        if prev_tok == Some(tok) {
            continue;
        }
        prev_tok = Some(tok);
        if tok < token_count {
            out[tok] = tags.name(tag_ids[i]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Extractive QA

pub fn register_qa<T: Scalar, R: Rng>(d: usize, store: &mut ParamStore<T>, rng: &mut R) {
    let std = crate::embed::INIT_STD;
    store.init_normal("head.qa.weight", vec![d, 2], std, rng);
    store.init_zeros("head.qa.bias", vec![2]);
}

/// Start and end logits over text positions, each `[L × 1]`.
pub fn qa_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &EncoderOutput,
) -> (Var, Var) {
    let text = out.text_part(g);
    let w = g.param(store, "head.qa.weight");
    let b = g.param(store, "head.qa.bias");
    let logits = g.linear(text, w, b);
    (g.slice_cols(logits, 0, 1), g.slice_cols(logits, 1, 1))
}

/// Cross-entropy on the gold start position plus cross-entropy on the gold
/// end position, each taken over the position axis.
pub fn qa_loss<T: Scalar>(
    g: &mut Graph<T>,
    start: Var,
    end: Var,
    gold: (usize, usize),
) -> Var {
    assert!(gold.0 <= gold.1, "gold span must satisfy start ≤ end");
    let l = g.shape(start)[0];
    let start_row = g.reshape(start, vec![1, l]);
    let end_row = g.reshape(end, vec![1, l]);
    let (s, _) = g.cross_entropy_rows(start_row, &[Some(gold.0)]);
    let (e, _) = g.cross_entropy_rows(end_row, &[Some(gold.1)]);
    g.add(s, e)
}

/// Pick the answer span maximizing `start[s] + end[e]` subject to `s ≤ e`,
/// both ends in the context segment, and `e − s + 1 ≤ max_len`. Strictly
/// better scores win, so ties resolve to the earliest start (then earliest
/// end). Returns `None` when no position qualifies — the empty-answer
/// sentinel.
pub fn decode_qa<T: Scalar>(
    start: &[T],
    end: &[T],
    seq: &InputSequence,
    max_len: usize,
) -> Option<(usize, usize)> {
    assert_eq!(start.len(), seq.len());
    assert_eq!(end.len(), seq.len());
    assert!(max_len >= 1);
    let eligible: Vec<bool> = (0..seq.len())
        .map(|i| seq.segments[i] == Segment::B && seq.source_map[i].is_some())
        .collect();
    let mut best: Option<(T, usize, usize)> = None;
    for s in 0..seq.len() {
        if !eligible[s] {
            continue;
        }
        for e in s..(s + max_len).min(seq.len()) {
            if !eligible[e] {
                continue;
            }
            let score = start[s] + end[e];
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, s, e));
            }
        }
    }
    best.map(|(_, s, e)| (s, e))
}

/// Render a decoded span as text: the source words covered by the span, each
/// once, joined by single spaces. `None` renders as the empty string.
pub fn qa_answer(seq: &InputSequence, span: Option<(usize, usize)>, tokens: &[Token]) -> String {
    let Some((s, e)) = span else {
        return String::new();
    };
    let mut words = Vec::new();
    let mut prev_tok: Option<usize> = None;
    for i in s..=e {
        let Some((tok, _)) = seq.source_map[i] else {
            continue;
        };
        if prev_tok != Some(tok) {
            words.push(tokens[tok].text.as_str());
            prev_tok = Some(tok);
        }
    }
    words.join(" ")
}

// ---------------------------------------------------------------------------
// Document classification

pub fn register_doc_cls<T: Scalar, R: Rng>(
    d: usize,
    class_count: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let std = crate::embed::INIT_STD;
    store.init_normal("head.doc_cls.weight", vec![3 * d, class_count], std, rng);
    store.init_zeros("head.doc_cls.bias", vec![class_count]);
}

/// Class logits `[1 × classes]` from the concatenation of three `d`-wide
/// features: mean-pooled pre-encoder visual rows, mean-pooled post-encoder
/// visual rows, and the [CLS] output.
pub fn doc_cls_head<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &EncoderOutput,
) -> Var {
    let pre = g.mean_rows(out.pre_visual);
    let post_visual = out.visual_part(g);
    let post = g.mean_rows(post_visual);
    let cls = out.cls(g);
    let feature = g.concat_cols(&[pre, post, cls]);
    let w = g.param(store, "head.doc_cls.weight");
    let b = g.param(store, "head.doc_cls.bias");
    g.linear(feature, w, b)
}

pub fn doc_cls_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, class: usize) -> Var {
    let (loss, _) = g.cross_entropy_rows(logits, &[Some(class)]);
    loss
}

/// Softmax of the class logits as plain numbers, for reports and dumps.
pub fn class_probabilities<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Vec<f64> {
    let p = g.softmax_rows(logits);
    g.value(p).iter().map(|v| v.to_f64().unwrap()).collect()
}

// ---------------------------------------------------------------------------
// Prediction dumps

/// One document's predicted word-level tags.
#[derive(Debug, Serialize)]
pub struct BioRecord {
    pub id: String,
    pub tags: Vec<String>,
}

/// JSON-lines dump: one `{"id", "tags"}` object per document per line.
pub fn bio_dump(records: &[BioRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("serializable record"));
        out.push('\n');
    }
    out
}

/// JSON object mapping question id → predicted answer string.
pub fn qa_dump<'a>(answers: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let map: BTreeMap<&str, &str> = answers.into_iter().collect();
    serde_json::to_string_pretty(&map).expect("serializable map")
}

/// JSON object mapping document id → class probability vector.
pub fn cls_dump<'a>(probs: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let map: BTreeMap<&str, &[f64]> = probs.into_iter().collect();
    serde_json::to_string_pretty(&map).expect("serializable map")
}
