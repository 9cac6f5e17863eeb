//! Training loops: seeded pre-training over a document corpus, and task
//! fine-tuning from a checkpoint.
//!
//! Reproducibility is the organizing principle. Every random decision flows
//! from `TrainConfig::seed`: parameter initialization uses it directly, and
//! each pre-training sample gets its own generator seeded by a mix of
//! `(seed, step, index-in-batch)` — so a batch comes out the same whether it
//! was prepared on one thread or several, and two runs with the same seed
//! produce byte-identical checkpoints.
//!
//! Gradients are accumulated per sample and averaged, which emulates any
//! batch size at the memory cost of one sample's graph.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Manifest;
use crate::doc::{Document, EntitySpan, Token};
use crate::error::{Error, Result};
use crate::heads::{self, TagSet};
use crate::metrics;
use crate::model::{self, ModelConfig};
use crate::optim::{lr_schedule, AdamW};
use crate::params::ParamStore;
use crate::pretrain::{self, PretrainSample, TiaLabel};
use crate::tensor::Scalar;
use crate::tokenizer::{assemble, tokenize_tokens, InputSequence, Segment, SubToken, Vocab};

pub const DEFAULT_BASE_LR: f64 = 2e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Optimizer steps for pre-training.
    pub steps: usize,
    /// Passes over the training split for fine-tuning.
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Model size preset: `micro`, `tiny`, or `base`.
    pub preset: String,
    /// Ablation switch for the attention position biases.
    pub spatial_bias: bool,
    /// Objective toggles; masked visual-language modeling is always on.
    pub tia: bool,
    pub tim: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 8,
            steps: 100,
            epochs: 5,
            base_lr: DEFAULT_BASE_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            preset: "tiny".into(),
            spatial_bias: true,
            tia: true,
            tim: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::validation("base learning rate must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation("weight decay must be non-negative"));
        }
        Ok(())
    }

    /// The model architecture this run trains, for a given vocabulary.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = model::preset(&self.preset, vocab_size)?;
        m.spatial_bias = self.spatial_bias;
        m.validate()?;
        Ok(m)
    }
}

/// One row of the loss curve. Disabled objectives report 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub mvlm: f64,
    pub tia: f64,
    pub tim: f64,
}

/// Loss curves as CSV, one line per step.
pub fn curve_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,total,mvlm,tia,tim\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.step, p.total, p.mvlm, p.tia, p.tim
        ));
    }
    out
}

/// splitmix64-style mixing of (run seed, step, index) into one sample seed.
/// Each sample's generator is independent of batch order and thread count.
fn sample_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Step tag reserved for evaluation sampling so it never collides with a
/// training step.
const EVAL_STEP_TAG: u64 = u64::MAX;

fn build_one_sample(
    corpus: &[Document],
    vocab: &Vocab,
    l: usize,
    seed: u64,
    step: u64,
    index: u64,
) -> PretrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, step, index));
    let doc = rng.random_range(0..corpus.len());
    pretrain::build_sample(corpus, doc, vocab, l, &mut rng)
}

/// Assemble one batch, optionally fanning sample construction out over
/// worker threads. Output is identical for any thread count.
fn build_batch(
    corpus: &[Document],
    vocab: &Vocab,
    l: usize,
    seed: u64,
    step: u64,
    batch: usize,
    threads: usize,
) -> Vec<PretrainSample> {
    if threads <= 1 || batch <= 1 {
        return (0..batch)
            .map(|i| build_one_sample(corpus, vocab, l, seed, step, i as u64))
            .collect();
    }
    let workers = threads.min(batch);
    let mut slots: Vec<Option<PretrainSample>> = (0..batch).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (w, chunk) in slots.chunks_mut(batch.div_ceil(workers)).enumerate() {
            let first = w * batch.div_ceil(workers);
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let i = (first + off) as u64;
                    *slot = Some(build_one_sample(corpus, vocab, l, seed, step, i));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

fn scale_grads<T: Scalar>(store: &mut ParamStore<T>, s: f64) {
    let s = T::from_f64(s);
    for (_, t) in store.iter_mut() {
        if let Some(g) = t.grad_mut() {
            for v in g {
                *v *= s;
            }
        }
    }
}

/// Abort on the first non-finite mean; names the component that went bad.
fn check_finite(step: usize, components: &[(&str, f64)]) -> Result<()> {
    for &(component, v) in components {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                component: component.to_string(),
            });
        }
    }
    Ok(())
}

pub struct PretrainRun<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub curve: Vec<LossPoint>,
}

/// Pre-train from scratch on `corpus`. Registers the model plus the heads
/// for the enabled objectives, then runs `cfg.steps` optimizer steps of
/// batch-averaged gradients under the warmup/decay schedule.
pub fn pretrain_loop<T: Scalar>(
    corpus: &[Document],
    vocab: &Vocab,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<PretrainRun<T>> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::validation(
            "pre-training needs at least 2 documents (image matching swaps pages between them)",
        ));
    }
    let mcfg = cfg.model_config(vocab.len())?;

    let mut store: ParamStore<T> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mcfg.register(&mut store, &mut rng);
    pretrain::register_mvlm_head(mcfg.d, mcfg.vocab_size, &mut store, &mut rng);
    if cfg.tia {
        pretrain::register_tia_head(mcfg.d, &mut store, &mut rng);
    }
    if cfg.tim {
        pretrain::register_tim_head(mcfg.d, &mut store, &mut rng);
    }

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let samples = build_batch(
            corpus,
            vocab,
            mcfg.text_len,
            cfg.seed,
            step as u64,
            cfg.batch_size,
            threads,
        );
        store.zero_grads();
        let (mut s_total, mut s_mvlm, mut s_tia, mut s_tim) = (0.0, 0.0, 0.0, 0.0);
        for sample in &samples {
            let mut g: Graph<T> = Graph::new();
            let out = model::forward(&mut g, &store, &mcfg, &sample.image, &sample.input);
            let (mvlm, _) = pretrain::mvlm_loss(&mut g, &store, &out, sample);
            let mut total = mvlm;
            if cfg.tia {
                let (tia, _) = pretrain::tia_loss(&mut g, &store, &out, sample);
                total = g.add(total, tia);
                s_tia += g.scalar_value(tia).to_f64();
            }
            if cfg.tim {
                let tim = pretrain::tim_loss(&mut g, &store, &out, sample);
                total = g.add(total, tim);
                s_tim += g.scalar_value(tim).to_f64();
            }
            s_mvlm += g.scalar_value(mvlm).to_f64();
            s_total += g.scalar_value(total).to_f64();
            g.backward(total);
            g.export_grads(&mut store);
        }
        let n = samples.len() as f64;
        let point = LossPoint {
            step,
            total: s_total / n,
            mvlm: s_mvlm / n,
            tia: s_tia / n,
            tim: s_tim / n,
        };
        check_finite(
            step,
            &[
                ("mvlm", point.mvlm),
                ("tia", point.tia),
                ("tim", point.tim),
                ("total", point.total),
            ],
        )?;
        scale_grads(&mut store, 1.0 / n);
        let lr = lr_schedule(step as u64, cfg.steps as u64, cfg.base_lr);
        opt.step(&mut store, T::from_f64(lr));
        curve.push(point);
    }
    Ok(PretrainRun {
        config: mcfg,
        store,
        curve,
    })
}

/// Post-hoc quality of a pre-trained model, measured on freshly drawn
/// evaluation samples: mean masked-token loss (position-weighted), and the
/// plain accuracies of the alignment and matching classifiers.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PretrainEval {
    pub mvlm_loss: f64,
    pub tia_accuracy: f64,
    pub tim_accuracy: f64,
    pub samples: usize,
}

pub fn eval_pretrain<T: Scalar>(
    store: &ParamStore<T>,
    mcfg: &ModelConfig,
    corpus: &[Document],
    vocab: &Vocab,
    seed: u64,
    n: usize,
) -> PretrainEval {
    assert!(n > 0, "evaluation needs at least one sample");
    let has_tia = store.contains("pretrain.tia.weight");
    let has_tim = store.contains("pretrain.tim.weight");
    let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
    let (mut tia_hit, mut tia_n) = (0usize, 0usize);
    let (mut tim_hit, mut tim_n) = (0usize, 0usize);
    for i in 0..n {
        let sample = build_one_sample(corpus, vocab, mcfg.text_len, seed, EVAL_STEP_TAG, i as u64);
        let mut g: Graph<T> = Graph::new();
        let out = model::forward(&mut g, store, mcfg, &sample.image, &sample.input);
        let (mvlm, count) = pretrain::mvlm_loss(&mut g, store, &out, &sample);
        loss_sum += g.scalar_value(mvlm).to_f64() * count as f64;
        loss_n += count;
        if has_tia {
            let text = out.text_part(&mut g);
            let w = g.param(store, "pretrain.tia.weight");
            let b = g.param(store, "pretrain.tia.bias");
            let logits = g.linear(text, w, b);
            let values = g.value(logits).to_vec();
            for (p, label) in sample.tia_labels.iter().enumerate() {
                let want = match label {
                    TiaLabel::Covered => true,
                    TiaLabel::NotCovered => false,
                    TiaLabel::Ignore => continue,
                };
                tia_n += 1;
                if (values[p].to_f64() > 0.0) == want {
                    tia_hit += 1;
                }
            }
        }
        if has_tim {
            let cls = out.cls(&mut g);
            let w = g.param(store, "pretrain.tim.weight");
            let b = g.param(store, "pretrain.tim.bias");
            let logit = g.linear(cls, w, b);
            tim_n += 1;
            if (g.value(logit)[0].to_f64() > 0.0) == sample.tim_matched {
                tim_hit += 1;
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    PretrainEval {
        mvlm_loss: if loss_n == 0 { 0.0 } else { loss_sum / loss_n as f64 },
        tia_accuracy: ratio(tia_hit, tia_n),
        tim_accuracy: ratio(tim_hit, tim_n),
        samples: n,
    }
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Labeling,
    Qa,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "labeling" => Ok(Task::Labeling),
            "qa" => Ok(Task::Qa),
            "classification" => Ok(Task::Classification),
            other => Err(Error::validation(format!(
                "unknown task {other:?}; expected labeling, qa, or classification"
            ))),
        }
    }
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Labeling => "entity_f1",
            Task::Qa => "anls",
            Task::Classification => "accuracy",
        }
    }
}

/// Deterministic corpus split: every fifth document (index % 5 == 4) is held
/// out for evaluation; the rest train.
pub fn split_corpus(docs: &[Document]) -> (Vec<&Document>, Vec<&Document>) {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if i % 5 == 4 {
            heldout.push(d);
        } else {
            train.push(d);
        }
    }
    (train, heldout)
}

/// One sequence-labeling training example (one per document).
pub struct LabelingExample<'a> {
    pub doc: &'a Document,
    pub seq: InputSequence,
    pub targets: Vec<Option<usize>>,
}

pub fn labeling_examples<'a>(
    docs: &[&'a Document],
    vocab: &Vocab,
    l: usize,
    tags: &TagSet,
) -> Vec<LabelingExample<'a>> {
    docs.iter()
        .map(|doc| {
            let subs = tokenize_tokens(&doc.tokens, vocab);
            let seq = assemble(&[(subs, Segment::A)], l, vocab);
            let targets = heads::bio_targets(&seq, &doc.labels.entities, tags);
            LabelingExample { doc, seq, targets }
        })
        .collect()
}

/// One extractive-QA training example (one per question).
pub struct QaExample<'a> {
    pub doc: &'a Document,
    pub question_id: String,
    pub seq: InputSequence,
    /// Gold span as positions in the assembled sequence (inclusive ends).
    pub gold_positions: (usize, usize),
    pub gold_text: String,
}

pub fn qa_examples<'a>(docs: &[&'a Document], vocab: &Vocab, l: usize) -> Vec<QaExample<'a>> {
    let mut out = Vec::new();
    for (di, doc) in docs.iter().enumerate() {
        for (qi, pair) in doc.labels.qa.iter().enumerate() {
            let question_tokens: Vec<Token> = pair
                .question
                .split_whitespace()
                .map(|w| Token {
                    text: w.to_string(),
                    bbox: crate::doc::special_token_box(),
                    line: 0,
                })
                .collect();
            // question subtokens must not map back into the page
            let q_subs: Vec<SubToken> = tokenize_tokens(&question_tokens, vocab)
                .into_iter()
                .map(|mut st| {
                    st.source = None;
                    st
                })
                .collect();
            let c_subs = tokenize_tokens(&doc.tokens, vocab);
            let seq = assemble(&[(q_subs, Segment::A), (c_subs, Segment::B)], l, vocab);

            // positions of the answer's first and last subtokens, if both
            // survived truncation
            let mut first = None;
            let mut last = None;
            for (p, src) in seq.source_map.iter().enumerate() {
                if seq.segments[p] != Segment::B {
                    continue;
                }
                if let Some((tok, _)) = src {
                    if *tok == pair.answer_start && first.is_none() {
                        first = Some(p);
                    }
                    if *tok + 1 == pair.answer_end {
                        last = Some(p);
                    }
                }
            }
            let (Some(s), Some(e)) = (first, last) else {
                log::warn!(
                    "document {}: answer span of question {} fell outside the {l}-token window; skipping",
                    doc.id,
                    qi
                );
                continue;
            };
            let gold_text = doc.tokens[pair.answer_start..pair.answer_end]
                .iter()
                .map(|t| t.text.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            out.push(QaExample {
                doc,
                question_id: format!("{di}-{qi}"),
                seq,
                gold_positions: (s, e),
                gold_text,
            });
        }
    }
    out
}

/// Sorted distinct class labels of a corpus; errors if any document lacks
/// one.
pub fn class_inventory(docs: &[&Document]) -> Result<Vec<String>> {
    let mut classes = BTreeSet::new();
    for doc in docs {
        match &doc.labels.class {
            Some(c) => {
                classes.insert(c.clone());
            }
            None => {
                return Err(Error::validation(format!(
                    "document {} carries no class label; the classification task needs one per document",
                    doc.id
                )))
            }
        }
    }
    Ok(classes.into_iter().collect())
}

/// One classification example (one per document).
pub struct ClassExample<'a> {
    pub doc: &'a Document,
    pub seq: InputSequence,
    pub class: usize,
}

pub fn class_examples<'a>(
    docs: &[&'a Document],
    vocab: &Vocab,
    l: usize,
    classes: &[String],
) -> Result<Vec<ClassExample<'a>>> {
    docs.iter()
        .map(|doc| {
            let subs = tokenize_tokens(&doc.tokens, vocab);
            let seq = assemble(&[(subs, Segment::A)], l, vocab);
            let label = doc.labels.class.as_deref().unwrap_or_default();
            let class = classes
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| {
                    Error::validation(format!(
                        "document {}: class {label:?} is not in the training inventory {classes:?}",
                        doc.id
                    ))
                })?;
            Ok(ClassExample { doc, seq, class })
        })
        .collect()
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Entity precision/recall/F1 of the labeling head over `docs`,
/// micro-averaged.
pub fn eval_labeling<T: Scalar>(
    store: &ParamStore<T>,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    tags: &TagSet,
    docs: &[&Document],
) -> (f64, f64, f64) {
    let pairs: Vec<(Vec<EntitySpan>, Vec<EntitySpan>)> =
        labeling_examples(docs, vocab, mcfg.text_len, tags)
            .iter()
            .map(|ex| {
                let mut g: Graph<T> = Graph::new();
                let out = model::forward(&mut g, store, mcfg, &ex.doc.page, &ex.seq);
                let logits = heads::seq_label_head(&mut g, store, &out);
                let values = g.value(logits);
                let width = tags.tag_count();
                let ids: Vec<usize> = (0..ex.seq.len())
                    .map(|p| argmax_row(&values[p * width..(p + 1) * width]))
                    .collect();
                let pred = heads::decode_bio(&ids, &ex.seq, tags);
                (ex.doc.labels.entities.clone(), pred)
            })
            .collect();
    metrics::entity_prf_micro(&pairs)
}

/// Mean ANLS of decoded answers over every question in `docs`.
pub fn eval_qa<T: Scalar>(
    store: &ParamStore<T>,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    docs: &[&Document],
) -> f64 {
    let examples = qa_examples(docs, vocab, mcfg.text_len);
    if examples.is_empty() {
        return 0.0;
    }
    let items: Vec<(String, Vec<String>)> = examples
        .iter()
        .map(|ex| {
            let mut g: Graph<T> = Graph::new();
            let out = model::forward(&mut g, store, mcfg, &ex.doc.page, &ex.seq);
            let (start, end) = heads::qa_head(&mut g, store, &out);
            let sv = g.value(start).to_vec();
            let ev = g.value(end).to_vec();
            let span = heads::decode_qa(&sv, &ev, &ex.seq, heads::DEFAULT_MAX_ANSWER_LEN);
            let answer = heads::qa_answer(&ex.seq, span, &ex.doc.tokens);
            (answer, vec![ex.gold_text.clone()])
        })
        .collect();
    metrics::dataset_anls(&items)
}

/// Classification accuracy over `docs` with a fixed class inventory.
pub fn eval_classification<T: Scalar>(
    store: &ParamStore<T>,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    classes: &[String],
    docs: &[&Document],
) -> Result<f64> {
    let examples = class_examples(docs, vocab, mcfg.text_len, classes)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.class).collect();
    let pred: Vec<usize> = examples
        .iter()
        .map(|ex| {
            let mut g: Graph<T> = Graph::new();
            let out = model::forward(&mut g, store, mcfg, &ex.doc.page, &ex.seq);
            let logits = heads::doc_cls_head(&mut g, store, &out);
            argmax_row(g.value(logits))
        })
        .collect();
    Ok(metrics::accuracy(&gold, &pred))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub train: f64,
    /// Absent when the corpus is too small to hold documents out.
    pub heldout: Option<f64>,
}

pub struct FinetuneRun<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub task: Task,
    pub history: Vec<EpochMetric>,
    /// Entity categories (labeling) or class inventory (classification);
    /// empty for QA.
    pub categories: Vec<String>,
}

/// Fine-tune a pre-trained (or freshly initialized) checkpoint on one task.
///
/// The task head is always freshly initialized; any `head.*` or `pretrain.*`
/// parameters riding along in the checkpoint are dropped first, so the
/// optimizer updates exactly the encoder stack plus the new head — "the
/// whole model", end to end. The held-out split (and the training split) are
/// scored after every epoch.
pub fn finetune_loop<T: Scalar>(
    task: Task,
    corpus: &[Document],
    vocab: &Vocab,
    manifest: &Manifest,
    init: ParamStore<T>,
    cfg: &TrainConfig,
) -> Result<FinetuneRun<T>> {
    cfg.validate()?;
    let mcfg = cfg.model_config(vocab.len())?;
    if mcfg != manifest.config {
        return Err(Error::validation(format!(
            "checkpoint architecture {:?} does not match the requested {:?} preset",
            manifest.config, cfg.preset
        )));
    }
    if corpus.is_empty() {
        return Err(Error::validation("fine-tuning corpus is empty"));
    }

    let mut store = init;
    for name in store
        .names()
        .filter(|n| n.starts_with("head.") || n.starts_with("pretrain."))
        .map(String::from)
        .collect::<Vec<_>>()
    {
        store.remove(&name);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (train_docs, heldout_docs) = split_corpus(corpus);
    if train_docs.is_empty() {
        return Err(Error::validation("training split is empty"));
    }

    // Task-specific setup: fresh head + example inventory checks.
    let mut categories: Vec<String> = Vec::new();
    let tags;
    let classes;
    match task {
        Task::Labeling => {
            let t = TagSet::from_documents(corpus.iter());
            if t.categories().is_empty() {
                return Err(Error::validation(
                    "no entity annotations anywhere in the corpus; nothing to label",
                ));
            }
            heads::register_seq_label(mcfg.d, t.tag_count(), &mut store, &mut rng);
            categories = t.categories().to_vec();
            tags = Some(t);
            classes = None;
        }
        Task::Qa => {
            if corpus.iter().all(|d| d.labels.qa.is_empty()) {
                return Err(Error::validation(
                    "no question/answer annotations anywhere in the corpus",
                ));
            }
            heads::register_qa(mcfg.d, &mut store, &mut rng);
            tags = None;
            classes = None;
        }
        Task::Classification => {
            let inventory = class_inventory(&corpus.iter().collect::<Vec<_>>())?;
            if inventory.len() < 2 {
                return Err(Error::validation(format!(
                    "classification needs at least two classes; corpus has {inventory:?}"
                )));
            }
            heads::register_doc_cls(mcfg.d, inventory.len(), &mut store, &mut rng);
            categories = inventory.clone();
            tags = None;
            classes = Some(inventory);
        }
    }

    // Example count drives the schedule; rebuilt cheaply each epoch so the
    // borrow stays local.
    let example_count = match task {
        Task::Labeling => train_docs.len(),
        Task::Qa => qa_examples(&train_docs, vocab, mcfg.text_len).len(),
        Task::Classification => train_docs.len(),
    };
    if example_count == 0 {
        return Err(Error::validation(
            "every training example was skipped; the window is too small for the annotations",
        ));
    }
    let steps_per_epoch = example_count.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;

    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..example_count).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut erng);

        for chunk in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let mut loss_sum = 0.0f64;
            for &i in chunk {
                let mut g: Graph<T> = Graph::new();
                let loss: Var = match task {
                    Task::Labeling => {
                        let ex = &labeling_examples(&train_docs, vocab, mcfg.text_len, tags.as_ref().unwrap())[i];
                        let out = model::forward(&mut g, &store, &mcfg, &ex.doc.page, &ex.seq);
                        let logits = heads::seq_label_head(&mut g, &store, &out);
                        let (loss, _) = heads::seq_label_loss(&mut g, logits, &ex.targets);
                        loss
                    }
                    Task::Qa => {
                        let ex = &qa_examples(&train_docs, vocab, mcfg.text_len)[i];
                        let out = model::forward(&mut g, &store, &mcfg, &ex.doc.page, &ex.seq);
                        let (start, end) = heads::qa_head(&mut g, &store, &out);
                        heads::qa_loss(&mut g, start, end, ex.gold_positions)
                    }
                    Task::Classification => {
                        let ex = &class_examples(&train_docs, vocab, mcfg.text_len, classes.as_ref().unwrap())?[i];
                        let out = model::forward(&mut g, &store, &mcfg, &ex.doc.page, &ex.seq);
                        let logits = heads::doc_cls_head(&mut g, &store, &out);
                        heads::doc_cls_loss(&mut g, logits, ex.class)
                    }
                };
                loss_sum += g.scalar_value(loss).to_f64();
                g.backward(loss);
                g.export_grads(&mut store);
            }
            let mean = loss_sum / chunk.len() as f64;
            check_finite(global_step as usize, &[(task.metric_name(), mean)])?;
            scale_grads(&mut store, 1.0 / chunk.len() as f64);
            let lr = lr_schedule(global_step, total_steps, cfg.base_lr);
            opt.step(&mut store, T::from_f64(lr));
            global_step += 1;
        }

        let train_metric = match task {
            Task::Labeling => {
                eval_labeling(&store, &mcfg, vocab, tags.as_ref().unwrap(), &train_docs).2
            }
            Task::Qa => eval_qa(&store, &mcfg, vocab, &train_docs),
            Task::Classification => eval_classification(
                &store,
                &mcfg,
                vocab,
                classes.as_ref().unwrap(),
                &train_docs,
            )?,
        };
        let heldout_metric = if heldout_docs.is_empty() {
            None
        } else {
            Some(match task {
                Task::Labeling => {
                    eval_labeling(&store, &mcfg, vocab, tags.as_ref().unwrap(), &heldout_docs).2
                }
                Task::Qa => eval_qa(&store, &mcfg, vocab, &heldout_docs),
                Task::Classification => eval_classification(
                    &store,
                    &mcfg,
                    vocab,
                    classes.as_ref().unwrap(),
                    &heldout_docs,
                )?,
            })
        };
        history.push(EpochMetric {
            epoch,
            train: train_metric,
            heldout: heldout_metric,
        });
    }

    Ok(FinetuneRun {
        config: mcfg,
        store,
        task,
        history,
        categories,
    })
}
