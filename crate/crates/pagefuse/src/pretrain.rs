//! Pre-training sample construction and losses.
//!
//! Three self-supervised objectives run simultaneously over one sample:
//!
//! * **Masked visual-language modeling** — 15% of real text positions are
//!   selected; of those, 80% become [MASK], 10% a random regular token, 10%
//!   stay put. The model predicts the original id at every selected
//!   position. Boxes are never touched, and the raster is zeroed at every
//!   selected token's box so the backbone cannot leak the answer.
//! * **Text-image alignment** — 15% of OCR lines are covered (their token
//!   regions zeroed on the raster); the model labels each text position
//!   Covered/NotCovered. Positions already masked by MVLM, and specials,
//!   are excluded from the loss.
//! * **Text-image matching** — one uniform draw per sample: below 0.15 the
//!   page image is swapped for another document's, below 0.20 it is dropped
//!   (all-zero raster); both count as unmatched, keep the same
//!   masking/covering treatment, and force every surviving alignment label
//!   to Covered (a mismatched image covers nothing truthfully).
//!
//! Construction is a pure function of `(document, seed)`; the statistical
//! rates are properties of the stream, not of any single sample.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::mask_regions;
use crate::doc::{BBox, Document, Page};
use crate::error::{Error, Result};
use crate::model::EncoderOutput;
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::tokenizer::{assemble, tokenize_tokens, InputSequence, Segment, Vocab};

pub const MVLM_RATE: f64 = 0.15;
pub const MVLM_MASK_SHARE: f64 = 0.80;
pub const MVLM_RANDOM_SHARE: f64 = 0.10;
pub const TIA_LINE_RATE: f64 = 0.15;
pub const TIM_REPLACE_RATE: f64 = 0.15;
pub const TIM_DROP_RATE: f64 = 0.05;

/// Per-text-position alignment label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiaLabel {
    Covered,
    NotCovered,
    /// Excluded from the loss: special tokens, pads, and MVLM-selected
    /// positions.
    Ignore,
}

/// Everything one pre-training step consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainSample {
    /// Assembled sequence with masking already applied to the token ids.
    pub input: InputSequence,
    /// Original id at MVLM-selected positions, `None` elsewhere.
    pub mvlm_labels: Vec<Option<u32>>,
    pub tia_labels: Vec<TiaLabel>,
    pub tim_matched: bool,
    /// Raster after region masking/covering (and, for negatives, after the
    /// replace/drop).
    pub image: Page,
    pub covered_lines: Vec<usize>,
    pub masked_positions: Vec<usize>,
}

/// Tokenize a document and pick a contiguous subtoken window that fits the
/// `L − 2` budget ([CLS] and [SEP] take the rest). Short documents pass
/// through whole; long ones get a uniformly random window. Everything is
/// segment A.
pub fn sample_window(doc: &Document, vocab: &Vocab, l: usize, rng: &mut impl Rng) -> InputSequence {
    assert!(
        !doc.tokens.is_empty(),
        "cannot build a pre-training window from an empty document"
    );
    let subs = tokenize_tokens(&doc.tokens, vocab);
    let budget = l.saturating_sub(2);
    let window = if subs.len() <= budget {
        subs
    } else {
        let start = rng.random_range(0..=subs.len() - budget);
        subs[start..start + budget].to_vec()
    };
    assemble(&[(window, Segment::A)], l, vocab)
}

/// Select and rewrite token ids for masked visual-language modeling.
///
/// Returns the rewritten sequence, per-position labels (original id at
/// selected positions), and the selected positions in order. Boxes, segments,
/// and the source map are untouched.
pub fn apply_mvlm(
    seq: &InputSequence,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> (InputSequence, Vec<Option<u32>>, Vec<usize>) {
    let mut out = seq.clone();
    let mut labels = vec![None; seq.len()];
    let mut positions = Vec::new();
    let structural = [vocab.cls(), vocab.sep(), vocab.pad()];
    let regular_span = vocab.len() as u32 - vocab.first_regular_id();
    for i in 0..seq.len() {
        let id = seq.token_ids[i];
        if structural.contains(&id) {
            continue;
        }
        if !rng.random_bool(MVLM_RATE) {
            continue;
        }
        labels[i] = Some(id);
        positions.push(i);
        let u: f64 = rng.random();
        if u < MVLM_MASK_SHARE {
            out.token_ids[i] = vocab.mask();
        } else if u < MVLM_MASK_SHARE + MVLM_RANDOM_SHARE && regular_span > 0 {
            out.token_ids[i] = vocab.first_regular_id() + rng.random_range(0..regular_span);
        } // else: keeps its id but still carries a label
    }
    (out, labels, positions)
}

/// Select lines to cover, zero their token regions on the raster, and label
/// every text position. Covering is line-atomic; the exclusion rule then
/// turns MVLM-selected and special positions into `Ignore`.
pub fn apply_tia(
    seq: &InputSequence,
    page: &Page,
    masked_positions: &[usize],
    rng: &mut impl Rng,
) -> (Vec<TiaLabel>, Vec<u8>, Vec<usize>) {
    let lines: BTreeSet<usize> = seq
        .source_map
        .iter()
        .flatten()
        .map(|&(_, line)| line)
        .collect();
    let covered: BTreeSet<usize> = lines
        .into_iter()
        .filter(|_| rng.random_bool(TIA_LINE_RATE))
        .collect();

    let boxes: Vec<BBox> = seq
        .source_map
        .iter()
        .zip(&seq.boxes)
        .filter_map(|(src, b)| match src {
            Some((_, line)) if covered.contains(line) => Some(*b),
            _ => None,
        })
        .collect();
    let raster = mask_regions(&page.raster, page.pixel_width, page.pixel_height, &boxes);

    let masked: BTreeSet<usize> = masked_positions.iter().copied().collect();
    let labels: Vec<TiaLabel> = (0..seq.len())
        .map(|i| match seq.source_map[i] {
            _ if masked.contains(&i) => TiaLabel::Ignore,
            None => TiaLabel::Ignore,
            Some((_, line)) => {
                if covered.contains(&line) {
                    TiaLabel::Covered
                } else {
                    TiaLabel::NotCovered
                }
            }
        })
        .collect();

    (labels, raster, covered.into_iter().collect())
}

/// Boxes that must be blanked on whatever raster the sample ends up with:
/// covered lines' tokens plus every MVLM-selected token.
fn obscured_boxes(sample: &PretrainSample) -> Vec<BBox> {
    let covered: BTreeSet<usize> = sample.covered_lines.iter().copied().collect();
    let input = &sample.input;
    let mut boxes: Vec<BBox> = input
        .source_map
        .iter()
        .zip(&input.boxes)
        .filter_map(|(src, b)| match src {
            Some((_, line)) if covered.contains(line) => Some(*b),
            _ => None,
        })
        .collect();
    boxes.extend(sample.masked_positions.iter().map(|&p| input.boxes[p]));
    boxes
}

/// Decide the text-image matching polarity with a single uniform draw:
/// `u < 0.15` replaces the image with another document's page, `0.15 ≤ u <
/// 0.20` drops it entirely. Negatives undergo the same region
/// masking/covering and have every surviving alignment label forced to
/// Covered.
pub fn build_tim(
    mut sample: PretrainSample,
    corpus: &[Document],
    own_index: usize,
    rng: &mut impl Rng,
) -> PretrainSample {
    let u: f64 = rng.random();
    if u < TIM_REPLACE_RATE {
        if corpus.len() < 2 {
            log::warn!(
                "image replacement needs a second document; corpus has one — dropping the image instead"
            );
            sample.image.raster.fill(0);
        } else {
            let mut pick = rng.random_range(0..corpus.len() - 1);
            if pick >= own_index {
                pick += 1;
            }
            let other = &corpus[pick].page;
            let raster = mask_regions(
                &other.raster,
                other.pixel_width,
                other.pixel_height,
                &obscured_boxes(&sample),
            );
            sample.image = Page {
                pixel_width: other.pixel_width,
                pixel_height: other.pixel_height,
                raster,
            };
        }
        sample.tim_matched = false;
    } else if u < TIM_REPLACE_RATE + TIM_DROP_RATE {
        // dropped: an all-zero raster; region masking of zeros is a no-op
        sample.image.raster.fill(0);
        sample.tim_matched = false;
    }
    if !sample.tim_matched {
        for label in &mut sample.tia_labels {
            if *label == TiaLabel::NotCovered {
                *label = TiaLabel::Covered;
            }
        }
    }
    sample
}

/// Full sample pipeline for one document: window → MVLM → TIA → leakage
/// zeroing → TIM.
pub fn build_sample(
    corpus: &[Document],
    index: usize,
    vocab: &Vocab,
    l: usize,
    rng: &mut impl Rng,
) -> PretrainSample {
    let doc = &corpus[index];
    let seq = sample_window(doc, vocab, l, rng);
    let (input, mvlm_labels, masked_positions) = apply_mvlm(&seq, vocab, rng);
    let (tia_labels, raster, covered_lines) =
        apply_tia(&input, &doc.page, &masked_positions, rng);
    // Visual leakage prevention: the backbone must not see the pixels of any
    // token the text side is asked to reconstruct.
    let leak: Vec<BBox> = masked_positions.iter().map(|&p| input.boxes[p]).collect();
    let raster = mask_regions(&raster, doc.page.pixel_width, doc.page.pixel_height, &leak);
    let sample = PretrainSample {
        input,
        mvlm_labels,
        tia_labels,
        tim_matched: true,
        image: Page {
            pixel_width: doc.page.pixel_width,
            pixel_height: doc.page.pixel_height,
            raster,
        },
        covered_lines,
        masked_positions,
    };
    build_tim(sample, corpus, index, rng)
}

/// Vocabulary classifier for masked visual-language modeling.
pub fn register_mvlm_head<T: Scalar, R: Rng>(
    d: usize,
    vocab_size: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let std = crate::embed::INIT_STD;
    store.init_normal("pretrain.mvlm.weight", vec![d, vocab_size], std, rng);
    store.init_zeros("pretrain.mvlm.bias", vec![vocab_size]);
}

/// One-logit covered/not-covered classifier per text position.
pub fn register_tia_head<T: Scalar, R: Rng>(d: usize, store: &mut ParamStore<T>, rng: &mut R) {
    let std = crate::embed::INIT_STD;
    store.init_normal("pretrain.tia.weight", vec![d, 1], std, rng);
    store.init_zeros("pretrain.tia.bias", vec![1]);
}

/// One-logit matched/unmatched classifier on the [CLS] output.
pub fn register_tim_head<T: Scalar, R: Rng>(d: usize, store: &mut ParamStore<T>, rng: &mut R) {
    let std = crate::embed::INIT_STD;
    store.init_normal("pretrain.tim.weight", vec![d, 1], std, rng);
    store.init_zeros("pretrain.tim.bias", vec![1]);
}

/// Register all three pre-training heads.
pub fn register_heads<T: Scalar, R: Rng>(
    d: usize,
    vocab_size: usize,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    register_mvlm_head(d, vocab_size, store, rng);
    register_tia_head(d, store, rng);
    register_tim_head(d, store, rng);
}

/// The three losses plus their unweighted sum. A component with no labeled
/// positions contributes a detached zero; its count field says so.
pub struct PretrainLoss {
    pub total: Var,
    pub mvlm: Var,
    pub tia: Var,
    pub tim: Var,
    /// Number of positions the MVLM mean runs over; 0 means the component
    /// was skipped.
    pub mvlm_count: usize,
    pub tia_count: usize,
}

/// Mean cross-entropy of the vocabulary classifier at MVLM-selected
/// positions.
pub fn mvlm_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &EncoderOutput,
    sample: &PretrainSample,
) -> (Var, usize) {
    let text = out.text_part(g);
    let w = g.param(store, "pretrain.mvlm.weight");
    let b = g.param(store, "pretrain.mvlm.bias");
    let logits = g.linear(text, w, b);
    let targets: Vec<Option<usize>> = sample
        .mvlm_labels
        .iter()
        .map(|o| o.map(|id| id as usize))
        .collect();
    g.cross_entropy_rows(logits, &targets)
}

/// Mean binary cross-entropy of the covered/not-covered classifier over
/// non-Ignore positions.
pub fn tia_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &EncoderOutput,
    sample: &PretrainSample,
) -> (Var, usize) {
    let text = out.text_part(g);
    let w = g.param(store, "pretrain.tia.weight");
    let b = g.param(store, "pretrain.tia.bias");
    let logits = g.linear(text, w, b);
    let targets: Vec<Option<bool>> = sample
        .tia_labels
        .iter()
        .map(|l| match l {
            TiaLabel::Covered => Some(true),
            TiaLabel::NotCovered => Some(false),
            TiaLabel::Ignore => None,
        })
        .collect();
    g.bce_with_logits(logits, &targets)
}

/// Binary cross-entropy of the matched/unmatched classifier on [CLS].
pub fn tim_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &EncoderOutput,
    sample: &PretrainSample,
) -> Var {
    let cls = out.cls(g);
    let w = g.param(store, "pretrain.tim.weight");
    let b = g.param(store, "pretrain.tim.bias");
    let logits = g.linear(cls, w, b);
    let (tim, _) = g.bce_with_logits(logits, &[Some(sample.tim_matched)]);
    tim
}

pub fn pretrain_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    out: &EncoderOutput,
    sample: &PretrainSample,
) -> PretrainLoss {
    let (mvlm, mvlm_count) = mvlm_loss(g, store, out, sample);
    let (tia, tia_count) = tia_loss(g, store, out, sample);
    let tim = tim_loss(g, store, out, sample);
    let partial = g.add(mvlm, tia);
    let total = g.add(partial, tim);
    PretrainLoss {
        total,
        mvlm,
        tia,
        tim,
        mvlm_count,
        tia_count,
    }
}

// ---------------------------------------------------------------------------
// Offline sample files: fixed-width little-endian records plus a JSON
// manifest. The record format mirrors PretrainSample field-for-field so the
// round-trip is the identity.

const SAMPLE_MAGIC: &[u8; 4] = b"PFS1";
const NO_LABEL: u32 = u32::MAX;
pub const SAMPLES_FILE: &str = "samples.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    count: usize,
    seed: u64,
    text_len: usize,
}

fn segment_code(s: Segment) -> u8 {
    match s {
        Segment::A => 0,
        Segment::B => 1,
        Segment::C => 2,
        Segment::Pad => 3,
    }
}

fn segment_from(code: u8) -> Option<Segment> {
    Some(match code {
        0 => Segment::A,
        1 => Segment::B,
        2 => Segment::C,
        3 => Segment::Pad,
        _ => return None,
    })
}

fn tia_code(l: TiaLabel) -> u8 {
    match l {
        TiaLabel::NotCovered => 0,
        TiaLabel::Covered => 1,
        TiaLabel::Ignore => 2,
    }
}

fn tia_from(code: u8) -> Option<TiaLabel> {
    Some(match code {
        0 => TiaLabel::NotCovered,
        1 => TiaLabel::Covered,
        2 => TiaLabel::Ignore,
        _ => return None,
    })
}

fn encode_sample(s: &PretrainSample, buf: &mut Vec<u8>) {
    let l = s.input.len() as u32;
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&l.to_le_bytes());
    buf.extend_from_slice(&s.image.pixel_width.to_le_bytes());
    buf.extend_from_slice(&s.image.pixel_height.to_le_bytes());
    buf.extend_from_slice(&s.image.raster);
    for &id in &s.input.token_ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for &seg in &s.input.segments {
        buf.push(segment_code(seg));
    }
    for b in &s.input.boxes {
        for edge in [b.x0, b.x1, b.y0, b.y1] {
            buf.extend_from_slice(&edge.to_le_bytes());
        }
    }
    for src in &s.input.source_map {
        match src {
            Some((tok, line)) => {
                buf.push(1);
                buf.extend_from_slice(&(*tok as u32).to_le_bytes());
                buf.extend_from_slice(&(*line as u32).to_le_bytes());
            }
            None => {
                buf.push(0);
                buf.extend_from_slice(&0u32.to_le_bytes());
                buf.extend_from_slice(&0u32.to_le_bytes());
            }
        }
    }
    for label in &s.mvlm_labels {
        buf.extend_from_slice(&label.unwrap_or(NO_LABEL).to_le_bytes());
    }
    for &label in &s.tia_labels {
        buf.push(tia_code(label));
    }
    buf.push(u8::from(s.tim_matched));
    buf.extend_from_slice(&(s.covered_lines.len() as u32).to_le_bytes());
    for &line in &s.covered_lines {
        buf.extend_from_slice(&(line as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(s.masked_positions.len() as u32).to_le_bytes());
    for &p in &s.masked_positions {
        buf.extend_from_slice(&(p as u32).to_le_bytes());
    }
}

/// Byte cursor with descriptive decode errors.
struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::parse(
                self.path,
                field,
                format!("record truncated at byte {}", self.at),
            ));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

fn decode_sample(c: &mut Cursor) -> Result<PretrainSample> {
    let magic = c.take(4, "magic")?;
    if magic != SAMPLE_MAGIC {
        return Err(Error::parse(c.path, "magic", "not a sample record"));
    }
    let l = c.u32("len")? as usize;
    let pixel_width = c.u32("pixel_width")?;
    let pixel_height = c.u32("pixel_height")?;
    let raster = c
        .take((pixel_width * pixel_height) as usize, "raster")?
        .to_vec();
    let mut token_ids = Vec::with_capacity(l);
    for _ in 0..l {
        token_ids.push(c.u32("token_ids")?);
    }
    let mut segments = Vec::with_capacity(l);
    for _ in 0..l {
        let code = c.u8("segments")?;
        segments.push(
            segment_from(code)
                .ok_or_else(|| Error::parse(c.path, "segments", format!("bad code {code}")))?,
        );
    }
    let mut boxes = Vec::with_capacity(l);
    for _ in 0..l {
        let x0 = c.u16("boxes")?;
        let x1 = c.u16("boxes")?;
        let y0 = c.u16("boxes")?;
        let y1 = c.u16("boxes")?;
        boxes.push(BBox::new(x0, x1, y0, y1));
    }
    let mut source_map = Vec::with_capacity(l);
    for _ in 0..l {
        let present = c.u8("source_map")?;
        let tok = c.u32("source_map")? as usize;
        let line = c.u32("source_map")? as usize;
        source_map.push((present == 1).then_some((tok, line)));
    }
    let mut mvlm_labels = Vec::with_capacity(l);
    for _ in 0..l {
        let v = c.u32("mvlm_labels")?;
        mvlm_labels.push((v != NO_LABEL).then_some(v));
    }
    let mut tia_labels = Vec::with_capacity(l);
    for _ in 0..l {
        let code = c.u8("tia_labels")?;
        tia_labels.push(
            tia_from(code)
                .ok_or_else(|| Error::parse(c.path, "tia_labels", format!("bad code {code}")))?,
        );
    }
    let tim_matched = c.u8("tim_matched")? == 1;
    let covered_n = c.u32("covered_lines")? as usize;
    let mut covered_lines = Vec::with_capacity(covered_n);
    for _ in 0..covered_n {
        covered_lines.push(c.u32("covered_lines")? as usize);
    }
    let masked_n = c.u32("masked_positions")? as usize;
    let mut masked_positions = Vec::with_capacity(masked_n);
    for _ in 0..masked_n {
        masked_positions.push(c.u32("masked_positions")? as usize);
    }
    Ok(PretrainSample {
        input: InputSequence {
            token_ids,
            segments,
            pos1d: (0..l).collect(),
            boxes,
            source_map,
        },
        mvlm_labels,
        tia_labels,
        tim_matched,
        image: Page {
            pixel_width,
            pixel_height,
            raster,
        },
        covered_lines,
        masked_positions,
    })
}

/// Write `samples.bin` + `manifest.json` into `dir`.
pub fn save_samples(dir: &Path, samples: &[PretrainSample], seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    for s in samples {
        encode_sample(s, &mut buf);
    }
    let bin = dir.join(SAMPLES_FILE);
    std::fs::write(&bin, &buf).map_err(|e| Error::io(&bin, e))?;
    let manifest = Manifest {
        count: samples.len(),
        seed,
        text_len: samples.first().map_or(0, |s| s.input.len()),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::parse(&path, "manifest", e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Read back what [`save_samples`] wrote; returns the samples and the seed
/// recorded in the manifest.
pub fn load_samples(dir: &Path) -> Result<(Vec<PretrainSample>, u64)> {
    let mpath = dir.join(MANIFEST_FILE);
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::parse(&mpath, "manifest", e.to_string()))?;
    let bpath = dir.join(SAMPLES_FILE);
    let buf = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut cursor = Cursor {
        buf: &buf,
        at: 0,
        path: &bpath,
    };
    let mut samples = Vec::with_capacity(manifest.count);
    for _ in 0..manifest.count {
        samples.push(decode_sample(&mut cursor)?);
    }
    if cursor.at != buf.len() {
        return Err(Error::parse(
            &bpath,
            "trailer",
            format!("{} unread bytes after the last record", buf.len() - cursor.at),
        ));
    }
    Ok((samples, manifest.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::Token;
    use crate::synth::{generate, Family, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        // plenty of regular ids so random replacement rarely redraws the
        // original token
        Vocab::build_from_words((0..200).map(|i| format!("w{i:03}")))
    }

    fn doc_with(words: &[(&str, usize)]) -> Document {
        let tokens: Vec<Token> = words
            .iter()
            .enumerate()
            .map(|(i, (text, line))| Token {
                text: text.to_string(),
                bbox: BBox::new(
                    (i * 90 % 900) as u16,
                    (i * 90 % 900 + 80) as u16,
                    (line * 100) as u16,
                    (line * 100 + 60) as u16,
                ),
                line: *line,
            })
            .collect();
        let mut page = Page::blank(100, 100);
        for b in page.raster.iter_mut() {
            *b = 200;
        }
        Document {
            id: "fixture".into(),
            page,
            tokens,
            labels: Default::default(),
        }
    }

    #[test]
    fn short_document_windows_to_the_whole_sequence() {
        let v = vocab();
        let doc = doc_with(&[("w001", 0), ("w002", 0), ("w003", 1)]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = sample_window(&doc, &v, 16, &mut r1);
        let b = sample_window(&doc, &v, 16, &mut r2);
        // fits the budget → no randomness involved
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        assert_eq!(a.token_ids[0], v.cls());
        assert_eq!(a.token_ids[4], v.sep());
        assert_eq!(a.segments[1], Segment::A);
    }

    #[test]
    fn long_document_window_is_seeded_and_fits() {
        let v = vocab();
        let words: Vec<(String, usize)> = (0..50).map(|i| (format!("w{i:03}"), i / 5)).collect();
        let refs: Vec<(&str, usize)> = words.iter().map(|(w, l)| (w.as_str(), *l)).collect();
        let doc = doc_with(&refs);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_window(&doc, &v, 10, &mut rng)
        };
        assert_eq!(run(7), run(7), "same seed, same window");
        let a = run(7);
        assert_eq!(a.len(), 10);
        let real = a
            .token_ids
            .iter()
            .filter(|&&id| !v.is_special(id))
            .count();
        assert_eq!(real, 8, "L−2 document subtokens");
        // different seeds eventually pick different windows
        assert!((0..20).any(|s| run(s) != a));
    }

    #[test]
    #[should_panic(expected = "empty document")]
    fn empty_document_panics() {
        let v = vocab();
        let doc = Document {
            id: "empty".into(),
            page: Page::blank(10, 10),
            tokens: vec![],
            labels: Default::default(),
        };
        sample_window(&doc, &v, 8, &mut ChaCha8Rng::seed_from_u64(0));
    }

    #[test]
    fn mvlm_without_eligible_positions_is_a_no_op() {
        let v = vocab();
        let seq = InputSequence {
            token_ids: vec![v.cls(), v.sep(), v.pad(), v.pad()],
            segments: vec![Segment::A, Segment::A, Segment::Pad, Segment::Pad],
            pos1d: vec![0, 1, 2, 3],
            boxes: vec![crate::doc::special_token_box(); 4],
            source_map: vec![None; 4],
        };
        let (out, labels, positions) = apply_mvlm(&seq, &v, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(out, seq);
        assert!(labels.iter().all(Option::is_none));
        assert!(positions.is_empty());
    }

    #[test]
    fn mvlm_rates_hold_over_100k_tokens() {
        let v = vocab();
        let n = 100_000;
        let word_id = v.id("w007").unwrap();
        let seq = InputSequence {
            token_ids: vec![word_id; n],
            segments: vec![Segment::A; n],
            pos1d: (0..n).collect(),
            boxes: vec![BBox::new(1, 2, 3, 4); n],
            source_map: vec![Some((0, 0)); n],
        };
        let (out, labels, positions) = apply_mvlm(&seq, &v, &mut ChaCha8Rng::seed_from_u64(42));

        let selected = positions.len() as f64 / n as f64;
        assert!((selected - MVLM_RATE).abs() < 0.01, "selection rate {selected}");

        let mut masked = 0usize;
        let mut random = 0usize;
        let mut kept = 0usize;
        for &p in &positions {
            assert_eq!(labels[p], Some(word_id), "label is the original id");
            let id = out.token_ids[p];
            if id == v.mask() {
                masked += 1;
            } else if id == word_id {
                kept += 1; // includes the rare random redraw of the original
            } else {
                random += 1;
            }
        }
        let total = positions.len() as f64;
        assert!((masked as f64 / total - 0.80).abs() < 0.02);
        assert!((random as f64 / total - 0.10).abs() < 0.02);
        assert!((kept as f64 / total - 0.10).abs() < 0.02);

        // boxes, segments, and sources never move
        assert_eq!(out.boxes, seq.boxes);
        assert_eq!(out.segments, seq.segments);
        assert_eq!(out.source_map, seq.source_map);
        // unselected positions carry no label
        for i in 0..n {
            if !positions.contains(&i) {
                assert_eq!(labels[i], None);
            }
        }
    }

    /// Handmade sequence over three lines with distinct, known boxes.
    fn lined_seq(v: &Vocab) -> InputSequence {
        let ids: Vec<u32> = (0..6).map(|i| v.id(&format!("w00{i}")).unwrap()).collect();
        let lines = [0usize, 0, 1, 1, 2, 2];
        let mut token_ids = vec![v.cls()];
        let mut boxes = vec![crate::doc::special_token_box()];
        let mut source_map = vec![None];
        for (i, &id) in ids.iter().enumerate() {
            token_ids.push(id);
            boxes.push(BBox::new(
                (i * 150) as u16,
                (i * 150 + 100) as u16,
                (lines[i] * 300) as u16,
                (lines[i] * 300 + 200) as u16,
            ));
            source_map.push(Some((i, lines[i])));
        }
        token_ids.push(v.sep());
        boxes.push(crate::doc::special_token_box());
        source_map.push(None);
        let l = token_ids.len();
        InputSequence {
            token_ids,
            segments: vec![Segment::A; l],
            pos1d: (0..l).collect(),
            boxes,
            source_map,
        }
    }

    #[test]
    fn tia_covers_lines_atomically_and_masks_exactly_their_pixels() {
        let v = vocab();
        let seq = lined_seq(&v);
        let mut page = Page::blank(64, 64);
        for b in page.raster.iter_mut() {
            *b = 255;
        }
        // position 2 (= first token of line 1) is MVLM-masked
        let masked = vec![2usize];
        // hunt a seed that covers at least one line
        let mut chosen = None;
        for seed in 0..50 {
            let (labels, raster, covered) =
                apply_tia(&seq, &page, &masked, &mut ChaCha8Rng::seed_from_u64(seed));
            if !covered.is_empty() {
                chosen = Some((labels, raster, covered));
                break;
            }
        }
        let (labels, raster, covered) = chosen.expect("some seed covers a line");

        // line-atomic labels (Ignore excepted)
        for i in 0..seq.len() {
            let Some((_, line)) = seq.source_map[i] else {
                assert_eq!(labels[i], TiaLabel::Ignore);
                continue;
            };
            if masked.contains(&i) {
                assert_eq!(labels[i], TiaLabel::Ignore, "masked position is excluded");
                continue;
            }
            let expect = if covered.contains(&line) {
                TiaLabel::Covered
            } else {
                TiaLabel::NotCovered
            };
            assert_eq!(labels[i], expect, "position {i}");
        }

        // raster equals an independent re-masking of exactly the covered
        // lines' token boxes
        let boxes: Vec<BBox> = (0..seq.len())
            .filter_map(|i| match seq.source_map[i] {
                Some((_, line)) if covered.contains(&line) => Some(seq.boxes[i]),
                _ => None,
            })
            .collect();
        let expect = mask_regions(&page.raster, 64, 64, &boxes);
        assert_eq!(raster, expect);
    }

    #[test]
    fn tia_with_no_covered_lines_changes_nothing() {
        let v = vocab();
        let seq = lined_seq(&v);
        let mut page = Page::blank(32, 32);
        for b in page.raster.iter_mut() {
            *b = 77;
        }
        for seed in 0..100 {
            let (labels, raster, covered) =
                apply_tia(&seq, &page, &[], &mut ChaCha8Rng::seed_from_u64(seed));
            if covered.is_empty() {
                assert_eq!(raster, page.raster);
                for i in 0..seq.len() {
                    match seq.source_map[i] {
                        Some(_) => assert_eq!(labels[i], TiaLabel::NotCovered),
                        None => assert_eq!(labels[i], TiaLabel::Ignore),
                    }
                }
                return;
            }
        }
        panic!("no seed in 0..100 left all three lines uncovered — p ≈ 0.6 per seed");
    }

    fn two_doc_corpus() -> (Vec<Document>, Vocab) {
        let v = vocab();
        let a = doc_with(&[("w001", 0), ("w002", 0), ("w003", 1), ("w004", 1)]);
        let mut b = doc_with(&[("w010", 0), ("w011", 1)]);
        b.id = "other".into();
        for px in b.page.raster.iter_mut() {
            *px = 123;
        }
        (vec![a, b], v)
    }

    #[test]
    fn tim_rates_hold_over_100k_draws() {
        let (corpus, v) = two_doc_corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let base = {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let seq = sample_window(&corpus[0], &v, 12, &mut r);
            let (input, mvlm_labels, masked_positions) = apply_mvlm(&seq, &v, &mut r);
            let (tia_labels, raster, covered_lines) =
                apply_tia(&input, &corpus[0].page, &masked_positions, &mut r);
            PretrainSample {
                input,
                mvlm_labels,
                tia_labels,
                tim_matched: true,
                image: Page {
                    pixel_width: 100,
                    pixel_height: 100,
                    raster,
                },
                covered_lines,
                masked_positions,
            }
        };
        let n = 100_000;
        let mut unmatched = 0usize;
        let mut dropped = 0usize;
        for _ in 0..n {
            let s = build_tim(base.clone(), &corpus, 0, &mut rng);
            if !s.tim_matched {
                unmatched += 1;
                if s.image.raster.iter().all(|&b| b == 0) {
                    dropped += 1;
                }
            }
        }
        let unmatched = unmatched as f64 / n as f64;
        let dropped = dropped as f64 / n as f64;
        assert!((unmatched - 0.20).abs() < 0.01, "unmatched {unmatched}");
        assert!((dropped - 0.05).abs() < 0.005, "dropped {dropped}");
    }

    #[test]
    fn negatives_force_covered_and_replay_the_masking() {
        let (corpus, v) = two_doc_corpus();
        // find a replaced (not dropped) negative: nonzero raster
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = build_sample(&corpus, 0, &v, 12, &mut rng);
            if s.tim_matched || s.image.raster.iter().all(|&b| b == 0) {
                continue;
            }
            // every surviving label is Covered
            for l in &s.tia_labels {
                assert!(matches!(l, TiaLabel::Covered | TiaLabel::Ignore));
            }
            // the replacement raster got the same region treatment
            let expect = mask_regions(
                &corpus[1].page.raster,
                corpus[1].page.pixel_width,
                corpus[1].page.pixel_height,
                &obscured_boxes(&s),
            );
            assert_eq!(s.image.raster, expect);
            assert_eq!(s.image.pixel_width, corpus[1].page.pixel_width);
            return;
        }
        panic!("no replaced negative in 200 seeds — replacement rate is 0.15");
    }

    #[test]
    fn single_document_corpus_never_replaces() {
        let (corpus, v) = two_doc_corpus();
        let solo = vec![corpus[0].clone()];
        let mut negatives = 0usize;
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = build_sample(&solo, 0, &v, 12, &mut rng);
            if !s.tim_matched {
                negatives += 1;
                assert!(
                    s.image.raster.iter().all(|&b| b == 0),
                    "every negative falls back to a dropped image"
                );
            }
        }
        assert!(negatives > 100, "negative rate should still be ≈ 20%");
    }

    #[test]
    fn positive_sample_raster_blanks_masked_tokens() {
        let (corpus, v) = two_doc_corpus();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = build_sample(&corpus, 0, &v, 12, &mut rng);
            if !s.tim_matched || s.masked_positions.is_empty() {
                continue;
            }
            let (w, h) = (s.image.pixel_width, s.image.pixel_height);
            for &p in &s.masked_positions {
                let b = s.input.boxes[p];
                let (px0, px1, py0, py1) = crate::doc::box_to_pixels(&b, w, h);
                for y in py0..py1 {
                    for x in px0..px1 {
                        assert_eq!(
                            s.image.raster[y * w as usize + x],
                            0,
                            "masked token pixels must be blanked"
                        );
                    }
                }
            }
            return;
        }
        panic!("no positive sample with masked positions in 100 seeds");
    }

    #[test]
    fn construction_is_a_pure_function_of_doc_and_seed() {
        let (corpus, v) = two_doc_corpus();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4242);
            build_sample(&corpus, 0, &v, 12, &mut rng)
        };
        assert_eq!(run(), run());
    }

    // ---- loss ----

    /// Fabricate an encoder output whose rows are exactly `rows` (one leaf),
    /// bypassing the model.
    fn fake_output(g: &mut Graph<f64>, rows: Vec<f64>, grid: usize, l: usize, d: usize) -> EncoderOutput {
        let pre = g.leaf(vec![0.0; grid * d], vec![grid, d]);
        let rows = g.leaf(rows, vec![grid + l, d]);
        EncoderOutput {
            rows,
            pre_visual: pre,
            grid_len: grid,
            text_len: l,
        }
    }

    /// Heads that copy coordinate 0..d of the hidden row into the logits,
    /// scaled hard enough to saturate.
    fn sharp_heads(d: usize, vocab: usize) -> ParamStore<f64> {
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        register_heads(d, vocab, &mut st, &mut rng);
        let w = st.get_mut("pretrain.mvlm.weight").unwrap();
        w.data_mut().fill(0.0);
        for i in 0..d.min(vocab) {
            w.data_mut()[i * vocab + i] = 100.0;
        }
        for name in ["pretrain.tia.weight", "pretrain.tim.weight"] {
            let w = st.get_mut(name).unwrap();
            w.data_mut().fill(0.0);
            w.data_mut()[0] = 100.0;
        }
        st
    }

    fn loss_sample(l: usize) -> PretrainSample {
        PretrainSample {
            input: InputSequence {
                token_ids: vec![0; l],
                segments: vec![Segment::A; l],
                pos1d: (0..l).collect(),
                boxes: vec![crate::doc::special_token_box(); l],
                source_map: vec![None; l],
            },
            mvlm_labels: vec![None; l],
            tia_labels: vec![TiaLabel::Ignore; l],
            tim_matched: true,
            image: Page::blank(4, 4),
            covered_lines: vec![],
            masked_positions: vec![],
        }
    }

    #[test]
    fn perfect_predictions_drive_all_losses_to_zero() {
        let (d, vocab, grid, l) = (4usize, 4usize, 2usize, 3usize);
        let st = sharp_heads(d, vocab);
        let mut sample = loss_sample(l);
        sample.mvlm_labels[1] = Some(2);
        sample.tia_labels[1] = TiaLabel::Covered;
        sample.tia_labels[2] = TiaLabel::NotCovered;
        sample.tim_matched = true;

        let mut rows = vec![0.0; (grid + l) * d];
        rows[(grid + 1) * d + 2] = 2.0; // text row 1 → vocab id 2 (dominant)
        rows[(grid + 1) * d] = 1.0; // and coordinate 0 positive → Covered
        rows[(grid + 2) * d] = -1.0; // text row 2 → NotCovered
        rows[grid * d] = 1.0; // [CLS] coordinate 0 → matched
        let mut g = Graph::new();
        let out = fake_output(&mut g, rows, grid, l, d);
        let loss = pretrain_loss(&mut g, &st, &out, &sample);
        assert!(g.scalar_value(loss.mvlm) < 1e-6);
        assert!(g.scalar_value(loss.tia) < 1e-6);
        assert!(g.scalar_value(loss.tim) < 1e-6);
        assert!(g.scalar_value(loss.total) < 3e-6);
        assert_eq!(loss.mvlm_count, 1);
        assert_eq!(loss.tia_count, 2);
    }

    #[test]
    fn uniform_mvlm_predictions_cost_ln_vocab() {
        let (d, vocab, grid, l) = (4usize, 4usize, 1usize, 2usize);
        let mut st = sharp_heads(d, vocab);
        st.get_mut("pretrain.mvlm.weight").unwrap().data_mut().fill(0.0);
        let mut sample = loss_sample(l);
        sample.mvlm_labels[0] = Some(3);
        sample.mvlm_labels[1] = Some(0);
        let mut g = Graph::new();
        let out = fake_output(&mut g, vec![0.0; (grid + l) * d], grid, l, d);
        let loss = pretrain_loss(&mut g, &st, &out, &sample);
        assert!((g.scalar_value(loss.mvlm) - (vocab as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn ignored_positions_contribute_no_tia_gradient() {
        let (d, vocab, grid, l) = (4usize, 4usize, 1usize, 3usize);
        let st = sharp_heads(d, vocab);
        let mut sample = loss_sample(l);
        sample.tia_labels = vec![TiaLabel::Covered, TiaLabel::Ignore, TiaLabel::NotCovered];

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<f64> = (0..(grid + l) * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        // changing the hidden row at the Ignore position must not move the
        // TIA loss at all
        let tia_value = |perturb: f64| {
            let mut rows = rows.clone();
            rows[(grid + 1) * d] += perturb;
            let mut g = Graph::new();
            let out = fake_output(&mut g, rows, grid, l, d);
            let loss = pretrain_loss(&mut g, &st, &out, &sample);
            g.scalar_value(loss.tia)
        };
        assert_eq!(tia_value(0.0), tia_value(12.5));

        // and the gradient through the rows leaf is exactly zero there
        let mut g = Graph::new();
        let out = fake_output(&mut g, rows, grid, l, d);
        let loss = pretrain_loss(&mut g, &st, &out, &sample);
        g.backward(loss.tia);
        let grad = g.grad(out.rows).unwrap();
        let row = &grad[(grid + 1) * d..(grid + 2) * d];
        assert!(row.iter().all(|&v| v == 0.0), "{row:?}");
    }

    #[test]
    fn unlabeled_components_contribute_zero_with_a_flag() {
        let (d, vocab, grid, l) = (4usize, 4usize, 1usize, 2usize);
        let st = sharp_heads(d, vocab);
        let sample = loss_sample(l); // no MVLM labels, all TIA Ignore
        let mut g = Graph::new();
        let out = fake_output(&mut g, vec![0.3; (grid + l) * d], grid, l, d);
        let loss = pretrain_loss(&mut g, &st, &out, &sample);
        assert_eq!(loss.mvlm_count, 0);
        assert_eq!(loss.tia_count, 0);
        assert_eq!(g.scalar_value(loss.mvlm), 0.0);
        assert_eq!(g.scalar_value(loss.tia), 0.0);
        // total is still trainable through TIM
        assert!(g.scalar_value(loss.total) > 0.0);
    }

    #[test]
    fn samples_round_trip_through_the_binary_format() {
        let dir = tempfile::tempdir().unwrap();
        let gen = GenConfig {
            seed: 5,
            family: Family::Form,
            ..GenConfig::default()
        };
        let docs = generate(&gen, 3);
        let v = Vocab::build_from_words(
            docs.iter()
                .flat_map(|d| d.tokens.iter().map(|t| t.text.clone())),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<PretrainSample> = (0..3)
            .map(|i| build_sample(&docs, i, &v, 24, &mut rng))
            .collect();
        save_samples(dir.path(), &samples, 9).unwrap();
        let (loaded, seed) = load_samples(dir.path()).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(samples, loaded);
    }
}
