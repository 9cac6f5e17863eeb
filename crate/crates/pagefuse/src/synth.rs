//! Synthetic visually-rich documents: key-value forms, tables, and
//! receipt-like pages, with labels for all three downstream tasks.
//!
//! The generator exists so the whole pipeline can train and evaluate in a
//! closed loop with no external data. Pages are painted as intensity
//! blocks — one filled rectangle per token whose gray level hashes the
//! token text — which gives the visual channel a learnable token-identity
//! signal without any font rendering.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doc::{box_to_pixels, BBox, Document, EntitySpan, Labels, Page, QaPair, Token};

/// Layout family; doubles as the document classification label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "form")]
    Form,
    #[serde(rename = "table")]
    Table,
    #[serde(rename = "receipt-like")]
    Receipt,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Form, Family::Table, Family::Receipt];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Form => "form",
            Family::Table => "table",
            Family::Receipt => "receipt-like",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub page_width: u32,
    pub page_height: u32,
    pub family: Family,
    /// Target token count per page is drawn from this inclusive range;
    /// pages may come in under `min_tokens` when the page fills up.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Content word pool; also the natural seed for vocabulary building.
    pub words: Vec<String>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            page_width: 256,
            page_height: 256,
            family: Family::Form,
            min_tokens: 24,
            max_tokens: 60,
            words: default_words(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.page_width < 64 || self.page_height < 64 {
            return Err(crate::error::Error::validation(
                "synthetic pages must be at least 64×64 pixels",
            ));
        }
        if self.min_tokens < 1 || self.max_tokens < self.min_tokens {
            return Err(crate::error::Error::validation(
                "token count range must satisfy 1 ≤ min ≤ max",
            ));
        }
        if self.words.is_empty() {
            return Err(crate::error::Error::validation(
                "content word pool is empty",
            ));
        }
        Ok(())
    }
}

pub fn default_words() -> Vec<String> {
    [
        "acme", "address", "amount", "approved", "balance", "cash", "city", "client", "code",
        "company", "contact", "county", "date", "dept", "discount", "due", "email", "fax",
        "filed", "form", "from", "invoice", "item", "lane", "ledger", "memo", "name", "north",
        "notes", "number", "office", "order", "paid", "payment", "phone", "price", "qty",
        "receipt", "ref", "report", "sales", "signed", "state", "status", "street", "subtotal",
        "tax", "terms", "total", "unit", "vendor", "widget", "zone",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Per-sample seed derivation (splitmix64 over seed⊕index), so sample i is
/// reproducible in isolation and independent of who generated samples 0..i.
pub fn sample_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gray level for a token's painted block: FNV-1a of the text folded into
/// [20, 219] — never white (255), stable across runs.
pub fn token_gray(text: &str) -> u8 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    20 + (hash % 200) as u8
}

const WHITE: u8 = 255;

/// Paint a document's tokens onto a white raster. Each token becomes one
/// filled rectangle at its pixel-mapped box.
pub fn render(doc: &Document) -> Vec<u8> {
    let (w, h) = (doc.page.pixel_width, doc.page.pixel_height);
    let mut raster = vec![WHITE; (w * h) as usize];
    for tok in &doc.tokens {
        let gray = token_gray(&tok.text);
        paint_box(&mut raster, w, h, &tok.bbox, gray);
    }
    raster
}

fn paint_box(raster: &mut [u8], w: u32, h: u32, bbox: &BBox, value: u8) {
    let (px0, px1, py0, py1) = box_to_pixels(bbox, w, h);
    for y in py0..py1 {
        for x in px0..px1 {
            raster[y * w as usize + x] = value;
        }
    }
}

/// Generate `n` documents. Deterministic in (config, n) — in fact in
/// (config, index) per document.
pub fn generate(config: &GenConfig, n: usize) -> Vec<Document> {
    assert!(n >= 1, "generate: document count must be at least 1");
    config.validate().expect("invalid generator config");
    (0..n).map(|i| generate_one(config, i as u64)).collect()
}

pub fn generate_one(config: &GenConfig, index: u64) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, index));
    let target = rng.random_range(config.min_tokens..=config.max_tokens);
    let mut builder = PageBuilder::new(config, target, &mut rng);
    match config.family {
        Family::Form => builder.build_form(&mut rng),
        Family::Table => builder.build_table(&mut rng),
        Family::Receipt => builder.build_receipt(&mut rng),
    }
    let (tokens, entities, qa) = builder.finish();
    let mut doc = Document {
        id: format!("{}-{index:05}", config.family),
        page: Page::blank(config.page_width, config.page_height),
        tokens,
        labels: Labels {
            entities,
            class: Some(config.family.name().to_string()),
            qa,
        },
    };
    doc.page.raster = render(&doc);
    doc.validate().expect("generated document violates invariants");
    doc
}

// Geometry constants, all in normalized [0,1000] units.
const ROW_H: u16 = 52; // box height within a row
const CHAR_W: u16 = 16; // width per character
const GAP: u16 = 14; // horizontal gap between boxes

struct PageBuilder<'a> {
    config: &'a GenConfig,
    target: usize,
    tokens: Vec<Token>,
    entities: Vec<EntitySpan>,
    qa: Vec<QaPair>,
    y: u16,
    line: usize,
}

impl<'a> PageBuilder<'a> {
    fn new(config: &'a GenConfig, target: usize, rng: &mut ChaCha8Rng) -> Self {
        let _ = rng;
        PageBuilder {
            config,
            target,
            tokens: Vec::new(),
            entities: Vec::new(),
            qa: Vec::new(),
            y: 30,
            line: 0,
        }
    }

    fn word(&self, rng: &mut ChaCha8Rng) -> String {
        self.config.words[rng.random_range(0..self.config.words.len())].clone()
    }

    fn full(&self) -> bool {
        self.tokens.len() >= self.target || self.y + ROW_H > 980
    }

    /// Place `texts` left-to-right starting at `x`, one line, strictly
    /// increasing x cursor (boxes never overlap). Returns the token index
    /// range that actually fit.
    fn place_row(&mut self, texts: &[String], mut x: u16, max_x: u16) -> (usize, usize) {
        let start = self.tokens.len();
        let y0 = self.y;
        let y1 = y0 + ROW_H - 8;
        for text in texts {
            let w = CHAR_W * text.len() as u16 + 10;
            if x + w > max_x {
                break;
            }
            self.tokens.push(Token {
                text: text.clone(),
                bbox: BBox::new(x, x + w, y0, y1),
                line: self.line,
            });
            x += w + GAP;
        }
        (start, self.tokens.len())
    }

    fn next_line(&mut self, advance: u16) {
        self.y += advance;
        self.line += 1;
    }

    fn span(&mut self, start: usize, end: usize, category: &str) {
        if start < end {
            self.entities.push(EntitySpan {
                start,
                end,
                category: category.to_string(),
            });
        }
    }

    /// Title row spanning 1–3 header words.
    fn title(&mut self, rng: &mut ChaCha8Rng) {
        let n = rng.random_range(1..=3);
        let texts: Vec<String> = (0..n).map(|_| self.word(rng)).collect();
        let (s, e) = self.place_row(&texts, 240, 960);
        self.span(s, e, "header");
        self.next_line(ROW_H + 18);
    }

    /// One key-value pair at the given x positions; records the question
    /// and answer spans plus a QA pair when both sides survive placement.
    fn key_value(
        &mut self,
        rng: &mut ChaCha8Rng,
        key_x: u16,
        value_x: u16,
        max_x: u16,
        n_key: usize,
        n_value: usize,
    ) {
        let keys: Vec<String> = (0..n_key).map(|_| self.word(rng)).collect();
        let values: Vec<String> = (0..n_value).map(|_| self.word(rng)).collect();
        let (ks, ke) = self.place_row(&keys, key_x, value_x.saturating_sub(GAP));
        if ks == ke {
            return;
        }
        let (vs, ve) = self.place_row(&values, value_x, max_x);
        self.span(ks, ke, "question");
        if vs < ve {
            self.span(vs, ve, "answer");
            let question = self.tokens[ks..ke]
                .iter()
                .map(|t| t.text.clone())
                .collect::<Vec<_>>()
                .join(" ");
            self.qa.push(QaPair {
                question,
                answer_start: vs,
                answer_end: ve,
            });
        }
    }

    /// Filler words labeled "other".
    fn filler_row(&mut self, rng: &mut ChaCha8Rng, x: u16, max_x: u16) {
        let n = rng.random_range(1..=3);
        let texts: Vec<String> = (0..n).map(|_| self.word(rng)).collect();
        let (s, e) = self.place_row(&texts, x, max_x);
        self.span(s, e, "other");
        self.next_line(ROW_H);
    }

    /// Wide two-column label/field rows under a title.
    fn build_form(&mut self, rng: &mut ChaCha8Rng) {
        self.title(rng);
        while !self.full() {
            if rng.random_ratio(1, 6) {
                self.filler_row(rng, 60, 960);
                continue;
            }
            let n_key = rng.random_range(1..=2);
            let n_value = rng.random_range(1..=3);
            self.key_value(rng, 40, 420, 980, n_key, n_value);
            self.next_line(ROW_H + 10);
        }
    }

    /// Grid-aligned rows: key in column 0, values in fixed columns.
    fn build_table(&mut self, rng: &mut ChaCha8Rng) {
        self.title(rng);
        let columns = [40u16, 360, 600, 820];
        let n_value_cols = rng.random_range(1..=3);
        while !self.full() {
            let keys = vec![self.word(rng)];
            let (ks, ke) = self.place_row(&keys, columns[0], columns[1] - GAP);
            if ks == ke {
                break;
            }
            self.span(ks, ke, "question");
            let vs = self.tokens.len();
            for col in 1..=n_value_cols {
                let texts = vec![self.word(rng)];
                let max = if col < 3 { columns[col + 1] - GAP } else { 990 };
                self.place_row(&texts, columns[col], max);
            }
            let ve = self.tokens.len();
            if vs < ve {
                self.span(vs, ve, "answer");
                self.qa.push(QaPair {
                    question: self.tokens[ks].text.clone(),
                    answer_start: vs,
                    answer_end: ve,
                });
            }
            self.next_line(ROW_H);
        }
    }

    /// Narrow centered column: item then price, separator rows between.
    fn build_receipt(&mut self, rng: &mut ChaCha8Rng) {
        self.title(rng);
        while !self.full() {
            if rng.random_ratio(1, 5) {
                self.filler_row(rng, 320, 700);
                continue;
            }
            self.key_value(rng, 280, 560, 740, 1, 1);
            self.next_line(ROW_H);
        }
    }

    fn finish(self) -> (Vec<Token>, Vec<EntitySpan>, Vec<QaPair>) {
        assert!(
            !self.tokens.is_empty(),
            "generator produced an empty page; target {} too small for geometry",
            self.target
        );
        (self.tokens, self.entities, self.qa)
    }
}
