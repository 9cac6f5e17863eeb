//! Document data model: pages, tokens, boxes, labels, and corpus file I/O.
//!
//! All coordinates in this crate are normalized page coordinates — integers
//! in [0,1000] — produced by [`normalize_coord`] at ingestion time. Pixel
//! boxes exist only transiently inside loaders.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound of the normalized coordinate system.
pub const COORD_MAX: u16 = 1000;

/// Axis-aligned box in normalized coordinates.
///
/// Stored as the four edges; width and height are derived. Invariants
/// (0 ≤ x0 ≤ x1 ≤ 1000, same for y) are checked at corpus load, not on
/// every construction — internal producers are trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u16,
    pub x1: u16,
    pub y0: u16,
    pub y1: u16,
}

impl BBox {
    pub fn new(x0: u16, x1: u16, y0: u16, y1: u16) -> Self {
        BBox { x0, x1, y0, y1 }
    }

    pub fn width(&self) -> u16 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u16 {
        self.y1 - self.y0
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.x0 > self.x1 {
            return Err(format!("x0 ({}) > x1 ({})", self.x0, self.x1));
        }
        if self.y0 > self.y1 {
            return Err(format!("y0 ({}) > y1 ({})", self.y0, self.y1));
        }
        if self.x1 > COORD_MAX || self.y1 > COORD_MAX {
            return Err(format!(
                "coordinates exceed {COORD_MAX}: ({},{},{},{})",
                self.x0, self.x1, self.y0, self.y1
            ));
        }
        Ok(())
    }
}

/// The box attached to [CLS], [SEP], [PAD], and [MASK] positions.
pub fn special_token_box() -> BBox {
    BBox::new(0, 0, 0, 0)
}

/// Map a pixel coordinate onto the [0,1000] grid: ⌊1000·pixel/extent⌋,
/// clamped. Out-of-page pixels clamp silently; callers that care use
/// [`coord_in_range`] to decide whether to record a warning.
pub fn normalize_coord(pixel: i64, extent: u32) -> u16 {
    assert!(extent > 0, "normalize_coord: page extent must be positive");
    let clamped = pixel.clamp(0, extent as i64);
    (1000 * clamped / extent as i64) as u16
}

pub fn coord_in_range(pixel: i64, extent: u32) -> bool {
    pixel >= 0 && pixel <= extent as i64
}

/// Map a normalized box back onto a raster's pixel grid. Edges map by
/// ⌊edge·extent/1000⌋ with exclusive right/bottom, except that any
/// non-degenerate box covers at least one pixel. This one mapping is shared
/// by page rendering and region masking so the two always agree on which
/// pixels a token owns.
pub fn box_to_pixels(bbox: &BBox, w: u32, h: u32) -> (usize, usize, usize, usize) {
    let px0 = (bbox.x0 as u64 * w as u64 / 1000) as usize;
    let px1 = (bbox.x1 as u64 * w as u64 / 1000) as usize;
    let py0 = (bbox.y0 as u64 * h as u64 / 1000) as usize;
    let py1 = (bbox.y1 as u64 * h as u64 / 1000) as usize;
    let px1 = px1.max(px0 + usize::from(bbox.x1 > bbox.x0)).min(w as usize);
    let py1 = py1.max(py0 + usize::from(bbox.y1 > bbox.y0)).min(h as usize);
    (px0, px1, py0, py1)
}

/// Box of one cell of the W×H visual grid, row-major (`row = index / W`).
pub fn grid_box(visual_index: usize, w: usize, h: usize) -> BBox {
    assert!(w > 0 && h > 0, "grid_box: grid dimensions must be positive");
    assert!(
        visual_index < w * h,
        "grid_box: index {visual_index} out of range for {w}×{h} grid"
    );
    let row = visual_index / w;
    let col = visual_index % w;
    BBox::new(
        (1000 * col / w) as u16,
        (1000 * (col + 1) / w) as u16,
        (1000 * row / h) as u16,
        (1000 * (row + 1) / h) as u16,
    )
}

/// One word as recognized on the page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub bbox: BBox,
    /// OCR line the word belongs to; line-level objectives group by this.
    pub line: usize,
}

/// Grayscale page raster plus its pixel dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub pixel_width: u32,
    pub pixel_height: u32,
    /// Row-major luma bytes, `pixel_height · pixel_width` of them.
    pub raster: Vec<u8>,
}

impl Page {
    pub fn blank(pixel_width: u32, pixel_height: u32) -> Self {
        Page {
            pixel_width,
            pixel_height,
            raster: vec![0; (pixel_width * pixel_height) as usize],
        }
    }
}

/// Entity span over document token indices, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer_start: usize,
    pub answer_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default)]
    pub qa: Vec<QaPair>,
}

/// A single-page training sample. Multi-page sources are split upstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub page: Page,
    pub tokens: Vec<Token>,
    pub labels: Labels,
}

impl Document {
    /// Check every stored invariant; error messages name the offending
    /// token or span index.
    pub fn validate(&self) -> Result<()> {
        let expected = self.page.pixel_width as usize * self.page.pixel_height as usize;
        if self.page.pixel_width == 0 || self.page.pixel_height == 0 {
            return Err(Error::validation(format!(
                "document {}: page dimensions must be positive",
                self.id
            )));
        }
        if self.page.raster.len() != expected {
            return Err(Error::validation(format!(
                "document {}: raster has {} bytes, page dimensions imply {}",
                self.id,
                self.page.raster.len(),
                expected
            )));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.text.is_empty() {
                return Err(Error::validation(format!(
                    "document {}: tokens[{i}] has empty text",
                    self.id
                )));
            }
            if let Err(msg) = tok.bbox.check() {
                return Err(Error::validation(format!(
                    "document {}: tokens[{i}].box: {msg}",
                    self.id
                )));
            }
        }
        let n = self.tokens.len();
        let mut spans: Vec<(usize, usize, usize)> = self
            .labels
            .entities
            .iter()
            .enumerate()
            .map(|(i, s)| (s.start, s.end, i))
            .collect();
        for &(start, end, i) in &spans {
            if start >= end || end > n {
                return Err(Error::validation(format!(
                    "document {}: entities[{i}] span {start}..{end} invalid for {n} tokens",
                    self.id
                )));
            }
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(Error::validation(format!(
                    "document {}: entities[{}] overlaps entities[{}]",
                    self.id, pair[1].2, pair[0].2
                )));
            }
        }
        for (i, qa) in self.labels.qa.iter().enumerate() {
            if qa.question.is_empty() {
                return Err(Error::validation(format!(
                    "document {}: qa[{i}] has empty question",
                    self.id
                )));
            }
            if qa.answer_start >= qa.answer_end || qa.answer_end > n {
                return Err(Error::validation(format!(
                    "document {}: qa[{i}] answer span {}..{} invalid for {n} tokens",
                    self.id, qa.answer_start, qa.answer_end
                )));
            }
        }
        Ok(())
    }
}

// ---- corpus file format --------------------------------------------------
//
// One JSON file per document; the page raster lives beside it as a binary
// PGM (or PNG) referenced by relative path:
//
//   {"id": ..., "page": {"width", "height", "image"},
//    "tokens": [{"text", "box": [x0,x1,y0,y1], "line"}], "labels": {...}}

#[derive(Serialize, Deserialize)]
struct DocFile {
    id: String,
    page: PageFile,
    tokens: Vec<TokenFile>,
    #[serde(default)]
    labels: Labels,
}

#[derive(Serialize, Deserialize)]
struct PageFile {
    width: u32,
    height: u32,
    image: String,
}

#[derive(Serialize, Deserialize)]
struct TokenFile {
    text: String,
    /// Normalized edges in corpus order: x0, x1, y0, y1.
    #[serde(rename = "box")]
    bbox: [u16; 4],
    line: usize,
}

/// Read an 8-bit grayscale raster (PGM or PNG) and verify its dimensions.
pub fn load_raster(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    Ok((luma.width(), luma.height(), luma.into_raw()))
}

/// Write a raster as binary PGM (P5). PGM round-trips bytes exactly and
/// needs no encoder state, which keeps save→load→save byte-identical.
pub fn save_raster_pgm(path: &Path, width: u32, height: u32, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), (width * height) as usize, "raster size mismatch");
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P5\n{width} {height}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(data))
        .map_err(|e| Error::io(path, e))
}

pub fn load_document(path: &Path) -> Result<Document> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DocFile = serde_json::from_str(&text).map_err(|e| {
        Error::parse(path, "document", e.to_string())
    })?;
    let image_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&file.page.image);
    let (w, h, raster) = load_raster(&image_path)?;
    if w != file.page.width || h != file.page.height {
        return Err(Error::validation(format!(
            "document {}: page declares {}×{} but image {} is {w}×{h}",
            file.id, file.page.width, file.page.height, file.page.image
        )));
    }
    let doc = Document {
        id: file.id,
        page: Page {
            pixel_width: w,
            pixel_height: h,
            raster,
        },
        tokens: file
            .tokens
            .into_iter()
            .map(|t| Token {
                text: t.text,
                bbox: BBox::new(t.bbox[0], t.bbox[1], t.bbox[2], t.bbox[3]),
                line: t.line,
            })
            .collect(),
        labels: file.labels,
    };
    doc.validate()?;
    Ok(doc)
}

/// Write `doc` as JSON at `path` with its raster as a sibling `.pgm`.
pub fn save_document(doc: &Document, path: &Path) -> Result<()> {
    doc.validate()?;
    let image_name = {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "page".to_string());
        format!("{stem}.pgm")
    };
    let image_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&image_name);
    save_raster_pgm(
        &image_path,
        doc.page.pixel_width,
        doc.page.pixel_height,
        &doc.page.raster,
    )?;
    let file = DocFile {
        id: doc.id.clone(),
        page: PageFile {
            width: doc.page.pixel_width,
            height: doc.page.pixel_height,
            image: image_name,
        },
        tokens: doc
            .tokens
            .iter()
            .map(|t| TokenFile {
                text: t.text.clone(),
                bbox: [t.bbox.x0, t.bbox.x1, t.bbox.y0, t.bbox.y1],
                line: t.line,
            })
            .collect(),
        labels: doc.labels.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("document serialization cannot fail");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Load every `*.json` document under a directory, sorted by file name so
/// corpus order is stable across platforms.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Document>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_document(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_coord_endpoints_and_midpoint() {
        assert_eq!(normalize_coord(0, 500), 0);
        assert_eq!(normalize_coord(500, 500), 1000);
        assert_eq!(normalize_coord(1120, 2240), 500);
    }

    #[test]
    fn normalize_coord_clamps_out_of_page() {
        assert_eq!(normalize_coord(-5, 100), 0);
        assert_eq!(normalize_coord(150, 100), 1000);
        assert!(!coord_in_range(-5, 100));
        assert!(!coord_in_range(150, 100));
        assert!(coord_in_range(100, 100));
    }

    #[test]
    fn grid_box_first_cell_of_seven_grid() {
        assert_eq!(grid_box(0, 7, 7), BBox::new(0, 142, 0, 142));
    }

    #[test]
    fn grid_box_last_cell_reaches_page_edge() {
        let b = grid_box(48, 7, 7);
        assert_eq!((b.x1, b.y1), (1000, 1000));
    }

    #[test]
    fn grid_box_single_cell_covers_page() {
        assert_eq!(grid_box(0, 1, 1), BBox::new(0, 1000, 0, 1000));
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn grid_box_rejects_out_of_range_index() {
        grid_box(49, 7, 7);
    }

    #[test]
    fn grid_cells_tile_without_gap_or_overlap() {
        for (w, h) in [(1, 1), (4, 4), (7, 7), (3, 5)] {
            for idx in 0..w * h {
                let b = grid_box(idx, w, h);
                let col = idx % w;
                let row = idx / w;
                if col + 1 < w {
                    assert_eq!(b.x1, grid_box(idx + 1, w, h).x0, "x seam at {idx}");
                }
                if row + 1 < h {
                    assert_eq!(b.y1, grid_box(idx + w, w, h).y0, "y seam at {idx}");
                }
                if col == 0 {
                    assert_eq!(b.x0, 0);
                }
                if col == w - 1 {
                    assert_eq!(b.x1, 1000);
                }
            }
        }
    }

    #[test]
    fn special_box_is_all_zero() {
        let b = special_token_box();
        assert_eq!((b.x0, b.x1, b.y0, b.y1), (0, 0, 0, 0));
        assert_eq!(b.width(), 0);
        assert_eq!(b.height(), 0);
    }

    fn sample_doc() -> Document {
        Document {
            id: "doc-1".into(),
            page: Page {
                pixel_width: 4,
                pixel_height: 3,
                raster: vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110],
            },
            tokens: vec![
                Token {
                    text: "hello".into(),
                    bbox: BBox::new(10, 200, 20, 60),
                    line: 0,
                },
                Token {
                    text: "world".into(),
                    bbox: BBox::new(220, 400, 20, 60),
                    line: 0,
                },
                Token {
                    text: "again".into(),
                    bbox: BBox::new(10, 180, 80, 120),
                    line: 1,
                },
            ],
            labels: Labels {
                entities: vec![
                    EntitySpan {
                        start: 0,
                        end: 2,
                        category: "question".into(),
                    },
                    EntitySpan {
                        start: 2,
                        end: 3,
                        category: "answer".into(),
                    },
                ],
                class: Some("letter".into()),
                qa: vec![QaPair {
                    question: "what is said?".into(),
                    answer_start: 0,
                    answer_end: 2,
                }],
            },
        }
    }

    #[test]
    fn document_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc-1.json");
        let doc = sample_doc();
        save_document(&doc, &path).unwrap();
        let loaded = load_document(&path).unwrap();
        assert_eq!(doc, loaded);
    }

    #[test]
    fn entity_spans_preserve_order_through_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let mut doc = sample_doc();
        doc.labels.entities = vec![
            EntitySpan { start: 2, end: 3, category: "c".into() },
            EntitySpan { start: 0, end: 1, category: "a".into() },
            EntitySpan { start: 1, end: 2, category: "b".into() },
        ];
        save_document(&doc, &path).unwrap();
        let loaded = load_document(&path).unwrap();
        let cats: Vec<&str> = loaded
            .labels
            .entities
            .iter()
            .map(|e| e.category.as_str())
            .collect();
        assert_eq!(cats, ["c", "a", "b"]);
    }

    #[test]
    fn inverted_box_is_rejected_naming_the_token() {
        let mut doc = sample_doc();
        doc.tokens[1].bbox = BBox::new(400, 220, 20, 60); // x0 > x1
        let err = doc.validate().unwrap_err().to_string();
        assert!(err.contains("tokens[1]"), "unexpected message: {err}");
        assert!(err.contains("x0"), "unexpected message: {err}");
    }

    #[test]
    fn overlapping_entities_are_rejected() {
        let mut doc = sample_doc();
        doc.labels.entities = vec![
            EntitySpan { start: 0, end: 2, category: "q".into() },
            EntitySpan { start: 1, end: 3, category: "a".into() },
        ];
        let err = doc.validate().unwrap_err().to_string();
        assert!(err.contains("overlaps"), "unexpected message: {err}");
    }

    #[test]
    fn raster_size_mismatch_is_rejected() {
        let mut doc = sample_doc();
        doc.page.raster.pop();
        assert!(doc.validate().is_err());
    }

    #[test]
    fn malformed_json_is_a_parse_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"id\": \"x\"").unwrap();
        let err = load_document(&path).unwrap_err().to_string();
        assert!(err.contains("bad.json"), "unexpected message: {err}");
    }

    #[test]
    fn pgm_raster_round_trips_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pgm");
        let data: Vec<u8> = (0..=255).collect();
        save_raster_pgm(&path, 16, 16, &data).unwrap();
        let (w, h, back) = load_raster(&path).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(back, data);
    }

    // ---- property tests ----------------------------------------------

    fn arb_bbox() -> impl Strategy<Value = BBox> {
        (0u16..=1000, 0u16..=1000, 0u16..=1000, 0u16..=1000).prop_map(|(a, b, c, d)| {
            BBox::new(a.min(b), a.max(b), c.min(d), c.max(d))
        })
    }

    fn arb_token() -> impl Strategy<Value = Token> {
        ("[a-z]{1,8}", arb_bbox(), 0usize..4).prop_map(|(text, bbox, line)| Token {
            text,
            bbox,
            line,
        })
    }

    fn arb_document() -> impl Strategy<Value = Document> {
        (
            "[a-z0-9]{1,12}",
            1u32..12,
            1u32..12,
            prop::collection::vec(arb_token(), 1..10),
            prop::collection::vec((0usize..10, 1usize..4, "[a-z]{1,6}"), 0..4),
            prop::option::of("[a-z]{1,6}"),
        )
            .prop_map(|(id, w, h, tokens, raw_spans, class)| {
                let n = tokens.len();
                // greedily keep spans that fit and do not overlap
                let mut entities: Vec<EntitySpan> = Vec::new();
                let mut cursor = 0usize;
                for (start, len, category) in raw_spans {
                    let start = cursor.max(start % n.max(1));
                    let end = (start + len).min(n);
                    if start >= end {
                        continue;
                    }
                    entities.push(EntitySpan {
                        start,
                        end,
                        category,
                    });
                    cursor = end;
                }
                let raster: Vec<u8> = (0..(w * h) as usize).map(|i| (i * 37 % 256) as u8).collect();
                Document {
                    id,
                    page: Page {
                        pixel_width: w,
                        pixel_height: h,
                        raster,
                    },
                    tokens,
                    labels: Labels {
                        entities,
                        class,
                        qa: vec![],
                    },
                }
            })
    }

    proptest! {
        #[test]
        fn normalize_coord_is_monotone(extent in 1u32..5000, a in -100i64..5100, b in -100i64..5100) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(normalize_coord(lo, extent) <= normalize_coord(hi, extent));
        }

        #[test]
        fn normalize_coord_stays_in_range(pixel in -10_000i64..10_000, extent in 1u32..5000) {
            prop_assert!(normalize_coord(pixel, extent) <= 1000);
        }

        #[test]
        fn corpus_round_trip_identity(doc in arb_document()) {
            prop_assume!(doc.validate().is_ok());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join(format!("{}.json", doc.id));
            save_document(&doc, &path).unwrap();
            let loaded = load_document(&path).unwrap();
            prop_assert_eq!(doc, loaded);
        }
    }
}
