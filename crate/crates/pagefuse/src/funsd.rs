//! Adapter for FUNSD-style form annotations.
//!
//! Reads the public FUNSD layout — `{"form": [{"label", "words": [{"text",
//! "box"}], ...}]}` — and flattens it into a [`Document`]. Word boxes arrive
//! in pixels as (x0, y0, x1, y1) and leave normalized. FUNSD has no line
//! annotation, so each form entity doubles as one line; line-level
//! objectives need that grouping.
//!
//! Ingestion is forgiving where the data is known to be messy (stray
//! coordinates, empty word strings, a missing page scan) and records a
//! warning per repair instead of failing.

use std::path::Path;

use serde::Deserialize;

use crate::doc::{coord_in_range, load_raster, normalize_coord, BBox, Document, EntitySpan, Labels, Page, Token};
use crate::error::{Error, Result};

pub const FUNSD_CATEGORIES: [&str; 4] = ["question", "answer", "header", "other"];

/// Extent assumed when the page scan is absent and nothing else defines
/// pixel dimensions. FUNSD pages are letter-size scans in roughly this
/// range, and 1000 makes normalization the identity.
const FALLBACK_EXTENT: u32 = 1000;

#[derive(Deserialize)]
struct FunsdFile {
    form: Vec<FunsdEntity>,
}

#[derive(Deserialize)]
struct FunsdEntity {
    label: String,
    #[serde(default)]
    words: Vec<FunsdWord>,
}

#[derive(Deserialize)]
struct FunsdWord {
    text: String,
    /// Pixel edges: x0, y0, x1, y1.
    #[serde(rename = "box")]
    bbox: [i64; 4],
}

/// Load one annotated page. Returns the document plus warnings for every
/// repair made along the way (clamped boxes, skipped blank words, missing
/// scan). Unknown entity labels are an error, not a repair.
pub fn load_funsd(annotation_path: &Path, image_path: &Path) -> Result<(Document, Vec<String>)> {
    let text = std::fs::read_to_string(annotation_path)
        .map_err(|e| Error::io(annotation_path, e))?;
    let file: FunsdFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(annotation_path, "form", e.to_string()))?;

    let mut warnings = Vec::new();
    let page = if image_path.is_file() {
        let (w, h, raster) = load_raster(image_path)?;
        Page {
            pixel_width: w,
            pixel_height: h,
            raster,
        }
    } else {
        warnings.push(format!(
            "page scan {} not found; using a blank {FALLBACK_EXTENT}×{FALLBACK_EXTENT} page",
            image_path.display()
        ));
        Page::blank(FALLBACK_EXTENT, FALLBACK_EXTENT)
    };

    let mut tokens: Vec<Token> = Vec::new();
    let mut entities: Vec<EntitySpan> = Vec::new();
    for (entity_idx, entity) in file.form.iter().enumerate() {
        let category = entity.label.to_lowercase();
        if !FUNSD_CATEGORIES.contains(&category.as_str()) {
            return Err(Error::validation(format!(
                "form[{entity_idx}] has unknown label {:?}",
                entity.label
            )));
        }
        let span_start = tokens.len();
        for word in &entity.words {
            if word.text.trim().is_empty() {
                warnings.push(format!("form[{entity_idx}]: skipped blank word"));
                continue;
            }
            let [px0, py0, px1, py1] = word.bbox;
            for (axis, &(lo, hi), extent) in [
                ("x", &(px0, px1), page.pixel_width),
                ("y", &(py0, py1), page.pixel_height),
            ] {
                if !coord_in_range(lo, extent) || !coord_in_range(hi, extent) {
                    warnings.push(format!(
                        "form[{entity_idx}] word {:?}: {axis} range {lo}..{hi} clamped to page",
                        word.text
                    ));
                }
            }
            let mut x0 = normalize_coord(px0, page.pixel_width);
            let mut x1 = normalize_coord(px1, page.pixel_width);
            let mut y0 = normalize_coord(py0, page.pixel_height);
            let mut y1 = normalize_coord(py1, page.pixel_height);
            if x0 > x1 {
                warnings.push(format!(
                    "form[{entity_idx}] word {:?}: inverted x edges swapped",
                    word.text
                ));
                std::mem::swap(&mut x0, &mut x1);
            }
            if y0 > y1 {
                warnings.push(format!(
                    "form[{entity_idx}] word {:?}: inverted y edges swapped",
                    word.text
                ));
                std::mem::swap(&mut y0, &mut y1);
            }
            tokens.push(Token {
                text: word.text.clone(),
                bbox: BBox::new(x0, x1, y0, y1),
                line: entity_idx,
            });
        }
        if tokens.len() > span_start {
            entities.push(EntitySpan {
                start: span_start,
                end: tokens.len(),
                category,
            });
        }
    }

    let id = annotation_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "funsd".to_string());
    let doc = Document {
        id,
        page,
        tokens,
        labels: Labels {
            entities,
            class: None,
            qa: vec![],
        },
    };
    doc.validate()?;
    Ok((doc, warnings))
}
