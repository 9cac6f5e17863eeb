//! Input embeddings: token, 1D position, segment, visual projection, and the
//! six-way 2D layout encoding.
//!
//! A model input is `W·H` visual rows followed by `L` text rows. Both sides
//! draw 1D position rows from *one* table (`embed.pos1d`), indexed
//! modality-locally: visual rows use positions `0..W·H`, text rows use
//! `0..L`. The layout embedding is built per row from six sub-lookups of
//! width `d/6` — `x0, x1, width` from the x-table and `y0, y1, height` from
//! the y-table — concatenated x-part first. Special tokens carry the empty
//! box, so their layout row is six copies of table row 0.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::doc::{BBox, COORD_MAX};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::tokenizer::{InputSequence, Segment};

/// Rows in each coordinate table: one per value in `0..=1000`.
pub const COORD_ROWS: usize = COORD_MAX as usize + 1;

/// Standard deviation used for every normally-initialized table.
pub const INIT_STD: f64 = 0.02;

/// Sizes the embedding layer needs to know. `max_positions` bounds both the
/// text length and the visual grid length, since the 1D position table is
/// shared between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedConfig {
    pub d: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Channel count of the backbone feature rows fed to the visual
    /// projection.
    pub feature_dim: usize,
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 6 != 0 {
            return Err(Error::validation(format!(
                "hidden size must be a positive multiple of 6 (got {}) so the \
                 layout embedding splits into six equal parts",
                self.d
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::validation("vocab_size must be positive"));
        }
        if self.max_positions == 0 {
            return Err(Error::validation("max_positions must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim must be positive"));
        }
        Ok(())
    }

    /// Width of each of the six layout sub-embeddings.
    pub fn coord_dim(&self) -> usize {
        self.d / 6
    }
}

/// Row index into the segment table. Pad gets its own row rather than
/// aliasing A; pad rows are masked out of attention and every loss, so the
/// choice is unobservable downstream, but distinct rows keep the invariant
/// "same embedding ⇒ same (token, position, segment)" exact.
pub fn segment_row(segment: Segment) -> usize {
    match segment {
        Segment::A => 0,
        Segment::B => 1,
        Segment::C => 2,
        Segment::Pad => 3,
    }
}

const SEGMENT_ROWS: usize = 4;

/// Register all embedding parameters. Tables and the projection weight are
/// normal(0, 0.02); the projection bias starts at zero.
pub fn register<T: Scalar, R: Rng>(cfg: &EmbedConfig, store: &mut ParamStore<T>, rng: &mut R) {
    store.init_normal("embed.token", vec![cfg.vocab_size, cfg.d], INIT_STD, rng);
    store.init_normal("embed.pos1d", vec![cfg.max_positions, cfg.d], INIT_STD, rng);
    store.init_normal("embed.segment", vec![SEGMENT_ROWS, cfg.d], INIT_STD, rng);
    store.init_normal("embed.x", vec![COORD_ROWS, cfg.coord_dim()], INIT_STD, rng);
    store.init_normal("embed.y", vec![COORD_ROWS, cfg.coord_dim()], INIT_STD, rng);
    store.init_normal(
        "embed.visual_proj.weight",
        vec![cfg.feature_dim, cfg.d],
        INIT_STD,
        rng,
    );
    store.init_zeros("embed.visual_proj.bias", vec![cfg.d]);
}

/// Text rows: `TokEmb(w_i) + PosEmb1D(i) + SegEmb(s_i)`, shape `[L × d]`.
///
/// Panics if a token id is outside the vocabulary or the sequence is longer
/// than the position table — both are contract violations, not data errors.
pub fn text_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EmbedConfig,
    seq: &InputSequence,
) -> Var {
    let l = seq.len();
    assert!(
        l <= cfg.max_positions,
        "sequence length {l} exceeds the position table ({} rows)",
        cfg.max_positions
    );
    let ids: Vec<usize> = seq
        .token_ids
        .iter()
        .map(|&id| {
            let id = id as usize;
            assert!(
                id < cfg.vocab_size,
                "token id {id} out of vocabulary range (size {})",
                cfg.vocab_size
            );
            id
        })
        .collect();
    let positions: Vec<usize> = (0..l).collect();
    let seg_rows: Vec<usize> = seq.segments.iter().map(|&s| segment_row(s)).collect();

    let token = g.param(store, "embed.token");
    let pos = g.param(store, "embed.pos1d");
    let segment = g.param(store, "embed.segment");
    let tok_rows = g.gather_rows(token, &ids);
    let pos_rows = g.gather_rows(pos, &positions);
    let seg_rows = g.gather_rows(segment, &seg_rows);
    let partial = g.add(tok_rows, pos_rows);
    g.add(partial, seg_rows)
}

/// Visual rows: `Proj(features_i) + PosEmb1D(i) + SegEmb(C)`, shape
/// `[W·H × d]`. `features` is the backbone output, one row per grid cell.
/// Position ids restart at 0 here — the table is shared with the text side,
/// not the index space.
pub fn visual_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EmbedConfig,
    features: Var,
) -> Var {
    let shape = g.shape(features).to_vec();
    assert_eq!(shape.len(), 2, "visual features must be a matrix");
    let n = shape[0];
    assert_eq!(
        shape[1], cfg.feature_dim,
        "visual feature width {} does not match configured feature_dim {}",
        shape[1], cfg.feature_dim
    );
    assert!(
        n <= cfg.max_positions,
        "visual grid length {n} exceeds the position table ({} rows)",
        cfg.max_positions
    );
    let weight = g.param(store, "embed.visual_proj.weight");
    let bias = g.param(store, "embed.visual_proj.bias");
    let proj = g.linear(features, weight, bias);

    let positions: Vec<usize> = (0..n).collect();
    let pos = g.param(store, "embed.pos1d");
    let pos_rows = g.gather_rows(pos, &positions);
    let segment = g.param(store, "embed.segment");
    let seg_rows = g.gather_rows(segment, &vec![segment_row(Segment::C); n]);
    let partial = g.add(proj, pos_rows);
    g.add(partial, seg_rows)
}

/// Layout rows: `Concat(x[x0], x[x1], x[width], y[y0], y[y1], y[height])`,
/// one row per box, shape `[n × d]`. Panics on any coordinate outside
/// `0..=1000`.
pub fn layout_embed<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, boxes: &[BBox]) -> Var {
    let n = boxes.len();
    let mut x0 = Vec::with_capacity(n);
    let mut x1 = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    for (i, b) in boxes.iter().enumerate() {
        assert!(
            b.x0 <= b.x1 && b.y0 <= b.y1 && b.x1 <= COORD_MAX && b.y1 <= COORD_MAX,
            "box {i} ({},{},{},{}) violates the coordinate contract 0 ≤ lo ≤ hi ≤ {COORD_MAX}",
            b.x0,
            b.x1,
            b.y0,
            b.y1
        );
        x0.push(b.x0 as usize);
        x1.push(b.x1 as usize);
        w.push(b.width() as usize);
        y0.push(b.y0 as usize);
        y1.push(b.y1 as usize);
        h.push(b.height() as usize);
    }
    let xt = g.param(store, "embed.x");
    let yt = g.param(store, "embed.y");
    let parts = [
        g.gather_rows(xt, &x0),
        g.gather_rows(xt, &x1),
        g.gather_rows(xt, &w),
        g.gather_rows(yt, &y0),
        g.gather_rows(yt, &y1),
        g.gather_rows(yt, &h),
    ];
    g.concat_cols(&parts)
}

/// Fuse the three streams into the unified input: visual rows first, then
/// text rows, plus the layout embedding for the whole stack. `layout` must
/// therefore cover `W·H + L` boxes — grid boxes for the visual rows, token
/// boxes for the text rows.
pub fn build_input<T: Scalar>(g: &mut Graph<T>, visual: Var, text: Var, layout: Var) -> Var {
    let stacked = g.concat_rows(&[visual, text]);
    let rows = g.shape(stacked)[0];
    assert_eq!(
        g.shape(layout)[0],
        rows,
        "layout embedding must cover every visual and text row"
    );
    g.add(stacked, layout)
}
