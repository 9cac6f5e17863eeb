//! Spatial-aware self-attention encoder.
//!
//! Plain scaled dot-product scores are augmented with three learned relative
//! biases before the softmax:
//!
//! ```text
//! α′_ij = α_ij + b1d[bucket(pos_j − pos_i)]
//!              + b2dx[bucket(x_j − x_i)]
//!              + b2dy[bucket(y_j − y_i)]
//! ```
//!
//! where `(x_i, y_i)` is the top-left corner of position `i`'s box and
//! `pos_i` its modality-local 1D index (visual rows count `0..W·H`, text rows
//! restart at 0). The bias tables have one row per head and are shared by
//! every layer — the same table identity, not copies. Raw displacements are
//! unbounded, so they index the tables through a sign-split bucket map:
//! half the buckets per sign, exact for small magnitudes, log-spaced out to a
//! maximum distance, clamping beyond it.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::doc::{grid_box, BBox};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Additive score for padded keys; exp(−1e9 − rowmax) underflows to exactly
/// zero, so pad content can never leak into non-pad outputs.
pub const PAD_SCORE: f64 = -1e9;

/// LayerNorm stabilizer.
pub const LN_EPS: f64 = 1e-12;

/// Default 1D bucket count / max displacement.
pub const DEFAULT_BUCKETS_1D: usize = 32;
pub const DEFAULT_MAX_DIST_1D: usize = 128;
/// Default 2D bucket count / max displacement (coordinates live in 0..=1000).
pub const DEFAULT_BUCKETS_2D: usize = 64;
pub const DEFAULT_MAX_DIST_2D: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    /// Inner FFN width, conventionally `4·d`.
    pub ffn_dim: usize,
    pub buckets_1d: usize,
    pub max_dist_1d: usize,
    pub buckets_2d: usize,
    pub max_dist_2d: usize,
    /// When false the bias tables are neither registered nor added — plain
    /// scaled dot-product attention. Exists for ablation runs.
    pub spatial_bias: bool,
}

impl EncoderConfig {
    /// Config with the default bucket geometry and a `4·d` FFN.
    pub fn with_defaults(layers: usize, heads: usize, d: usize) -> Self {
        EncoderConfig {
            layers,
            heads,
            d,
            ffn_dim: 4 * d,
            buckets_1d: DEFAULT_BUCKETS_1D,
            max_dist_1d: DEFAULT_MAX_DIST_1D,
            buckets_2d: DEFAULT_BUCKETS_2D,
            max_dist_2d: DEFAULT_MAX_DIST_2D,
            spatial_bias: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(Error::validation(format!(
                "head_dim·heads must equal d (d={}, heads={})",
                self.d, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::validation("ffn_dim must be positive"));
        }
        for (name, b, m) in [
            ("1d", self.buckets_1d, self.max_dist_1d),
            ("2d", self.buckets_2d, self.max_dist_2d),
        ] {
            if b < 4 || b % 2 != 0 {
                return Err(Error::validation(format!(
                    "{name} bucket count must be even and ≥ 4 (got {b})"
                )));
            }
            if m <= b / 4 {
                return Err(Error::validation(format!(
                    "{name} max distance {m} must exceed the exact region {}",
                    b / 4
                )));
            }
        }
        Ok(())
    }
}

/// Map a signed displacement to a bucket in `[0, buckets)`.
///
/// Half the buckets serve each sign. Within a sign, magnitudes below
/// `buckets/4` map to their own bucket; the remaining per-sign buckets are
/// log-spaced up to `max_dist`, and anything at or beyond `max_dist` clamps
/// to the last bucket of its sign. Zero maps to bucket 0.
pub fn rel_bucket(rel: i64, buckets: usize, max_dist: usize) -> usize {
    assert!(buckets >= 4 && buckets % 2 == 0, "bucket count must be even and ≥ 4");
    let half = buckets / 2;
    let exact = buckets / 4;
    assert!(max_dist > exact, "max_dist must exceed the exact region");
    let offset = if rel < 0 { half } else { 0 };
    let mag = rel.unsigned_abs() as usize;
    let b = if mag < exact {
        mag
    } else if mag >= max_dist {
        half - 1
    } else {
        let ratio = (mag as f64 / exact as f64).ln() / (max_dist as f64 / exact as f64).ln();
        (exact + (ratio * (half - exact) as f64) as usize).min(half - 1)
    };
    offset + b
}

/// Per-position data the relative biases are computed from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionContext {
    /// Modality-local sequential index: `0..W·H` for visual rows, then
    /// `0..L` again for text rows.
    pub pos1d: Vec<i64>,
    /// Top-left box corners; visual rows anchor at their grid cell,
    /// specials at (0,0) via the empty box.
    pub anchor_x: Vec<i64>,
    pub anchor_y: Vec<i64>,
}

impl PositionContext {
    /// Context for the unified sequence: `grid_w·grid_h` visual rows followed
    /// by one row per text box.
    pub fn build(grid_w: usize, grid_h: usize, text_boxes: &[BBox]) -> Self {
        let wh = grid_w * grid_h;
        let n = wh + text_boxes.len();
        let mut pos1d = Vec::with_capacity(n);
        let mut anchor_x = Vec::with_capacity(n);
        let mut anchor_y = Vec::with_capacity(n);
        for i in 0..wh {
            let b = grid_box(i, grid_w, grid_h);
            pos1d.push(i as i64);
            anchor_x.push(b.x0 as i64);
            anchor_y.push(b.y0 as i64);
        }
        for (i, b) in text_boxes.iter().enumerate() {
            pos1d.push(i as i64);
            anchor_x.push(b.x0 as i64);
            anchor_y.push(b.y0 as i64);
        }
        PositionContext { pos1d, anchor_x, anchor_y }
    }

    pub fn len(&self) -> usize {
        self.pos1d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos1d.is_empty()
    }
}

/// Precomputed `n×n` bucket index matrices, row-major `[i·n + j]`. They
/// depend only on positions and boxes, never on parameters, so one set
/// serves every head and layer of a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasIndices {
    pub n: usize,
    pub idx_1d: Vec<usize>,
    pub idx_2dx: Vec<usize>,
    pub idx_2dy: Vec<usize>,
}

pub fn bias_indices(ctx: &PositionContext, cfg: &EncoderConfig) -> BiasIndices {
    let n = ctx.len();
    let mut idx_1d = Vec::with_capacity(n * n);
    let mut idx_2dx = Vec::with_capacity(n * n);
    let mut idx_2dy = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            idx_1d.push(rel_bucket(
                ctx.pos1d[j] - ctx.pos1d[i],
                cfg.buckets_1d,
                cfg.max_dist_1d,
            ));
            idx_2dx.push(rel_bucket(
                ctx.anchor_x[j] - ctx.anchor_x[i],
                cfg.buckets_2d,
                cfg.max_dist_2d,
            ));
            idx_2dy.push(rel_bucket(
                ctx.anchor_y[j] - ctx.anchor_y[i],
                cfg.buckets_2d,
                cfg.max_dist_2d,
            ));
        }
    }
    BiasIndices { n, idx_1d, idx_2dx, idx_2dy }
}

/// Register per-layer attention/FFN weights and the three bias tables. The
/// tables are registered once — all layers read the same rows.
pub fn register<T: Scalar, R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) {
    let std = crate::embed::INIT_STD;
    let d = cfg.d;
    for l in 0..cfg.layers {
        let p = format!("encoder.layer{l}");
        for w in ["wq", "wk", "wv", "wo"] {
            store.init_normal(&format!("{p}.attn.{w}"), vec![d, d], std, rng);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            store.init_zeros(&format!("{p}.attn.{b}"), vec![d]);
        }
        store.init_ones(&format!("{p}.attn.norm.gain"), vec![d]);
        store.init_zeros(&format!("{p}.attn.norm.bias"), vec![d]);
        store.init_normal(&format!("{p}.ffn.w1"), vec![d, cfg.ffn_dim], std, rng);
        store.init_zeros(&format!("{p}.ffn.b1"), vec![cfg.ffn_dim]);
        store.init_normal(&format!("{p}.ffn.w2"), vec![cfg.ffn_dim, d], std, rng);
        store.init_zeros(&format!("{p}.ffn.b2"), vec![d]);
        store.init_ones(&format!("{p}.ffn.norm.gain"), vec![d]);
        store.init_zeros(&format!("{p}.ffn.norm.bias"), vec![d]);
    }
    if cfg.spatial_bias {
        // Zero-initialized: a freshly initialized model scores exactly like
        // plain attention, so the biases-off ablation is literally the
        // starting state and everything the tables contribute is learned.
        store.init_zeros("encoder.bias.1d", vec![cfg.heads, cfg.buckets_1d]);
        store.init_zeros("encoder.bias.2dx", vec![cfg.heads, cfg.buckets_2d]);
        store.init_zeros("encoder.bias.2dy", vec![cfg.heads, cfg.buckets_2d]);
    }
}

/// Raw per-head scores: `(x W^Q)(x W^K)ᵀ / √d_head`, one `[n×n]` matrix per
/// head.
pub fn attention_scores<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
) -> Vec<Var> {
    let p = format!("encoder.layer{layer}.attn");
    let wq = g.param(store, &format!("{p}.wq"));
    let bq = g.param(store, &format!("{p}.bq"));
    let wk = g.param(store, &format!("{p}.wk"));
    let bk = g.param(store, &format!("{p}.bk"));
    let q = g.linear(x, wq, bq);
    let k = g.linear(x, wk, bk);
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    (0..cfg.heads)
        .map(|h| {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let s = g.matmul_nt(qh, kh);
            g.scale(s, scale)
        })
        .collect()
}

/// Add the three relative biases to each head's raw scores.
pub fn spatial_scores<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    raw: &[Var],
    idx: &BiasIndices,
) -> Vec<Var> {
    assert_eq!(raw.len(), cfg.heads);
    let n = idx.n;
    let t1 = g.param(store, "encoder.bias.1d");
    let tx = g.param(store, "encoder.bias.2dx");
    let ty = g.param(store, "encoder.bias.2dy");
    raw.iter()
        .enumerate()
        .map(|(h, &s)| {
            // Table rows are per-head: flat index = head·buckets + bucket.
            let off1 = h * cfg.buckets_1d;
            let off2 = h * cfg.buckets_2d;
            let ids1: Vec<usize> = idx.idx_1d.iter().map(|&b| off1 + b).collect();
            let idsx: Vec<usize> = idx.idx_2dx.iter().map(|&b| off2 + b).collect();
            let idsy: Vec<usize> = idx.idx_2dy.iter().map(|&b| off2 + b).collect();
            let b1 = g.gather_flat(t1, &ids1, vec![n, n]);
            let bx = g.gather_flat(tx, &idsx, vec![n, n]);
            let by = g.gather_flat(ty, &idsy, vec![n, n]);
            let s = g.add(s, b1);
            let s = g.add(s, bx);
            g.add(s, by)
        })
        .collect()
}

fn pad_mask_leaf<T: Scalar>(g: &mut Graph<T>, pad: &[bool]) -> Var {
    let n = pad.len();
    let neg = T::from_f64(PAD_SCORE);
    let mut data = vec![T::zero(); n * n];
    for j in 0..n {
        if pad[j] {
            for i in 0..n {
                data[i * n + j] = neg;
            }
        }
    }
    g.leaf(data, vec![n, n])
}

/// One full attention sublayer (pre-residual): per-head softmax-weighted
/// value aggregation over spatially-biased scores, heads concatenated, output
/// projection applied.
///
/// Panics if every key is padded — some query would then attend to nothing.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    layer: usize,
    x: Var,
    idx: &BiasIndices,
    pad: &[bool],
) -> Var {
    let n = g.shape(x)[0];
    assert_eq!(idx.n, n, "bias indices built for a different sequence length");
    assert_eq!(pad.len(), n, "pad mask length mismatch");
    assert!(
        pad.iter().any(|&p| !p),
        "attend: every key is masked — no query can attend to anything"
    );
    let p = format!("encoder.layer{layer}.attn");
    let wv = g.param(store, &format!("{p}.wv"));
    let bv = g.param(store, &format!("{p}.bv"));
    let v = g.linear(x, wv, bv);
    let dh = cfg.head_dim();

    let raw = attention_scores(g, store, cfg, layer, x);
    let biased = if cfg.spatial_bias {
        spatial_scores(g, store, cfg, &raw, idx)
    } else {
        raw
    };
    let mask = pad_mask_leaf(g, pad);
    let outs: Vec<Var> = biased
        .into_iter()
        .enumerate()
        .map(|(h, s)| {
            let masked = g.add(s, mask);
            let probs = g.softmax_rows(masked);
            let vh = g.slice_cols(v, h * dh, dh);
            g.matmul(probs, vh)
        })
        .collect();
    let cat = g.concat_cols(&outs);
    let wo = g.param(store, &format!("{p}.wo"));
    let bo = g.param(store, &format!("{p}.bo"));
    g.linear(cat, wo, bo)
}

/// Run the full stack: per layer a post-norm residual attention sublayer,
/// then a post-norm residual GELU FFN. Zero layers is the identity.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    x0: Var,
    idx: &BiasIndices,
    pad: &[bool],
) -> Var {
    let eps = T::from_f64(LN_EPS);
    let mut x = x0;
    for l in 0..cfg.layers {
        let p = format!("encoder.layer{l}");
        let a = attend(g, store, cfg, l, x, idx, pad);
        let sum = g.add(x, a);
        let gain = g.param(store, &format!("{p}.attn.norm.gain"));
        let bias = g.param(store, &format!("{p}.attn.norm.bias"));
        x = g.layer_norm(sum, gain, bias, eps);

        let w1 = g.param(store, &format!("{p}.ffn.w1"));
        let b1 = g.param(store, &format!("{p}.ffn.b1"));
        let w2 = g.param(store, &format!("{p}.ffn.w2"));
        let b2 = g.param(store, &format!("{p}.ffn.b2"));
        let h = g.linear(x, w1, b1);
        let h = g.gelu(h);
        let f = g.linear(h, w2, b2);
        let sum = g.add(x, f);
        let gain = g.param(store, &format!("{p}.ffn.norm.gain"));
        let bias = g.param(store, &format!("{p}.ffn.norm.bias"));
        x = g.layer_norm(sum, gain, bias, eps);
    }
    x
}

/// Naive triple-loop reference for one attention sublayer, kept deliberately
/// close to the formula and far from the batched code path. Equivalence
/// tests run both on random inputs.
pub fn reference_attend(
    store: &ParamStore<f64>,
    cfg: &EncoderConfig,
    layer: usize,
    x: &[f64],
    idx: &BiasIndices,
    pad: &[bool],
) -> Vec<f64> {
    let n = idx.n;
    let d = cfg.d;
    let dh = cfg.head_dim();
    assert_eq!(x.len(), n * d);
    let p = format!("encoder.layer{layer}.attn");
    let get = |name: &str| store.get(&format!("{p}.{name}")).unwrap().data();
    let (wq, bq) = (get("wq"), get("bq"));
    let (wk, bk) = (get("wk"), get("bk"));
    let (wv, bv) = (get("wv"), get("bv"));
    let (wo, bo) = (get("wo"), get("bo"));
    let tables = cfg.spatial_bias.then(|| {
        (
            store.get("encoder.bias.1d").unwrap().data(),
            store.get("encoder.bias.2dx").unwrap().data(),
            store.get("encoder.bias.2dy").unwrap().data(),
        )
    });

    let project = |w: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for c in 0..d {
                let mut acc = b[c];
                for a in 0..d {
                    acc += x[i * d + a] * w[a * d + c];
                }
                out[i * d + c] = acc;
            }
        }
        out
    };
    let q = project(wq, bq);
    let k = project(wk, bk);
    let v = project(wv, bv);

    let mut concat = vec![0.0; n * d];
    for h in 0..cfg.heads {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                let mut s = dot / (dh as f64).sqrt();
                if let Some((b1, bx, by)) = tables {
                    s += b1[h * cfg.buckets_1d + idx.idx_1d[i * n + j]];
                    s += bx[h * cfg.buckets_2d + idx.idx_2dx[i * n + j]];
                    s += by[h * cfg.buckets_2d + idx.idx_2dy[i * n + j]];
                }
                if pad[j] {
                    s += PAD_SCORE;
                }
                scores[j] = s;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in &mut exps {
                *e /= z;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] * v[j * d + h * dh + c];
                }
                concat[i * d + h * dh + c] = acc;
            }
        }
    }

    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let mut acc = bo[c];
            for a in 0..d {
                acc += concat[i * d + a] * wo[a * d + c];
            }
            out[i * d + c] = acc;
        }
    }
    out
}
