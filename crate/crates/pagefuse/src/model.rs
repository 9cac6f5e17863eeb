//! Full-model assembly: backbone → embeddings → encoder, one config.
//!
//! The unified sequence has `W·H` visual rows followed by `L` text rows.
//! `forward` wires a page raster and an assembled [`InputSequence`] through
//! the whole stack inside one graph, so a single `backward` reaches every
//! registered parameter, backbone convolutions included.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{self, BackboneConfig};
use crate::doc::{grid_box, BBox, Page};
use crate::embed::{self, EmbedConfig};
use crate::encoder::{self, EncoderConfig, PositionContext};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::tokenizer::{InputSequence, Segment};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Text-side sequence length L; every assembled input is exactly this
    /// long.
    pub text_len: usize,
    pub vocab_size: usize,
    /// Ablation switch: plain attention when false.
    pub spatial_bias: bool,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    /// Smallest config that still exercises every code path; sized for
    /// finite-difference gradient checking in double precision.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            d: 12,
            layers: 2,
            heads: 2,
            text_len: 16,
            vocab_size,
            spatial_bias: true,
            backbone: BackboneConfig {
                input_side: 16,
                channels: vec![3, 4],
                grid_w: 2,
                grid_h: 2,
            },
        }
    }

    /// Desk-scale training config: overfits a handful of synthetic pages in
    /// minutes on one core.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d: 96,
            layers: 2,
            heads: 4,
            text_len: 128,
            vocab_size,
            spatial_bias: true,
            backbone: BackboneConfig {
                input_side: 64,
                channels: vec![8, 16, 32],
                grid_w: 4,
                grid_h: 4,
            },
        }
    }

    /// The full-size architecture shape. Far beyond desk-scale training
    /// budgets; present so configs round-trip, not because anyone should run
    /// it here.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            d: 768,
            layers: 12,
            heads: 12,
            text_len: 512,
            vocab_size,
            spatial_bias: true,
            backbone: BackboneConfig {
                input_side: 224,
                channels: vec![32, 64, 128],
                grid_w: 7,
                grid_h: 7,
            },
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro(vocab_size)),
            "tiny" => Ok(Self::tiny(vocab_size)),
            "base" => Ok(Self::base(vocab_size)),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected micro, tiny, or base)"
            ))),
        }
    }

    pub fn grid_len(&self) -> usize {
        self.backbone.grid_len()
    }

    /// Total unified sequence length `W·H + L`.
    pub fn seq_len(&self) -> usize {
        self.grid_len() + self.text_len
    }

    /// Rows in the shared 1D position table: it must cover whichever side is
    /// longer.
    pub fn max_positions(&self) -> usize {
        self.text_len.max(self.grid_len())
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            d: self.d,
            vocab_size: self.vocab_size,
            max_positions: self.max_positions(),
            feature_dim: self.backbone.feature_dim(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut c = EncoderConfig::with_defaults(self.layers, self.heads, self.d);
        c.spatial_bias = self.spatial_bias;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.embed_config().validate()?;
        self.encoder_config().validate()?;
        self.backbone.validate();
        if self.text_len < 3 {
            return Err(Error::validation(
                "text_len must hold at least [CLS], one token, and [SEP]",
            ));
        }
        Ok(())
    }

    /// Register every backbone, embedding, and encoder parameter.
    pub fn register<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.backbone.register(store, rng);
        embed::register(&self.embed_config(), store, rng);
        encoder::register(&self.encoder_config(), store, rng);
    }
}

/// Encoder output with the row views the heads consume, plus the pre-encoder
/// visual rows the classification head pools.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[(W·H + L) × d]` final hidden states.
    pub rows: Var,
    /// Visual rows of the *input* `x⁽⁰⁾` (projection + position + segment +
    /// layout), before any encoder layer.
    pub pre_visual: Var,
    pub grid_len: usize,
    pub text_len: usize,
}

impl EncoderOutput {
    /// First `W·H` rows.
    pub fn visual_part<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        g.slice_rows(self.rows, 0, self.grid_len)
    }

    /// Last `L` rows.
    pub fn text_part<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        g.slice_rows(self.rows, self.grid_len, self.text_len)
    }

    /// The [CLS] row — text position 0, unified row `W·H`.
    pub fn cls<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        g.slice_rows(self.rows, self.grid_len, 1)
    }
}

/// Key mask over the unified sequence: visual rows are never padded, text
/// rows are padded wherever the segment says so.
pub fn pad_mask(cfg: &ModelConfig, seq: &InputSequence) -> Vec<bool> {
    let mut pad = vec![false; cfg.grid_len()];
    pad.extend(seq.segments.iter().map(|&s| s == Segment::Pad));
    pad
}

/// Run the whole stack on one page + assembled sequence.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    page: &Page,
    seq: &InputSequence,
) -> EncoderOutput {
    assert_eq!(
        seq.len(),
        cfg.text_len,
        "assembled sequence length {} does not match the configured L {}",
        seq.len(),
        cfg.text_len
    );
    let grid_len = cfg.grid_len();

    let image = backbone::preprocess::<T>(page, cfg.backbone.input_side);
    let shape = image.shape().to_vec();
    let image = g.leaf(image.data().to_vec(), shape);
    let feats = backbone::extract(g, store, &cfg.backbone, image);

    let ecfg = cfg.embed_config();
    let v = embed::visual_embed(g, store, &ecfg, feats);
    let t = embed::text_embed(g, store, &ecfg, seq);
    let mut boxes: Vec<BBox> = (0..grid_len)
        .map(|i| grid_box(i, cfg.backbone.grid_w, cfg.backbone.grid_h))
        .collect();
    boxes.extend(seq.boxes.iter().copied());
    let layout = embed::layout_embed(g, store, &boxes);
    let x0 = embed::build_input(g, v, t, layout);

    let enc_cfg = cfg.encoder_config();
    let ctx = PositionContext::build(cfg.backbone.grid_w, cfg.backbone.grid_h, &seq.boxes);
    let idx = encoder::bias_indices(&ctx, &enc_cfg);
    let pad = pad_mask(cfg, seq);
    let rows = encoder::encoder_forward(g, store, &enc_cfg, x0, &idx, &pad);
    let pre_visual = g.slice_rows(x0, 0, grid_len);

    EncoderOutput {
        rows,
        pre_visual,
        grid_len,
        text_len: cfg.text_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_seq(cfg: &ModelConfig) -> InputSequence {
        // [CLS] 5 6 7 [SEP] [PAD]*11 — constructed by hand so the test does
        // not depend on the tokenizer.
        let l = cfg.text_len;
        let mut token_ids = vec![0u32, 5, 6, 7, 1];
        let mut segments = vec![
            Segment::A,
            Segment::A,
            Segment::A,
            Segment::A,
            Segment::A,
        ];
        let mut boxes = vec![
            crate::doc::special_token_box(),
            BBox::new(100, 200, 100, 150),
            BBox::new(210, 300, 100, 150),
            BBox::new(310, 400, 100, 150),
            crate::doc::special_token_box(),
        ];
        while token_ids.len() < l {
            token_ids.push(2);
            segments.push(Segment::Pad);
            boxes.push(crate::doc::special_token_box());
        }
        InputSequence {
            token_ids,
            segments,
            pos1d: (0..l).collect(),
            boxes,
            source_map: vec![None; l],
        }
    }

    fn setup() -> (ModelConfig, ParamStore<f64>, Page, InputSequence) {
        let cfg = ModelConfig::micro(32);
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        cfg.register(&mut store, &mut rng);
        let mut page = Page::blank(24, 24);
        for (i, b) in page.raster.iter_mut().enumerate() {
            *b = (i * 37 % 251) as u8;
        }
        let seq = micro_seq(&cfg);
        (cfg, store, page, seq)
    }

    #[test]
    fn presets_validate() {
        assert!(ModelConfig::micro(100).validate().is_ok());
        assert!(ModelConfig::tiny(500).validate().is_ok());
        assert!(ModelConfig::base(30000).validate().is_ok());
        assert!(ModelConfig::preset("tiny", 10).is_ok());
        assert!(ModelConfig::preset("huge", 10).is_err());
    }

    #[test]
    fn forward_produces_the_documented_views() {
        let (cfg, store, page, seq) = setup();
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &page, &seq);
        assert_eq!(g.shape(out.rows), &[20, 12]); // 4 visual + 16 text
        assert_eq!(g.shape(out.pre_visual), &[4, 12]);
        let vis = out.visual_part(&mut g);
        let text = out.text_part(&mut g);
        let cls = out.cls(&mut g);
        assert_eq!(g.shape(vis), &[4, 12]);
        assert_eq!(g.shape(text), &[16, 12]);
        assert_eq!(g.shape(cls), &[1, 12]);
        // cls row is unified row W·H
        assert_eq!(g.value(cls), &g.value(out.rows)[4 * 12..5 * 12]);
    }

    #[test]
    fn forward_is_deterministic() {
        let (cfg, store, page, seq) = setup();
        let run = || {
            let mut g = Graph::new();
            let out = forward(&mut g, &store, &cfg, &page, &seq);
            g.value(out.rows).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_registered_parameter_receives_a_gradient_buffer() {
        let (cfg, mut store, page, seq) = setup();
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &page, &seq);
        let loss = g.sum_all(out.rows);
        g.backward(loss);
        g.export_grads(&mut store);
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            assert!(
                store.get(&name).unwrap().grad().is_some(),
                "{name} never bound into the forward graph"
            );
        }
    }

    #[test]
    fn pad_text_content_does_not_reach_real_rows() {
        let (cfg, store, page, seq) = setup();
        let mut g1 = Graph::new();
        let out1 = forward(&mut g1, &store, &cfg, &page, &seq);

        let mut altered = seq.clone();
        // swap every pad token id to a different (real) vocab entry
        for (i, s) in altered.segments.iter().enumerate() {
            if *s == Segment::Pad {
                altered.token_ids[i] = 17;
            }
        }
        let mut g2 = Graph::new();
        let out2 = forward(&mut g2, &store, &cfg, &page, &altered);

        let pad = pad_mask(&cfg, &seq);
        for i in 0..cfg.seq_len() {
            if pad[i] {
                continue;
            }
            assert_eq!(
                &g1.value(out1.rows)[i * 12..(i + 1) * 12],
                &g2.value(out2.rows)[i * 12..(i + 1) * 12],
                "row {i}"
            );
        }
    }

    #[test]
    #[should_panic(expected = "does not match the configured L")]
    fn wrong_sequence_length_panics() {
        let (cfg, store, page, mut seq) = setup();
        seq.token_ids.pop();
        seq.segments.pop();
        seq.pos1d.pop();
        seq.boxes.pop();
        seq.source_map.pop();
        let mut g = Graph::new();
        forward(&mut g, &store, &cfg, &page, &seq);
    }
}
