//! Visual feature extraction: raster preprocessing, a small convolutional
//! stack, and pooling to the W×H visual-token grid.
//!
//! The stack is a stand-in for a heavyweight pretrained CNN: a few stride-2
//! 3×3 convolutions with GELU, adaptively average-pooled to the grid. At
//! desk scale it only needs to carry region-level intensity signal, not
//! recognize glyphs.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::doc::{box_to_pixels, BBox, Page};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Pages are resized to this square side before feature extraction.
    pub input_side: usize,
    /// Output channels per stage; each stage is a stride-2 3×3 conv, so the
    /// spatial side roughly halves per entry.
    pub channels: Vec<usize>,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl BackboneConfig {
    pub fn validate(&self) {
        assert!(!self.channels.is_empty(), "backbone needs at least one stage");
        assert!(self.grid_w >= 1 && self.grid_h >= 1, "grid must be at least 1×1");
        let stride = self.total_stride();
        assert!(
            self.input_side % stride == 0,
            "input side {} not divisible by total stride {stride}",
            self.input_side
        );
        let final_side = self.feature_side();
        assert!(
            final_side >= self.grid_w && final_side >= self.grid_h,
            "feature map {final_side}×{final_side} smaller than {}×{} grid",
            self.grid_w,
            self.grid_h
        );
    }

    pub fn total_stride(&self) -> usize {
        1 << self.channels.len()
    }

    /// Spatial side of the feature map after all (unpadded) conv stages.
    pub fn feature_side(&self) -> usize {
        let mut side = self.input_side;
        for _ in &self.channels {
            side = crate::autodiff::conv::conv2d_out_dim(side, 3, 2, 0);
        }
        side
    }

    /// Width of one visual feature row, i.e. channels of the last stage.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("non-empty channel list")
    }

    pub fn grid_len(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Register conv weights and biases under `backbone.*`.
    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.validate();
        let mut c_in = 1;
        for (i, &c_out) in self.channels.iter().enumerate() {
            store.init_normal(
                &format!("backbone.conv{i}.weight"),
                vec![c_out, c_in, 3, 3],
                0.02,
                rng,
            );
            store.init_zeros(&format!("backbone.conv{i}.bias"), vec![c_out]);
            c_in = c_out;
        }
    }
}

/// Nearest-neighbor resize to the configured square side, scaled to [0,1].
pub fn preprocess<T: Scalar>(page: &Page, side: usize) -> Tensor<T> {
    assert!(
        page.pixel_width > 0 && page.pixel_height > 0,
        "preprocess: raster has a zero dimension"
    );
    let (sw, sh) = (page.pixel_width as usize, page.pixel_height as usize);
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        let sy = y * sh / side;
        for x in 0..side {
            let sx = x * sw / side;
            data.push(T::from_f64(page.raster[sy * sw + sx] as f64 / 255.0));
        }
    }
    Tensor::new(vec![1, side, side], data)
}

/// Run the conv stack and pool to the grid. Output is `[W·H × feature_dim]`
/// with rows in row-major grid order, matching visual token order.
pub fn extract<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &BackboneConfig,
    image: Var,
) -> Var {
    // Stages run unpadded: with zero padding a constant image would stop
    // producing constant features at the borders, and the pooled grid cells
    // would differ for no content-related reason.
    let mut x = image;
    for i in 0..cfg.channels.len() {
        let w = g.param(store, &format!("backbone.conv{i}.weight"));
        let b = g.param(store, &format!("backbone.conv{i}.bias"));
        x = g.conv2d(x, w, b, 2, 0);
        x = g.gelu(x);
    }
    let pooled = g.adaptive_avg_pool(x, cfg.grid_h, cfg.grid_w);
    // [C, H, W] → [H·W, C]
    let c = cfg.feature_dim();
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let mut ids = Vec::with_capacity(h * w * c);
    for cell in 0..h * w {
        for ch in 0..c {
            ids.push(ch * h * w + cell);
        }
    }
    g.gather_flat(pooled, &ids, vec![h * w, c])
}

/// Zero every pixel covered by the given normalized boxes. Used to blind
/// the visual channel to masked tokens and to cover lines.
pub fn mask_regions(raster: &[u8], w: u32, h: u32, boxes: &[BBox]) -> Vec<u8> {
    let mut out = raster.to_vec();
    for bbox in boxes {
        let (px0, px1, py0, py1) = box_to_pixels(bbox, w, h);
        for y in py0..py1 {
            for x in px0..px1 {
                out[y * w as usize + x] = 0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            input_side: 16,
            channels: vec![2, 3],
            grid_w: 2,
            grid_h: 2,
        }
    }

    fn page_from(w: u32, h: u32, f: impl Fn(u32, u32) -> u8) -> Page {
        let mut raster = Vec::new();
        for y in 0..h {
            for x in 0..w {
                raster.push(f(x, y));
            }
        }
        Page {
            pixel_width: w,
            pixel_height: h,
            raster,
        }
    }

    #[test]
    fn preprocess_keeps_matching_resolution_up_to_scaling() {
        let page = page_from(8, 8, |x, y| (x * 8 + y) as u8);
        let t = preprocess::<f64>(&page, 8);
        assert_eq!(t.shape(), &[1, 8, 8]);
        for y in 0..8u32 {
            for x in 0..8u32 {
                let expected = page.raster[(y * 8 + x) as usize] as f64 / 255.0;
                assert_eq!(t.data()[(y * 8 + x) as usize], expected);
            }
        }
    }

    #[test]
    fn preprocess_all_white_is_all_ones() {
        let page = page_from(10, 6, |_, _| 255);
        let t = preprocess::<f32>(&page, 8);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn preprocess_downsamples_by_nearest_neighbor() {
        // 16→8: output (r,c) must equal input (2r,2c)
        let page = page_from(16, 16, |x, y| (x * 16 + y) as u8);
        let t = preprocess::<f64>(&page, 8);
        for r in 0..8u32 {
            for c in 0..8u32 {
                let expected = page.raster[(2 * r * 16 + 2 * c) as usize] as f64 / 255.0;
                assert_eq!(t.data()[(r * 8 + c) as usize], expected);
            }
        }
    }

    #[test]
    #[should_panic(expected = "zero dimension")]
    fn preprocess_rejects_empty_raster() {
        let page = Page {
            pixel_width: 0,
            pixel_height: 0,
            raster: vec![],
        };
        preprocess::<f32>(&page, 8);
    }

    #[test]
    fn constant_image_gives_identical_feature_rows() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        cfg.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let page = page_from(16, 16, |_, _| 128);
        let mut g = Graph::new();
        let img = g.constant(&preprocess(&page, cfg.input_side));
        let feats = extract(&mut g, &store, &cfg, img);
        assert_eq!(g.shape(feats), &[4, 3]);
        let rows = g.value(feats);
        let first = &rows[0..3];
        for cell in 1..4 {
            assert_eq!(&rows[cell * 3..cell * 3 + 3], first, "row {cell} differs");
        }
    }

    #[test]
    fn output_shape_depends_only_on_config() {
        for (cfg, rows, dim) in [
            (tiny_cfg(), 4, 3),
            (
                BackboneConfig {
                    input_side: 24,
                    channels: vec![4],
                    grid_w: 3,
                    grid_h: 1,
                },
                3,
                4,
            ),
        ] {
            let mut store = ParamStore::<f32>::new();
            cfg.register(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
            for fill in [0u8, 255] {
                let page = page_from(32, 20, |x, _| x as u8 ^ fill);
                let mut g = Graph::new();
                let img = g.constant(&preprocess(&page, cfg.input_side));
                let feats = extract(&mut g, &store, &cfg, img);
                assert_eq!(g.shape(feats), &[rows, dim]);
            }
        }
    }

    #[test]
    fn conv_weight_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        cfg.register(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let page = page_from(16, 16, |x, y| ((x * 13 + y * 7) % 251) as u8);
        let image = preprocess::<f64>(&page, cfg.input_side);

        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new();
            let img = g.constant(&image);
            let feats = extract(&mut g, store, &cfg, img);
            // weighted sum so gradients differ per position
            let n = g.value(feats).len();
            let wts: Vec<f64> = (0..n).map(|i| 0.3 + 0.11 * i as f64).collect();
            let shape = g.shape(feats).to_vec();
            let wv = g.leaf(wts, shape);
            let prod = g.mul(feats, wv);
            let loss = g.sum_all(prod);
            g.scalar_value(loss)
        };

        // analytic
        let mut g = Graph::new();
        let img = g.constant(&image);
        let feats = extract(&mut g, &store, &cfg, img);
        let n = g.value(feats).len();
        let wts: Vec<f64> = (0..n).map(|i| 0.3 + 0.11 * i as f64).collect();
        let shape = g.shape(feats).to_vec();
        let wv = g.leaf(wts, shape);
        let prod = g.mul(feats, wv);
        let loss = g.sum_all(prod);
        g.backward(loss);
        let mut grads = store.clone();
        grads.zero_grads();
        g.export_grads(&mut grads);

        let h = 1e-6;
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let len = store.get(&name).unwrap().len();
            for i in 0..len {
                let mut plus = store.clone();
                plus.get_mut(&name).unwrap().data_mut()[i] += h;
                let mut minus = store.clone();
                minus.get_mut(&name).unwrap().data_mut()[i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = grads.get(&name).unwrap().grad().unwrap()[i];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    ((a - fd) / denom).abs() < 1e-5,
                    "{name}[{i}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn mask_regions_with_no_boxes_is_identity() {
        let raster: Vec<u8> = (0..100).map(|i| (i % 256) as u8).collect();
        assert_eq!(mask_regions(&raster, 10, 10, &[]), raster);
    }

    #[test]
    fn whole_page_box_blanks_everything() {
        let raster = vec![200u8; 100];
        let out = mask_regions(&raster, 10, 10, &[BBox::new(0, 1000, 0, 1000)]);
        assert!(out.iter().all(|&p| p == 0));
    }

    #[test]
    fn disjoint_boxes_zero_the_sum_of_their_areas() {
        let raster = vec![200u8; 100 * 100];
        let boxes = [BBox::new(0, 100, 0, 100), BBox::new(500, 700, 200, 300)];
        let out = mask_regions(&raster, 100, 100, &boxes);
        let zeroed = out.iter().filter(|&&p| p == 0).count();
        // 10×10 plus 20×10 pixels
        assert_eq!(zeroed, 100 + 200);
    }

    #[test]
    fn mask_regions_is_idempotent() {
        let raster: Vec<u8> = (0..64 * 64).map(|i| (i % 253) as u8 + 1).collect();
        let boxes = [BBox::new(100, 400, 100, 300), BBox::new(350, 600, 250, 500)];
        let once = mask_regions(&raster, 64, 64, &boxes);
        let twice = mask_regions(&once, 64, 64, &boxes);
        assert_eq!(once, twice);
    }
}
