//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Each op
//! builder records enough information to replay the chain rule in reverse;
//! [`Graph::backward`] then fills gradient buffers, and
//! [`Graph::export_grads`] accumulates the gradients of bound parameters
//! back into their [`ParamStore`](crate::params::ParamStore) entries.
//!
//! The op set is fixed to what the model needs; this is not a general
//! framework. Shape mismatches and misuse are contract violations and panic.

pub mod conv;
pub mod linalg;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::params::ParamStore;
use crate::tensor::{softmax_row, Scalar, Tensor};
use conv::{
    adaptive_pool_backward, adaptive_pool_forward, conv2d_backward, conv2d_forward, conv2d_out_dim,
};
use linalg::{matmul_nn, matmul_nt, matmul_tn};

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    /// a[m×k] · b[n×k]ᵀ
    MatMulNT(Var, Var),
    GatherRows {
        table: Var,
        ids: Arc<Vec<usize>>,
    },
    GatherFlat {
        src: Var,
        ids: Arc<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: T,
    },
    Gelu(Var),
    SumAll(Var),
    MeanRows(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<Option<bool>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AdaptivePool {
        x: Var,
        oh: usize,
        ow: usize,
    },
    Reshape(Var),
}

pub struct Graph<T: Scalar> {
    data: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Var>,
    ran_backward: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            data: Vec::new(),
            shapes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.data.push(data);
        self.shapes.push(shape);
        self.ops.push(op);
        self.grads.push(None);
        Var(self.data.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.data[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> T {
        assert_eq!(self.data[v.0].len(), 1, "scalar_value on non-scalar");
        self.data[v.0][0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shapes[v.0].clone(), self.data[v.0].clone())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.shapes[v.0];
        assert_eq!(s.len(), 2, "expected rank-2 tensor, got shape {s:?}");
        (s[0], s[1])
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>) -> Var {
        self.push(data, shape, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.push(vec![v], vec![1], Op::Leaf)
    }

    /// Bind a named parameter from the store as a leaf. Binding the same
    /// name twice returns the same node, so shared parameters (e.g. bias
    /// tables used by every layer) accumulate gradient across all uses.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not found in store"));
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shapes[a.0], self.shapes[b.0],
            "add: shape mismatch {:?} vs {:?}",
            self.shapes[a.0], self.shapes[b.0]
        );
        let data = self.data[a.0]
            .iter()
            .zip(&self.data[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(data, self.shapes[a.0].clone(), Op::Add(a, b))
    }

    /// Broadcast add of a row vector `b[n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.rows_cols(a);
        assert_eq!(self.data[b.0].len(), n, "add_row: row width mismatch");
        let mut data = self.data[a.0].clone();
        for i in 0..m {
            for (x, &y) in data[i * n..(i + 1) * n].iter_mut().zip(&self.data[b.0]) {
                *x += y;
            }
        }
        self.push(data, self.shapes[a.0].clone(), Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shapes[a.0], self.shapes[b.0],
            "mul: shape mismatch {:?} vs {:?}",
            self.shapes[a.0], self.shapes[b.0]
        );
        let data = self.data[a.0]
            .iter()
            .zip(&self.data[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(data, self.shapes[a.0].clone(), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data[a.0].iter().map(|&x| x * c).collect();
        self.push(data, self.shapes[a.0].clone(), Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let data = self.data[a.0]
            .iter()
            .map(|&x| {
                let inner = c * (x + k * x * x * x);
                half * x * (T::one() + inner.tanh())
            })
            .collect();
        self.push(data, self.shapes[a.0].clone(), Op::Gelu(a))
    }

    // ---- matrix ops --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2} disagree");
        let mut data = vec![T::zero(); m * n];
        matmul_nn(&self.data[a.0], &self.data[b.0], m, k, n, &mut data);
        self.push(data, vec![m, n], Op::MatMul(a, b))
    }

    /// a[m×k] · b[n×k]ᵀ → [m×n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul_nt: inner dimensions {k} vs {k2} disagree");
        let mut data = vec![T::zero(); m * n];
        matmul_nt(&self.data[a.0], &self.data[b.0], m, k, n, &mut data);
        self.push(data, vec![m, n], Op::MatMulNT(a, b))
    }

    /// x·w + b with w[k×n], b[n].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    // ---- gathers and layout ------------------------------------------

    /// Row lookup: out[r] = table[ids[r]] for a `[v×w]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, w) = self.rows_cols(table);
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            assert!(id < v, "gather_rows: id {id} out of range (table rows {v})");
            data.extend_from_slice(&self.data[table.0][id * w..(id + 1) * w]);
        }
        self.push(
            data,
            vec![ids.len(), w],
            Op::GatherRows {
                table,
                ids: Arc::new(ids.to_vec()),
            },
        )
    }

    /// Flat-index lookup with an arbitrary output shape.
    pub fn gather_flat(&mut self, src: Var, ids: &[usize], out_shape: Vec<usize>) -> Var {
        assert_eq!(out_shape.iter().product::<usize>(), ids.len());
        let n = self.data[src.0].len();
        let data = ids
            .iter()
            .map(|&id| {
                assert!(id < n, "gather_flat: id {id} out of range (len {n})");
                self.data[src.0][id]
            })
            .collect();
        self.push(
            data,
            out_shape,
            Op::GatherFlat {
                src,
                ids: Arc::new(ids.to_vec()),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let w = self.rows_cols(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, w2) = self.rows_cols(p);
            assert_eq!(w, w2, "concat_rows: column width mismatch");
            data.extend_from_slice(&self.data[p.0]);
            rows += m;
        }
        self.push(data, vec![rows, w], Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (m2, w) = self.rows_cols(p);
                assert_eq!(m, m2, "concat_cols: row count mismatch");
                w
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..m {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.data[p.0][i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(data, vec![m, total], Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let (m, w) = self.rows_cols(x);
        assert!(start + count <= m, "slice_rows: range out of bounds");
        let data = self.data[x.0][start * w..(start + count) * w].to_vec();
        self.push(data, vec![count, w], Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let (m, w) = self.rows_cols(x);
        assert!(start + width <= w, "slice_cols: range out of bounds");
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&self.data[x.0][i * w + start..i * w + start + width]);
        }
        self.push(data, vec![m, width], Op::SliceCols { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data[x.0].len(),
            "reshape: element count mismatch"
        );
        self.push(self.data[x.0].clone(), shape, Op::Reshape(x))
    }

    // ---- normalization and reductions --------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.rows_cols(x);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            softmax_row(
                &self.data[x.0][i * n..(i + 1) * n],
                &mut data[i * n..(i + 1) * n],
            );
        }
        self.push(data, vec![m, n], Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let (m, n) = self.rows_cols(x);
        assert_eq!(self.data[gain.0].len(), n, "layer_norm: gain width");
        assert_eq!(self.data[bias.0].len(), n, "layer_norm: bias width");
        let mut data = vec![T::zero(); m * n];
        let inv_n = T::one() / T::from_usize(n);
        for i in 0..m {
            let row = &self.data[x.0][i * n..(i + 1) * n];
            let mean = row.iter().cloned().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) *(v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                data[i * n + j] = self.data[gain.0][j] * xhat + self.data[bias.0][j];
            }
        }
        self.push(data, vec![m, n], Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data[x.0].iter().cloned().sum();
        self.push(vec![s], vec![1], Op::SumAll(x))
    }

    /// Column means of a rank-2 tensor: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.rows_cols(x);
        assert!(m > 0, "mean_rows on empty tensor");
        let inv_m = T::one() / T::from_usize(m);
        let mut data = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                data[j] += self.data[x.0][i * n + j];
            }
        }
        for d in data.iter_mut() {
            *d *= inv_m;
        }
        self.push(data, vec![1, n], Op::MeanRows(x))
    }

    // ---- losses -------------------------------------------------------

    /// Mean cross-entropy over rows with `Some(target)`; rows labeled `None`
    /// are excluded from both the loss and the gradient. Returns the scalar
    /// loss and the number of labeled rows (0 means the loss is a detached
    /// zero constant).
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> (Var, usize) {
        let (m, v) = self.rows_cols(logits);
        assert_eq!(targets.len(), m, "cross_entropy_rows: target count");
        let count = targets.iter().flatten().count();
        if count == 0 {
            return (self.scalar(T::zero()), 0);
        }
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                assert!(t < v, "cross_entropy_rows: target {t} out of range");
                let row = &self.data[logits.0][i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
                total += lse - row[t];
            }
        }
        let loss = total / T::from_usize(count);
        let var = self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        );
        (var, count)
    }

    /// Mean binary cross-entropy with logits over `Some(label)` entries of a
    /// flat logit vector. Numerically stable formulation.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[Option<bool>]) -> (Var, usize) {
        let n = self.data[logits.0].len();
        assert_eq!(targets.len(), n, "bce_with_logits: target count");
        let count = targets.iter().flatten().count();
        if count == 0 {
            return (self.scalar(T::zero()), 0);
        }
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(y) = *t {
                let x = self.data[logits.0][i];
                let y = if y { T::one() } else { T::zero() };
                // max(x,0) - x*y + ln(1 + exp(-|x|))
                total += x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
            }
        }
        let loss = total / T::from_usize(count);
        let var = self.push(
            vec![loss],
            vec![1],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        );
        (var, count)
    }

    // ---- convolution ---------------------------------------------------

    /// 2D convolution over `x[c_in×h×w]` with weights `[c_out×c_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shapes[x.0].clone();
        let ws = self.shapes[w.0].clone();
        assert_eq!(xs.len(), 3, "conv2d: input must be [c,h,w]");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [co,ci,kh,kw]");
        assert_eq!(xs[0], ws[1], "conv2d: channel mismatch");
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(self.data[b.0].len(), c_out, "conv2d: bias length");
        let oh = conv2d_out_dim(h, kh, stride, pad);
        let ow = conv2d_out_dim(wd, kw, stride, pad);
        let mut data = vec![T::zero(); c_out * oh * ow];
        conv2d_forward(
            &self.data[x.0],
            &self.data[w.0],
            &self.data[b.0],
            c_in,
            h,
            wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            &mut data,
        );
        self.push(data, vec![c_out, oh, ow], Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xs = self.shapes[x.0].clone();
        assert_eq!(xs.len(), 3, "adaptive_avg_pool: input must be [c,h,w]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        assert!(oh <= h && ow <= w, "adaptive_avg_pool: output larger than input");
        let mut data = vec![T::zero(); c * oh * ow];
        adaptive_pool_forward(&self.data[x.0], c, h, w, oh, ow, &mut data);
        self.push(data, vec![c, oh, ow], Op::AdaptivePool { x, oh, ow })
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every node reachable from the loss
    /// receives a gradient buffer; leaves bound as parameters can then be
    /// exported with [`Graph::export_grads`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.data[loss.0].len(),
            1,
            "backward: loss must be a scalar"
        );
        assert!(!self.ran_backward, "backward already ran on this graph");
        self.ran_backward = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].clone().unwrap();
            let op = self.ops[i].clone();
            self.propagate(i, &op, &g);
        }
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<T> {
        let len = self.data[v.0].len();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn propagate(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (ga, &gi) in self.grad_buf(*a).iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, &gi) in self.grad_buf(*b).iter_mut().zip(g) {
                    *gb += gi;
                }
            }
            Op::AddRow(a, b) => {
                let n = self.data[b.0].len();
                for (ga, &gi) in self.grad_buf(*a).iter_mut().zip(g) {
                    *ga += gi;
                }
                let gb = self.grad_buf(*b);
                for (idx, &gi) in g.iter().enumerate() {
                    gb[idx % n] += gi;
                }
            }
            Op::Mul(a, b) => {
                let bd = self.data[b.0].clone();
                for ((ga, &gi), &bv) in self.grad_buf(*a).iter_mut().zip(g).zip(&bd) {
                    *ga += gi * bv;
                }
                let ad = self.data[a.0].clone();
                for ((gb, &gi), &av) in self.grad_buf(*b).iter_mut().zip(g).zip(&ad) {
                    *gb += gi * av;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                for (ga, &gi) in self.grad_buf(*a).iter_mut().zip(g) {
                    *ga += gi * c;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                let bd = &self.data[b.0];
                let mut ga = vec![T::zero(); m * k];
                matmul_nt(g, bd, m, n, k, &mut ga);
                let ad = &self.data[a.0];
                let mut gb = vec![T::zero(); k * n];
                matmul_tn(ad, g, m, k, n, &mut gb);
                self.grad_buf(*a).iter_mut().zip(&ga).for_each(|(x, &y)| *x += y);
                self.grad_buf(*b).iter_mut().zip(&gb).for_each(|(x, &y)| *x += y);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).0;
                let bd = &self.data[b.0];
                let mut ga = vec![T::zero(); m * k];
                matmul_nn(g, bd, m, n, k, &mut ga);
                let ad = &self.data[a.0];
                let mut gb = vec![T::zero(); n * k];
                matmul_tn(g, ad, m, n, k, &mut gb);
                self.grad_buf(*a).iter_mut().zip(&ga).for_each(|(x, &y)| *x += y);
                self.grad_buf(*b).iter_mut().zip(&gb).for_each(|(x, &y)| *x += y);
            }
            Op::GatherRows { table, ids } => {
                let w = self.rows_cols(*table).1;
                let gt = self.grad_buf(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        gt[id * w + j] += g[r * w + j];
                    }
                }
            }
            Op::GatherFlat { src, ids } => {
                let gs = self.grad_buf(*src);
                for (k, &id) in ids.iter().enumerate() {
                    gs[id] += g[k];
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data[p.0].len();
                    for (gp, &gi) in self.grad_buf(p).iter_mut().zip(&g[off..off + len]) {
                        *gp += gi;
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.rows_cols(parts[0]).0;
                let total: usize = parts.iter().map(|&p| self.rows_cols(p).1).sum();
                let mut off = 0;
                for &p in parts {
                    let w = self.rows_cols(p).1;
                    let gp = self.grad_buf(p);
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let w = self.rows_cols(*x).1;
                let gx = self.grad_buf(*x);
                for (idx, &gi) in g.iter().enumerate() {
                    gx[start * w + idx] += gi;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, width) = {
                    let s = &self.shapes[node];
                    (s[0], s[1])
                };
                let w = self.rows_cols(*x).1;
                let start = *start;
                let gx = self.grad_buf(*x);
                for i in 0..rows {
                    for j in 0..width {
                        gx[i * w + start + j] += g[i * width + j];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = self.rows_cols(*x);
                let y = &self.data[node];
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot = yrow
                        .iter()
                        .zip(grow)
                        .map(|(&yv, &gv)| yv * gv)
                        .sum::<T>();
                    for j in 0..n {
                        gx[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.grad_buf(*x).iter_mut().zip(&gx).for_each(|(a, &b)| *a += b);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = self.rows_cols(*x);
                let inv_n = T::one() / T::from_usize(n);
                let xd = self.data[x.0].clone();
                let gaind = self.data[gain.0].clone();
                let mut gx = vec![T::zero(); m * n];
                let mut ggain = vec![T::zero(); n];
                let mut gbias = vec![T::zero(); n];
                for i in 0..m {
                    let row = &xd[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mean = row.iter().cloned().sum::<T>() * inv_n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
                    let rstd = T::one() / (var + *eps).sqrt();
                    let mut mean_gxhat = T::zero();
                    let mut mean_gxhat_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * rstd;
                        let gxhat = grow[j] * gaind[j];
                        ggain[j] += grow[j] * xhat;
                        gbias[j] += grow[j];
                        mean_gxhat += gxhat;
                        mean_gxhat_xhat += gxhat * xhat;
                    }
                    mean_gxhat *= inv_n;
                    mean_gxhat_xhat *= inv_n;
                    for j in 0..n {
                        let xhat = (row[j] - mean) * rstd;
                        let gxhat = grow[j] * gaind[j];
                        gx[i * n + j] = rstd * (gxhat - mean_gxhat - xhat * mean_gxhat_xhat);
                    }
                }
                self.grad_buf(*x).iter_mut().zip(&gx).for_each(|(a, &b)| *a += b);
                self.grad_buf(*gain)
                    .iter_mut()
                    .zip(&ggain)
                    .for_each(|(a, &b)| *a += b);
                self.grad_buf(*bias)
                    .iter_mut()
                    .zip(&gbias)
                    .for_each(|(a, &b)| *a += b);
            }
            Op::Gelu(x) => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_K);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let xd = self.data[x.0].clone();
                let gx = self.grad_buf(*x);
                for (idx, (&xv, &gi)) in xd.iter().zip(g).enumerate() {
                    let inner = c * (xv + k * xv * xv * xv);
                    let t = inner.tanh();
                    let dinner = c * (T::one() + three * k * xv * xv);
                    let dy = half * (T::one() + t) + half * xv * (T::one() - t * t) * dinner;
                    gx[idx] += gi * dy;
                }
            }
            Op::SumAll(x) => {
                let gi = g[0];
                for gx in self.grad_buf(*x).iter_mut() {
                    *gx += gi;
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.rows_cols(*x);
                let inv_m = T::one() / T::from_usize(m);
                let gx = self.grad_buf(*x);
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j] * inv_m;
                    }
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (_, v) = self.rows_cols(*logits);
                let count = T::from_usize(targets.iter().flatten().count());
                let gi = g[0] / count;
                let ld = self.data[logits.0].clone();
                let gl = self.grad_buf(*logits);
                let mut probs = vec![T::zero(); v];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        softmax_row(&ld[i * v..(i + 1) * v], &mut probs);
                        for j in 0..v {
                            let indicator = if j == t { T::one() } else { T::zero() };
                            gl[i * v + j] += gi * (probs[j] - indicator);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let count = T::from_usize(targets.iter().flatten().count());
                let gi = g[0] / count;
                let ld = self.data[logits.0].clone();
                let gl = self.grad_buf(*logits);
                for (i, t) in targets.iter().enumerate() {
                    if let Some(y) = *t {
                        let y = if y { T::one() } else { T::zero() };
                        let sig = T::one() / (T::one() + (-ld[i]).exp());
                        gl[i] += gi * (sig - y);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shapes[x.0].clone();
                let ws = self.shapes[w.0].clone();
                let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let xd = self.data[x.0].clone();
                let wd_data = self.data[w.0].clone();
                let mut gx = vec![T::zero(); xd.len()];
                let mut gw = vec![T::zero(); wd_data.len()];
                let mut gb = vec![T::zero(); c_out];
                conv2d_backward(
                    &xd, &wd_data, g, c_in, h, wd, c_out, kh, kw, *stride, *pad, &mut gx, &mut gw,
                    &mut gb,
                );
                self.grad_buf(*x).iter_mut().zip(&gx).for_each(|(a, &b)| *a += b);
                self.grad_buf(*w).iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
                self.grad_buf(*b).iter_mut().zip(&gb).for_each(|(a, &c)| *a += c);
            }
            Op::AdaptivePool { x, oh, ow } => {
                let xs = self.shapes[x.0].clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                adaptive_pool_backward(g, c, h, w, *oh, *ow, self.grad_buf(*x));
            }
            Op::Reshape(x) => {
                for (gx, &gi) in self.grad_buf(*x).iter_mut().zip(g) {
                    *gx += gi;
                }
            }
        }
    }

    /// Accumulate gradients of bound parameters into the store's grad
    /// buffers. Parameters never bound (or bound but unreachable from the
    /// loss) keep their existing (zero-initialized) gradients.
    pub fn export_grads(&self, store: &mut ParamStore<T>) {
        for (name, var) in &self.params {
            let t = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("parameter {name:?} disappeared from store"));
            t.ensure_grad();
            if let Some(g) = self.grads[var.0].as_deref() {
                t.accumulate_grad(g);
            }
        }
    }
}
