//! Dense row-major tensors and the scalar trait shared by the f32 training
//! path and the f64 gradient-checking path.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign, NumCast};

/// Floating-point element type for all model math.
///
/// Training runs in `f32`; gradient checking instantiates the identical code
/// in `f64` because central finite differences are too noisy in single
/// precision.
pub trait Scalar:
    Float + NumAssign + NumCast + Copy + Default + Debug + Display + Send + Sync + Sum + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 -> Scalar conversion")
    }

    fn from_f32(v: f32) -> Self {
        <Self as NumCast>::from(v).expect("f32 -> Scalar conversion")
    }

    fn from_usize(v: usize) -> Self {
        <Self as NumCast>::from(v).expect("usize -> Scalar conversion")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("Scalar -> f64 conversion")
    }

    fn to_f32(self) -> f32 {
        <f32 as NumCast>::from(self).expect("Scalar -> f32 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense multi-dimensional array in row-major order, with an optional
/// gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.shape.len(), 2, "row() requires a rank-2 tensor");
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Allocate (or keep) a zero gradient buffer of matching shape.
    pub fn ensure_grad(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(T::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulate `delta` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self.ensure_grad();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// Convert element type, dropping any gradient buffer.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        )
    }

    /// Numerically-stabilized softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&self) -> Tensor<T> {
        assert_eq!(self.shape.len(), 2, "softmax_rows requires a rank-2 tensor");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            softmax_row(&self.data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// Softmax of one row with row-max subtraction; rejects non-finite input.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    assert!(
        row.iter().all(|v| v.is_finite()),
        "softmax input must be finite"
    );
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
