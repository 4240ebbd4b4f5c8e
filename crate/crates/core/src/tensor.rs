//! Dense row-major 2-D numerics shared by every other module.
//!
//! Everything here is generic over [`Real`] so the same code path runs in
//! `f32` for training and inference and in `f64` for finite-difference
//! gradient checks. All loops have a fixed accumulation order, which makes
//! results bitwise reproducible.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Scalar element type. Implemented for `f32` and `f64`.
pub trait Real: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Mismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected length {expected}, got {actual}")]
    Length {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
}

/// Row-major matrix. Vectors are stored as `1 × n`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a tensor, rejecting a wrong element count or any NaN/Inf.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::Length {
                op: "from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(ShapeError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(ShapeError::Length {
                    op: "from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(data: Vec<T>) -> Result<Self, ShapeError> {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, ShapeError> {
        if self.cols != other.rows {
            return Err(ShapeError::Mismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Self) -> Result<Self, ShapeError> {
        if self.cols != other.cols {
            return Err(ShapeError::Mismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Self::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out.data[i * n + j] = dot(a_row, &other.data[j * k..(j + 1) * k]);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn transposed_matmul(&self, other: &Self) -> Result<Self, ShapeError> {
        if self.rows != other.rows {
            return Err(ShapeError::Mismatch {
                op: "transposed_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let o_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_row_broadcast(&mut self, bias: &Self) -> Result<(), ShapeError> {
        if bias.len() != self.cols {
            return Err(ShapeError::Length {
                op: "add_row_broadcast",
                expected: self.cols,
                actual: bias.len(),
            });
        }
        for r in 0..self.rows {
            for (x, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *x = *x + b;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), ShapeError> {
        if self.shape() != other.shape() {
            return Err(ShapeError::Mismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x = *x * s;
        }
    }

    /// Column sums as a `1 × cols` tensor.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + x;
            }
        }
        out
    }

    /// Copies columns `start..start + width` into a new tensor.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `block` into columns `start..start + block.cols()`.
    pub fn set_column_block(&mut self, start: usize, block: &Self) {
        for r in 0..self.rows {
            self.row_mut(r)[start..start + block.cols].copy_from_slice(block.row(r));
        }
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Row-wise numerically stable softmax. Entries equal to `-inf` get weight 0.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !max.is_finite() {
        // fully masked row: nothing to attend to
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Normalized intermediate `(x − μ)/sqrt(σ² + eps)` and the inverse std used.
pub fn normalize<T: Real>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = x
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    let denom = (var + eps).sqrt();
    let inv = if denom > T::zero() {
        T::one() / denom
    } else {
        T::zero()
    };
    (x.iter().map(|&v| (v - mean) * inv).collect(), inv)
}

/// `gamma ⊙ (x − μ)/sqrt(σ² + eps) + beta` with population variance.
///
/// `eps` may be 0; a zero-variance input then normalizes to all zeros.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>, ShapeError> {
    if x.is_empty() {
        return Err(ShapeError::Invalid {
            op: "layer_norm",
            message: "empty input".into(),
        });
    }
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(ShapeError::Mismatch {
            op: "layer_norm",
            left: (x.len(), gamma.len()),
            right: (x.len(), beta.len()),
        });
    }
    if eps < T::zero() {
        return Err(ShapeError::Invalid {
            op: "layer_norm",
            message: format!("eps must be non-negative, got {eps}"),
        });
    }
    let (n, _) = normalize(x, eps);
    Ok(n.iter()
        .zip(gamma)
        .zip(beta)
        .map(|((&v, &g), &b)| g * v + b)
        .collect())
}

const GELU_GATE: f64 = 1.702;

/// Sigmoid-gated linear unit `x·σ(1.702x)`.
#[inline]
pub fn activation<T: Real>(x: T) -> T {
    x * sigmoid(T::from_f64(GELU_GATE) * x)
}

/// Derivative of [`activation`].
#[inline]
pub fn activation_grad<T: Real>(x: T) -> T {
    let a = T::from_f64(GELU_GATE);
    let s = sigmoid(a * x);
    s + a * x * s * (T::one() - s)
}

pub fn activation_map<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(activation)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let z = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::filled(3, 4, 7.5);
        assert_eq!(z.matmul(&b).unwrap(), Tensor::zeros(2, 4));
    }

    #[test]
    fn matmul_hand_expanded() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        // [1*5+2*7, 1*6+2*8; 3*5+4*7, 3*6+4*8]
        assert_eq!(a.matmul(&b).unwrap(), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(2, 3);
        let b = Tensor::<f32>::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert_eq!(
            err,
            ShapeError::Mismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = t(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = t(&[&[0.5, 1.0, 2.0], &[-1.0, 0.0, 3.0]]);
        assert_eq!(a.matmul_transposed(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        assert_eq!(a.transposed_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(matches!(
            Tensor::<f32>::from_vec(2, 2, vec![0.0; 3]),
            Err(ShapeError::Length { .. })
        ));
        assert_eq!(
            Tensor::<f32>::from_vec(1, 2, vec![0.0, f32::NAN]).unwrap_err(),
            ShapeError::NonFinite { index: 1 }
        );
    }

    #[test]
    fn layer_norm_cases() {
        let out = layer_norm(&[2.0f64; 4], &[3.0; 4], &[0.1, 0.2, 0.3, 0.4], 1e-5).unwrap();
        assert_eq!(out, vec![0.1, 0.2, 0.3, 0.4]);

        let out = layer_norm(&[1.0f64, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);

        // mean 2, population variance 2/3
        let out = layer_norm(&[1.0f64, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((out[0] + expected).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - expected).abs() < 1e-12);
        assert!((out[2] - 1.2247).abs() < 1e-4);

        assert!(layer_norm(&[1.0f32, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&t(&[&[2.0, 2.0, 2.0]]));
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax_rows(&t(&[&[0.0, 3.0f64.ln()]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-9);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-9);
    }

    #[test]
    fn activation_values() {
        assert_eq!(activation(0.0f64), 0.0);
        assert!((activation(100.0f64) - 100.0).abs() < 1e-6);
        // 1 / (1 + exp(-1.702))
        let expected = 1.0 / (1.0 + (-1.702f64).exp());
        assert!((activation(1.0f64) - expected).abs() < 1e-12);
        assert!((activation(1.0f64) - 0.84579).abs() < 1e-4);
        assert!(activation(-1000.0f32).is_finite());
    }

    #[test]
    fn activation_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (activation(x + h) - activation(x - h)) / (2.0 * h);
            assert!((fd - activation_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs())));
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e3f64..1e3, 1..12)) {
            let n = row.len();
            let s = softmax_rows(&Tensor::from_vec(1, n, row).unwrap());
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.all_finite());
        }

        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-5.0f64..5.0, 1..8), shift in -50.0f64..50.0) {
            let n = row.len();
            let a = softmax_rows(&Tensor::from_vec(1, n, row.clone()).unwrap());
            let b = softmax_rows(&Tensor::from_vec(1, n, row.iter().map(|v| v + shift).collect()).unwrap());
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn normalized_intermediate_is_centered(x in prop::collection::vec(-10.0f64..10.0, 2..32)) {
            let (n, _) = normalize(&x, 1e-5);
            let mean = n.iter().sum::<f64>() / n.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
        }

        #[test]
        fn operations_are_pure(a in small_matrix(3, 3), b in small_matrix(3, 3)) {
            prop_assert_eq!(a.matmul(&b).unwrap(), a.matmul(&b).unwrap());
            prop_assert_eq!(softmax_rows(&a), softmax_rows(&a));
            let g = vec![1.0; 3];
            let z = vec![0.0; 3];
            prop_assert_eq!(layer_norm(a.row(0), &g, &z, 1e-5).unwrap(), layer_norm(a.row(0), &g, &z, 1e-5).unwrap());
        }
    }
}
