use serde::{Deserialize, Serialize};

use super::NumericsError;
use crate::scalar::{max_of, sum, Scalar};

/// Dense row-major n-dimensional array.
///
/// Every extent is at least one and `shape.iter().product() == data.len()`.
/// A scalar is represented with shape `[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidShape { shape, len: data.len() });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from a shape the caller has already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "tensor must hold at least one value");
        Self::from_parts(vec![data.len()], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T, NumericsError> {
        if self.data.len() != 1 {
            return Err(NumericsError::NotScalar { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for shape {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "zip_map",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericsError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        sum(self.data.iter().copied())
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| max_of(m, v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference, or an error on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T, NumericsError> {
        Ok(self.zip_map(other, |a, b| (a - b).abs())?.max_abs())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Matrix product of a `[.., k]` tensor with a `[k, m]` matrix.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, NumericsError> {
        if rhs.rank() != 2 || self.last_dim() != rhs.shape[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let k = rhs.shape[0];
        let m = rhs.shape[1];
        let rows = self.len() / k;
        let mut out = vec![T::zero(); rows * m];
        kernels::matmul(&self.data, &rhs.data, &mut out, rows, k, m);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = m;
        Ok(Self::from_parts(shape, out))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self, NumericsError> {
        if self.rank() != 2 {
            return Err(NumericsError::InvalidShape { shape: self.shape.clone(), len: self.len() });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self::from_fn(&[c, r], |idx| {
            let (j, i) = (idx / r, idx % r);
            self.data[i * c + j]
        }))
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(v: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumericsError> {
    if axis >= v.rank() {
        return Err(NumericsError::AxisOutOfRange { axis, rank: v.rank() });
    }
    let (outer, len, inner) = lanes(v.shape(), axis);
    let mut out = v.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            kernels::softmax_strided(&mut out, base, len, inner);
        }
    }
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

pub(crate) mod kernels {
    use crate::scalar::{max_of, Scalar};

    /// out[rows, m] = a[rows, k] · b[k, m]
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
        for r in 0..rows {
            let o = &mut out[r * m..(r + 1) * m];
            let ar = &a[r * k..(r + 1) * k];
            for (p, &av) in ar.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let br = &b[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(br) {
                    *ov += av * bv;
                }
            }
        }
    }

    /// out[k, m] += a[rows, k]ᵀ · g[rows, m]
    pub fn matmul_at_b<T: Scalar>(a: &[T], g: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
        for r in 0..rows {
            let ar = &a[r * k..(r + 1) * k];
            let gr = &g[r * m..(r + 1) * m];
            for (p, &av) in ar.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let o = &mut out[p * m..(p + 1) * m];
                for (ov, &gv) in o.iter_mut().zip(gr) {
                    *ov += av * gv;
                }
            }
        }
    }

    /// out[rows, k] += g[rows, m] · b[k, m]ᵀ
    pub fn matmul_a_bt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
        for r in 0..rows {
            let gr = &g[r * m..(r + 1) * m];
            let o = &mut out[r * k..(r + 1) * k];
            for (p, ov) in o.iter_mut().enumerate() {
                let br = &b[p * m..(p + 1) * m];
                let mut acc = T::zero();
                for (&gv, &bv) in gr.iter().zip(br) {
                    acc += gv * bv;
                }
                *ov += acc;
            }
        }
    }

    pub fn softmax_strided<T: Scalar>(x: &mut [T], base: usize, len: usize, stride: usize) {
        let mut max = T::neg_infinity();
        for j in 0..len {
            max = max_of(max, x[base + j * stride]);
        }
        let mut total = T::zero();
        for j in 0..len {
            let e = (x[base + j * stride] - max).exp();
            x[base + j * stride] = e;
            total += e;
        }
        for j in 0..len {
            x[base + j * stride] /= total;
        }
    }
}
