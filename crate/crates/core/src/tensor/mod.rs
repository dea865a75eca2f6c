//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training runs in 32-bit; every verification suite switches to 64-bit by
//! instantiating the same code at `f64`.

mod io;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use io::{read_tensor_file, write_tensor_file, AnyTensor, Dtype};

/// Scalar element type of a [`Tensor`].
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Bit pattern widened to 64 bits, for bitwise comparisons.
    fn bits(self) -> u64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Shorthand for a literal converted into `T`.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| lit(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::dim(format!("expected a 4-D tensor, got shape {s:?}"))),
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// The `i`-th slice along the leading axis, as its own tensor.
    pub fn index_outer(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Batch("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!(
                    "cannot stack shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Column `j` of a 2-D tensor as an `n×1` tensor.
    pub fn column(&self, j: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if j >= c {
            return Err(Error::dim(format!("column {j} out of range for {c} columns")));
        }
        Ok(Tensor {
            shape: vec![r, 1],
            data: (0..r).map(|i| self.data[i * c + j]).collect(),
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        self.map(|v| leaky(v, slope))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot add shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

#[inline]
pub(crate) fn leaky<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for row-major `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for row-major `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Per-channel spatial maximum of a `C×H×W` map.
///
/// Returns the pooled vector together with the `(row, col)` of each
/// channel's maximum. Ties resolve to the first position in row-major order.
pub fn global_max_pool<T: Real>(fmaps: &Tensor<T>) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
    let (c, h, w) = match fmaps.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::dim(format!("expected C×H×W feature maps, got {s:?}"))),
    };
    let hw = h * w;
    let mut pooled = Vec::with_capacity(c);
    let mut argmax = Vec::with_capacity(c);
    for ch in 0..c {
        let (idx, val) = argmax_slice(&fmaps.data()[ch * hw..(ch + 1) * hw]);
        pooled.push(val);
        argmax.push((idx / w, idx % w));
    }
    Ok((Tensor::new(vec![c], pooled)?, argmax))
}

pub(crate) fn argmax_slice<T: Real>(xs: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut best_val = xs[0];
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    (best, best_val)
}
