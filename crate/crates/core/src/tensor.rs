//! Dense, immutable tensors of up to four axes.
//!
//! Axes follow the batch/channels/height/width convention; lower-rank tensors
//! use the leading axes of that order only by convention (a heatmap is `[U, V]`).
//! Storage is a flat row-major buffer behind an `Arc`, so cloning is cheap and
//! tensors can be shared freely across threads.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Scalar type the engine computes in. Training and inference use `f32`;
/// `f64` exists for finite-difference gradient checks.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::InvalidShape(format!(
            "rank must be between 1 and {MAX_RANK}, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "all extents must be >= 1, got {dims:?}"
        )));
    }
    Ok(dims.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let len = check_dims(dims)?;
        Self::new(dims, vec![value; len])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_dims(dims)?;
        Self::new(dims, (0..len).map(&mut f).collect())
    }

    /// A 1-element tensor of rank 1.
    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Takes the buffer without copying when this is the only handle to it.
    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// Dims as `[N, C, H, W]`; fails unless the tensor has rank 4.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.dims.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape {
                op,
                axis: "rank",
                expected: 4,
                actual: self.dims.len(),
            }),
        }
    }

    /// Dims as `[H, W]`; fails unless the tensor has rank 2.
    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.dims.as_slice() {
            &[h, w] => Ok([h, w]),
            _ => Err(Error::Shape {
                op,
                axis: "rank",
                expected: 2,
                actual: self.dims.len(),
            }),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != self.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Element at a multi-index; panics on rank or bounds errors.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn min_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::infinity(), |a, b| if b < a { b } else { a })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; panics on mismatched dims.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims, other.dims, "max_abs_diff dims");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }

    /// Channel `c` of batch item `n` as a `[H, W]` tensor.
    pub fn channel_plane(&self, n: usize, c: usize) -> Result<Self> {
        let [nn, cc, h, w] = self.dims4("channel_plane")?;
        if n >= nn {
            return Err(Error::Shape {
                op: "channel_plane",
                axis: "batch",
                expected: nn,
                actual: n,
            });
        }
        if c >= cc {
            return Err(Error::Shape {
                op: "channel_plane",
                axis: "channel",
                expected: cc,
                actual: c,
            });
        }
        let start = (n * cc + c) * h * w;
        Self::new(&[h, w], self.data[start..start + h * w].to_vec())
    }

    /// Stacks rank-4 tensors with batch 1 along the batch axis.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims4("stack_batch")?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for item in items {
            let [n, ci, hi, wi] = item.dims4("stack_batch")?;
            for (axis, expected, actual) in
                [("batch", 1, n), ("channel", c, ci), ("height", h, hi), ("width", w, wi)]
            {
                if expected != actual {
                    return Err(Error::Shape {
                        op: "stack_batch",
                        axis,
                        expected,
                        actual,
                    });
                }
            }
            data.extend_from_slice(item.data());
        }
        Self::new(&[items.len(), c, h, w], data)
    }
}
