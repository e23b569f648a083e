//! Dense tensors and the hand-written forward/backward kernels used by the
//! segmentation network.
//!
//! Tensors are row-major with the last axis fastest. Network tensors are
//! rank 5 in `[N, C, D, H, W]` order. Every kernel is a free function over
//! borrowed inputs; layers that need saved activations for the backward pass
//! return them explicitly instead of recording a graph.

use std::fmt;

use thiserror::Error;

pub mod activation;
pub mod conv;
mod direct;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod pool;
pub mod verify;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, Activation};
pub use conv::{
    conv3d_backward, conv3d_forward, conv3d_transpose_backward, conv3d_transpose_forward,
    ConvGrads, Padding,
};
pub use gradcheck::{gradient_check, GradCheckEntry, GradCheckReport};
pub use loss::{dice_loss, DiceLoss, DiceOutput};
pub use norm::{batchnorm3d, batchnorm3d_backward, BatchNormCache, BnMode, RunningStats};
pub use optim::{adam_step, AdamConfig, AdamState, Parameter};
pub use pool::{maxpool3d_backward, maxpool3d_forward, MaxPoolOutput};

/// Errors raised by tensor kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero-sized tensor: {0}")]
    ZeroSized(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point element type of a tensor. Implemented for `f32` (training)
/// and `f64` (gradient verification).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

// Bounds are checked by the callers in `conv`; these wrappers only assert the
// slices are large enough for the strided extents they are handed.
fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        last >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, csc);
        // SAFETY: extents verified above; the slices do not alias.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, csc);
        // SAFETY: extents verified above; the slices do not alias.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Dense row-major tensor of rank 1 to 5.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 5 {
        return Err(TensorError::InvalidArgument(format!(
            "rank must be 1..=5, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(TensorError::ZeroSized(format!("shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} holds {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
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

    /// Shape as `[N, C, D, H, W]`, rejecting any other rank.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice()).map_err(|_| {
            TensorError::ShapeMismatch(format!("expected rank 5, got shape {:?}", self.shape))
        })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64_lossy() * b.to_f64_lossy())
            .sum())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Concatenates rank-5 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("nothing to concatenate".into()))?
            .dims5()?;
        let mut channels = 0;
        for p in parts {
            let d = p.dims5()?;
            if d[0] != first[0] || d[2..] != first[2..] {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat {:?} with {:?}",
                    first, d
                )));
            }
            channels += d[1];
        }
        let [n, _, dd, h, w] = first;
        let vol = dd * h * w;
        let mut data = Vec::with_capacity(n * channels * vol);
        for b in 0..n {
            for p in parts {
                let c = p.shape[1];
                data.extend_from_slice(&p.data[b * c * vol..(b + 1) * c * vol]);
            }
        }
        Self::new(&[n, channels, dd, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: splits along channels into
    /// pieces of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        let [n, c, dd, h, w] = self.dims5()?;
        if sizes.iter().sum::<usize>() != c {
            return Err(TensorError::ShapeMismatch(format!(
                "split sizes {sizes:?} do not sum to {c} channels"
            )));
        }
        let vol = dd * h * w;
        let mut out: Vec<Vec<T>> = sizes
            .iter()
            .map(|&s| Vec::with_capacity(n * s * vol))
            .collect();
        for b in 0..n {
            let mut start = b * c * vol;
            for (piece, &s) in out.iter_mut().zip(sizes) {
                piece.extend_from_slice(&self.data[start..start + s * vol]);
                start += s * vol;
            }
        }
        out.into_iter()
            .zip(sizes)
            .map(|(data, &s)| Self::new(&[n, s, dd, h, w], data))
            .collect()
    }

    /// Stacks rank-5 tensors with batch size 1 into one batch.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("empty batch".into()))?
            .dims5()?;
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        let mut n = 0;
        for it in items {
            let d = it.dims5()?;
            if d[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch(format!(
                    "batch item {:?} vs {:?}",
                    d, first
                )));
            }
            n += d[0];
            data.extend_from_slice(&it.data);
        }
        Self::new(&[n, first[1], first[2], first[3], first[4]], data)
    }

    /// Extracts sample `index` of a rank-5 tensor as a batch of one.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let [n, c, d, h, w] = self.dims5()?;
        if index >= n {
            return Err(TensorError::InvalidArgument(format!(
                "batch index {index} out of {n}"
            )));
        }
        let len = c * d * h * w;
        Self::new(
            &[1, c, d, h, w],
            self.data[index * len..(index + 1) * len].to_vec(),
        )
    }
}
