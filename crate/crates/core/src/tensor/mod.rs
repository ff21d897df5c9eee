//! Dense NCHW tensors and a tape-based reverse-mode differentiation kernel.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Tape`] and addressed through copyable [`Var`] handles. Every kernel is
//! generic over [`Real`] so the same code paths run in `f32` for training and
//! in `f64` for tight gradient checks.

pub mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

use crate::error::{ensure, Result};

pub use tape::{LossKind, Tape, Var};

/// Floating-point element type of a tensor.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = a · b + beta · c` on row-major matrices. `a` is `m×k` (or `k×m`
    /// when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // (row stride, col stride) of the logical rows×cols matrix
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: slice lengths cover every addressed element (asserted above)
                // and `c` does not alias `a` or `b` by the borrow rules.
                unsafe {
                    $gemm(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major N-dimensional array. Rank-4 tensors use (batch, channel, height,
/// width) layout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {:?} needs {} values, got {}",
            shape,
            numel,
            data.len()
        );
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Interprets the tensor as (batch, channel, height, width).
    pub fn dims4(&self) -> Result<[usize; 4]> {
        ensure!(self.shape.len() == 4, "expected a rank-4 tensor, got shape {:?}", self.shape);
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channel range `[start, start + len)` out of a rank-4 tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [b, c, h, w] = self.dims4()?;
        ensure!(start + len <= c, "channel range {}..{} out of {}", start, start + len, c);
        let plane = h * w;
        let mut out = Vec::with_capacity(b * len * plane);
        for n in 0..b {
            let base = (n * c + start) * plane;
            out.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Self { shape: vec![b, len, h, w], data: out })
    }

    /// Index of element (n, c, y, x) in a rank-4 tensor.
    #[inline]
    pub fn offset4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Argmax positions recorded by a 2×2/stride-2 max pooling.
///
/// For every pooled element the window-local offset `dy * 2 + dx` of the
/// maximum is kept, so every index addresses an input element inside its own
/// window by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    offsets: Vec<u8>,
}

impl PoolIndices {
    pub(crate) fn new(input_shape: [usize; 4], offsets: Vec<u8>) -> Self {
        debug_assert_eq!(offsets.len(), input_shape.iter().product::<usize>() / 4);
        debug_assert!(offsets.iter().all(|&o| o < 4));
        Self { input_shape, offsets }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 4] {
        let [b, c, h, w] = self.input_shape;
        [b, c, h / 2, w / 2]
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }

    /// Flat input index addressed by pooled element `out_index`.
    #[inline]
    pub fn input_index(&self, out_index: usize) -> usize {
        let [_, _, h, w] = self.input_shape;
        let (ow, oh) = (w / 2, h / 2);
        let ox = out_index % ow;
        let oy = (out_index / ow) % oh;
        let plane = out_index / (ow * oh);
        let off = self.offsets[out_index] as usize;
        plane * h * w + (2 * oy + off / 2) * w + 2 * ox + off % 2
    }
}
