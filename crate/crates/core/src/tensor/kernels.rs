//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! Convolutions lower to im2col + GEMM. A transposed convolution shares the
//! same column geometry with roles of input and output swapped, which is what
//! makes the two operations exact adjoints of each other.

use super::{PoolIndices, Real};

/// Column geometry relating a "large" map (conv input / deconv output) to a
/// "small" map (conv output / deconv input): `large = small * stride - pad + k`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub large_h: usize,
    pub large_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.small_h * self.small_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Gathers `large` (C×LH×LW) into columns (C·k·k × SH·SW).
pub fn im2col<T: Real>(g: &ConvGeom, large: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let src = &large[c * g.large_h * g.large_w..(c + 1) * g.large_h * g.large_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.small_h {
                    let iy = oy as isize * s - p + ky as isize;
                    let line = &mut dst[oy * g.small_w..(oy + 1) * g.small_w];
                    if iy < 0 || iy >= g.large_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.large_w..(iy as usize + 1) * g.large_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= g.large_w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into `large`; the adjoint of [`im2col`].
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], large: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut large[c * g.large_h * g.large_w..(c + 1) * g.large_h * g.large_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.small_h {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.large_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.large_w..(iy as usize + 1) * g.large_w];
                    for ox in 0..g.small_w {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.large_w as isize {
                            dst_row[ix as usize] += src[oy * g.small_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `weight` is Cout×Cin×k×k, output is B×Cout×SH×SW.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_plane = g.channels * g.large_h * g.large_w;
    let out_plane = out_channels * ncols;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let y = &mut out[n * out_plane..(n + 1) * out_plane];
        for (co, chunk) in y.chunks_mut(ncols).enumerate() {
            chunk.fill(bias[co]);
        }
        let cols_ref = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        T::gemm(out_channels, rows, ncols, weight, false, cols_ref, false, T::one(), y);
    }
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    out_channels: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_plane = g.channels * g.large_h * g.large_w;
    let out_plane = out_channels * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let dy = &grad_out[n * out_plane..(n + 1) * out_plane];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (co, chunk) in dy.chunks(ncols).enumerate() {
                gb[co] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // dW (Cout×rows) += dY (Cout×ncols) · colsᵀ
            T::gemm(out_channels, ncols, rows, dy, false, cols_ref, true, T::one(), gw);
        }
        if let Some(gx) = grad_input.as_deref_mut() {
            let gx = &mut gx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                T::gemm(rows, out_channels, ncols, weight, true, dy, false, T::one(), gx);
            } else {
                T::gemm(rows, out_channels, ncols, weight, true, dy, false, T::zero(), &mut cols);
                col2im(g, &cols, gx);
            }
        }
    }
}

/// Transposed convolution. `weight` is Cin×Cout×k×k; `g.channels` is Cout and
/// the "small" side of the geometry is the input.
pub fn deconv2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    in_channels: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_plane = in_channels * ncols;
    let out_hw = g.large_h * g.large_w;
    let out_plane = g.channels * out_hw;
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let y = &mut out[n * out_plane..(n + 1) * out_plane];
        for (co, chunk) in y.chunks_mut(out_hw).enumerate() {
            chunk.fill(bias[co]);
        }
        // cols (rows×ncols) = Wᵀ (rows×Cin) · X (Cin×ncols)
        T::gemm(rows, in_channels, ncols, weight, true, x, false, T::zero(), &mut cols);
        col2im(g, &cols, y);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    in_channels: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_plane = in_channels * ncols;
    let out_hw = g.large_h * g.large_w;
    let out_plane = g.channels * out_hw;
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..batch {
        let x = &input[n * in_plane..(n + 1) * in_plane];
        let dy = &grad_out[n * out_plane..(n + 1) * out_plane];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (co, chunk) in dy.chunks(out_hw).enumerate() {
                gb[co] += chunk.iter().copied().sum::<T>();
            }
        }
        im2col(g, dy, &mut cols);
        if let Some(gw) = grad_weight.as_deref_mut() {
            // dW (Cin×rows) += X (Cin×ncols) · colsᵀ
            T::gemm(in_channels, ncols, rows, x, false, &cols, true, T::one(), gw);
        }
        if let Some(gx) = grad_input.as_deref_mut() {
            let gx = &mut gx[n * in_plane..(n + 1) * in_plane];
            T::gemm(in_channels, rows, ncols, weight, false, &cols, false, T::one(), gx);
        }
    }
}

/// 2×2 stride-2 max pooling over a B×C×H×W buffer. Ties resolve to the first
/// window element in row-major order.
pub fn maxpool2d_forward<T: Real>(dims: [usize; 4], input: &[T]) -> (Vec<T>, PoolIndices) {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut offsets = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = src[2 * oy * w + 2 * ox];
                let mut best_off = 0u8;
                for off in 1..4u8 {
                    let v = src[(2 * oy + off as usize / 2) * w + 2 * ox + off as usize % 2];
                    if v > best {
                        best = v;
                        best_off = off;
                    }
                }
                out.push(best);
                offsets.push(best_off);
            }
        }
    }
    (out, PoolIndices::new(dims, offsets))
}
