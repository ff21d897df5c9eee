use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{PoolIndices, Real, Tensor};
use crate::error::{contract, ensure, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Deconv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool { input: Var, indices: Arc<PoolIndices> },
    Unpool { input: Var, indices: Arc<PoolIndices> },
    Gather { input: Var, indices: Arc<PoolIndices> },
    GatherMean { input: Var, indices: Arc<PoolIndices> },
    Concat { a: Var, b: Var },
    MulBroadcast { features: Var, map: Var },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Relu { input: Var },
    Sigmoid { input: Var },
    AvgPool { input: Var, factor: usize },
    Normalize { input: Var, epsilon: T },
    Sum { input: Var },
    MaskedLoss { pred: Var, target: Tensor<T>, mask: Vec<bool>, kind: LossKind, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Dynamic computation graph recorded in execution (topological) order.
///
/// Forward ops append nodes; [`Tape::backward`] replays them in reverse and
/// leaves d(loss)/d(node) on every node that requires a gradient.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`]. Leaves that
    /// require a gradient but were unreachable from the loss read as zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = node.grad.clone().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
        Some(Tensor::new(node.value.shape(), data).expect("grad matches value shape"))
    }

    fn dims(&self, v: Var) -> Result<[usize; 4]> {
        self.nodes[v.0].value.dims4()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, cin, h, w] = self.dims(input)?;
        let [cout, wcin, kh, kw] = self.dims(weight)?;
        ensure!(cin == wcin, "conv2d: input has {} channels, weight expects {}", cin, wcin);
        ensure!(kh == kw && kh % 2 == 1, "conv2d: kernel must be square and odd, got {}x{}", kh, kw);
        ensure!(stride >= 1, "conv2d: stride must be positive");
        ensure!(self.shape(bias) == [cout], "conv2d: bias shape {:?} != [{}]", self.shape(bias), cout);
        ensure!(h + 2 * padding >= kh && w + 2 * padding >= kw, "conv2d: kernel larger than padded input");
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            channels: cin,
            large_h: h,
            large_w: w,
            small_h: oh,
            small_w: ow,
            kernel: kh,
            stride,
            padding,
        };
        let mut out = vec![T::zero(); b * cout * oh * ow];
        kernels::conv2d_forward(
            &geom,
            b,
            cout,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let value = Tensor::new(&[b, cout, oh, ow], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Transposed convolution; output extent is `(H - 1)·stride - 2·padding + k`.
    pub fn deconv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, cin, h, w] = self.dims(input)?;
        let [wcin, cout, kh, kw] = self.dims(weight)?;
        ensure!(cin == wcin, "deconv2d: input has {} channels, weight expects {}", cin, wcin);
        ensure!(kh == kw, "deconv2d: kernel must be square, got {}x{}", kh, kw);
        ensure!(stride == 1 || stride == 2, "deconv2d: stride must be 1 or 2, got {}", stride);
        ensure!(self.shape(bias) == [cout], "deconv2d: bias shape {:?} != [{}]", self.shape(bias), cout);
        ensure!(h >= 1 && w >= 1, "deconv2d: empty input");
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        ensure!(full_h > 2 * padding && full_w > 2 * padding, "deconv2d: padding consumes the output");
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        let geom = ConvGeom {
            channels: cout,
            large_h: oh,
            large_w: ow,
            small_h: h,
            small_w: w,
            kernel: kh,
            stride,
            padding,
        };
        let mut out = vec![T::zero(); b * cout * oh * ow];
        kernels::deconv2d_forward(
            &geom,
            b,
            cin,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
        );
        let value = Tensor::new(&[b, cout, oh, ow], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Deconv2d { input, weight, bias, geom }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<(Var, Arc<PoolIndices>)> {
        let dims = self.dims(input)?;
        let [b, c, h, w] = dims;
        ensure!(h % 2 == 0 && w % 2 == 0, "maxpool2d: spatial extent {}x{} must be even", h, w);
        let (out, indices) = kernels::maxpool2d_forward(dims, self.value(input).data());
        let indices = Arc::new(indices);
        let value = Tensor::new(&[b, c, h / 2, w / 2], out)?;
        let rg = self.rg(&[input]);
        let var = self.push(value, Op::MaxPool { input, indices: indices.clone() }, rg);
        Ok((var, indices))
    }

    /// Scatters each value to its recorded argmax position; zeros elsewhere.
    pub fn unpool2d(&mut self, input: Var, indices: &Arc<PoolIndices>) -> Result<Var> {
        let dims = self.dims(input)?;
        ensure!(
            dims == indices.output_shape(),
            "unpool2d: input {:?} does not match pooled shape {:?}",
            dims,
            indices.output_shape()
        );
        let full = indices.input_shape();
        let mut out = vec![T::zero(); full.iter().product()];
        for (o, &v) in self.value(input).data().iter().enumerate() {
            out[indices.input_index(o)] = v;
        }
        let value = Tensor::new(&full, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Unpool { input, indices: indices.clone() }, rg))
    }

    /// Reads `input` at recorded argmax positions; the adjoint of [`Tape::unpool2d`].
    pub fn gather2d(&mut self, input: Var, indices: &Arc<PoolIndices>) -> Result<Var> {
        let dims = self.dims(input)?;
        ensure!(
            dims == indices.input_shape(),
            "gather2d: input {:?} does not match pooling input {:?}",
            dims,
            indices.input_shape()
        );
        let src = self.value(input).data();
        let out: Vec<T> = (0..indices.offsets().len()).map(|o| src[indices.input_index(o)]).collect();
        let value = Tensor::new(&indices.output_shape(), out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Gather { input, indices: indices.clone() }, rg))
    }

    /// Downsamples a single-channel map with a multi-channel pooling mask:
    /// the result at each pooled position is the mean of the map over every
    /// channel's argmax location.
    pub fn gather_mean2d(&mut self, input: Var, indices: &Arc<PoolIndices>) -> Result<Var> {
        let [b, c, h, w] = self.dims(input)?;
        let [ib, ic, ih, iw] = indices.input_shape();
        ensure!(
            c == 1 && b == ib && h == ih && w == iw,
            "gather_mean2d: map {:?} incompatible with pooling input {:?}",
            [b, c, h, w],
            indices.input_shape()
        );
        let src = self.value(input).data();
        let (oh, ow) = (h / 2, w / 2);
        let plane_out = oh * ow;
        let inv = T::one() / T::lit(ic as f64);
        let mut out = vec![T::zero(); b * plane_out];
        for n in 0..b {
            for ch in 0..ic {
                for p in 0..plane_out {
                    let o = (n * ic + ch) * plane_out + p;
                    let full = indices.input_index(o) - (n * ic + ch) * h * w;
                    out[n * plane_out + p] += src[n * h * w + full] * inv;
                }
            }
        }
        let value = Tensor::new(&[b, 1, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GatherMean { input, indices: indices.clone() }, rg))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.dims(a)?;
        let [nb, cb, hb, wb] = self.dims(b)?;
        ensure!(
            na == nb && ha == hb && wa == wb,
            "concat_channels: {:?} and {:?} disagree on batch/spatial extent",
            self.shape(a),
            self.shape(b)
        );
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&db[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Multiplies every channel of `features` by the single-channel `map`.
    pub fn mul_broadcast(&mut self, features: Var, map: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims(features)?;
        let [mn, mc, mh, mw] = self.dims(map)?;
        ensure!(
            mc == 1 && mn == n && mh == h && mw == w,
            "mul_broadcast: map {:?} incompatible with features {:?}",
            self.shape(map),
            self.shape(features)
        );
        let plane = h * w;
        let (f, m) = (self.value(features).data(), self.value(map).data());
        let mut out = Vec::with_capacity(f.len());
        for b in 0..n {
            let mp = &m[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let fp = &f[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                out.extend(fp.iter().zip(mp).map(|(&x, &y)| x * y));
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[features, map]);
        Ok(self.push(value, Op::MulBroadcast { features, map }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{}: shape mismatch {:?} vs {:?}",
            what,
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    /// Mean over non-overlapping `factor`×`factor` windows.
    pub fn avgpool2d(&mut self, input: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims(input)?;
        ensure!(factor >= 1, "avgpool2d: factor must be positive");
        ensure!(
            h % factor == 0 && w % factor == 0,
            "avgpool2d: {}x{} not divisible by {}",
            h,
            w,
            factor
        );
        let (oh, ow) = (h / factor, w / factor);
        let src = self.value(input).data();
        let inv = T::one() / T::lit((factor * factor) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    out[(plane * oh + y / factor) * ow + x / factor] += src[(plane * h + y) * w + x] * inv;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::AvgPool { input, factor }, rg))
    }

    /// Divides each pixel's 3-vector by `sqrt(|v|² + epsilon)`.
    pub fn normalize_channels(&mut self, input: Var, epsilon: T) -> Result<Var> {
        let [n, c, h, w] = self.dims(input)?;
        ensure!(c == 3, "normalize_channels: expected 3 channels, got {}", c);
        let plane = h * w;
        let src = self.value(input).data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            let base = b * 3 * plane;
            for p in 0..plane {
                let (x, y, z) = (src[base + p], src[base + plane + p], src[base + 2 * plane + p]);
                let inv = T::one() / (x * x + y * y + z * z + epsilon).sqrt();
                out[base + p] = x * inv;
                out[base + plane + p] = y * inv;
                out[base + 2 * plane + p] = z * inv;
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Normalize { input, epsilon }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        // accumulate in f64 so the scalar is not limited by T's ulp
        let total: f64 = self.value(input).data().iter().map(|v| v.to_f64().unwrap()).sum();
        let total = T::lit(total);
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    /// Mean over valid pixels of the per-pixel sum over channels of `|d|`
    /// (L1) or `d²` (L2), with `d = pred - target`. `mask` holds one flag per
    /// pixel (B×H×W). Returns the loss and the number of valid pixels; with no
    /// valid pixel the loss is defined as zero.
    pub fn masked_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool], kind: LossKind) -> Result<(Var, usize)> {
        let [n, c, h, w] = self.dims(pred)?;
        ensure!(
            target.shape() == self.shape(pred),
            "loss: prediction {:?} and target {:?} differ",
            self.shape(pred),
            target.shape()
        );
        ensure!(mask.len() == n * h * w, "loss: mask has {} entries, expected {}", mask.len(), n * h * w);
        let plane = h * w;
        let count = mask.iter().filter(|&&m| m).count();
        let p = self.value(pred).data();
        let t = target.data();
        let mut total = 0.0f64;
        for b in 0..n {
            for px in 0..plane {
                if !mask[b * plane + px] {
                    continue;
                }
                for ch in 0..c {
                    let i = (b * c + ch) * plane + px;
                    let d = (p[i] - t[i]).to_f64().unwrap();
                    total += match kind {
                        LossKind::L1 => d.abs(),
                        LossKind::L2 => d * d,
                    };
                }
            }
        }
        let loss = if count == 0 { T::zero() } else { T::lit(total / count as f64) };
        let rg = self.rg(&[pred]);
        let var = self.push(
            Tensor::scalar(loss),
            Op::MaskedLoss { pred, target: target.clone(), mask: mask.to_vec(), kind, count },
            rg,
        );
        Ok((var, count))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from any previous sweep
    /// are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.nodes[loss.0].value.numel() == 1,
            "backward: loss must be a scalar, got shape {:?}",
            self.shape(loss)
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            self.backprop_node(i, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&[T], &mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut buf = self.grad_buf(v).map(std::mem::take).unwrap_or_default();
        f(self.nodes[v.0].value.data(), &mut buf);
        self.nodes[v.0].grad = Some(buf);
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) -> Result<()> {
        // Take the op out to release the borrow on `self.nodes`.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.apply_rule(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn apply_rule(&mut self, i: usize, op: &Op<T>, g: &[T]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let [b, cout, _, _] = self.nodes[i].value.dims4()?;
                let mut gx = self.grad_buf(input).map(std::mem::take);
                let mut gw = self.grad_buf(weight).map(std::mem::take);
                let mut gb = self.grad_buf(bias).map(std::mem::take);
                kernels::conv2d_backward(
                    &geom,
                    b,
                    cout,
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore(input, gx);
                self.restore(weight, gw);
                self.restore(bias, gb);
            }
            Op::Deconv2d { input, weight, bias, geom } => {
                let [b, cin, _, _] = self.nodes[input.0].value.dims4()?;
                let mut gx = self.grad_buf(input).map(std::mem::take);
                let mut gw = self.grad_buf(weight).map(std::mem::take);
                let mut gb = self.grad_buf(bias).map(std::mem::take);
                kernels::deconv2d_backward(
                    &geom,
                    b,
                    cin,
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.restore(input, gx);
                self.restore(weight, gw);
                self.restore(bias, gb);
            }
            Op::MaxPool { input, ref indices } | Op::Gather { input, ref indices } => {
                self.accumulate(input, |_, gx| {
                    for (o, &gv) in g.iter().enumerate() {
                        gx[indices.input_index(o)] += gv;
                    }
                });
            }
            Op::Unpool { input, ref indices } => {
                self.accumulate(input, |_, gx| {
                    for (o, gv) in gx.iter_mut().enumerate() {
                        *gv += g[indices.input_index(o)];
                    }
                });
            }
            Op::GatherMean { input, ref indices } => {
                let [_, ic, h, w] = indices.input_shape();
                let plane_out = (h / 2) * (w / 2);
                let inv = T::one() / T::lit(ic as f64);
                self.accumulate(input, |_, gx| {
                    for o in 0..indices.offsets().len() {
                        let n = o / (ic * plane_out);
                        let ch = (o / plane_out) % ic;
                        let p = o % plane_out;
                        let full = indices.input_index(o) - (n * ic + ch) * h * w;
                        gx[n * h * w + full] += g[n * plane_out + p] * inv;
                    }
                });
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.dims4()?;
                let cb = self.nodes[b.0].value.dims4()?[1];
                let plane = h * w;
                let c = ca + cb;
                self.accumulate(a, |_, ga| {
                    for bi in 0..n {
                        let src = &g[bi * c * plane..(bi * c + ca) * plane];
                        for (d, &s) in ga[bi * ca * plane..(bi + 1) * ca * plane].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                self.accumulate(b, |_, gb| {
                    for bi in 0..n {
                        let src = &g[(bi * c + ca) * plane..(bi + 1) * c * plane];
                        for (d, &s) in gb[bi * cb * plane..(bi + 1) * cb * plane].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::MulBroadcast { features, map } => {
                let [n, c, h, w] = self.nodes[features.0].value.dims4()?;
                let plane = h * w;
                let m = self.nodes[map.0].value.data().to_vec();
                self.accumulate(features, |_, gf| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            for p in 0..plane {
                                gf[base + p] += g[base + p] * m[bi * plane + p];
                            }
                        }
                    }
                });
                let f = self.nodes[features.0].value.data().to_vec();
                self.accumulate(map, |_, gm| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            for p in 0..plane {
                                gm[bi * plane + p] += g[base + p] * f[base + p];
                            }
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let bv = self.nodes[b.0].value.data().to_vec();
                self.accumulate(a, |_, ga| {
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += gv * y;
                    }
                });
                let av = self.nodes[a.0].value.data().to_vec();
                self.accumulate(b, |_, gb| {
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(&av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accumulate(v, |_, gv| {
                        for (d, &s) in gv.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Scale { input, factor } => {
                self.accumulate(input, |_, gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                });
            }
            Op::Relu { input } => {
                self.accumulate(input, |x, gx| {
                    for ((d, &s), &xv) in gx.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(input, |_, gx| {
                    for ((d, &s), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *d += s * yv * (T::one() - yv);
                    }
                });
            }
            Op::AvgPool { input, factor } => {
                let [n, c, h, w] = self.nodes[input.0].value.dims4()?;
                let (oh, ow) = (h / factor, w / factor);
                let inv = T::one() / T::lit((factor * factor) as f64);
                self.accumulate(input, |_, gx| {
                    for plane in 0..n * c {
                        for y in 0..h {
                            for x in 0..w {
                                gx[(plane * h + y) * w + x] += g[(plane * oh + y / factor) * ow + x / factor] * inv;
                            }
                        }
                    }
                });
            }
            Op::Normalize { input, epsilon } => {
                let [n, _, h, w] = self.nodes[input.0].value.dims4()?;
                let plane = h * w;
                self.accumulate(input, |x, gx| {
                    for b in 0..n {
                        let base = b * 3 * plane;
                        for p in 0..plane {
                            let idx = [base + p, base + plane + p, base + 2 * plane + p];
                            let v = idx.map(|k| x[k]);
                            let gv = idx.map(|k| g[k]);
                            let s2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + epsilon;
                            let inv = T::one() / s2.sqrt();
                            let dot = v[0] * gv[0] + v[1] * gv[1] + v[2] * gv[2];
                            let inv3 = inv / s2;
                            for k in 0..3 {
                                gx[idx[k]] += gv[k] * inv - v[k] * dot * inv3;
                            }
                        }
                    }
                });
            }
            Op::Sum { input } => {
                let s = g[0];
                self.accumulate(input, |_, gx| {
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                });
            }
            Op::MaskedLoss { pred, ref target, ref mask, kind, count } => {
                if count == 0 {
                    return Ok(());
                }
                let [n, c, h, w] = self.nodes[pred.0].value.dims4()?;
                let plane = h * w;
                let scale = g[0] / T::lit(count as f64);
                let two = T::lit(2.0);
                let t = target.data();
                self.accumulate(pred, |p, gp| {
                    for b in 0..n {
                        for px in 0..plane {
                            if !mask[b * plane + px] {
                                continue;
                            }
                            for ch in 0..c {
                                let k = (b * c + ch) * plane + px;
                                let d = p[k] - t[k];
                                gp[k] += match kind {
                                    LossKind::L2 => two * d * scale,
                                    // subgradient of |d| at 0 is taken as 0
                                    LossKind::L1 if d > T::zero() => scale,
                                    LossKind::L1 if d < T::zero() => -scale,
                                    LossKind::L1 => T::zero(),
                                };
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn restore(&mut self, v: Var, buf: Option<Vec<T>>) {
        if let Some(buf) = buf {
            self.nodes[v.0].grad = Some(buf);
        }
    }

    /// Looks up a node's value or fails with a contract error for foreign handles.
    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or_else(|| contract("variable not on this tape"))
    }
}
