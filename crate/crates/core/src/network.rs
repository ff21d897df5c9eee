//! The hierarchical fusion network and its early/late fusion ablations.
//!
//! Scales are numbered coarse to fine: scale 1 is 1/8 of the input extent,
//! scale 4 is full resolution. The RGB encoder has five VGG-style blocks
//! (pooling after the first four); the depth encoder drops the last block.
//! Decoders unpool with the argmax indices of the mirrored encoder stage and
//! concatenate the skip features. At every scale the depth decoder feature
//! is re-weighted by the confidence map, concatenated to the RGB decoder
//! feature and deconvolved into the next scale.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{DepthMap, NormalMap};
use crate::synth::RgbImage;
use crate::tensor::{PoolIndices, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    Hierarchical,
    Early,
    Late,
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "early" => Ok(Self::Early),
            "late" => Ok(Self::Late),
            _ => Err(Error::Config(format!("unknown fusion variant {s:?} (expected early|late|hierarchical)"))),
        }
    }
}

/// How depth features are re-weighted before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweighting {
    ConfidenceMap,
    BinaryMask,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the five RGB encoder blocks; the last two are equal.
    pub rgb_widths: [usize; 5],
    /// Convolutions per RGB encoder block; decoders mirror these counts.
    pub rgb_convs: [usize; 5],
    /// Output channels of the four depth encoder blocks.
    pub depth_widths: [usize; 4],
    pub depth_convs: [usize; 4],
    /// Channels of the five confidence layers (3×3, 3×3, 1×1, 1×1, 1×1).
    pub confidence_widths: [usize; 5],
    pub variant: FusionVariant,
    /// Used by the hierarchical variant only: early fusion has no depth
    /// branch and late fusion always re-weights with the binary mask.
    pub reweighting: Reweighting,
    /// Normalize head outputs to unit length (losses then act on unit normals).
    pub normalize_heads: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            rgb_widths: [16, 32, 64, 64, 64],
            rgb_convs: [2, 2, 3, 3, 3],
            depth_widths: [16, 32, 64, 64],
            depth_convs: [2, 2, 3, 3],
            confidence_widths: [8, 8, 8, 8, 1],
            variant: FusionVariant::Hierarchical,
            reweighting: Reweighting::ConfidenceMap,
            normalize_heads: true,
        }
    }
}

/// Number of output scales.
pub const SCALES: usize = 4;

impl NetworkConfig {
    /// One convolution per block at 64×64: trains in minutes on one core.
    pub fn desk() -> Self {
        Self { rgb_convs: [1; 5], depth_convs: [1; 4], ..Self::default() }
    }

    /// Full-width preset: VGG-16 channels with the last two stages narrowed to 256.
    pub fn full_width() -> Self {
        Self {
            height: 256,
            width: 320,
            rgb_widths: [64, 128, 256, 256, 256],
            depth_widths: [64, 128, 256, 256],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.height > 0 && self.width > 0 && self.height % 16 == 0 && self.width % 16 == 0,
            "input extent {}x{} must be a positive multiple of 16",
            self.width,
            self.height
        );
        ensure!(
            self.rgb_widths[4] == self.rgb_widths[3],
            "the last two RGB stages must share a width (got {:?})",
            self.rgb_widths
        );
        ensure!(
            self.rgb_widths.iter().chain(&self.depth_widths).chain(&self.confidence_widths).all(|&c| c > 0),
            "channel widths must be positive"
        );
        ensure!(
            self.rgb_convs.iter().chain(&self.depth_convs).all(|&c| c > 0),
            "every block needs at least one convolution"
        );
        ensure!(self.confidence_widths[4] == 1, "the confidence map has a single channel");
        Ok(())
    }

    /// Extent of scale `l` (1-based, coarse to fine).
    pub fn scale_extent(&self, l: usize) -> (usize, usize) {
        let f = 1 << (SCALES - l);
        (self.height / f, self.width / f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, k: usize },
    Deconv { cin: usize, cout: usize, k: usize, stride: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv { cin, cout, k } => [cout, cin, k, k],
            LayerKind::Deconv { cin, cout, k, .. } => [cin, cout, k, k],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cout, .. } | LayerKind::Deconv { cout, .. } => cout,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { cin, k, .. } => cin * k * k,
            // each output pixel of a strided deconvolution sees k²/s² taps per input channel
            LayerKind::Deconv { cin, k, stride, .. } => (cin * k * k / (stride * stride)).max(1),
        }
    }
}

struct Specs(Vec<LayerSpec>);

impl Specs {
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize) {
        self.0.push(LayerSpec { name, kind: LayerKind::Conv { cin, cout, k } });
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize, convs: usize) {
        for j in 0..convs {
            self.conv(format!("{prefix}.{j}"), if j == 0 { cin } else { cout }, cout, 3);
        }
    }

    fn deconv(&mut self, name: String, cin: usize, cout: usize, stride: usize) {
        let k = if stride == 2 { 4 } else { 3 };
        self.0.push(LayerSpec { name, kind: LayerKind::Deconv { cin, cout, k, stride } });
    }
}

/// Every trainable layer of `cfg`, in initialization order.
pub fn layer_specs(cfg: &NetworkConfig) -> Vec<LayerSpec> {
    let w = cfg.rgb_widths;
    let v = cfg.depth_widths;
    let mut s = Specs(Vec::new());
    let rgb_in = if cfg.variant == FusionVariant::Early { 4 } else { 3 };
    for i in 0..5 {
        s.block(&format!("rgb.enc{}", i + 1), if i == 0 { rgb_in } else { w[i - 1] }, w[i], cfg.rgb_convs[i]);
    }
    let with_depth = cfg.variant != FusionVariant::Early;
    if with_depth {
        for i in 0..4 {
            s.block(&format!("depth.enc{}", i + 1), if i == 0 { 1 } else { v[i - 1] }, v[i], cfg.depth_convs[i]);
        }
    }
    if cfg.variant == FusionVariant::Hierarchical && cfg.reweighting == Reweighting::ConfidenceMap {
        let c = cfg.confidence_widths;
        let mut cin = 2;
        for (j, &cout) in c.iter().enumerate() {
            s.conv(format!("conf.{j}"), cin, cout, if j < 2 { 3 } else { 1 });
            cin = cout;
        }
    }
    // decoder output widths R¹..R⁴ and Fd¹..Fd⁴
    let r_out = [w[2], w[1], w[0], w[0]];
    let d_out = [v[2], v[1], v[0], v[0]];
    let hier = cfg.variant == FusionVariant::Hierarchical;
    s.block("rgb.dec1", w[4] + w[3], r_out[0], cfg.rgb_convs[3]);
    for l in 1..4 {
        let skip = w[3 - l];
        let fused = if hier { r_out[l - 1] } else { 0 };
        s.block(&format!("rgb.dec{}", l + 1), r_out[l - 1] + skip + fused, r_out[l], cfg.rgb_convs[3 - l]);
    }
    if with_depth {
        s.block("depth.dec1", v[3], d_out[0], cfg.depth_convs[3]);
        for l in 1..4 {
            s.block(&format!("depth.dec{}", l + 1), d_out[l - 1] + v[3 - l], d_out[l], cfg.depth_convs[3 - l]);
        }
    }
    match cfg.variant {
        FusionVariant::Hierarchical => {
            for l in 0..4 {
                s.deconv(format!("fuse{}", l + 1), r_out[l] + d_out[l], r_out[l], if l < 3 { 2 } else { 1 });
            }
            for l in 0..3 {
                s.conv(format!("head{}", l + 1), r_out[l] + d_out[l], 3, 3);
            }
        }
        FusionVariant::Early => {
            s.deconv("fuse4".into(), r_out[3], r_out[3], 1);
            for l in 0..3 {
                s.conv(format!("head{}", l + 1), r_out[l], 3, 3);
            }
        }
        FusionVariant::Late => {
            s.deconv("fuse4".into(), r_out[3] + d_out[3], r_out[3], 1);
            for l in 0..3 {
                s.conv(format!("head{}", l + 1), r_out[l], 3, 3);
            }
        }
    }
    s.conv("head4".into(), r_out[3], 3, 3);
    s.0
}

/// Named weight and bias tensors, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Parameters<T> {
    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut p = Self { names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() };
        for (name, t) in entries {
            ensure!(!p.lookup.contains_key(&name), "duplicate parameter name {}", name);
            p.lookup.insert(name.clone(), p.names.len());
            p.names.push(name);
            p.tensors.push(t);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), lookup: self.lookup.clone() }
    }

    /// Records every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<'_, T> {
        Bound { params: self, vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect() }
    }

    /// Wraps variables already on a tape, one per tensor in order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_, T>> {
        ensure!(vars.len() == self.len(), "expected {} variables, got {}", self.len(), vars.len());
        Ok(Bound { params: self, vars })
    }

    /// Records every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound<'_, T> {
        Bound { params: self, vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'p, T: Real> {
    params: &'p Parameters<T>,
    vars: Vec<Var>,
}

impl<T: Real> Bound<'_, T> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .lookup
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    fn wb(&self, layer: &str) -> Result<(Var, Var)> {
        Ok((self.var(&format!("{layer}.w"))?, self.var(&format!("{layer}.b"))?))
    }
}

/// He-style initialization: weights uniform in `±sqrt(6 / fan_in)`, zero biases.
pub fn build<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<Parameters<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for spec in layer_specs(cfg) {
        let shape = spec.weight_shape();
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        let w = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-bound..bound)));
        entries.push((format!("{}.w", spec.name), w));
        entries.push((format!("{}.b", spec.name), Tensor::zeros(&[spec.out_channels()])));
    }
    Parameters::from_named(entries)
}

/// Network inputs as tape variables: `rgb` [B,3,H,W] (or [B,4,H,W] RGB-D for
/// early fusion), standardized `depth` and validity `mask` [B,1,H,W].
#[derive(Clone, Copy, Debug)]
pub struct InputVars {
    pub rgb: Var,
    pub depth: Var,
    pub mask: Var,
}

/// Network inputs as tensors.
#[derive(Clone, Debug)]
pub struct Inputs<T: Real> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> Inputs<T> {
    /// RGB mapped to [-1, 1]; depth standardized over its valid pixels,
    /// holes set to 0 and flagged in the mask.
    pub fn from_images(items: &[(&RgbImage, &DepthMap)]) -> Result<Self> {
        ensure!(!items.is_empty(), "empty batch");
        let (w, h) = (items[0].0.width, items[0].0.height);
        let plane = w * h;
        let mut rgb = Vec::with_capacity(items.len() * 3 * plane);
        let mut depth = Vec::with_capacity(items.len() * plane);
        let mut mask = Vec::with_capacity(items.len() * plane);
        for (img, d) in items {
            ensure!(
                img.width == w && img.height == h && d.width() == w && d.height() == h,
                "batch items differ in extent"
            );
            for c in 0..3 {
                rgb.extend(img.pixels.iter().map(|p| T::lit(p[c] as f64 * 2.0 - 1.0)));
            }
            let valid: Vec<f64> = (0..plane).filter_map(|i| d.get(i)).map(f64::from).collect();
            let n = valid.len().max(1) as f64;
            let mean = valid.iter().sum::<f64>() / n;
            let var = valid.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
            for i in 0..plane {
                match d.get(i) {
                    Some(x) => {
                        depth.push(T::lit((x as f64 - mean) / std));
                        mask.push(T::one());
                    }
                    None => {
                        depth.push(T::zero());
                        mask.push(T::zero());
                    }
                }
            }
        }
        let b = items.len();
        Ok(Self {
            rgb: Tensor::new(&[b, 3, h, w], rgb)?,
            depth: Tensor::new(&[b, 1, h, w], depth)?,
            mask: Tensor::new(&[b, 1, h, w], mask)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.rgb.shape()[0]
    }

    /// Places the inputs on `tape` as constants. Early fusion receives the
    /// 4-channel RGB-D stack in the `rgb` slot.
    pub fn record(&self, tape: &mut Tape<T>, cfg: &NetworkConfig) -> Result<InputVars> {
        let rgb = tape.constant(self.rgb.clone());
        let depth = tape.constant(self.depth.clone());
        let mask = tape.constant(self.mask.clone());
        let rgb = if cfg.variant == FusionVariant::Early { tape.concat_channels(rgb, depth)? } else { rgb };
        Ok(InputVars { rgb, depth, mask })
    }
}

/// Optional overrides used for analysis.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace the re-weighting map by this constant at every scale.
    pub force_confidence: Option<f64>,
}

/// Per-scale predictions, coarse to fine, and the full-resolution
/// confidence map (absent for variants without one).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub normals: [Var; SCALES],
    pub confidence: Option<Var>,
    /// (encoder pooling site, decoder unpooling site, indices) for every
    /// unpooling, so index sharing can be checked structurally.
    pub unpool_trace: Vec<(String, String, Arc<PoolIndices>)>,
}

struct Ctx<'t, 'b, 'p, T: Real> {
    tape: &'t mut Tape<T>,
    params: &'b Bound<'p, T>,
    trace: Vec<(String, String, Arc<PoolIndices>)>,
}

struct Encoder {
    /// Block outputs before pooling.
    features: Vec<Var>,
    pools: Vec<(String, Arc<PoolIndices>)>,
}

impl<T: Real> Ctx<'_, '_, '_, T> {
    fn conv(&mut self, layer: &str, x: Var, relu: bool) -> Result<Var> {
        let (w, b) = self.params.wb(layer)?;
        let k = self.tape.shape(w)[2];
        let y = self.tape.conv2d(x, w, b, 1, k / 2)?;
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn block(&mut self, prefix: &str, mut x: Var, convs: usize) -> Result<Var> {
        for j in 0..convs {
            x = self.conv(&format!("{prefix}.{j}"), x, true)?;
        }
        Ok(x)
    }

    fn deconv(&mut self, layer: &str, x: Var) -> Result<Var> {
        let (w, b) = self.params.wb(layer)?;
        let k = self.tape.shape(w)[2];
        let (stride, pad) = if k == 4 { (2, 1) } else { (1, k / 2) };
        self.tape.deconv2d(x, w, b, stride, pad)
    }

    fn encoder(&mut self, prefix: &str, mut x: Var, convs: &[usize]) -> Result<Encoder> {
        let mut enc = Encoder { features: Vec::new(), pools: Vec::new() };
        for (i, &n) in convs.iter().enumerate() {
            let name = format!("{prefix}.enc{}", i + 1);
            let f = self.block(&name, x, n)?;
            enc.features.push(f);
            if i + 1 < convs.len() {
                let (p, idx) = self.tape.maxpool2d(f)?;
                enc.pools.push((name, idx));
                x = p;
            }
        }
        Ok(enc)
    }

    fn unpool(&mut self, site: &str, x: Var, pool: &(String, Arc<PoolIndices>)) -> Result<Var> {
        self.trace.push((pool.0.clone(), site.to_string(), pool.1.clone()));
        self.tape.unpool2d(x, &pool.1)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.tape.concat_channels(acc, p)?;
        }
        Ok(acc)
    }

    /// Decoder of a branch without fusion inputs. Returns the scale 1..4 features.
    fn plain_decoder(&mut self, prefix: &str, enc: &Encoder, convs: &[usize]) -> Result<Vec<Var>> {
        let stages = enc.features.len();
        let mut out = Vec::with_capacity(SCALES);
        let first = if stages == 5 {
            // the RGB bottom block is unpooled once before the first decoder block
            let up = self.unpool(&format!("{prefix}.dec1"), enc.features[4], &enc.pools[3])?;
            self.concat(&[up, enc.features[3]])?
        } else {
            enc.features[3]
        };
        out.push(self.block(&format!("{prefix}.dec1"), first, convs[3])?);
        for l in 1..SCALES {
            let site = format!("{prefix}.dec{}", l + 1);
            let up = self.unpool(&site, out[l - 1], &enc.pools[3 - l])?;
            let x = self.concat(&[up, enc.features[3 - l]])?;
            out.push(self.block(&site, x, convs[3 - l])?);
        }
        Ok(out)
    }

    fn head(&mut self, l: usize, x: Var, normalize: bool) -> Result<Var> {
        let y = self.conv(&format!("head{l}"), x, false)?;
        if normalize {
            self.tape.normalize_channels(y, T::lit(1e-8))
        } else {
            Ok(y)
        }
    }
}

/// Fusion: `deconv(concat(fc, fd ⊙ c))` with the layer `fuse{scale}`.
/// `c` is single-channel and broadcast over the depth channels.
pub fn fusion_module<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_, T>,
    fc: Var,
    fd: Var,
    c: Option<Var>,
    scale: usize,
) -> Result<Var> {
    let mut ctx = Ctx { tape, params, trace: Vec::new() };
    let x = fuse_input(ctx.tape, fc, fd, c)?;
    ctx.deconv(&format!("fuse{scale}"), x)
}

fn fuse_input<T: Real>(tape: &mut Tape<T>, fc: Var, fd: Var, c: Option<Var>) -> Result<Var> {
    let weighted = match c {
        Some(c) => tape.mul_broadcast(fd, c)?,
        None => fd,
    };
    tape.concat_channels(fc, weighted)
}

/// The five-layer confidence network on `concat(depth, mask)`; output in (0, 1).
pub fn confidence_forward<T: Real>(tape: &mut Tape<T>, params: &Bound<'_, T>, depth: Var, mask: Var) -> Result<Var> {
    let mut ctx = Ctx { tape, params, trace: Vec::new() };
    let mut x = ctx.tape.concat_channels(depth, mask)?;
    for j in 0..5 {
        x = ctx.conv(&format!("conf.{j}"), x, j < 4)?;
    }
    Ok(ctx.tape.sigmoid(x))
}

fn check_inputs<T: Real>(tape: &Tape<T>, cfg: &NetworkConfig, inputs: &InputVars) -> Result<()> {
    cfg.validate()?;
    let [b, c, h, w] = tape.value(inputs.rgb).dims4()?;
    let rgb_c = if cfg.variant == FusionVariant::Early { 4 } else { 3 };
    ensure!(c == rgb_c, "expected {} image channels, got {}", rgb_c, c);
    ensure!(
        h == cfg.height && w == cfg.width,
        "input extent {}x{} differs from the configured {}x{}",
        w,
        h,
        cfg.width,
        cfg.height
    );
    ensure!(h % 16 == 0 && w % 16 == 0, "input extent {}x{} must be divisible by 16", w, h);
    for v in [inputs.depth, inputs.mask] {
        ensure!(tape.shape(v) == [b, 1, h, w], "depth/mask must be [{}, 1, {}, {}]", b, h, w);
    }
    Ok(())
}

/// Runs the configured variant.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_, T>,
    cfg: &NetworkConfig,
    inputs: &InputVars,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    match cfg.variant {
        FusionVariant::Hierarchical => forward_hierarchical(tape, params, cfg, inputs, opts),
        FusionVariant::Early => forward_early_fusion(tape, params, cfg, inputs.rgb),
        FusionVariant::Late => forward_late_fusion(tape, params, cfg, inputs, opts),
    }
}

fn constant_map<T: Real>(tape: &mut Tape<T>, like: Var, value: f64) -> Result<Var> {
    let [b, _, h, w] = tape.value(like).dims4()?;
    Ok(tape.constant(Tensor::full(&[b, 1, h, w], T::lit(value))))
}

pub fn forward_hierarchical<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_, T>,
    cfg: &NetworkConfig,
    inputs: &InputVars,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    check_inputs(tape, cfg, inputs)?;
    let mut ctx = Ctx { tape, params, trace: Vec::new() };
    let rgb = ctx.encoder("rgb", inputs.rgb, &cfg.rgb_convs)?;
    let dep = ctx.encoder("depth", inputs.depth, &cfg.depth_convs)?;
    let fd = ctx.plain_decoder("depth", &dep, &cfg.depth_convs)?;

    let confidence = match cfg.reweighting {
        Reweighting::ConfidenceMap => Some(confidence_forward(ctx.tape, params, inputs.depth, inputs.mask)?),
        _ => None,
    };
    let full = match (opts.force_confidence, cfg.reweighting) {
        (Some(v), _) => Some(constant_map(ctx.tape, inputs.mask, v)?),
        (None, Reweighting::ConfidenceMap) => confidence,
        (None, Reweighting::BinaryMask) => Some(inputs.mask),
        (None, Reweighting::None) => None,
    };
    // downsample through the depth encoder's pooling masks: scale 4 → 1
    let mut maps = [None; SCALES];
    maps[3] = full;
    for l in (0..3).rev() {
        maps[l] = match maps[l + 1] {
            Some(m) => Some(ctx.tape.gather_mean2d(m, &dep.pools[2 - l].1)?),
            None => None,
        };
    }

    let mut normals = Vec::with_capacity(SCALES);
    let up = ctx.unpool("rgb.dec1", rgb.features[4], &rgb.pools[3])?;
    let x = ctx.concat(&[up, rgb.features[3]])?;
    let mut r = ctx.block("rgb.dec1", x, cfg.rgb_convs[3])?;
    for l in 1..=SCALES {
        let x = fuse_input(ctx.tape, r, fd[l - 1], maps[l - 1])?;
        let o = ctx.deconv(&format!("fuse{l}"), x)?;
        let o = ctx.tape.relu(o);
        if l < SCALES {
            normals.push(ctx.head(l, x, cfg.normalize_heads)?);
            let site = format!("rgb.dec{}", l + 1);
            let up = ctx.unpool(&site, r, &rgb.pools[3 - l])?;
            let x = ctx.concat(&[up, rgb.features[3 - l], o])?;
            r = ctx.block(&site, x, cfg.rgb_convs[3 - l])?;
        } else {
            normals.push(ctx.head(l, o, cfg.normalize_heads)?);
        }
    }
    Ok(ForwardOutput { normals: normals.try_into().expect("four scales"), confidence, unpool_trace: ctx.trace })
}

/// Single RGB-style branch on the 4-channel RGB-D stack.
pub fn forward_early_fusion<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_, T>,
    cfg: &NetworkConfig,
    rgbd: Var,
) -> Result<ForwardOutput> {
    ensure!(cfg.variant == FusionVariant::Early, "configuration is not an early-fusion network");
    let [b, _, h, w] = tape.value(rgbd).dims4()?;
    let dummy = tape.constant(Tensor::zeros(&[b, 1, h, w]));
    check_inputs(tape, cfg, &InputVars { rgb: rgbd, depth: dummy, mask: dummy })?;
    let mut ctx = Ctx { tape, params, trace: Vec::new() };
    let enc = ctx.encoder("rgb", rgbd, &cfg.rgb_convs)?;
    let r = ctx.plain_decoder("rgb", &enc, &cfg.rgb_convs)?;
    let mut normals = Vec::with_capacity(SCALES);
    for l in 1..SCALES {
        normals.push(ctx.head(l, r[l - 1], cfg.normalize_heads)?);
    }
    let o = ctx.deconv("fuse4", r[3])?;
    let o = ctx.tape.relu(o);
    normals.push(ctx.head(SCALES, o, cfg.normalize_heads)?);
    Ok(ForwardOutput { normals: normals.try_into().expect("four scales"), confidence: None, unpool_trace: ctx.trace })
}

/// Independent branches fused once at full resolution with the binary mask.
pub fn forward_late_fusion<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound<'_, T>,
    cfg: &NetworkConfig,
    inputs: &InputVars,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    ensure!(cfg.variant == FusionVariant::Late, "configuration is not a late-fusion network");
    check_inputs(tape, cfg, inputs)?;
    let mut ctx = Ctx { tape, params, trace: Vec::new() };
    let rgb = ctx.encoder("rgb", inputs.rgb, &cfg.rgb_convs)?;
    let r = ctx.plain_decoder("rgb", &rgb, &cfg.rgb_convs)?;
    let dep = ctx.encoder("depth", inputs.depth, &cfg.depth_convs)?;
    let fd = ctx.plain_decoder("depth", &dep, &cfg.depth_convs)?;
    let mut normals = Vec::with_capacity(SCALES);
    for l in 1..SCALES {
        normals.push(ctx.head(l, r[l - 1], cfg.normalize_heads)?);
    }
    let mask = match opts.force_confidence {
        Some(v) => constant_map(ctx.tape, inputs.mask, v)?,
        None => inputs.mask,
    };
    let x = fuse_input(ctx.tape, r[3], fd[3], Some(mask))?;
    let o = ctx.deconv("fuse4", x)?;
    let o = ctx.tape.relu(o);
    normals.push(ctx.head(SCALES, o, cfg.normalize_heads)?);
    Ok(ForwardOutput { normals: normals.try_into().expect("four scales"), confidence: None, unpool_trace: ctx.trace })
}

/// Inference on one image pair: the final normal map and, when the variant
/// has one, the confidence map.
pub fn predict(
    params: &Parameters<f32>,
    cfg: &NetworkConfig,
    rgb: &RgbImage,
    depth: &DepthMap,
) -> Result<(NormalMap, Option<Vec<f32>>)> {
    let inputs = Inputs::<f32>::from_images(&[(rgb, depth)])?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let vars = inputs.record(&mut tape, cfg)?;
    let out = forward(&mut tape, &bound, cfg, &vars, &ForwardOptions::default())?;
    let normals = tensor_to_normals(tape.value(out.normals[SCALES - 1]), 0)?;
    let confidence = out.confidence.map(|c| tape.value(c).data().to_vec());
    Ok((normals, confidence))
}

/// Item `n` of a [B,3,H,W] tensor as a normal map; zero vectors are invalid.
pub fn tensor_to_normals<T: Real>(t: &Tensor<T>, n: usize) -> Result<NormalMap> {
    let [b, c, h, w] = t.dims4()?;
    ensure!(c == 3 && n < b, "expected a [B,3,H,W] tensor with item {}", n);
    let plane = h * w;
    let d = t.data();
    let normals = (0..plane)
        .map(|i| {
            let v = [0, 1, 2].map(|k| d[(n * 3 + k) * plane + i].to_f64().unwrap());
            crate::geometry::normalize(v)
        })
        .collect();
    NormalMap::from_options(w, h, normals)
}

/// Normal map as a [1,3,H,W] tensor plus its per-pixel validity.
pub fn normals_to_tensor<T: Real>(map: &NormalMap) -> (Tensor<T>, Vec<bool>) {
    let plane = map.len();
    let raw = map.raw();
    let t = Tensor::from_fn(&[1, 3, map.height(), map.width()], |i| T::lit(raw[i % plane][i / plane] as f64));
    (t, map.valid().to_vec())
}
