//! On-disk formats: 8-bit normal images, 16-bit depth images, lossless float
//! rasters, dataset directories and checksummed checkpoints.
//!
//! Float raster layout (all integers little-endian):
//!
//! ```text
//! b"HFMRAST1" | width u32 | height u32 | channels u32 | width·height·channels f32
//! ```
//!
//! Values are pixel-interleaved in row-major order. Invalid normals are NaN,
//! depth holes are 0.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage as PngRgb};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, NormalMap};
use crate::network::{NetworkConfig, Parameters};
use crate::optim::{RmsProp, TrainSchedule};
use crate::synth::{RgbImage, Sample};
use crate::tensor::Tensor;
use crate::train::TrainState;

const RASTER_MAGIC: &[u8; 8] = b"HFMRAST1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"HFMCKPT1";

fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

/// `round((n + 1) / 2 · 255)` per channel; invalid pixels are black, which no
/// unit vector encodes to.
pub fn encode_normal(n: Option<[f32; 3]>) -> [u8; 3] {
    match n {
        Some(n) => n.map(|c| (((c as f64 + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8),
        None => [0, 0, 0],
    }
}

pub fn decode_normal(px: [u8; 3]) -> Option<[f64; 3]> {
    if px == [0, 0, 0] {
        return None;
    }
    crate::geometry::normalize(px.map(|c| c as f64 / 255.0 * 2.0 - 1.0))
}

pub fn write_normal_png(path: &Path, map: &NormalMap) -> Result<()> {
    let (w, h) = (map.width() as u32, map.height() as u32);
    let img = PngRgb::from_fn(w, h, |x, y| Rgb(encode_normal(map.at(x as usize, y as usize))));
    img.save(path)?;
    Ok(())
}

pub fn read_normal_png(path: &Path) -> Result<NormalMap> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    NormalMap::from_options(w, h, img.pixels().map(|p| decode_normal(p.0)).collect())
}

/// Depth in millimetres, 0 for holes; depths beyond 65.535 m saturate.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width() as u32, depth.height() as u32);
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
        let mm = depth.at(x as usize, y as usize).map_or(0.0, |d| (d as f64 * 1000.0).round());
        Luma([mm.clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => return Err(data_err(format!("{}: expected a 16-bit grayscale image, got {:?}", path.display(), other.color()))),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    DepthMap::from_raw(w, h, gray.pixels().map(|p| p.0[0] as f32 / 1000.0).collect())
}

pub fn write_rgb_png(path: &Path, rgb: &RgbImage) -> Result<()> {
    let img = PngRgb::from_fn(rgb.width as u32, rgb.height as u32, |x, y| {
        let p = rgb.pixels[y as usize * rgb.width + x as usize];
        Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.into_rgb8();
    let mut out = RgbImage::new(img.width() as usize, img.height() as usize);
    for (dst, p) in out.pixels.iter_mut().zip(img.pixels()) {
        *dst = p.0.map(|c| c as f32 / 255.0);
    }
    Ok(out)
}

/// Confidence in [0, 1] as an 8-bit grayscale image.
pub fn write_confidence_png(path: &Path, width: usize, height: usize, conf: &[f32]) -> Result<()> {
    ensure!(conf.len() == width * height, "confidence has {} values for {}x{}", conf.len(), width, height);
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([(conf[y as usize * width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(RASTER_MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        ensure_data(r.take(8)? == RASTER_MAGIC, "not a float raster (bad magic)")?;
        let (width, height, channels) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(channels))
            .ok_or_else(|| data_err("raster dimensions overflow"))?;
        ensure_data(r.remaining() == 4 * n, &format!("raster payload is {} bytes, expected {}", r.remaining(), 4 * n))?;
        let data = (0..n).map(|_| r.f32()).collect::<Result<_>>()?;
        Ok(Self { width, height, channels, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| data_err(format!("{}: {e}", path.display())))
    }

    pub fn from_normals(map: &NormalMap) -> Self {
        let data = (0..map.len()).flat_map(|i| map.get(i).unwrap_or([f32::NAN; 3])).collect();
        Self { width: map.width(), height: map.height(), channels: 3, data }
    }

    pub fn to_normals(&self) -> Result<NormalMap> {
        ensure_data(self.channels == 3, "normal raster must have 3 channels")?;
        let normals = self
            .data
            .chunks_exact(3)
            .map(|c| if c.iter().all(|v| v.is_finite()) { Some([c[0] as f64, c[1] as f64, c[2] as f64]) } else { None })
            .collect();
        NormalMap::from_options(self.width, self.height, normals)
    }

    pub fn from_depth(depth: &DepthMap) -> Self {
        Self { width: depth.width(), height: depth.height(), channels: 1, data: depth.raw().to_vec() }
    }

    pub fn to_depth(&self) -> Result<DepthMap> {
        ensure_data(self.channels == 1, "depth raster must have 1 channel")?;
        DepthMap::from_raw(self.width, self.height, self.data.clone())
    }
}

fn ensure_data(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(data_err(msg))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure_data(self.remaining() >= n, "unexpected end of data")?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| data_err("invalid utf-8 string"))
    }
}

/// Configuration echoed into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub network: NetworkConfig,
    pub schedule: TrainSchedule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub state: TrainState,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let rank = r.u32()? as usize;
    ensure_data(rank <= 8, "tensor rank too large")?;
    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| data_err("tensor size overflow"))?;
    ensure_data(r.remaining() >= 4 * n, "truncated tensor")?;
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    Tensor::new(&shape, data)
}

impl Checkpoint {
    /// Layout: magic, config TOML, epoch, step, optimizer constants, named
    /// parameters, running averages, then the SHA-256 of all preceding bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let toml = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let st = &self.state;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_str(&mut out, &toml);
        out.extend_from_slice(&(st.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(st.step as u64).to_le_bytes());
        for v in [st.optimizer.alpha, st.optimizer.eps, st.optimizer.lr] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(st.params.len() as u32).to_le_bytes());
        for (name, t) in st.params.iter() {
            put_str(&mut out, name);
            put_tensor(&mut out, t);
        }
        for t in st.optimizer.mean_sq() {
            put_tensor(&mut out, t);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure_data(bytes.len() >= 8 + 32, "checkpoint too short")?;
        ensure_data(&bytes[..8] == CHECKPOINT_MAGIC, "not a checkpoint (bad magic)")?;
        let (payload, stored) = bytes.split_at(bytes.len() - 32);
        let actual = Sha256::digest(payload);
        if actual.as_slice() != stored {
            return Err(data_err(format!(
                "checkpoint checksum mismatch: stored {}, computed {}",
                hex(stored),
                hex(actual.as_slice())
            )));
        }
        let mut r = Reader::new(payload);
        r.take(8)?;
        let config: CheckpointConfig =
            toml::from_str(&r.string()?).map_err(|e| data_err(format!("checkpoint config: {e}")))?;
        let epoch = r.u64()? as usize;
        let step = r.u64()? as usize;
        let (alpha, eps, lr) = (r.f64()?, r.f64()?, r.f64()?);
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            named.push((name, get_tensor(&mut r)?));
        }
        let mean_sq = (0..count).map(|_| get_tensor(&mut r)).collect::<Result<Vec<_>>>()?;
        ensure_data(r.remaining() == 0, "trailing bytes in checkpoint")?;
        for ((name, p), v) in named.iter().zip(&mean_sq) {
            ensure_data(p.shape() == v.shape(), &format!("optimizer state shape mismatch for {name}"))?;
        }
        let params = Parameters::from_named(named)?;
        let expected = crate::network::build::<f32>(&config.network, 0)?;
        ensure_data(
            expected.names() == params.names()
                && expected.tensors().iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape()),
            "checkpoint parameters do not match its network configuration",
        )?;
        let optimizer = RmsProp::from_state(alpha, eps, lr, mean_sq)?;
        Ok(Self { config, state: TrainState { params, optimizer, epoch, step } })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Data(m) => data_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte string as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(Sha256::digest(bytes).as_slice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
}

/// `manifest.toml` of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.toml";

/// File stem of a sample inside a dataset directory.
pub fn sample_stem(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("{seed:08}"))
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<seed>_rgb.png`, `_depth.png`, `_normal.png` and the lossless
/// `_depth.raw`, `_normal.raw` (training target) and `_clean.raw` rasters.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    let stem = sample_stem(dir, sample.seed);
    write_rgb_png(&with_suffix(&stem, "_rgb.png"), &sample.rgb)?;
    write_depth_png(&with_suffix(&stem, "_depth.png"), &sample.depth)?;
    write_normal_png(&with_suffix(&stem, "_normal.png"), &sample.normals)?;
    Raster::from_depth(&sample.depth).write(&with_suffix(&stem, "_depth.raw"))?;
    Raster::from_normals(&sample.normals).write(&with_suffix(&stem, "_normal.raw"))?;
    Raster::from_normals(&sample.clean_normals).write(&with_suffix(&stem, "_clean.raw"))?;
    Ok(())
}

pub fn read_sample(dir: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let stem = sample_stem(dir, entry.seed);
    let rgb = read_rgb_png(&with_suffix(&stem, "_rgb.png"))?;
    let depth = Raster::read(&with_suffix(&stem, "_depth.raw"))?.to_depth()?;
    let normals = Raster::read(&with_suffix(&stem, "_normal.raw"))?.to_normals()?;
    let clean_normals = Raster::read(&with_suffix(&stem, "_clean.raw"))?.to_normals()?;
    ensure_data(
        rgb.width == depth.width() && rgb.height == depth.height() && normals.len() == depth.len(),
        &format!("sample {} has inconsistent extents", entry.seed),
    )?;
    Ok(Sample { seed: entry.seed, intrinsics: entry.intrinsics, holes: depth.hole_mask(), rgb, depth, normals, clean_normals })
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    toml::from_str(&text).map_err(|e| data_err(format!("{}: {e}", dir.join(MANIFEST).display())))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = read_manifest(dir)?;
    manifest.samples.iter().map(|e| read_sample(dir, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_between_deg;
    use crate::synth::{generate_sample, DatasetSpec, SceneDistribution};

    fn sample(seed: u64) -> Sample {
        let spec = DatasetSpec { scene: SceneDistribution { width: 16, height: 16, ..Default::default() }, ..Default::default() };
        generate_sample(&spec, seed).unwrap()
    }

    #[test]
    fn normal_png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(3);
        let path = dir.path().join("n.png");
        write_normal_png(&path, &s.normals).unwrap();
        let back = read_normal_png(&path).unwrap();
        assert_eq!(back.valid(), s.normals.valid());
        for i in 0..back.len() {
            if let (Some(a), Some(b)) = (back.get(i), s.normals.get(i)) {
                // half a code step per channel is at most ~0.34°
                assert!(angle_between_deg(a, b) < 0.4, "{}", angle_between_deg(a, b));
                let norm = (a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt();
                assert!((norm - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn normal_encoding_matches_formula() {
        assert_eq!(encode_normal(Some([0.0, 0.0, -1.0])), [128, 128, 0]);
        assert_eq!(encode_normal(Some([1.0, -1.0, 0.0])), [255, 0, 128]);
        assert_eq!(encode_normal(None), [0, 0, 0]);
        assert_eq!(decode_normal([0, 0, 0]), None);
    }

    #[test]
    fn depth_png_roundtrip_to_millimetres() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(4);
        let path = dir.path().join("d.png");
        write_depth_png(&path, &s.depth).unwrap();
        let back = read_depth_png(&path).unwrap();
        assert_eq!(back.valid(), s.depth.valid());
        for i in 0..back.len() {
            if let (Some(a), Some(b)) = (back.get(i), s.depth.get(i)) {
                assert!((a - b).abs() <= 0.0005 + 1e-6);
            }
        }
    }

    #[test]
    fn rasters_are_lossless() {
        let s = sample(5);
        let r = Raster::from_normals(&s.normals);
        let back = Raster::from_bytes(&r.to_bytes()).unwrap().to_normals().unwrap();
        assert_eq!(back.valid(), s.normals.valid());
        for i in 0..back.len() {
            if let (Some(a), Some(b)) = (back.get(i), s.normals.get(i)) {
                assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6), "{a:?} {b:?}");
            }
        }
        let d = Raster::from_depth(&s.depth);
        assert_eq!(Raster::from_bytes(&d.to_bytes()).unwrap().to_depth().unwrap(), s.depth);
    }

    #[test]
    fn raster_header_layout() {
        let r = Raster { width: 2, height: 1, channels: 1, data: vec![1.5, -2.0] };
        let b = r.to_bytes();
        assert_eq!(&b[..8], b"HFMRAST1");
        assert_eq!(&b[8..20], &[2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.5f32.to_le_bytes());
        assert!(Raster::from_bytes(&b[..23]).is_err());
    }

    fn checkpoint() -> Checkpoint {
        let network = NetworkConfig {
            height: 16,
            width: 16,
            rgb_widths: [4, 4, 8, 8, 8],
            depth_widths: [4, 4, 8, 8],
            confidence_widths: [2, 2, 2, 2, 1],
            ..NetworkConfig::desk()
        };
        let schedule = TrainSchedule::default();
        let mut state = TrainState::fresh(&network, &schedule).unwrap();
        state.epoch = 3;
        state.step = 17;
        Checkpoint { config: CheckpointConfig { network, schedule }, state }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let c = checkpoint();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(bytes, c.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_checkpoint_reports_checksum() {
        let mut bytes = checkpoint().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("checksum"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = [sample(1), sample(2)];
        let mut manifest = Manifest { width: 16, height: 16, samples: vec![] };
        for s in &samples {
            write_sample(dir.path(), s).unwrap();
            manifest.samples.push(ManifestEntry { seed: s.seed, intrinsics: s.intrinsics });
        }
        write_manifest(dir.path(), &manifest).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.normals, b.normals);
            assert_eq!(a.clean_normals, b.clean_normals);
            assert_eq!(a.intrinsics, b.intrinsics);
        }
    }
}
