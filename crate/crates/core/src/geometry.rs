//! Pinhole camera geometry, least-squares normals from depth, angular error.
//!
//! Camera frame: x right, y down, z forward. Normals face the camera, i.e.
//! their z-component is negative.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite(),
            "focal lengths must be positive, got fx={} fy={}",
            self.fx,
            self.fy
        );
        ensure!(self.cx.is_finite() && self.cy.is_finite(), "principal point must be finite");
        Ok(())
    }

    /// Intrinsics with the given horizontal field of view and a centred
    /// principal point at pixel-centre coordinates.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let fx = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self { fx, fy: fx, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 }
    }

    /// Viewing ray through pixel (u, v), scaled to unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let r = self.ray(u, v);
        [r[0] * depth, r[1] * depth, depth]
    }

    /// Pixel coordinates of a camera-frame point in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }
}

/// Per-pixel metric depth with holes.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f32>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map from raw values; non-positive or non-finite entries are holes.
    pub fn from_raw(width: usize, height: usize, raw: Vec<f32>) -> Result<Self> {
        ensure!(raw.len() == width * height, "depth buffer has {} values for {}x{}", raw.len(), width, height);
        let valid: Vec<bool> = raw.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let depth = raw.iter().zip(&valid).map(|(&d, &ok)| if ok { d } else { 0.0 }).collect();
        Ok(Self { width, height, depth, valid })
    }

    pub fn all_holes(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![0.0; width * height], valid: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    /// Depth at pixel index `i`, `None` for holes.
    pub fn get(&self, i: usize) -> Option<f32> {
        self.valid[i].then_some(self.depth[i])
    }

    pub fn at(&self, x: usize, y: usize) -> Option<f32> {
        self.get(y * self.width + x)
    }

    /// Raw buffer with holes stored as 0.
    pub fn raw(&self) -> &[f32] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn set(&mut self, i: usize, value: Option<f32>) {
        match value {
            Some(d) if d.is_finite() && d > 0.0 => {
                self.depth[i] = d;
                self.valid[i] = true;
            }
            _ => {
                self.depth[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn hole_mask(&self) -> HoleMask {
        HoleMask { width: self.width, height: self.height, holes: self.valid.iter().map(|v| !v).collect() }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel unit normals with validity.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<[f32; 3]>,
    valid: Vec<bool>,
}

impl NormalMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self { width, height, normals: vec![[0.0; 3]; width * height], valid: vec![false; width * height] }
    }

    /// Builds a map from per-pixel vectors; `None` marks invalid pixels.
    /// Valid vectors are renormalized; zero or non-finite vectors become invalid.
    pub fn from_options(width: usize, height: usize, normals: Vec<Option<Vec3>>) -> Result<Self> {
        ensure!(normals.len() == width * height, "normal buffer has {} entries for {}x{}", normals.len(), width, height);
        let mut map = Self::invalid(width, height);
        for (i, n) in normals.into_iter().enumerate() {
            map.set(i, n);
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<[f32; 3]> {
        self.valid[i].then_some(self.normals[i])
    }

    pub fn at(&self, x: usize, y: usize) -> Option<[f32; 3]> {
        self.get(y * self.width + x)
    }

    pub fn raw(&self) -> &[[f32; 3]] {
        &self.normals
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn set(&mut self, i: usize, n: Option<Vec3>) {
        let unit = n.and_then(normalize);
        match unit {
            Some(u) => {
                self.normals[i] = [u[0] as f32, u[1] as f32, u[2] as f32];
                self.valid[i] = true;
            }
            None => {
                self.normals[i] = [0.0; 3];
                self.valid[i] = false;
            }
        }
    }

    pub fn invalidate(&mut self, i: usize) {
        self.set(i, None);
    }
}

/// True where sensor depth is missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoleMask {
    width: usize,
    height: usize,
    holes: Vec<bool>,
}

impl HoleMask {
    pub fn new(width: usize, height: usize, holes: Vec<bool>) -> Result<Self> {
        ensure!(holes.len() == width * height, "mask has {} entries for {}x{}", holes.len(), width, height);
        Ok(Self { width, height, holes })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn holes(&self) -> &[bool] {
        &self.holes
    }

    pub fn count(&self) -> usize {
        self.holes.iter().filter(|&&h| h).count()
    }
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

/// Camera-frame point for every pixel, `None` for holes.
pub fn unproject(depth: &DepthMap, intr: &CameraIntrinsics) -> Vec<Option<Vec3>> {
    let w = depth.width();
    (0..depth.len())
        .map(|i| depth.get(i).map(|d| intr.unproject_pixel((i % w) as f64, (i / w) as f64, d as f64)))
        .collect()
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in ascending order with matching unit eigenvectors.
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [Vec3; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..50 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let scale = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2) + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A ← Jᵀ A J with J the (p, q) Givens rotation
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (values, vectors)
}

/// Total-least-squares plane normal through `points`: the eigenvector of the
/// centred covariance with the smallest eigenvalue. `None` when fewer than
/// three points are given or the two smallest eigenvalues tie (collinear or
/// coincident points). The sign is left as produced by the solver.
pub fn fit_plane_normal(points: &[Vec3]) -> Option<Vec3> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    let (values, vectors) = symmetric_eigen3(cov);
    let trace = values.iter().sum::<f64>();
    if !(trace > 0.0) || values[1] - values[0] <= 1e-9 * trace {
        return None;
    }
    normalize(vectors[0])
}

/// Flips `n` to face the camera (negative z). Vectors exactly perpendicular to
/// the optical axis are oriented against the viewing ray through `point`.
pub fn orient_towards_camera(n: Vec3, point: Vec3) -> Vec3 {
    let flip = if n[2] != 0.0 { n[2] > 0.0 } else { dot(n, point) > 0.0 };
    if flip {
        [-n[0], -n[1], -n[2]]
    } else {
        n
    }
}

/// Normals from depth by fitting a plane to the valid unprojected points in
/// each pixel's `window`×`window` neighbourhood.
pub fn normal_from_depth(depth: &DepthMap, intr: &CameraIntrinsics, window: usize, min_valid: usize) -> Result<NormalMap> {
    ensure!(window >= 3 && window % 2 == 1, "window must be odd and at least 3, got {}", window);
    ensure!(min_valid >= 3, "min_valid must be at least 3, got {}", min_valid);
    intr.validate()?;
    let (w, h) = (depth.width(), depth.height());
    let points = unproject(depth, intr);
    let r = window / 2;
    let mut out = NormalMap::invalid(w, h);
    let mut neigh = Vec::with_capacity(window * window);
    for y in 0..h {
        for x in 0..w {
            let Some(center) = points[y * w + x] else { continue };
            neigh.clear();
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    if let Some(p) = points[yy * w + xx] {
                        neigh.push(p);
                    }
                }
            }
            if neigh.len() < min_valid {
                continue;
            }
            if let Some(n) = fit_plane_normal(&neigh) {
                out.set(y * w + x, Some(orient_towards_camera(n, center)));
            }
        }
    }
    Ok(out)
}

/// Angle in degrees between two unit vectors, with the cosine clamped to [-1, 1].
pub fn angle_between_deg(a: [f32; 3], b: [f32; 3]) -> f64 {
    // atan2 form: exact zero for identical inputs and well-conditioned near 0°,
    // where acos of a rounded dot product is not.
    let (a, b) = (a.map(f64::from), b.map(f64::from));
    norm(cross(a, b)).atan2(dot(a, b)).to_degrees()
}

/// Per-pixel angular error in degrees; `None` unless both maps are valid.
pub fn angle_error(pred: &NormalMap, gt: &NormalMap) -> Result<Vec<Option<f64>>> {
    ensure!(
        pred.width() == gt.width() && pred.height() == gt.height(),
        "normal maps differ in size: {}x{} vs {}x{}",
        pred.width(),
        pred.height(),
        gt.width(),
        gt.height()
    );
    Ok((0..pred.len())
        .map(|i| match (pred.get(i), gt.get(i)) {
            (Some(p), Some(g)) => Some(angle_between_deg(p, g)),
            _ => None,
        })
        .collect())
}
