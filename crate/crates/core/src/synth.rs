//! Seeded synthetic RGB-D scenes with analytic normals, a depth-sensor
//! corruption model, and a multiview-style ground-truth noise simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{self, dot, normalize, CameraIntrinsics, DepthMap, HoleMask, NormalMap, Vec3};

/// Splits one user seed into independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Infinite plane through `point` with normal `normal`.
    Plane { point: Vec3, normal: Vec3 },
    /// Box with half extents along its own axes; `rotation` maps box-local
    /// coordinates into the camera frame (columns are the box axes).
    Cuboid { center: Vec3, half_extents: Vec3, rotation: [[f64; 3]; 3] },
    Sphere { center: Vec3, radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Edge length of a 3D checkerboard modulating the albedo, in metres.
    pub checker: Option<f64>,
    /// Candidate for sensor dropout on reflective surfaces.
    pub glossy: bool,
}

/// Declarative scene in the camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub primitives: Vec<Primitive>,
    /// Unit direction towards the light.
    pub light_dir: Vec3,
    pub ambient: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![[0.0; 3]; width * height] }
    }
}

/// Which primitive (and which face of it) each pixel sees, plus
/// per-primitive material flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceLabels {
    pub primitive: Vec<Option<u16>>,
    /// Cuboid face index `2 * axis + (outward sign > 0)`; 0 for other shapes.
    pub face: Vec<u8>,
    pub glossy: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub labels: SurfaceLabels,
}

struct Hit {
    t: f64,
    normal: Vec3,
    face: u8,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn intersect(shape: &Shape, dir: Vec3) -> Option<Hit> {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Plane { point, normal } => {
            let denom = dot(*normal, dir);
            if denom.abs() < EPS {
                return None;
            }
            let t = dot(*normal, *point) / denom;
            (t > EPS).then_some(Hit { t, normal: *normal, face: 0 })
        }
        Shape::Sphere { center, radius } => {
            // |t·d - c|² = r² with |d| = 1
            let b = dot(dir, *center);
            let disc = b * b - dot(*center, *center) + radius * radius;
            if disc < 0.0 {
                return None;
            }
            let t = b - disc.sqrt();
            if t <= EPS {
                return None;
            }
            let p = [dir[0] * t, dir[1] * t, dir[2] * t];
            Some(Hit { t, normal: sub(p, *center), face: 0 })
        }
        Shape::Cuboid { center, half_extents, rotation } => {
            let o = mat_t_vec(rotation, [-center[0], -center[1], -center[2]]);
            let d = mat_t_vec(rotation, dir);
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for k in 0..3 {
                if d[k].abs() < EPS {
                    if o[k].abs() > half_extents[k] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-half_extents[k] - o[k]) / d[k];
                let t2 = (half_extents[k] - o[k]) / d[k];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > t_near {
                    t_near = lo;
                    axis = k;
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_near <= EPS {
                return None;
            }
            let mut local = [0.0; 3];
            local[axis] = -d[axis].signum();
            let face = 2 * axis as u8 + u8::from(local[axis] > 0.0);
            Some(Hit { t: t_near, normal: mat_vec(rotation, local), face })
        }
    }
}

fn checker_factor(p: Vec3, size: f64) -> f64 {
    let parity = p.iter().map(|c| (c / size).floor() as i64).sum::<i64>().rem_euclid(2);
    if parity == 0 {
        1.0
    } else {
        0.45
    }
}

/// Ray-casts the scene: z-depth, camera-facing analytic normals and
/// Lambertian shading of the albedo.
pub fn render_scene(spec: &SceneSpec) -> Result<RenderedScene> {
    spec.intrinsics.validate()?;
    ensure!(spec.width > 0 && spec.height > 0, "scene extent must be positive");
    ensure!(spec.primitives.len() <= u16::MAX as usize, "too many primitives");
    let (w, h) = (spec.width, spec.height);
    let light = normalize(spec.light_dir).unwrap_or([0.0, 0.0, -1.0]);
    let mut rgb = RgbImage::new(w, h);
    let mut depth = DepthMap::all_holes(w, h);
    let mut normals = NormalMap::invalid(w, h);
    let mut ids = vec![None; w * h];
    let mut faces = vec![0u8; w * h];
    for i in 0..w * h {
        let ray = spec.intrinsics.ray((i % w) as f64, (i / w) as f64);
        let Some(dir) = normalize(ray) else { continue };
        let nearest = spec
            .primitives
            .iter()
            .enumerate()
            .filter_map(|(k, p)| intersect(&p.shape, dir).map(|hit| (k, hit)))
            .min_by(|a, b| a.1.t.total_cmp(&b.1.t));
        let Some((k, hit)) = nearest else { continue };
        let Some(n) = normalize(hit.normal) else { continue };
        let p = [dir[0] * hit.t, dir[1] * hit.t, dir[2] * hit.t];
        // shading uses the side actually seen by the ray
        let facing = if dot(n, dir) > 0.0 { [-n[0], -n[1], -n[2]] } else { n };
        let prim = &spec.primitives[k];
        let tex = prim.checker.map_or(1.0, |s| checker_factor(p, s));
        let shade = spec.ambient + (1.0 - spec.ambient) * dot(facing, light).max(0.0);
        rgb.pixels[i] = prim.albedo.map(|a| (a * tex * shade).clamp(0.0, 1.0) as f32);
        depth.set(i, Some(p[2] as f32));
        normals.set(i, Some(geometry::orient_towards_camera(n, p)));
        ids[i] = Some(k as u16);
        faces[i] = hit.face;
    }
    let glossy = spec.primitives.iter().map(|p| p.glossy).collect();
    Ok(RenderedScene { rgb, depth, normals, labels: SurfaceLabels { primitive: ids, face: faces, glossy } })
}

/// Ranges from which [`random_scene`] draws an indoor-like layout: a floor,
/// a back wall that every ray reaches, optional side wall, boxes and spheres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneDistribution {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub hfov_deg: f64,
    /// Downward camera pitch range in degrees.
    pub pitch_deg: [f64; 2],
    pub camera_height: [f64; 2],
    pub wall_distance: [f64; 2],
    pub side_wall_probability: f64,
    pub boxes: [usize; 2],
    pub spheres: [usize; 2],
    pub box_half_extent: [f64; 2],
    pub sphere_radius: [f64; 2],
    pub checker_probability: f64,
    pub glossy_probability: f64,
    pub ambient: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            hfov_deg: 60.0,
            pitch_deg: [12.0, 30.0],
            camera_height: [1.0, 1.6],
            wall_distance: [3.5, 6.0],
            side_wall_probability: 0.5,
            boxes: [1, 3],
            spheres: [0, 2],
            box_half_extent: [0.2, 0.6],
            sphere_radius: [0.2, 0.5],
            checker_probability: 0.5,
            glossy_probability: 0.3,
            ambient: 0.25,
        }
    }
}

impl SceneDistribution {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0 && self.height > 0, "scene extent must be positive");
        ensure!(self.hfov_deg > 0.0 && self.hfov_deg < 150.0, "hfov must be in (0, 150) degrees");
        for (name, r) in [
            ("pitch_deg", self.pitch_deg),
            ("camera_height", self.camera_height),
            ("wall_distance", self.wall_distance),
            ("box_half_extent", self.box_half_extent),
            ("sphere_radius", self.sphere_radius),
        ] {
            ensure!(r[0] <= r[1], "{} range is reversed: {:?}", name, r);
        }
        ensure!(self.boxes[0] <= self.boxes[1] && self.spheres[0] <= self.spheres[1], "count ranges reversed");
        let vfov = 2.0 * ((self.hfov_deg.to_radians() / 2.0).tan() * self.height as f64 / self.width as f64).atan();
        ensure!(
            self.pitch_deg[0] >= 0.0 && self.pitch_deg[1].to_radians() + vfov / 2.0 < std::f64::consts::FRAC_PI_2 - 0.05,
            "pitch range {:?} lets rays miss the back wall",
            self.pitch_deg
        );
        ensure!(self.camera_height[0] > 0.0 && self.wall_distance[0] > 0.0, "distances must be positive");
        for p in [self.side_wall_probability, self.checker_probability, self.glossy_probability, self.ambient] {
            ensure!((0.0..=1.0).contains(&p), "probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn rot_y(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    m
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0), rng.gen_range(0.25..1.0)]
}

/// Draws a scene. Geometry is laid out in a level "room" frame and then
/// rotated into the pitched camera frame.
pub fn random_scene(dist: &SceneDistribution, seed: u64) -> Result<SceneSpec> {
    dist.validate()?;
    let mut rng = rng_for(seed, 1);
    let pitch = uniform(&mut rng, dist.pitch_deg).to_radians();
    let (s, c) = pitch.sin_cos();
    // rows are the camera axes in room coordinates
    let cam: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    let to_cam = |p: Vec3| mat_vec(&cam, p);
    let cam_h = uniform(&mut rng, dist.camera_height);
    let wall = uniform(&mut rng, dist.wall_distance);
    let mut prims = Vec::new();
    let surface = |rng: &mut ChaCha8Rng, shape: Shape, checker_scale: f64| Primitive {
        shape,
        albedo: random_albedo(rng),
        checker: rng.gen_bool(dist.checker_probability).then_some(checker_scale),
        glossy: rng.gen_bool(dist.glossy_probability),
    };
    let floor = surface(
        &mut rng,
        Shape::Plane { point: to_cam([0.0, cam_h, 0.0]), normal: to_cam([0.0, -1.0, 0.0]) },
        0.5,
    );
    prims.push(floor);
    let back = surface(&mut rng, Shape::Plane { point: to_cam([0.0, 0.0, wall]), normal: to_cam([0.0, 0.0, -1.0]) }, 0.6);
    prims.push(back);
    if rng.gen_bool(dist.side_wall_probability) {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x = side * rng.gen_range(1.2..2.5);
        // turned towards the camera so its normal never lies in the image plane
        let turn: f64 = rng.gen_range(8f64..15.0).to_radians();
        let normal = to_cam([-side * turn.cos(), 0.0, -turn.sin()]);
        let p = surface(&mut rng, Shape::Plane { point: to_cam([x, 0.0, 2.0]), normal }, 0.6);
        prims.push(p);
    }
    let depth_range = (1.8, (wall - 0.7).max(2.0));
    let n_boxes = rng.gen_range(dist.boxes[0]..=dist.boxes[1]);
    for _ in 0..n_boxes {
        let he = [
            uniform(&mut rng, dist.box_half_extent),
            uniform(&mut rng, dist.box_half_extent),
            uniform(&mut rng, dist.box_half_extent),
        ];
        let z = rng.gen_range(depth_range.0..depth_range.1);
        let x = rng.gen_range(-0.5..0.5) * z * 0.9;
        let center = to_cam([x, cam_h - he[1], z]);
        let rotation = mat_mul(&cam, &rot_y(rng.gen_range(15f64..75.0).to_radians()));
        let p = surface(&mut rng, Shape::Cuboid { center, half_extents: he, rotation }, 0.25);
        prims.push(p);
    }
    let n_spheres = rng.gen_range(dist.spheres[0]..=dist.spheres[1]);
    for _ in 0..n_spheres {
        let r = uniform(&mut rng, dist.sphere_radius);
        let z = rng.gen_range(depth_range.0..depth_range.1);
        let x = rng.gen_range(-0.5..0.5) * z * 0.9;
        let lift = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..0.6) };
        let p = surface(&mut rng, Shape::Sphere { center: to_cam([x, cam_h - r - lift, z]), radius: r }, 0.2);
        prims.push(p);
    }
    let light = normalize([rng.gen_range(-0.6..0.6), rng.gen_range(-1.0..-0.3), rng.gen_range(-1.0..-0.2)])
        .expect("non-zero light");
    Ok(SceneSpec {
        seed,
        width: dist.width,
        height: dist.height,
        intrinsics: CameraIntrinsics::from_fov(dist.width, dist.height, dist.hfov_deg),
        primitives: prims,
        light_dir: to_cam(light),
        ambient: dist.ambient,
    })
}

/// Depth-sensor degradation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    /// Number of elliptical holes punched per frame.
    pub hole_count: usize,
    /// Semi-axis range of the elliptical holes, in pixels.
    pub hole_radius: [f64; 2],
    /// Probability that a glossy surface loses all of its depth.
    pub glossy_dropout: f64,
    /// Depths beyond this distance (metres) are dropped.
    pub max_depth: Option<f64>,
    /// Chebyshev radius of the band around depth discontinuities, in pixels.
    pub edge_dilation: usize,
    /// Standard deviation of the Gaussian jitter inside the edge band, metres.
    pub edge_jitter: f64,
    /// Neighbour depth gap that counts as a discontinuity, metres.
    pub edge_threshold: f64,
    /// Depth quantization step in metres; 0 disables quantization.
    pub quantization: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            hole_count: 2,
            hole_radius: [2.0, 6.0],
            glossy_dropout: 0.5,
            max_depth: Some(5.5),
            edge_dilation: 1,
            edge_jitter: 0.03,
            edge_threshold: 0.05,
            quantization: 0.001,
        }
    }
}

impl CorruptionSpec {
    /// A spec that leaves depth untouched.
    pub fn none() -> Self {
        Self {
            hole_count: 0,
            hole_radius: [0.0, 0.0],
            glossy_dropout: 0.0,
            max_depth: None,
            edge_dilation: 0,
            edge_jitter: 0.0,
            edge_threshold: 0.05,
            quantization: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..=1.0).contains(&self.glossy_dropout), "glossy_dropout must lie in [0, 1]");
        ensure!(
            self.hole_radius[0] >= 0.0 && self.hole_radius[0] <= self.hole_radius[1],
            "hole_radius must be a non-negative ascending range"
        );
        ensure!(self.edge_jitter >= 0.0 && self.edge_threshold >= 0.0, "edge parameters must be non-negative");
        ensure!(self.quantization >= 0.0, "quantization must be non-negative");
        if let Some(m) = self.max_depth {
            ensure!(m >= 0.0, "max_depth must be non-negative");
        }
        Ok(())
    }
}

/// Pixels whose 4-neighbour depth gap exceeds `threshold`, dilated by `radius`.
pub fn edge_band(depth: &DepthMap, threshold: f64, radius: usize) -> Vec<bool> {
    let (w, h) = (depth.width(), depth.height());
    let mut edge = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(d) = depth.at(x, y) else { continue };
            let gap = |xx: usize, yy: usize| depth.at(xx, yy).is_some_and(|e| ((e - d) as f64).abs() > threshold);
            if (x + 1 < w && gap(x + 1, y)) || (y + 1 < h && gap(x, y + 1)) {
                edge[y * w + x] = true;
                if x + 1 < w && gap(x + 1, y) {
                    edge[y * w + x + 1] = true;
                }
                if y + 1 < h && gap(x, y + 1) {
                    edge[(y + 1) * w + x] = true;
                }
            }
        }
    }
    if radius == 0 {
        return edge;
    }
    let mut band = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !edge[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for xx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    band[yy * w + xx] = true;
                }
            }
        }
    }
    band
}

/// Applies sensor artifacts: elliptical holes, glossy-surface dropout,
/// far cutoff, Gaussian jitter near depth edges, and quantization. The
/// returned mask is exactly the set of invalid output pixels.
pub fn corrupt_depth(
    clean: &DepthMap,
    labels: Option<&SurfaceLabels>,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<(DepthMap, HoleMask)> {
    spec.validate()?;
    let (w, h) = (clean.width(), clean.height());
    if let Some(l) = labels {
        ensure!(l.primitive.len() == w * h, "surface labels do not match depth extent");
    }
    let mut rng = rng_for(seed, 2);
    let mut out = clean.clone();

    for _ in 0..spec.hole_count {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let a = uniform(&mut rng, spec.hole_radius);
        let b = uniform(&mut rng, spec.hole_radius);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        if a <= 0.0 || b <= 0.0 {
            continue;
        }
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    out.set(y * w + x, None);
                }
            }
        }
    }

    if let Some(labels) = labels {
        let dropped: Vec<bool> =
            labels.glossy.iter().map(|&g| g && spec.glossy_dropout > 0.0 && rng.gen_bool(spec.glossy_dropout)).collect();
        for (i, id) in labels.primitive.iter().enumerate() {
            if id.is_some_and(|k| dropped[k as usize]) {
                out.set(i, None);
            }
        }
    }

    if let Some(max_depth) = spec.max_depth {
        for i in 0..w * h {
            if clean.get(i).is_some_and(|d| d as f64 > max_depth) {
                out.set(i, None);
            }
        }
    }

    if spec.edge_jitter > 0.0 {
        let band = edge_band(clean, spec.edge_threshold, spec.edge_dilation);
        let noise = Normal::new(0.0, spec.edge_jitter).expect("valid sigma");
        for (i, &in_band) in band.iter().enumerate() {
            if !in_band {
                continue;
            }
            // draw for every band pixel so the stream does not depend on holes
            let jitter = noise.sample(&mut rng);
            if let Some(d) = out.get(i) {
                out.set(i, Some((d as f64 + jitter) as f32));
            }
        }
    }

    if spec.quantization > 0.0 {
        for i in 0..w * h {
            if let Some(d) = out.get(i) {
                let q = (d as f64 / spec.quantization).round() * spec.quantization;
                out.set(i, Some(q as f32));
            }
        }
    }

    let mask = out.hole_mask();
    Ok((out, mask))
}

/// Ground-truth noise of meshed multiview reconstructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtNoiseSpec {
    /// Edge of the piecewise-constant patches, in pixels.
    pub cell_size: usize,
    /// Maximum per-cell displacement of the sampled patch, in pixels.
    pub misalignment: usize,
}

impl Default for GtNoiseSpec {
    fn default() -> Self {
        Self { cell_size: 4, misalignment: 2 }
    }
}

/// Replaces normals with per-cell averages taken from a randomly displaced
/// window, on a randomly offset cell grid, then renormalizes.
pub fn perturb_gt(gt: &NormalMap, spec: &GtNoiseSpec, seed: u64) -> Result<NormalMap> {
    ensure!(spec.cell_size >= 1, "cell_size must be at least 1");
    let (w, h) = (gt.width(), gt.height());
    let cell = spec.cell_size;
    let amp = spec.misalignment as i64;
    let mut rng = rng_for(seed, 3);
    let ox = rng.gen_range(0..cell);
    let oy = rng.gen_range(0..cell);
    let cells_x = (w + ox).div_ceil(cell);
    let cells_y = (h + oy).div_ceil(cell);
    let mut out = NormalMap::invalid(w, h);
    for cyi in 0..cells_y {
        for cxi in 0..cells_x {
            let dx = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
            let dy = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
            let x0 = (cxi * cell) as i64 - ox as i64;
            let y0 = (cyi * cell) as i64 - oy as i64;
            let mut acc = [0.0f64; 3];
            let mut any = false;
            for y in y0..y0 + cell as i64 {
                for x in x0..x0 + cell as i64 {
                    let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    if let Some(n) = gt.at(sx, sy) {
                        for k in 0..3 {
                            acc[k] += n[k] as f64;
                        }
                        any = true;
                    }
                }
            }
            if !any {
                continue;
            }
            for y in y0.max(0)..(y0 + cell as i64).min(h as i64) {
                for x in x0.max(0)..(x0 + cell as i64).min(w as i64) {
                    let i = y as usize * w + x as usize;
                    if gt.valid()[i] {
                        out.set(i, Some(acc));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Multi-scale targets, coarse to fine; the last entry is `gt` itself. Each
/// coarser level sums the valid vectors of a 2×2 window and renormalizes.
pub fn build_pyramid(gt: &NormalMap, levels: usize) -> Result<Vec<NormalMap>> {
    ensure!(levels >= 1, "pyramid needs at least one level");
    let f = 1usize << (levels - 1);
    ensure!(
        gt.width() % f == 0 && gt.height() % f == 0,
        "{}x{} is not divisible by {}",
        gt.width(),
        gt.height(),
        f
    );
    let mut out = vec![gt.clone()];
    for _ in 1..levels {
        let fine = out.last().expect("non-empty");
        let (w, h) = (fine.width() / 2, fine.height() / 2);
        let mut coarse = NormalMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f64; 3];
                let mut any = false;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    if let Some(n) = fine.at(2 * x + dx, 2 * y + dy) {
                        for k in 0..3 {
                            acc[k] += n[k] as f64;
                        }
                        any = true;
                    }
                }
                if any {
                    coarse.set(y * w + x, Some(acc));
                }
            }
        }
        out.push(coarse);
    }
    out.reverse();
    Ok(out)
}

/// A fronto-parallel scene split at `edge_col` into two planes with
/// different orientations; the canonical input for ground-truth noise studies.
pub fn edge_scene(width: usize, height: usize, edge_col: usize) -> NormalMap {
    let left = normalize([0.6, 0.0, -0.8]).expect("unit");
    let right = normalize([-0.6, 0.0, -0.8]).expect("unit");
    let normals = (0..width * height).map(|i| Some(if i % width < edge_col { left } else { right })).collect();
    NormalMap::from_options(width, height, normals).expect("extent matches")
}

/// Per-pixel arithmetic mean and coordinatewise median of several normal
/// maps, each renormalized. Pixels valid in no input stay invalid.
pub fn mean_and_median(maps: &[NormalMap]) -> Result<(NormalMap, NormalMap)> {
    ensure!(!maps.is_empty(), "need at least one map");
    let (w, h) = (maps[0].width(), maps[0].height());
    ensure!(maps.iter().all(|m| m.width() == w && m.height() == h), "maps differ in extent");
    let mut mean = NormalMap::invalid(w, h);
    let mut median = NormalMap::invalid(w, h);
    let mut samples: [Vec<f64>; 3] = Default::default();
    for i in 0..w * h {
        for s in samples.iter_mut() {
            s.clear();
        }
        for m in maps {
            if let Some(n) = m.get(i) {
                for k in 0..3 {
                    samples[k].push(n[k] as f64);
                }
            }
        }
        if samples[0].is_empty() {
            continue;
        }
        let count = samples[0].len() as f64;
        mean.set(i, Some([0, 1, 2].map(|k| samples[k].iter().sum::<f64>() / count)));
        median.set(i, Some([0, 1, 2].map(|k| crate::eval::median(&mut samples[k]))));
    }
    Ok((mean, median))
}

/// Mean over rows of the normal jump `|n(edge_col) - n(edge_col - 1)|`.
pub fn edge_gradient(map: &NormalMap, edge_col: usize) -> f64 {
    assert!(edge_col >= 1 && edge_col < map.width());
    let mut total = 0.0;
    let mut rows = 0;
    for y in 0..map.height() {
        if let (Some(a), Some(b)) = (map.at(edge_col - 1, y), map.at(edge_col, y)) {
            total += (0..3).map(|k| ((a[k] - b[k]) as f64).powi(2)).sum::<f64>().sqrt();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

/// One training/evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub rgb: RgbImage,
    /// Sensor depth after corruption.
    pub depth: DepthMap,
    pub holes: HoleMask,
    /// Supervision target (possibly with simulated reconstruction noise).
    pub normals: NormalMap,
    /// Analytic normals, before any ground-truth noise.
    pub clean_normals: NormalMap,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneDistribution,
    pub corruption: CorruptionSpec,
    /// Ground-truth noise; absent means targets are the analytic normals.
    pub gt_noise: Option<GtNoiseSpec>,
}

/// Renders, corrupts and labels the sample identified by `seed`.
pub fn generate_sample(spec: &DatasetSpec, seed: u64) -> Result<Sample> {
    let scene = random_scene(&spec.scene, seed)?;
    let rendered = render_scene(&scene)?;
    let (depth, holes) = corrupt_depth(&rendered.depth, Some(&rendered.labels), &spec.corruption, seed)?;
    let normals = match &spec.gt_noise {
        Some(noise) => perturb_gt(&rendered.normals, noise, seed)?,
        None => rendered.normals.clone(),
    };
    Ok(Sample {
        seed,
        intrinsics: scene.intrinsics,
        rgb: rendered.rgb,
        depth,
        holes,
        normals,
        clean_normals: rendered.normals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{angle_between_deg, normal_from_depth};

    fn plane_scene(w: usize, h: usize, prims: Vec<Primitive>) -> SceneSpec {
        SceneSpec {
            seed: 0,
            width: w,
            height: h,
            intrinsics: CameraIntrinsics::from_fov(w, h, 60.0),
            primitives: prims,
            light_dir: [0.0, 0.0, -1.0],
            ambient: 0.2,
        }
    }

    fn flat(shape: Shape) -> Primitive {
        Primitive { shape, albedo: [0.8, 0.5, 0.3], checker: None, glossy: false }
    }

    #[test]
    fn fronto_parallel_plane_renders_constant() {
        let s = plane_scene(16, 12, vec![flat(Shape::Plane { point: [0.0, 0.0, 3.0], normal: [0.0, 0.0, -1.0] })]);
        let r = render_scene(&s).unwrap();
        for i in 0..16 * 12 {
            assert!((r.depth.get(i).unwrap() - 3.0).abs() < 1e-5);
            assert_eq!(r.normals.get(i).unwrap(), [0.0, 0.0, -1.0]);
        }
    }

    #[test]
    fn sphere_centre_normal_points_at_camera() {
        let s = plane_scene(
            17,
            17,
            vec![
                flat(Shape::Plane { point: [0.0, 0.0, 6.0], normal: [0.0, 0.0, -1.0] }),
                flat(Shape::Sphere { center: [0.0, 0.0, 3.0], radius: 1.0 }),
            ],
        );
        let r = render_scene(&s).unwrap();
        let n = r.normals.at(8, 8).unwrap();
        assert!(angle_between_deg(n, [0.0, 0.0, -1.0]) < 1e-3);
        assert!((r.depth.at(8, 8).unwrap() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn cuboid_front_face_and_background() {
        let s = plane_scene(
            32,
            32,
            vec![
                flat(Shape::Plane { point: [0.0, 0.0, 8.0], normal: [0.0, 0.0, -1.0] }),
                flat(Shape::Cuboid {
                    center: [0.0, 0.0, 4.0],
                    half_extents: [0.5, 0.5, 0.5],
                    rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                }),
            ],
        );
        let r = render_scene(&s).unwrap();
        assert!((r.depth.at(16, 16).unwrap() - 3.5).abs() < 1e-5);
        assert!((r.depth.at(0, 0).unwrap() - 8.0).abs() < 1e-5);
        assert_eq!(r.labels.primitive[16 * 32 + 16], Some(1));
    }

    #[test]
    fn random_scenes_cover_every_pixel() {
        let dist = SceneDistribution::default();
        for seed in 0..10 {
            let r = render_scene(&random_scene(&dist, seed).unwrap()).unwrap();
            assert_eq!(r.depth.valid_count(), 64 * 64, "seed {seed}");
            assert_eq!(r.normals.valid_count(), 64 * 64, "seed {seed}");
            assert!(r.normals.raw().iter().all(|n| n[2] <= 0.0));
        }
    }

    #[test]
    fn clean_depth_normals_match_analytic() {
        let dist = SceneDistribution::default();
        for seed in 0..40 {
            let scene = random_scene(&dist, seed).unwrap();
            let r = render_scene(&scene).unwrap();
            let fitted = normal_from_depth(&r.depth, &scene.intrinsics, 3, 3).unwrap();
            let err = interior_mean_error(&r, &fitted);
            assert!(err < 1.5, "seed {seed}: {err}");
        }
    }

    /// Mean angular error over pixels whose 5×5 neighbourhood lies on one surface.
    pub(crate) fn interior_mean_error(r: &RenderedScene, fitted: &NormalMap) -> f64 {
        let (w, h) = (r.depth.width(), r.depth.height());
        let l = &r.labels;
        let mut total = 0.0;
        let mut count = 0;
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let id = (l.primitive[y * w + x], l.face[y * w + x]);
                let uniform = (y - 2..=y + 2)
                    .all(|yy| (x - 2..=x + 2).all(|xx| (l.primitive[yy * w + xx], l.face[yy * w + xx]) == id));
                if !uniform {
                    continue;
                }
                if let (Some(a), Some(b)) = (fitted.at(x, y), r.normals.at(x, y)) {
                    total += angle_between_deg(a, b);
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn zero_corruption_is_identity() {
        let r = render_scene(&random_scene(&SceneDistribution::default(), 3).unwrap()).unwrap();
        let (d, m) = corrupt_depth(&r.depth, Some(&r.labels), &CorruptionSpec::none(), 9).unwrap();
        assert_eq!(d, r.depth);
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn far_cutoff_below_scene_drops_everything() {
        let r = render_scene(&random_scene(&SceneDistribution::default(), 4).unwrap()).unwrap();
        let spec = CorruptionSpec { max_depth: Some(0.1), ..CorruptionSpec::none() };
        let (d, m) = corrupt_depth(&r.depth, None, &spec, 1).unwrap();
        assert_eq!(d.valid_count(), 0);
        assert_eq!(m.count(), 64 * 64);
    }

    #[test]
    fn corruption_is_deterministic_and_mask_consistent() {
        let r = render_scene(&random_scene(&SceneDistribution::default(), 5).unwrap()).unwrap();
        let spec = CorruptionSpec { hole_count: 4, glossy_dropout: 1.0, ..CorruptionSpec::default() };
        let (a, ma) = corrupt_depth(&r.depth, Some(&r.labels), &spec, 17).unwrap();
        let (b, mb) = corrupt_depth(&r.depth, Some(&r.labels), &spec, 17).unwrap();
        assert!(a.raw().iter().zip(b.raw()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ma, mb);
        for i in 0..a.len() {
            assert_eq!(ma.holes()[i], !a.valid()[i]);
        }
        let (c, _) = corrupt_depth(&r.depth, Some(&r.labels), &spec, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn edge_jitter_only_touches_the_band() {
        let r = render_scene(&random_scene(&SceneDistribution::default(), 6).unwrap()).unwrap();
        let spec = CorruptionSpec { edge_dilation: 1, edge_jitter: 0.05, ..CorruptionSpec::none() };
        let (d, _) = corrupt_depth(&r.depth, None, &spec, 2).unwrap();
        let band = edge_band(&r.depth, spec.edge_threshold, 1);
        assert!(band.iter().any(|&b| b));
        for i in 0..d.len() {
            if !band[i] {
                assert_eq!(d.get(i), r.depth.get(i));
            }
        }
    }

    #[test]
    fn invalid_corruption_spec_is_rejected() {
        let d = DepthMap::all_holes(4, 4);
        let bad = CorruptionSpec { glossy_dropout: 1.5, ..CorruptionSpec::none() };
        assert!(corrupt_depth(&d, None, &bad, 0).is_err());
        let bad = CorruptionSpec { edge_jitter: -1.0, ..CorruptionSpec::none() };
        assert!(corrupt_depth(&d, None, &bad, 0).is_err());
    }

    #[test]
    fn unit_cells_without_shift_are_identity() {
        let r = render_scene(&random_scene(&SceneDistribution::default(), 7).unwrap()).unwrap();
        let out = perturb_gt(&r.normals, &GtNoiseSpec { cell_size: 1, misalignment: 0 }, 5).unwrap();
        for i in 0..out.len() {
            let (a, b) = (out.get(i).unwrap(), r.normals.get(i).unwrap());
            assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-6));
        }
    }

    #[test]
    fn perturbed_gt_stays_unit_and_is_piecewise_constant() {
        let r = render_scene(&random_scene(&SceneDistribution::default(), 8).unwrap()).unwrap();
        let spec = GtNoiseSpec { cell_size: 4, misalignment: 2 };
        let out = perturb_gt(&r.normals, &spec, 11).unwrap();
        assert_eq!(out.valid_count(), r.normals.valid_count());
        for n in out.raw() {
            let len = n.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((len - 1.0).abs() < 1e-4);
        }
        let distinct: std::collections::HashSet<[u32; 3]> = out.raw().iter().map(|n| n.map(f32::to_bits)).collect();
        assert!(distinct.len() <= (64 / 4 + 1) * (64 / 4 + 1));
        assert!(perturb_gt(&r.normals, &GtNoiseSpec { cell_size: 0, misalignment: 0 }, 0).is_err());
    }

    #[test]
    fn pyramid_cases() {
        let constant = NormalMap::from_options(8, 8, vec![Some([0.0, 0.6, -0.8]); 64]).unwrap();
        let p = build_pyramid(&constant, 4).unwrap();
        assert_eq!(p.iter().map(|m| m.width()).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
        for level in &p {
            for n in level.raw() {
                assert!((n[1] - 0.6).abs() < 1e-6 && (n[2] + 0.8).abs() < 1e-6);
            }
        }
        let empty = build_pyramid(&NormalMap::invalid(8, 8), 4).unwrap();
        assert!(empty.iter().all(|m| m.valid_count() == 0));
        assert!(build_pyramid(&NormalMap::invalid(12, 8), 4).is_err());
    }

    #[test]
    fn pyramid_matches_pool_then_normalize() {
        use rand::Rng;
        let mut rng = rng_for(1, 99);
        let opts = (0..16 * 16)
            .map(|_| rng.gen_bool(0.8).then(|| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), -1.0]))
            .collect();
        let fine = NormalMap::from_options(16, 16, opts).unwrap();
        let pyr = build_pyramid(&fine, 3).unwrap();
        // oracle: average-pool the 4×4 block directly, then normalize
        let coarse = &pyr[0];
        for y in 0..4 {
            for x in 0..4 {
                let mut acc = [0.0f64; 3];
                let mut mid = [[0.0f64; 3]; 4];
                for (q, (mx, my)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        if let Some(n) = fine.at(4 * x + 2 * mx + dx, 4 * y + 2 * my + dy) {
                            for k in 0..3 {
                                mid[q][k] += n[k] as f64;
                            }
                        }
                    }
                }
                for m in mid {
                    if let Some(u) = normalize(m) {
                        for k in 0..3 {
                            acc[k] += u[k];
                        }
                    }
                }
                match (normalize(acc), coarse.at(x, y)) {
                    (Some(e), Some(g)) => assert!((0..3).all(|k| (e[k] - g[k] as f64).abs() < 1e-5)),
                    (None, None) => {}
                    other => panic!("validity mismatch {other:?}"),
                }
            }
        }
    }

    #[test]
    fn median_of_noisy_targets_is_sharper_than_mean() {
        let gt = edge_scene(32, 16, 16);
        let spec = GtNoiseSpec { cell_size: 4, misalignment: 3 };
        let draws: Vec<NormalMap> = (0..100).map(|s| perturb_gt(&gt, &spec, s).unwrap()).collect();
        let (mean, median) = mean_and_median(&draws).unwrap();
        let (gm, gd) = (edge_gradient(&mean, 16), edge_gradient(&median, 16));
        assert!(gd > gm, "median {gd} vs mean {gm}");
    }

    #[test]
    fn samples_are_deterministic() {
        let spec = DatasetSpec { gt_noise: Some(GtNoiseSpec::default()), ..DatasetSpec::default() };
        let a = generate_sample(&spec, 42).unwrap();
        let b = generate_sample(&spec, 42).unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.normals, b.normals);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.holes, b.holes);
        assert!(a.holes.count() > 0);
    }
}
