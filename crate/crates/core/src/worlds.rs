//! Synthetic ground-truth worlds and TUM RGB-D ingestion.
//!
//! Scene files are TOML:
//!
//! ```toml
//! bounds_min = [-3.0, -3.0, -0.5]
//! bounds_max = [3.0, 3.0, 3.0]
//!
//! [[primitives]]
//! kind = "box"
//! center = [0.0, 0.0, 0.4]
//! half_extents = [0.5, 0.3, 0.4]
//! albedo = [0.8, 0.4, 0.2]
//! texture_period = 0.3      # optional smooth albedo modulation
//!
//! [[primitives]]
//! kind = "sphere"
//! center = [1.0, 0.5, 0.3]
//! radius = 0.3
//! albedo = [0.2, 0.6, 0.9]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::RgbdFrame;
use crate::geometry::{so3_log, CameraIntrinsics, Control, Pose, Twist};
use crate::renderer::DEPTH_PNG_SCALE;

/// Sphere tracing stops once the distance bound drops below this.
const HIT_TOLERANCE: f64 = 1e-9;
const MAX_TRACE_STEPS: usize = 2000;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("trajectory is degenerate at index {0}: timestamps must strictly increase")]
    DegenerateTrajectory(usize),
    #[error("missing index file {0}")]
    MissingIndexFile(PathBuf),
    #[error("no rgb/depth pairs could be associated")]
    NoAssociations,
    #[error("{file}:{line}: {message}")]
    Parse { file: PathBuf, line: usize, message: String },
    #[error("scene file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{message}")]
    Geometry { message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        albedo: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        texture_period: Option<f64>,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        texture_period: Option<f64>,
    },
}

impl Primitive {
    /// Exact signed distance to this primitive.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Box {
                center, half_extents, ..
            } => {
                let q = (p - Vector3::from(*center)).abs() - Vector3::from(*half_extents);
                q.sup(&Vector3::zeros()).norm() + q.max().min(0.0)
            }
            Primitive::Sphere { center, radius, .. } => (p - Vector3::from(*center)).norm() - radius,
        }
    }

    /// Surface color at `p`.
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let (albedo, period) = match self {
            Primitive::Box {
                albedo, texture_period, ..
            }
            | Primitive::Sphere {
                albedo, texture_period, ..
            } => (albedo, texture_period),
        };
        let Some(period) = period else { return *albedo };
        let k = 2.0 * std::f64::consts::PI / period;
        let f = 0.7 + 0.1 * ((k * p.x).sin() + (k * p.y).sin() + (k * p.z).sin());
        albedo.map(|a| (a * f).clamp(0.0, 1.0))
    }

    fn validate(&self) -> Result<(), WorldError> {
        let (ok, albedo) = match self {
            Primitive::Box {
                half_extents, albedo, ..
            } => (half_extents.iter().all(|h| *h > 0.0), albedo),
            Primitive::Sphere { radius, albedo, .. } => (*radius > 0.0, albedo),
        };
        if !ok {
            return Err(WorldError::InvalidScene("primitive sizes must be positive".into()));
        }
        if albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(WorldError::InvalidScene("albedo must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Primitive::Box {
                center, half_extents, ..
            } => (
                Vector3::from(*center) - Vector3::from(*half_extents),
                Vector3::from(*center) + Vector3::from(*half_extents),
            ),
            Primitive::Sphere { center, radius, .. } => (
                Vector3::from(*center).add_scalar(-radius),
                Vector3::from(*center).add_scalar(*radius),
            ),
        }
    }
}

/// Union of analytic primitives inside an axis-aligned bounding volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub primitives: Vec<Primitive>,
}

impl SyntheticScene {
    pub fn new(bounds_min: [f64; 3], bounds_max: [f64; 3], primitives: Vec<Primitive>) -> Result<Self, WorldError> {
        let scene = Self {
            bounds_min,
            bounds_max,
            primitives,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.primitives.is_empty() {
            return Err(WorldError::InvalidScene("scene has no primitives".into()));
        }
        let (lo, hi) = (Vector3::from(self.bounds_min), Vector3::from(self.bounds_max));
        if (0..3).any(|a| !(hi[a] > lo[a])) {
            return Err(WorldError::InvalidScene("empty bounds".into()));
        }
        for p in &self.primitives {
            p.validate()?;
            let (a, b) = p.aabb();
            if (0..3).any(|i| a[i] < lo[i] - 1e-9 || b[i] > hi[i] + 1e-9) {
                return Err(WorldError::InvalidScene(format!("primitive {p:?} leaves the bounds")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, WorldError> {
        let scene: Self = toml::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    /// Axis-aligned room of inner size `inner` (centered on `center`, floor
    /// at `center.z − inner.z/2`) built from six wall slabs of `thickness`.
    pub fn room_walls(center: [f64; 3], inner: [f64; 3], thickness: f64, albedo: [f64; 3], texture: Option<f64>) -> Vec<Primitive> {
        let c = Vector3::from(center);
        let h = Vector3::from(inner) / 2.0;
        let t = thickness / 2.0;
        let mut walls = Vec::new();
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut wc = c;
                wc[axis] += sign * (h[axis] + t);
                let mut he = h.add_scalar(2.0 * t);
                he[axis] = t;
                walls.push(Primitive::Box {
                    center: wc.into(),
                    half_extents: he.into(),
                    albedo,
                    texture_period: texture,
                });
            }
        }
        walls
    }
}

/// Signed distance of the primitive union and the albedo of the nearest
/// primitive.
pub fn scene_sdf(scene: &SyntheticScene, p: &Vector3<f64>) -> (f64, [f64; 3]) {
    let mut best = f64::INFINITY;
    let mut which = 0;
    for (i, prim) in scene.primitives.iter().enumerate() {
        let d = prim.sdf(p);
        if d < best {
            best = d;
            which = i;
        }
    }
    (best, scene.primitives[which].albedo(p))
}

/// Camera pose at `eye` looking at `target`, with `up` pointing up in the
/// image (camera y is down).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose<f64> {
    let f = (target - eye).normalize();
    let right = f.cross(up).normalize();
    let down = f.cross(&right);
    let m = Matrix3::from_columns(&[right, down, f]);
    Pose::new(*eye, UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)))
}

fn sphere_trace(scene: &SyntheticScene, origin: &Vector3<f64>, dir: &Vector3<f64>, limit: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..MAX_TRACE_STEPS {
        let d = scene_sdf(scene, &(origin + dir * t)).0;
        if d < HIT_TOLERANCE {
            return Some(t);
        }
        t += d;
        if t > limit {
            return None;
        }
    }
    None
}

/// Exact first-hit depth (z) and albedo per pixel by sphere tracing.
pub fn render_ground_truth(scene: &SyntheticScene, pose: &Pose<f64>, k: &CameraIntrinsics) -> RgbdFrame {
    let rot = pose.rotation_matrix();
    let rows: Vec<Vec<Option<(f64, [f64; 3])>>> = (0..k.height)
        .into_par_iter()
        .map(|v| {
            (0..k.width)
                .map(|u| {
                    let r_cam = k.ray_unit_z(u as f64, v as f64).normalize();
                    let dir = rot * r_cam;
                    let t = sphere_trace(scene, &pose.translation, &dir, k.max_depth / r_cam.z)?;
                    let hit = pose.translation + dir * t;
                    Some((t * r_cam.z, scene_sdf(scene, &hit).1))
                })
                .collect()
        })
        .collect();
    let mut frame = RgbdFrame::empty(*k, 0.0);
    for (v, row) in rows.into_iter().enumerate() {
        for (u, px) in row.into_iter().enumerate() {
            if let Some((z, c)) = px {
                let i = frame.index(u, v);
                frame.set(i, z, c);
            }
        }
    }
    frame
}

/// A camera trajectory with its sensor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub trajectory: Vec<(f64, Pose<f64>)>,
    pub camera: CameraIntrinsics,
    pub depth_noise: f64,
    pub color_noise: f64,
}

/// One synthetic time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub frame: RgbdFrame,
    /// Control that takes the previous ground-truth velocity to this one.
    pub control: Control,
    pub pose: Pose<f64>,
    pub velocity: Twist,
}

/// Ground-truth velocities: `v_k` is the finite-difference velocity over
/// `(k−1, k]`, and the first frame reuses `v_1` (zero for a single frame).
pub fn trajectory_velocities(trajectory: &[(f64, Pose<f64>)]) -> Result<Vec<Twist>, WorldError> {
    let mut out = Vec::with_capacity(trajectory.len());
    for k in 1..trajectory.len() {
        let (t0, p0) = &trajectory[k - 1];
        let (t1, p1) = &trajectory[k];
        let dt = t1 - t0;
        if !(dt > 0.0) {
            return Err(WorldError::DegenerateTrajectory(k));
        }
        let w = so3_log(&(p1.rotation * p0.rotation.inverse())).map_err(|e| WorldError::Geometry {
            message: format!("step {k}: {e}"),
        })?;
        out.push(Twist::new((p1.translation - p0.translation) / dt, w / dt));
    }
    let first = out.first().copied().unwrap_or_else(Twist::zero);
    out.insert(0, first);
    Ok(out)
}

/// Lazily renders a synthetic sequence; noise is drawn from a generator
/// seeded once, so a given seed always yields the same frames.
pub struct SyntheticSequence<'a> {
    scene: &'a SyntheticScene,
    spec: &'a SequenceSpec,
    velocities: Vec<Twist>,
    next: usize,
    rng: ChaCha8Rng,
    dt_exponent: i32,
}

impl Iterator for SyntheticSequence<'_> {
    type Item = SyntheticFrame;

    fn next(&mut self) -> Option<SyntheticFrame> {
        let k = self.next;
        let (t, pose) = *self.spec.trajectory.get(k)?;
        self.next += 1;
        let velocity = self.velocities[k];
        let control = if k == 0 {
            Control::zero()
        } else {
            let dt = t - self.spec.trajectory[k - 1].0;
            let g = dt.powi(self.dt_exponent);
            Control::from_vector(&((velocity.to_vector() - self.velocities[k - 1].to_vector()) / g))
        };
        let mut frame = render_ground_truth(self.scene, &pose, &self.spec.camera);
        frame.timestamp = t;
        let dn = Normal::new(0.0, self.spec.depth_noise.max(0.0)).expect("finite stddev");
        let cn = Normal::new(0.0, self.spec.color_noise.max(0.0)).expect("finite stddev");
        for i in 0..frame.len() {
            // draws happen for every pixel so noise does not depend on validity
            let nd = dn.sample(&mut self.rng);
            let nc = [0; 3].map(|_| cn.sample(&mut self.rng));
            if frame.valid[i] {
                let c = [0, 1, 2].map(|j| (frame.color[i][j] + nc[j]).clamp(0.0, 1.0));
                frame.set(i, frame.depth[i] + nd, c);
            }
        }
        Some(SyntheticFrame {
            frame,
            control,
            pose,
            velocity,
        })
    }
}

/// Synthesizes observations along `spec.trajectory`. Controls are
/// back-derived for a velocity update `v' = v + u·dt^dt_exponent`, so the
/// transition reproduces the trajectory exactly when noise is zero.
pub fn synthesize_sequence<'a>(
    scene: &'a SyntheticScene,
    spec: &'a SequenceSpec,
    seed: u64,
    dt_exponent: i32,
) -> Result<SyntheticSequence<'a>, WorldError> {
    scene.validate()?;
    Ok(SyntheticSequence {
        scene,
        spec,
        velocities: trajectory_velocities(&spec.trajectory)?,
        next: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        dt_exponent,
    })
}

/// Named synthetic scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSetup {
    pub scene: SyntheticScene,
    pub sequence: SequenceSpec,
}

/// A 4 × 4 × 2.5 m textured room with furniture; the camera orbits the
/// room center at 1.2 m radius and 1.3 m height while looking at the
/// opposite walls. The world z axis points up; the floor is at z = 0.
pub fn room_scene() -> SyntheticScene {
    let mut prims = SyntheticScene::room_walls([0.0, 0.0, 1.25], [4.0, 4.0, 2.5], 0.1, [0.75, 0.7, 0.6], Some(0.9));
    prims.push(Primitive::Box {
        center: [1.2, 0.9, 0.375],
        half_extents: [0.5, 0.35, 0.375],
        albedo: [0.8, 0.45, 0.2],
        texture_period: Some(0.5),
    });
    prims.push(Primitive::Box {
        center: [-1.5, -1.2, 0.8],
        half_extents: [0.3, 0.5, 0.8],
        albedo: [0.3, 0.5, 0.8],
        texture_period: Some(0.6),
    });
    prims.push(Primitive::Sphere {
        center: [-1.0, 1.3, 0.35],
        radius: 0.35,
        albedo: [0.85, 0.3, 0.35],
        texture_period: Some(0.4),
    });
    prims.push(Primitive::Box {
        center: [0.8, -1.6, 1.0],
        half_extents: [0.4, 0.2, 0.25],
        albedo: [0.4, 0.8, 0.4],
        texture_period: Some(0.5),
    });
    SyntheticScene::new([-2.2, -2.2, -0.2], [2.2, 2.2, 2.7], prims).expect("room scene is valid")
}

/// Camera used by the synthetic scenarios: `height × width` pixels with a
/// 70° horizontal field of view.
pub fn synthetic_camera(width: usize, height: usize) -> CameraIntrinsics {
    CameraIntrinsics::from_fov(width, height, 70f64.to_radians(), 8.0).expect("valid camera")
}

/// The `room_orbit` scenario: `frames` poses at 30 Hz sweeping a quarter
/// turn around the room center.
pub fn room_orbit(frames: usize, width: usize, height: usize, depth_noise: f64) -> SyntheticSetup {
    let dt = 1.0 / 30.0;
    let trajectory = (0..frames)
        .map(|k| {
            let s = k as f64 / 100.0;
            let angle = 0.3 + std::f64::consts::FRAC_PI_2 * s;
            let eye = Vector3::new(1.2 * angle.cos(), 1.2 * angle.sin(), 1.3 + 0.1 * (3.0 * s).sin());
            // look across the room, slightly ahead of the radial direction
            let a = angle + std::f64::consts::PI + 0.4;
            let target = Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 0.8);
            (k as f64 * dt, look_at(&eye, &target, &Vector3::z()))
        })
        .collect();
    SyntheticSetup {
        scene: room_scene(),
        sequence: SequenceSpec {
            trajectory,
            camera: synthetic_camera(width, height),
            depth_noise,
            color_noise: 0.0,
        },
    }
}

/// Looks up a named synthetic scenario.
pub fn named_synthetic(name: &str, frames: usize, width: usize, height: usize, depth_noise: f64) -> Option<SyntheticSetup> {
    match name {
        "room_orbit" => Some(room_orbit(frames, width, height, depth_noise)),
        _ => None,
    }
}

/// Options for reading a TUM RGB-D sequence directory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TumConfig {
    /// Intrinsics at the native image resolution.
    pub intrinsics: CameraIntrinsics,
    pub target_width: usize,
    pub target_height: usize,
    /// Maximum timestamp difference for association, seconds.
    pub association_window: f64,
}

impl Default for TumConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480, 8.0).expect("valid"),
            target_width: 160,
            target_height: 120,
            association_window: 0.02,
        }
    }
}

/// A loaded TUM frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TumFrame {
    pub frame: RgbdFrame,
    pub ground_truth: Option<Pose<f64>>,
}

fn parse_index(path: &Path, fields: usize) -> Result<Vec<(f64, Vec<String>)>, WorldError> {
    if !path.exists() {
        return Err(WorldError::MissingIndexFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let err = |message: String| WorldError::Parse {
            file: path.to_path_buf(),
            line: n + 1,
            message,
        };
        if parts.len() < fields + 1 {
            return Err(err(format!("expected {} fields, found {}", fields + 1, parts.len())));
        }
        let t: f64 = parts[0].parse().map_err(|_| err(format!("bad timestamp {:?}", parts[0])))?;
        out.push((t, parts[1..].iter().map(|s| s.to_string()).collect()));
    }
    Ok(out)
}

/// Index of the entry in `sorted` closest in time to `t`, if within `window`.
fn nearest(sorted: &[f64], t: f64, window: f64) -> Option<usize> {
    let i = sorted.partition_point(|x| *x < t);
    [i.checked_sub(1), (i < sorted.len()).then_some(i)]
        .into_iter()
        .flatten()
        .min_by(|a, b| (sorted[*a] - t).abs().total_cmp(&(sorted[*b] - t).abs()))
        .filter(|j| (sorted[*j] - t).abs() <= window)
}

/// Reads a TUM trajectory file (`timestamp tx ty tz qx qy qz qw`).
pub fn read_tum_trajectory(path: &Path) -> Result<Vec<(f64, Pose<f64>)>, WorldError> {
    parse_index(path, 7)?
        .into_iter()
        .enumerate()
        .map(|(n, (t, f))| {
            let v: Result<Vec<f64>, _> = f.iter().take(7).map(|s| s.parse::<f64>()).collect();
            let v = v.map_err(|e| WorldError::Parse {
                file: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            Ok((t, Pose::from_wxyz(Vector3::new(v[0], v[1], v[2]), [v[6], v[3], v[4], v[5]])))
        })
        .collect()
}

/// Reads `rgb.txt`, `depth.txt` and optionally `groundtruth.txt`, pairing
/// every depth image with the nearest color image within the association
/// window. Images are decoded lazily by the returned iterator.
pub fn load_tum_rgbd(dir: &Path, config: &TumConfig) -> Result<TumSequence, WorldError> {
    let rgb = parse_index(&dir.join("rgb.txt"), 1)?;
    let depth = parse_index(&dir.join("depth.txt"), 1)?;
    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.exists() {
        read_tum_trajectory(&gt_path)?
    } else {
        Vec::new()
    };
    let rgb_t: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let gt_t: Vec<f64> = gt.iter().map(|g| g.0).collect();
    let mut used = BTreeMap::new();
    let mut pairs = Vec::new();
    for (t, f) in &depth {
        let Some(j) = nearest(&rgb_t, *t, config.association_window) else { continue };
        if used.insert(j, ()).is_some() {
            continue;
        }
        let pose = nearest(&gt_t, *t, config.association_window).map(|g| gt[g].1);
        pairs.push(TumEntry {
            timestamp: *t,
            depth: dir.join(&f[0]),
            rgb: dir.join(&rgb[j].1[0]),
            ground_truth: pose,
        });
    }
    if pairs.is_empty() {
        return Err(WorldError::NoAssociations);
    }
    let k = &config.intrinsics;
    if k.width % config.target_width != 0
        || k.height % config.target_height != 0
        || k.width / config.target_width != k.height / config.target_height
    {
        return Err(WorldError::InvalidScene(format!(
            "cannot box-downsample {}x{} to {}x{}",
            k.width, k.height, config.target_width, config.target_height
        )));
    }
    Ok(TumSequence {
        entries: pairs,
        factor: k.width / config.target_width,
        intrinsics: *k,
        next: 0,
    })
}

#[derive(Debug, Clone)]
struct TumEntry {
    timestamp: f64,
    depth: PathBuf,
    rgb: PathBuf,
    ground_truth: Option<Pose<f64>>,
}

/// Associated TUM frames, decoded on demand.
pub struct TumSequence {
    entries: Vec<TumEntry>,
    factor: usize,
    intrinsics: CameraIntrinsics,
    next: usize,
}

impl TumSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics.downsampled(self.factor)
    }
}

impl Iterator for TumSequence {
    type Item = Result<TumFrame, WorldError>;

    fn next(&mut self) -> Option<Self::Item> {
        let e = self.entries.get(self.next)?.clone();
        self.next += 1;
        Some(decode_tum_pair(&e, &self.intrinsics, self.factor))
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage, WorldError> {
    image::open(path).map_err(|source| WorldError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn decode_tum_pair(e: &TumEntry, k: &CameraIntrinsics, factor: usize) -> Result<TumFrame, WorldError> {
    let depth = open_image(&e.depth)?.into_luma16();
    let rgb = open_image(&e.rgb)?.into_rgb8();
    if depth.dimensions() != (k.width as u32, k.height as u32) || rgb.dimensions() != depth.dimensions() {
        return Err(WorldError::InvalidScene(format!(
            "{}: image size does not match {}x{}",
            e.depth.display(),
            k.width,
            k.height
        )));
    }
    let small = k.downsampled(factor);
    let mut frame = RgbdFrame::empty(small, e.timestamp);
    for v in 0..small.height {
        for u in 0..small.width {
            let (mut dsum, mut dn) = (0.0, 0usize);
            let mut csum = [0.0; 3];
            for dv in 0..factor {
                for du in 0..factor {
                    let (x, y) = ((u * factor + du) as u32, (v * factor + dv) as u32);
                    let d = depth.get_pixel(x, y).0[0];
                    if d > 0 {
                        dsum += d as f64 / DEPTH_PNG_SCALE;
                        dn += 1;
                    }
                    let c = rgb.get_pixel(x, y).0;
                    for j in 0..3 {
                        csum[j] += c[j] as f64 / 255.0;
                    }
                }
            }
            let n = (factor * factor) as f64;
            let i = frame.index(u, v);
            // a block counts as valid when at least half its pixels have depth
            let d = if 2 * dn >= factor * factor && dn > 0 {
                dsum / dn as f64
            } else {
                0.0
            };
            frame.set(i, d, csum.map(|c| c / n));
        }
    }
    Ok(TumFrame {
        frame,
        ground_truth: e.ground_truth,
    })
}

/// Unprojects every valid pixel of `frame` observed at `pose` into world
/// coordinates.
pub fn world_points(frame: &RgbdFrame, pose: &Pose<f64>) -> Vec<Vector3<f64>> {
    (0..frame.len())
        .filter(|i| frame.valid[*i])
        .map(|i| {
            let (u, v) = frame.pixel(i);
            let p = frame
                .intrinsics
                .unproject(&Vector2::new(u as f64, v as f64), frame.depth[i])
                .expect("valid depth is positive");
            pose.transform_point(&p)
        })
        .collect()
}
