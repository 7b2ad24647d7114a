//! Raymarching emission model: first-crossing hit depth, color lookup and
//! the Laplace image likelihood.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::frame::RgbdFrame;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::scalar::Real;
use crate::voxel_map::{trilinear_channel, GridSpec, VoxelMapBelief};

/// Depth PNG units per meter (TUM convention).
pub const DEPTH_PNG_SCALE: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("frame shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("invalid render parameters: {0}")]
    InvalidParams(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Laplace emission scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionScales {
    pub color: f64,
    pub geo: f64,
}

impl EmissionScales {
    /// Scales for sensors with accurate depth.
    pub fn clean() -> Self {
        Self { color: 0.1, geo: 0.02 }
    }

    /// Scales for noisy (e.g. stereo) depth.
    pub fn noisy() -> Self {
        Self { color: 0.02, geo: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Distance between march samples along the ray.
    pub step_eps: f64,
    /// Occupancy threshold defining a hit.
    pub tau: f64,
    pub max_depth: f64,
    pub emission_scales: EmissionScales,
}

impl RenderParams {
    /// Step of 0.4 voxels and threshold 0.
    pub fn for_grid(spec: &GridSpec, max_depth: f64, emission_scales: EmissionScales) -> Self {
        Self {
            step_eps: 0.4 * spec.voxel_size(),
            tau: 0.0,
            max_depth,
            emission_scales,
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.step_eps > 0.0) || !(self.max_depth > 0.0) {
            return Err(RenderError::InvalidParams("step and max depth must be positive".into()));
        }
        if !(self.emission_scales.color > 0.0 && self.emission_scales.geo > 0.0) {
            return Err(RenderError::InvalidParams("emission scales must be positive".into()));
        }
        if !self.tau.is_finite() {
            return Err(RenderError::InvalidParams("tau must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, d: f64) -> Vector3<f64> {
        self.origin + self.direction * d
    }
}

/// One world-frame ray per pixel, row-major, starting at the camera center.
pub fn generate_rays(pose: &Pose<f64>, k: &CameraIntrinsics) -> Vec<Ray> {
    let rot = pose.rotation_matrix();
    (0..k.pixel_count())
        .map(|i| {
            let (u, v) = (i % k.width, i / k.width);
            Ray {
                origin: pose.translation,
                direction: rot * k.ray_unit_z(u as f64, v as f64).normalize(),
            }
        })
        .collect()
}

/// A scalar occupancy field that can be marched.
pub trait OccupancyField: Sync {
    /// Occupancy at `p`, `None` outside the field's domain.
    fn occupancy(&self, p: &Vector3<f64>) -> Option<f64>;

    /// Axis-aligned domain, if bounded.
    fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        None
    }
}

impl<T: Real> OccupancyField for VoxelMapBelief<T> {
    #[inline]
    fn occupancy(&self, p: &Vector3<f64>) -> Option<f64> {
        trilinear_channel(&self.spec, &self.mean, 0, p).map(|v| v.as_f64())
    }

    fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        Some(self.spec.sampling_bounds())
    }
}

/// Adapts a closure into an unbounded occupancy field.
pub struct FnField<F>(pub F);

impl<F> OccupancyField for FnField<F>
where
    F: Fn(&Vector3<f64>) -> f64 + Sync,
{
    fn occupancy(&self, p: &Vector3<f64>) -> Option<f64> {
        Some((self.0)(p))
    }
}

/// Parameter interval where the ray is inside the box.
fn clip_to_box(ray: &Ray, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let d = ray.direction[a];
        if d.abs() < 1e-15 {
            if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - ray.origin[a]) / d, (hi[a] - ray.origin[a]) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Marches `ray` with samples at `ε, 2ε, …` up to distance `limit` and
/// returns the α-interpolated distance of the first threshold crossing.
fn march(ray: &Ray, field: &impl OccupancyField, params: &RenderParams, limit: f64) -> Option<f64> {
    let eps = params.step_eps;
    let (mut first, mut last) = (eps, limit);
    if let Some((lo, hi)) = field.bounds() {
        let (t0, t1) = clip_to_box(ray, &lo, &hi)?;
        first = first.max(t0);
        last = last.min(t1);
    }
    if first > last {
        return None;
    }
    let k0 = ((first / eps).ceil() as u64).max(1);
    let k1 = (last / eps).floor() as u64;
    let mut prev: Option<(f64, f64)> = None;
    for k in k0..=k1 {
        let d = k as f64 * eps;
        let Some(occ) = field.occupancy(&ray.at(d)) else {
            prev = None;
            continue;
        };
        if occ >= params.tau {
            return Some(match prev {
                Some((dp, op)) => {
                    let alpha = (params.tau - op) / (occ - op);
                    alpha * d + (1.0 - alpha) * dp
                }
                None => d,
            });
        }
        prev = Some((d, occ));
    }
    None
}

/// Distance along the (unit) ray to the first occupancy crossing, or
/// `None` if the threshold is never reached within `params.max_depth`.
pub fn raymarch_hit(ray: &Ray, field: &impl OccupancyField, params: &RenderParams) -> Option<f64> {
    march(ray, field, params, params.max_depth)
}

/// Renders the map mean from `pose`. Depth is z-depth; pixels whose ray
/// never hits, or whose z-depth exceeds `params.max_depth`, are invalid.
pub fn render_rgbd<T: Real>(
    pose: &Pose<f64>,
    map: &VoxelMapBelief<T>,
    k: &CameraIntrinsics,
    params: &RenderParams,
) -> RgbdFrame {
    let mut frame = RgbdFrame::empty(*k, 0.0);
    let rot = pose.rotation_matrix();
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<Option<(f64, [f64; 3])>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let r_cam = k.ray_unit_z(u as f64, v as f64).normalize();
                    let ray = Ray {
                        origin: pose.translation,
                        direction: rot * r_cam,
                    };
                    let d = march(&ray, map, params, params.max_depth / r_cam.z)?;
                    let hit = ray.at(d);
                    let mut color = [0.0; 3];
                    for (c, out) in color.iter_mut().enumerate() {
                        *out = trilinear_channel(&map.spec, &map.mean, c + 1, &hit).map_or(0.0, |x| x.as_f64());
                    }
                    Some((d * r_cam.z, color))
                })
                .collect()
        })
        .collect();
    for (v, row) in rows.into_iter().enumerate() {
        for (u, px) in row.into_iter().enumerate() {
            if let Some((z, color)) = px {
                let i = frame.index(u, v);
                frame.set(i, z, color);
            }
        }
    }
    frame
}

/// Camera-frame unit normals from central differences of unprojected
/// depth, oriented towards the camera. `None` next to invalid pixels or
/// where neighboring depths differ by more than `max_jump`.
pub fn depth_normals(frame: &RgbdFrame, max_jump: f64) -> Vec<Option<Vector3<f64>>> {
    let (w, h) = (frame.width(), frame.height());
    let k = &frame.intrinsics;
    let point = |u: usize, v: usize| {
        let i = frame.index(u, v);
        frame.valid[i].then(|| (frame.depth[i], frame.point(i).unwrap()))
    };
    (0..frame.len())
        .map(|i| {
            let (u, v) = frame.pixel(i);
            if u == 0 || v == 0 || u + 1 >= w || v + 1 >= h || !frame.valid[i] {
                return None;
            }
            let d = frame.depth[i];
            let (dl, l) = point(u - 1, v)?;
            let (dr, r) = point(u + 1, v)?;
            let (du, up) = point(u, v - 1)?;
            let (dd, down) = point(u, v + 1)?;
            if [dl, dr, du, dd].iter().any(|x| (x - d).abs() > max_jump) {
                return None;
            }
            let n = (r - l).cross(&(down - up));
            let norm = n.norm();
            if !(norm > 0.0) {
                return None;
            }
            let n = n / norm;
            let p = k.unproject(&Vector2::new(u as f64, v as f64), d).ok()?;
            Some(if n.dot(&p) > 0.0 { -n } else { n })
        })
        .collect()
}

/// Laplace log-likelihood of `obs` given the rendered mean, summed over
/// pixels valid in both frames: depth with scale `geo`, each color channel
/// with scale `color`.
pub fn emission_loglik(obs: &RgbdFrame, rendered: &RgbdFrame, params: &RenderParams) -> Result<f64, RenderError> {
    if obs.width() != rendered.width() || obs.height() != rendered.height() {
        return Err(RenderError::ShapeMismatch(
            obs.width(),
            obs.height(),
            rendered.width(),
            rendered.height(),
        ));
    }
    let EmissionScales { color: sc, geo: sg } = params.emission_scales;
    let (lc, lg) = ((2.0 * sc).ln(), (2.0 * sg).ln());
    let mut total = 0.0;
    for i in 0..obs.len() {
        if !(obs.valid[i] && rendered.valid[i]) {
            continue;
        }
        total -= (obs.depth[i] - rendered.depth[i]).abs() / sg + lg;
        for c in 0..3 {
            total -= (obs.color[i][c] - rendered.color[i][c]).abs() / sc + lc;
        }
    }
    Ok(total)
}

/// 8-bit RGB PNG of the frame colors; invalid pixels are black.
pub fn write_color_png(frame: &RgbdFrame, path: &Path) -> Result<(), RenderError> {
    let mut img = image::RgbImage::new(frame.width() as u32, frame.height() as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        if frame.valid[i] {
            *px = image::Rgb(frame.color[i].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    img.save(path)?;
    Ok(())
}

/// 16-bit depth PNG at 5000 units per meter; invalid pixels are 0.
pub fn write_depth_png(frame: &RgbdFrame, path: &Path) -> Result<(), RenderError> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(frame.width() as u32, frame.height() as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        if frame.valid[i] {
            *px = image::Luma([(frame.depth[i] * DEPTH_PNG_SCALE).round().min(65535.0) as u16]);
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_map::{compute_sdf_update, UpdateParams};
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(eps: f64) -> RenderParams {
        RenderParams {
            step_eps: eps,
            tau: 0.0,
            max_depth: 8.0,
            emission_scales: EmissionScales::clean(),
        }
    }

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 19.5, 14.5, 40, 30, 8.0).unwrap()
    }

    #[test]
    fn rays_are_unit_and_consistent_with_unproject() {
        let k = cam();
        let pose = Pose::new(Vector3::new(0.3, -0.2, 1.0), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        let rays = generate_rays(&pose, &k);
        assert_eq!(rays.len(), k.pixel_count());
        for (i, r) in rays.iter().enumerate() {
            assert!((r.direction.norm() - 1.0).abs() < 1e-9);
            let (u, v) = (i % k.width, i / k.width);
            let p = pose.transform_point(&k.unproject(&Vector2::new(u as f64, v as f64), 2.5).unwrap());
            let d = (p - r.origin).norm();
            assert!((r.at(d) - p).norm() < 1e-9);
        }
        let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 5, 5, 5.0).unwrap();
        let r = generate_rays(&Pose::identity(), &k)[12];
        assert!((r.direction - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn linear_field_hit_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let dir = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 1.0).normalize();
            let ray = Ray {
                origin: Vector3::zeros(),
                direction: dir,
            };
            let field = FnField(move |p: &Vector3<f64>| p.dot(&dir) - 2.0);
            let eps = rng.gen_range(0.01..0.1);
            let d = raymarch_hit(&ray, &field, &params(eps)).unwrap();
            assert!((d - 2.0).abs() < 1e-9, "{d}");
        }
    }

    #[test]
    fn no_hit_cases() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::z(),
        };
        let free = FnField(|_: &Vector3<f64>| -1.0);
        assert_eq!(raymarch_hit(&ray, &free, &params(0.05)), None);
        let far = FnField(|p: &Vector3<f64>| p.z - 9.0);
        assert_eq!(raymarch_hit(&ray, &far, &params(0.05)), None);
        let inside = FnField(|_: &Vector3<f64>| 1.0);
        assert_eq!(raymarch_hit(&ray, &inside, &params(0.05)), Some(0.05));
    }

    #[test]
    fn empty_map_renders_nothing() {
        let spec = GridSpec::cube([0.0, 0.0, 2.0], 4.0, 40).unwrap();
        let map = VoxelMapBelief::<f32>::prior(spec).unwrap();
        let p = RenderParams::for_grid(&spec, 8.0, EmissionScales::clean());
        let f = render_rgbd(&Pose::identity(), &map, &cam(), &p);
        assert_eq!(f.valid_count(), 0);
    }

    #[test]
    fn fuse_then_render_plane() {
        let spec = GridSpec::cube([0.0, 0.0, 2.0], 4.0, 80).unwrap();
        let mut map = VoxelMapBelief::<f32>::prior(spec).unwrap();
        let k = cam();
        // tilted plane z = 2.2 + 0.2 x
        let mut obs = RgbdFrame::empty(k, 0.0);
        for i in 0..obs.len() {
            let (u, v) = obs.pixel(i);
            let r = k.ray_unit_z(u as f64, v as f64);
            let z = 2.2 / (1.0 - 0.2 * r.x);
            obs.set(i, z, [0.5, 0.25, 0.75]);
        }
        let up = UpdateParams::for_grid(&spec, 2.0);
        let upd = compute_sdf_update(&obs, &Pose::identity(), &spec, &up).unwrap();
        map.apply_update(&upd).unwrap();
        let p = RenderParams::for_grid(&spec, 8.0, EmissionScales::clean());
        let r = render_rgbd(&Pose::identity(), &map, &k, &p);
        let r2 = render_rgbd(&Pose::identity(), &map, &k, &p);
        assert_eq!(r, r2);
        let mut err = 0.0;
        let mut n = 0;
        for i in 0..r.len() {
            if r.valid[i] && obs.valid[i] {
                err += (r.depth[i] - obs.depth[i]).abs();
                n += 1;
                // voxels outside the frustum keep black color and blend in at the border
                let (u, v) = r.pixel(i);
                if u >= 2 && v >= 2 && u + 2 < k.width && v + 2 < k.height {
                    assert!((r.color[i][0] - 0.5).abs() < 1e-3);
                }
            }
        }
        assert!(n as f64 > 0.9 * r.len() as f64);
        assert!(err / (n as f64) < 0.5 * spec.voxel_size());
    }

    #[test]
    fn normals_of_a_wall_face_the_camera() {
        let k = cam();
        let mut f = RgbdFrame::empty(k, 0.0);
        for i in 0..f.len() {
            f.set(i, 2.0, [0.0; 3]);
        }
        let n = depth_normals(&f, 0.1);
        assert!(n[0].is_none());
        let c = n[f.index(10, 10)].unwrap();
        assert!((c - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn emission_loglik_properties() {
        let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4, 5.0).unwrap();
        let mut a = RgbdFrame::empty(k, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for i in 0..a.len() {
            a.set(i, rng.gen_range(0.5..4.0), [rng.gen(), rng.gen(), rng.gen()]);
        }
        a.invalidate(3);
        let p = params(0.01);
        let (sc, sg) = (0.1f64, 0.02f64);
        let n_valid = a.valid_count() as f64;
        let best = emission_loglik(&a, &a, &p).unwrap();
        assert!((best + n_valid * ((2.0 * sg).ln() + 3.0 * (2.0 * sc).ln())).abs() < 1e-9);
        let mut b = a.clone();
        b.depth[5] += 0.01;
        assert!((best - emission_loglik(&b, &a, &p).unwrap() - 0.01 / sg).abs() < 1e-9);

        let mut b = a.clone();
        for i in 0..b.len() {
            b.depth[i] += rng.gen_range(-0.1..0.1);
            b.color[i][1] = rng.gen();
        }
        let mut oracle = 0.0;
        let lap = |r: f64, s: f64| (-(r.abs()) / s).exp() / (2.0 * s);
        for i in 0..a.len() {
            if a.valid[i] {
                oracle += lap(b.depth[i] - a.depth[i], sg).ln();
                for c in 0..3 {
                    oracle += lap(b.color[i][c] - a.color[i][c], sc).ln();
                }
            }
        }
        assert!((emission_loglik(&b, &a, &p).unwrap() - oracle).abs() < 1e-9);
        let small = RgbdFrame::empty(CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 2, 2, 5.0).unwrap(), 0.0);
        assert!(matches!(emission_loglik(&small, &a, &p), Err(RenderError::ShapeMismatch(..))));
    }

    #[test]
    fn depth_png_uses_tum_scale() {
        let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 2, 2, 5.0).unwrap();
        let mut f = RgbdFrame::empty(k, 0.0);
        f.set(0, 1.0, [1.0, 0.0, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        write_depth_png(&f, &path).unwrap();
        let img = image::open(&path).unwrap().into_luma16();
        assert_eq!(img.get_pixel(0, 0).0[0], 5000);
        assert_eq!(img.get_pixel(1, 0).0[0], 0);
        write_color_png(&f, &dir.path().join("c.png")).unwrap();
    }
}
