//! Dense Gaussian voxel map over (occupancy, RGB).
//!
//! Channel 0 stores occupancy, which is the negated signed distance: it is
//! negative in observed free space, crosses zero at surfaces and is positive
//! behind them. Channels 1..=3 hold RGB in `[0, 1]`. Every voxel carries an
//! independent Gaussian per channel, stored as mean and standard deviation.
//!
//! The closed-form update is a per-voxel Gaussian product. Written with
//! precisions `W = σ⁻²` it is the running weighted average of volumetric
//! range-image fusion: `D' = (W D + w d) / (W + w)`, `W' = W + w`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::product_scalar;
use crate::frame::RgbdFrame;
use crate::geometry::Pose;
use crate::scalar::Real;

pub const CHANNELS: usize = 4;
pub const PRIOR_OCCUPANCY: f64 = -0.001;
pub const PRIOR_COLOR: f64 = 0.0;
/// Broad prior: effectively uninformed next to unit-scale updates.
pub const PRIOR_STDDEV: f64 = 1e3;

const SNAPSHOT_MAGIC: &[u8; 8] = b"GVOXMAP\0";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point ({0:.3}, {1:.3}, {2:.3}) is outside the sampling domain")]
    OutOfBounds(f64, f64, f64),
    #[error("no voxel falls inside the observed frustum band")]
    EmptyUpdate,
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid map update: {0}")]
    InvalidUpdate(String),
    #[error("malformed map snapshot: {0}")]
    BadSnapshot(String),
    #[error("image export failed: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Geometry of a dense voxel grid. Voxel centers sit at
/// `origin + (index + 0.5) · voxel_size`; linear indices are x-fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub resolution: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], extent: [f64; 3], resolution: [usize; 3]) -> Result<Self, MapError> {
        let spec = Self {
            origin,
            extent,
            resolution,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A cube of side `side` centered on `center`.
    pub fn cube(center: [f64; 3], side: f64, resolution: usize) -> Result<Self, MapError> {
        Self::new(
            [center[0] - side / 2.0, center[1] - side / 2.0, center[2] - side / 2.0],
            [side; 3],
            [resolution; 3],
        )
    }

    pub fn validate(&self) -> Result<(), MapError> {
        for a in 0..3 {
            if !(self.extent[a] > 0.0 && self.extent[a].is_finite()) {
                return Err(MapError::InvalidGrid(format!("extent[{a}] must be positive")));
            }
            if self.resolution[a] < 2 {
                return Err(MapError::InvalidGrid(format!("resolution[{a}] must be at least 2")));
            }
            if !self.origin[a].is_finite() {
                return Err(MapError::InvalidGrid(format!("origin[{a}] is not finite")));
            }
        }
        let vs = self.voxel_sizes();
        if (vs[0] - vs[1]).abs() > 1e-9 || (vs[0] - vs[2]).abs() > 1e-9 {
            return Err(MapError::InvalidGrid(format!("voxels are not cubic: {vs:?}")));
        }
        Ok(())
    }

    fn voxel_sizes(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.extent[a] / self.resolution[a] as f64)
    }

    pub fn voxel_size(&self) -> f64 {
        self.extent[0] / self.resolution[0] as f64
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let vs = self.voxel_size();
        Vector3::new(
            self.origin[0] + (i as f64 + 0.5) * vs,
            self.origin[1] + (j as f64 + 0.5) * vs,
            self.origin[2] + (k as f64 + 0.5) * vs,
        )
    }

    /// Continuous lattice coordinates, integer at voxel centers.
    #[inline]
    pub fn lattice(&self, p: &Vector3<f64>) -> [f64; 3] {
        let inv = 1.0 / self.voxel_size();
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) * inv - 0.5)
    }

    /// Axis-aligned box spanned by the outermost voxel centers; trilinear
    /// sampling is defined on it.
    pub fn sampling_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let vs = self.voxel_size();
        let lo = Vector3::new(self.origin[0], self.origin[1], self.origin[2]).add_scalar(0.5 * vs);
        let hi = Vector3::new(
            self.origin[0] + self.extent[0],
            self.origin[1] + self.extent[1],
            self.origin[2] + self.extent[2],
        )
        .add_scalar(-0.5 * vs);
        (lo, hi)
    }

    /// The same volume at a different per-axis resolution.
    pub fn with_resolution(&self, resolution: usize) -> Result<Self, MapError> {
        Self::new(self.origin, self.extent, [resolution; 3])
    }
}

#[inline]
fn lattice_cell(spec: &GridSpec, p: &Vector3<f64>) -> Option<(usize, [f64; 3])> {
    let g = spec.lattice(p);
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let max = (spec.resolution[a] - 1) as f64;
        if !(g[a] >= 0.0 && g[a] <= max) {
            return None;
        }
        let i = (g[a].floor() as usize).min(spec.resolution[a] - 2);
        base[a] = i;
        frac[a] = g[a] - i as f64;
    }
    let [nx, ny, _] = spec.resolution;
    Some((base[0] + nx * (base[1] + ny * base[2]), frac))
}

#[inline]
fn lerp_cell<T: Real, const C: usize>(spec: &GridSpec, data: &[[T; C]], i000: usize, frac: [f64; 3], c: usize) -> T {
    let [nx, ny, _] = spec.resolution;
    let (sx, sy, sz) = (1, nx, nx * ny);
    let (fx, fy, fz) = (T::lit(frac[0]), T::lit(frac[1]), T::lit(frac[2]));
    let v = |o: usize| data[i000 + o][c];
    let c00 = v(0) + fx * (v(sx) - v(0));
    let c10 = v(sy) + fx * (v(sy + sx) - v(sy));
    let c01 = v(sz) + fx * (v(sz + sx) - v(sz));
    let c11 = v(sz + sy) + fx * (v(sz + sy + sx) - v(sz + sy));
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    c0 + fz * (c1 - c0)
}

/// Trilinear interpolation of a multi-channel grid. `None` outside the
/// sampling bounds.
#[inline]
pub fn trilinear_sample<T: Real, const C: usize>(spec: &GridSpec, data: &[[T; C]], p: &Vector3<f64>) -> Option<[T; C]> {
    let (i000, frac) = lattice_cell(spec, p)?;
    let mut out = [T::zero(); C];
    for (c, o) in out.iter_mut().enumerate() {
        *o = lerp_cell(spec, data, i000, frac, c);
    }
    Some(out)
}

/// Single-channel variant of [`trilinear_sample`].
#[inline]
pub fn trilinear_channel<T: Real, const C: usize>(
    spec: &GridSpec,
    data: &[[T; C]],
    channel: usize,
    p: &Vector3<f64>,
) -> Option<T> {
    let (i000, frac) = lattice_cell(spec, p)?;
    Some(lerp_cell(spec, data, i000, frac, channel))
}

/// Parameters of the projective SDF update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateParams {
    /// Truncation band in meters.
    pub truncation: f64,
    /// Constant update scale; its inverse square is the update precision.
    pub sigma_update: f64,
}

impl UpdateParams {
    /// Truncation expressed in voxels (2 for clean depth, 4 for noisy depth).
    pub fn for_grid(spec: &GridSpec, truncation_voxels: f64) -> Self {
        Self {
            truncation: truncation_voxels * spec.voxel_size(),
            sigma_update: 1.0,
        }
    }

    pub fn precision(&self) -> f64 {
        1.0 / (self.sigma_update * self.sigma_update)
    }
}

/// Sparse per-voxel Gaussian factors to be multiplied into the map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapUpdate<T: Real = f32> {
    pub indices: Vec<usize>,
    pub mean: Vec<[T; CHANNELS]>,
    pub precision: Vec<[T; CHANNELS]>,
}

impl<T: Real> MapUpdate<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, voxel_count: usize) -> Result<(), MapError> {
        if self.mean.len() != self.indices.len() || self.precision.len() != self.indices.len() {
            return Err(MapError::InvalidUpdate("field lengths differ".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.indices.len());
        for (n, &i) in self.indices.iter().enumerate() {
            if i >= voxel_count {
                return Err(MapError::IndexOutOfRange {
                    index: i,
                    len: voxel_count,
                });
            }
            if !seen.insert(i) {
                return Err(MapError::InvalidUpdate(format!("duplicate index {i}")));
            }
            for c in 0..CHANNELS {
                let p = self.precision[n][c];
                if !(p >= T::zero()) || !p.as_f64().is_finite() || !self.mean[n][c].as_f64().is_finite() {
                    return Err(MapError::InvalidUpdate(format!("bad factor at voxel {i}")));
                }
            }
        }
        Ok(())
    }

    /// The single update equivalent to applying `self` and then `other`.
    pub fn merge(&self, other: &Self) -> Self {
        let mut by_index: std::collections::BTreeMap<usize, ([T; CHANNELS], [T; CHANNELS])> =
            std::collections::BTreeMap::new();
        for upd in [self, other] {
            for n in 0..upd.len() {
                let entry = by_index
                    .entry(upd.indices[n])
                    .or_insert(([T::zero(); CHANNELS], [T::zero(); CHANNELS]));
                for c in 0..CHANNELS {
                    let (m, p) = product_scalar(entry.0[c], entry.1[c], upd.mean[n][c], upd.precision[n][c]);
                    entry.0[c] = m;
                    entry.1[c] = p;
                }
            }
        }
        let mut out = Self {
            indices: Vec::with_capacity(by_index.len()),
            mean: Vec::with_capacity(by_index.len()),
            precision: Vec::with_capacity(by_index.len()),
        };
        for (i, (m, p)) in by_index {
            out.indices.push(i);
            out.mean.push(m);
            out.precision.push(p);
        }
        out
    }
}

/// Cheap summary of the map state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapDigest {
    /// Voxels touched by the most recent update.
    pub updated_voxels: usize,
    /// Mean occupancy stddev over the whole grid.
    pub mean_stddev: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// A 2D plane extracted from the grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Slice2D {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Writes a 16-bit grayscale PNG, mapping `log10(value)` linearly from
    /// `[log_lo, log_hi]` onto `[0, 65535]` (brighter is more certain when
    /// exporting stddev, so the scale is inverted).
    pub fn write_png16(&self, path: &Path, log_lo: f64, log_hi: f64) -> Result<(), MapError> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(self.width as u32, self.height as u32);
        for (n, px) in img.pixels_mut().enumerate() {
            let l = self.data[n].max(f64::MIN_POSITIVE).log10();
            let t = ((log_hi - l) / (log_hi - log_lo)).clamp(0.0, 1.0);
            *px = image::Luma([(t * 65535.0).round() as u16]);
        }
        img.save(path).map_err(|e| MapError::Image(e.to_string()))
    }
}

/// The map belief: independent Gaussians per voxel and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMapBelief<T: Real = f32> {
    pub spec: GridSpec,
    pub mean: Vec<[T; CHANNELS]>,
    pub stddev: Vec<[T; CHANNELS]>,
}

impl<T: Real> VoxelMapBelief<T> {
    /// The prior map: occupancy −0.001, black, stddev 1e3.
    pub fn prior(spec: GridSpec) -> Result<Self, MapError> {
        spec.validate()?;
        let m = [
            T::lit(PRIOR_OCCUPANCY),
            T::lit(PRIOR_COLOR),
            T::lit(PRIOR_COLOR),
            T::lit(PRIOR_COLOR),
        ];
        let s = [T::lit(PRIOR_STDDEV); CHANNELS];
        Ok(Self {
            spec,
            mean: vec![m; spec.len()],
            stddev: vec![s; spec.len()],
        })
    }

    /// Trilinearly interpolated mean (occupancy, r, g, b) at a world point.
    pub fn sample_mean(&self, p: &Vector3<f64>) -> Result<[T; CHANNELS], MapError> {
        trilinear_sample(&self.spec, &self.mean, p).ok_or(MapError::OutOfBounds(p.x, p.y, p.z))
    }

    /// Multiplies every factor of `update` into the belief. Voxels and
    /// channels with zero update precision are left bit-identical. Returns
    /// the number of voxels whose belief changed.
    pub fn apply_update(&mut self, update: &MapUpdate<T>) -> Result<usize, MapError> {
        update.validate(self.spec.len())?;
        let mut touched = 0;
        for n in 0..update.len() {
            let i = update.indices[n];
            let mut changed = false;
            for c in 0..CHANNELS {
                let w = update.precision[n][c];
                if w == T::zero() {
                    continue;
                }
                let s = self.stddev[i][c];
                let prec = T::one() / (s * s);
                let (m, p) = product_scalar(self.mean[i][c], prec, update.mean[n][c], w);
                let mut s_new = T::one() / p.sqrt();
                // rounding in low precision must never make a voxel less certain
                if s_new > s {
                    s_new = s;
                }
                self.mean[i][c] = m;
                self.stddev[i][c] = s_new;
                changed = true;
            }
            touched += changed as usize;
        }
        Ok(touched)
    }

    /// The stddev plane at `index` along `axis`. Rows run along the
    /// higher remaining axis, columns along the lower one.
    pub fn uncertainty_slice(&self, axis: Axis, index: usize, channel: usize) -> Result<Slice2D, MapError> {
        let [nx, ny, nz] = self.spec.resolution;
        let axis_len = match axis {
            Axis::X => nx,
            Axis::Y => ny,
            Axis::Z => nz,
        };
        if index >= axis_len {
            return Err(MapError::IndexOutOfRange { index, len: axis_len });
        }
        if channel >= CHANNELS {
            return Err(MapError::IndexOutOfRange {
                index: channel,
                len: CHANNELS,
            });
        }
        let (width, height) = match axis {
            Axis::X => (ny, nz),
            Axis::Y => (nx, nz),
            Axis::Z => (nx, ny),
        };
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let (i, j, k) = match axis {
                    Axis::X => (index, col, row),
                    Axis::Y => (col, index, row),
                    Axis::Z => (col, row, index),
                };
                data.push(self.stddev[self.spec.linear_index(i, j, k)][channel].as_f64());
            }
        }
        Ok(Slice2D { width, height, data })
    }

    /// Mean occupancy stddev over the grid.
    pub fn mean_stddev(&self) -> f64 {
        let sum: f64 = self.stddev.par_iter().map(|s| s[0].as_f64()).sum();
        sum / self.spec.len() as f64
    }

    /// Little-endian snapshot: magic `GVOXMAP\0`, `u32` version, `u32`
    /// channel count, origin and extent as `3 × f64`, resolution as
    /// `3 × u32`, then all means and all stddevs as `f32`, voxels x-fastest
    /// with the four channels of a voxel adjacent.
    pub fn write_snapshot(&self, out: impl Write) -> Result<(), MapError> {
        let mut w = BufWriter::new(out);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(CHANNELS as u32).to_le_bytes())?;
        for v in self.spec.origin.iter().chain(self.spec.extent.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for r in self.spec.resolution {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        for grid in [&self.mean, &self.stddev] {
            for voxel in grid.iter() {
                for v in voxel {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        self.write_snapshot(File::create(path)?)
    }

    pub fn read_snapshot(input: impl Read) -> Result<Self, MapError> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(MapError::BadSnapshot("wrong magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(MapError::BadSnapshot(format!("unsupported version {version}")));
        }
        let channels = read_u32(&mut r)?;
        if channels as usize != CHANNELS {
            return Err(MapError::BadSnapshot(format!("expected {CHANNELS} channels, got {channels}")));
        }
        let mut f = [0.0f64; 6];
        for v in f.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let mut res = [0usize; 3];
        for v in res.iter_mut() {
            *v = read_u32(&mut r)? as usize;
        }
        let spec = GridSpec::new([f[0], f[1], f[2]], [f[3], f[4], f[5]], res)?;
        let mut grids = [Vec::new(), Vec::new()];
        for grid in grids.iter_mut() {
            grid.reserve(spec.len());
            for _ in 0..spec.len() {
                let mut voxel = [T::zero(); CHANNELS];
                for v in voxel.iter_mut() {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    *v = T::lit(f32::from_le_bytes(b) as f64);
                }
                grid.push(voxel);
            }
        }
        let [mean, stddev] = grids;
        if stddev.iter().flatten().any(|s| !(s.as_f64() > 0.0 && s.as_f64().is_finite())) {
            return Err(MapError::BadSnapshot("non-positive stddev".into()));
        }
        Ok(Self { spec, mean, stddev })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        Self::read_snapshot(File::open(path)?)
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Projective SDF update from one depth frame observed at `pose`.
///
/// A voxel is updated when its center projects onto a valid pixel and lies
/// in front of `observed_depth + truncation` along the optical axis. The
/// signed distance `s = observed_depth − z` is clamped to `±truncation` and
/// negated into occupancy; color is only updated inside the band
/// `|s| ≤ truncation`.
pub fn compute_sdf_update<T: Real>(
    frame: &RgbdFrame,
    pose: &Pose<f64>,
    spec: &GridSpec,
    params: &UpdateParams,
) -> Result<MapUpdate<T>, MapError> {
    let k = &frame.intrinsics;
    let trunc = params.truncation;
    let max_obs = frame
        .depth
        .iter()
        .zip(&frame.valid)
        .filter(|(_, v)| **v)
        .map(|(d, _)| *d)
        .fold(0.0f64, f64::max);
    if max_obs <= 0.0 {
        return Err(MapError::EmptyUpdate);
    }
    let Some(range) = frustum_voxel_range(frame, pose, spec, max_obs + trunc) else {
        return Err(MapError::EmptyUpdate);
    };

    let world_to_cam = pose.inverse();
    let rot = world_to_cam.rotation_matrix();
    let tr = world_to_cam.translation;
    let prec = T::lit(params.precision());
    let (w, h) = (k.width as i64, k.height as i64);

    let slabs: Vec<MapUpdate<T>> = (range[2].0..=range[2].1)
        .into_par_iter()
        .map(|kz| {
            let mut out = MapUpdate {
                indices: Vec::new(),
                mean: Vec::new(),
                precision: Vec::new(),
            };
            for jy in range[1].0..=range[1].1 {
                for ix in range[0].0..=range[0].1 {
                    let p = rot * spec.center(ix, jy, kz) + tr;
                    if p.z <= 0.0 {
                        continue;
                    }
                    let Ok(px) = k.project(&p) else { continue };
                    let (u, v) = (px.x.round() as i64, px.y.round() as i64);
                    if u < 0 || v < 0 || u >= w || v >= h {
                        continue;
                    }
                    let pix = frame.index(u as usize, v as usize);
                    if !frame.valid[pix] {
                        continue;
                    }
                    let s = frame.depth[pix] - p.z;
                    if s < -trunc {
                        continue;
                    }
                    let in_band = s <= trunc;
                    let clamped = s.clamp(-trunc, trunc);
                    let c = frame.color[pix];
                    let color_prec = if in_band { prec } else { T::zero() };
                    out.indices.push(spec.linear_index(ix, jy, kz));
                    out.mean.push([T::lit(-clamped), T::lit(c[0]), T::lit(c[1]), T::lit(c[2])]);
                    out.precision.push([prec, color_prec, color_prec, color_prec]);
                }
            }
            out
        })
        .collect();

    let total: usize = slabs.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(MapError::EmptyUpdate);
    }
    let mut update = MapUpdate {
        indices: Vec::with_capacity(total),
        mean: Vec::with_capacity(total),
        precision: Vec::with_capacity(total),
    };
    for slab in slabs {
        update.indices.extend(slab.indices);
        update.mean.extend(slab.mean);
        update.precision.extend(slab.precision);
    }
    Ok(update)
}

/// Inclusive voxel index ranges covering the camera frustum up to `far`
/// (z-depth), or `None` if it misses the grid.
fn frustum_voxel_range(
    frame: &RgbdFrame,
    pose: &Pose<f64>,
    spec: &GridSpec,
    far: f64,
) -> Option<[(usize, usize); 3]> {
    let k = &frame.intrinsics;
    let (w, h) = (k.width as f64, k.height as f64);
    let mut lo = pose.translation;
    let mut hi = pose.translation;
    for (u, v) in [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)] {
        let corner = k.unproject(&Vector2::new(u, v), far).ok()?;
        let wp = pose.transform_point(&corner);
        lo = lo.inf(&wp);
        hi = hi.sup(&wp);
    }
    let vs = spec.voxel_size();
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        let first = ((lo[a] - spec.origin[a]) / vs - 0.5).floor();
        let last = ((hi[a] - spec.origin[a]) / vs - 0.5).ceil();
        let n = spec.resolution[a] as f64;
        if last < 0.0 || first > n - 1.0 {
            return None;
        }
        range[a] = (first.max(0.0) as usize, last.min(n - 1.0) as usize);
    }
    Some(range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> GridSpec {
        GridSpec::new([-1.0, -1.0, 0.0], [2.0, 2.0, 4.0], [20, 20, 40]).unwrap()
    }

    /// Camera at the origin looking down +z at a wall at depth `d`.
    fn wall_frame(d: f64) -> RgbdFrame {
        let k = CameraIntrinsics::new(20.0, 20.0, 10.0, 10.0, 21, 21, 8.0).unwrap();
        let mut f = RgbdFrame::empty(k, 0.0);
        for i in 0..f.len() {
            f.set(i, d, [0.2, 0.4, 0.6]);
        }
        f
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new([0.0; 3], [1.0, 1.0, 1.0], [1, 2, 2]).is_err());
        assert!(GridSpec::new([0.0; 3], [1.0, 2.0, 1.0], [2, 2, 2]).is_err());
        assert!(GridSpec::new([0.0; 3], [0.0, 1.0, 1.0], [2, 2, 2]).is_err());
        let g = GridSpec::cube([0.0; 3], 14.0, 200).unwrap();
        assert!((g.voxel_size() - 0.07).abs() < 1e-12);
        assert_eq!(g.coords(g.linear_index(3, 5, 7)), [3, 5, 7]);
    }

    #[test]
    fn trilinear_exact_at_centers_and_midpoints() {
        let spec = small_spec();
        let mut map = VoxelMapBelief::<f64>::prior(spec).unwrap();
        let (a, b) = (0.3, -0.9);
        let i0 = spec.linear_index(4, 5, 6);
        map.mean[i0][0] = a;
        map.mean[i0 + 1][0] = b;
        assert_eq!(map.sample_mean(&spec.center(4, 5, 6)).unwrap()[0], a);
        let mid = (spec.center(4, 5, 6) + spec.center(5, 5, 6)) / 2.0;
        assert!((map.sample_mean(&mid).unwrap()[0] - (a + b) / 2.0).abs() < 1e-15);
        assert!(matches!(
            map.sample_mean(&Vector3::new(-0.99, 0.0, 1.0)),
            Err(MapError::OutOfBounds(..))
        ));
    }

    #[test]
    fn trilinear_reproduces_affine_fields() {
        let spec = small_spec();
        let mut map = VoxelMapBelief::<f64>::prior(spec).unwrap();
        let field = |p: &Vector3<f64>| [0.7 * p.x - 1.3 * p.y + 0.4 * p.z + 0.2, p.x, p.y + p.z, -2.0 * p.z];
        for idx in 0..spec.len() {
            let [i, j, k] = spec.coords(idx);
            map.mean[idx] = field(&spec.center(i, j, k));
        }
        let (lo, hi) = spec.sampling_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let p = Vector3::from_fn(|a, _| rng.gen_range(lo[a]..hi[a]));
            let got = map.sample_mean(&p).unwrap();
            let want = field(&p);
            for c in 0..4 {
                assert!((got[c] - want[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wall_update_values() {
        let spec = small_spec();
        let params = UpdateParams {
            truncation: 0.2,
            sigma_update: 1.0,
        };
        // voxel centers along the optical axis lie at x = y = ±0.05; put the
        // camera so that one center row is exactly on the axis
        let pose = Pose::from_translation(Vector3::new(0.05, 0.05, 0.0));
        let wall = 2.05;
        let upd = compute_sdf_update::<f64>(&wall_frame(wall), &pose, &spec, &params).unwrap();
        let find = |k: usize| {
            let idx = spec.linear_index(10, 10, k);
            upd.indices.iter().position(|&i| i == idx).map(|n| (upd.mean[n], upd.precision[n]))
        };
        // center z = (k + 0.5)·0.1: k = 20 → z = 2.05, on the wall
        let (m, p) = find(20).unwrap();
        assert!(m[0].abs() < 1e-12);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 1.0);
        // k = 19 → z = 1.95, half a truncation in front
        let (m, p) = find(19).unwrap();
        assert!((m[0] + 0.1).abs() < 1e-12);
        assert_eq!(p[1], 1.0);
        // far in front: clamped free space, no color
        let (m, p) = find(5).unwrap();
        assert!((m[0] + 0.2).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        // k = 22 → z = 2.25, behind the wall by more than the truncation
        assert!(find(22).is_none());
        let (m, _) = find(21).unwrap();
        assert!((m[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_update_when_frustum_misses_grid() {
        let spec = small_spec();
        let params = UpdateParams::for_grid(&spec, 2.0);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 10.0));
        assert!(matches!(
            compute_sdf_update::<f32>(&wall_frame(2.0), &pose, &spec, &params),
            Err(MapError::EmptyUpdate)
        ));
        let pose = Pose::identity();
        let mut f = wall_frame(2.0);
        f.valid.iter_mut().for_each(|v| *v = false);
        assert!(matches!(
            compute_sdf_update::<f32>(&f, &pose, &spec, &params),
            Err(MapError::EmptyUpdate)
        ));
    }

    #[test]
    fn apply_update_cases() {
        let spec = small_spec();
        let mut map = VoxelMapBelief::<f64>::prior(spec).unwrap();
        let before = map.clone();
        let zero = MapUpdate {
            indices: vec![3, 7],
            mean: vec![[5.0; 4]; 2],
            precision: vec![[0.0; 4]; 2],
        };
        assert_eq!(map.apply_update(&zero).unwrap(), 0);
        assert_eq!(map, before);

        let one = MapUpdate {
            indices: vec![3],
            mean: vec![[0.25, 0.5, 0.5, 0.5]],
            precision: vec![[1.0; 4]],
        };
        map.apply_update(&one).unwrap();
        // prior precision 1e-6 barely moves the mean
        assert!((map.mean[3][0] - 0.25).abs() < 1e-6);
        assert!((map.stddev[3][0] - 1.0).abs() < 1e-6);
        assert_eq!(map.mean[4], before.mean[4]);
        assert_eq!(map.stddev[4], before.stddev[4]);

        let bad = MapUpdate {
            indices: vec![spec.len()],
            mean: vec![[0.0; 4]],
            precision: vec![[1.0; 4]],
        };
        assert!(matches!(map.apply_update(&bad), Err(MapError::IndexOutOfRange { .. })));
    }

    #[test]
    fn repeated_updates_follow_running_average() {
        let spec = small_spec();
        let mut map = VoxelMapBelief::<f64>::prior(spec).unwrap();
        let upd = MapUpdate {
            indices: vec![11],
            mean: vec![[0.3, 0.1, 0.2, 0.3]],
            precision: vec![[1.0; 4]],
        };
        // running weighted average D ← (W D + w d)/(W + w), W ← W + w
        let (mut big_d, mut big_w) = (PRIOR_OCCUPANCY, 1.0 / (PRIOR_STDDEV * PRIOR_STDDEV));
        for k in 1..=50 {
            map.apply_update(&upd).unwrap();
            big_d = (big_w * big_d + 0.3) / (big_w + 1.0);
            big_w += 1.0;
            assert!((map.mean[11][0] - big_d).abs() <= 1e-12 * big_d.abs());
            let w = 1.0 / (map.stddev[11][0] * map.stddev[11][0]);
            assert!((w - big_w).abs() <= 1e-12 * big_w);
            assert!((w - k as f64).abs() < 1e-5);
        }
        assert!((map.mean[11][0] - 0.3).abs() < 1e-6 / 50.0 * 2.0);
    }

    #[test]
    fn merged_update_equals_sequential() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let rand_update = |rng: &mut ChaCha8Rng| {
            let mut idx: Vec<usize> = (0..50).map(|_| rng.gen_range(0..200)).collect();
            idx.sort();
            idx.dedup();
            let n = idx.len();
            MapUpdate {
                indices: idx,
                mean: (0..n).map(|_| [0; 4].map(|_| rng.gen_range(-1.0..1.0))).collect(),
                precision: (0..n).map(|_| [0; 4].map(|_| rng.gen_range(0.0..3.0))).collect(),
            }
        };
        let a = rand_update(&mut rng);
        let b = rand_update(&mut rng);
        let mut seq = VoxelMapBelief::<f64>::prior(spec).unwrap();
        seq.apply_update(&a).unwrap();
        seq.apply_update(&b).unwrap();
        let mut merged = VoxelMapBelief::<f64>::prior(spec).unwrap();
        merged.apply_update(&a.merge(&b)).unwrap();
        for i in 0..200 {
            for c in 0..4 {
                assert!((seq.mean[i][c] - merged.mean[i][c]).abs() < 1e-9);
                assert!((seq.stddev[i][c] - merged.stddev[i][c]).abs() < 1e-9 * seq.stddev[i][c]);
            }
        }
    }

    #[test]
    fn slices_show_frustum_and_occlusion() {
        let spec = small_spec();
        let mut map = VoxelMapBelief::<f32>::prior(spec).unwrap();
        let fresh = map.uncertainty_slice(Axis::Y, 10, 0).unwrap();
        assert!(fresh.data.iter().all(|&s| s == PRIOR_STDDEV as f32 as f64));
        let params = UpdateParams::for_grid(&spec, 2.0);
        let upd = compute_sdf_update(&wall_frame(2.0), &Pose::identity(), &spec, &params).unwrap();
        map.apply_update(&upd).unwrap();
        let s = map.uncertainty_slice(Axis::Y, 10, 0).unwrap();
        // rows run along z: in front of the wall certain, behind the band not
        assert!(s.get(10, 5) < 1.01);
        assert_eq!(s.get(10, 30), PRIOR_STDDEV as f32 as f64);
        // outside the horizontal field of view at z ≈ 0.55
        assert_eq!(s.get(0, 5), PRIOR_STDDEV as f32 as f64);
        assert!(map.uncertainty_slice(Axis::Z, 40, 0).is_err());
        assert!(map.uncertainty_slice(Axis::Z, 0, 4).is_err());
    }

    #[test]
    fn updates_never_increase_stddev_f32() {
        let spec = small_spec();
        let mut map = VoxelMapBelief::<f32>::prior(spec).unwrap();
        let params = UpdateParams::for_grid(&spec, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let yaw = UnitQuaternion::from_euler_angles(0.0, rng.gen_range(-0.3..0.3), 0.0);
            let pose = Pose::new(Vector3::new(rng.gen_range(-0.2..0.2), 0.0, 0.0), yaw);
            let upd = compute_sdf_update(&wall_frame(rng.gen_range(1.0..3.0)), &pose, &spec, &params).unwrap();
            let before = map.stddev.clone();
            map.apply_update(&upd).unwrap();
            for (a, b) in before.iter().zip(&map.stddev) {
                for c in 0..4 {
                    assert!(b[c] <= a[c]);
                }
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let spec = GridSpec::new([0.5, -1.0, 2.0], [1.0, 1.0, 1.5], [4, 4, 6]).unwrap();
        let mut map = VoxelMapBelief::<f32>::prior(spec).unwrap();
        map.mean[5] = [0.1, 0.2, 0.3, 0.4];
        map.stddev[5] = [0.5, 0.6, 0.7, 0.8];
        let mut buf = Vec::new();
        map.write_snapshot(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 48 + 12 + spec.len() * 4 * 4 * 2);
        assert_eq!(&buf[..8], b"GVOXMAP\0");
        // first mean value starts right after the header, little endian
        assert_eq!(&buf[76..80], &(PRIOR_OCCUPANCY as f32).to_le_bytes());
        let back = VoxelMapBelief::<f32>::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, map);
        buf[0] = b'X';
        assert!(matches!(
            VoxelMapBelief::<f32>::read_snapshot(buf.as_slice()),
            Err(MapError::BadSnapshot(_))
        ));
    }

    #[test]
    fn slice_exports() {
        let spec = small_spec();
        let map = VoxelMapBelief::<f32>::prior(spec).unwrap();
        let s = map.uncertainty_slice(Axis::Z, 3, 0).unwrap();
        let mut csv = Vec::new();
        s.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slice.png");
        s.write_png16(&path, -2.0, 3.0).unwrap();
        let img = image::open(&path).unwrap().into_luma16();
        assert_eq!(img.dimensions(), (20, 20));
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
    }
}
