//! Rigid-body poses, the pinhole camera and the 6-dim tangent chart.
//!
//! Conventions used throughout the crate:
//! - quaternions are Hamilton, serialized as `(w, x, y, z)`, and rotate
//!   body coordinates into the world frame (`world ← body`);
//! - the camera frame is x right, y down, z forward;
//! - a pose tangent is `(translation, rotation vector)`, i.e. the chart of
//!   `R³ × SO(3)`. Perturbations around a base pose are applied in the world
//!   frame: `base ⊞ δ = (t + δ_t, exp(δ_r) · q)`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Rotation angles at or beyond `π - NEAR_PI_MARGIN` are rejected by the log maps.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("rotation angle {0} rad is too close to π for the log map")]
    NearPiRotation(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn so3_exp<T: Real>(omega: &Vector3<T>) -> UnitQuaternion<T> {
    let theta_sq = omega.norm_squared();
    let half = T::lit(0.5);
    let (w, s) = if theta_sq < T::lit(1e-12) {
        // sin(θ/2)/θ ≈ 1/2 − θ²/48
        (T::one() - theta_sq / T::lit(8.0), half - theta_sq / T::lit(48.0))
    } else {
        let theta = theta_sq.sqrt();
        let h = theta * half;
        (h.cos(), h.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, omega.x * s, omega.y * s, omega.z * s))
}

/// Logarithm of a unit quaternion as a rotation vector. Invariant to the sign of `q`.
pub fn so3_log<T: Real>(q: &UnitQuaternion<T>) -> Result<Vector3<T>, GeometryError> {
    let q = q.quaternion();
    let (w, v) = if q.w < T::zero() {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let vn = v.norm();
    let theta = T::lit(2.0) * vn.atan2(w);
    if theta.as_f64() >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(GeometryError::NearPiRotation(theta.as_f64()));
    }
    if vn < T::lit(1e-9) {
        // θ/sin(θ/2) ≈ 2/w (1 + |v|²/(6w²)) for small |v|
        let scale = T::lit(2.0) / w * (T::one() + vn * vn / (T::lit(6.0) * w * w));
        Ok(v * scale)
    } else {
        Ok(v * (theta / vn))
    }
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// `1 − |⟨a, b⟩|`: zero iff the quaternions represent the same rotation.
pub fn quaternion_distance<T: Real>(a: &UnitQuaternion<T>, b: &UnitQuaternion<T>) -> T {
    T::one() - a.coords.dot(&b.coords).abs()
}

/// A rigid transform `world ← body`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Pose<T: Real = f64> {
    pub translation: Vector3<T>,
    pub rotation: UnitQuaternion<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose, renormalizing the rotation.
    pub fn new(translation: Vector3<T>, rotation: UnitQuaternion<T>) -> Self {
        Self {
            translation,
            rotation: renormalize(rotation),
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            translation,
            rotation: UnitQuaternion::identity(),
        }
    }

    /// From a translation and a quaternion given as `(w, x, y, z)`.
    pub fn from_wxyz(translation: Vector3<T>, wxyz: [T; 4]) -> Self {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        Self {
            translation,
            rotation: UnitQuaternion::new_normalize(q),
        }
    }

    /// Quaternion components as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [T; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            translation: self.rotation * other.translation + self.translation,
            rotation: renormalize(self.rotation * other.rotation),
        }
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self {
            translation: -(inv * self.translation),
            rotation: renormalize(inv),
        }
    }

    /// `R·p + t`.
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Tangent coordinates `(t, log q)` of this pose.
    pub fn log(&self) -> Result<Vector6<T>, GeometryError> {
        let r = so3_log(&self.rotation)?;
        Ok(Vector6::new(
            self.translation.x,
            self.translation.y,
            self.translation.z,
            r.x,
            r.y,
            r.z,
        ))
    }

    /// Inverse of [`Pose::log`].
    pub fn exp(xi: &Vector6<T>) -> Self {
        Self {
            translation: xi.fixed_rows::<3>(0).into_owned(),
            rotation: so3_exp(&xi.fixed_rows::<3>(3).into_owned()),
        }
    }

    /// World-frame perturbation `(t + δ_t, exp(δ_r)·q)`.
    pub fn boxplus(&self, delta: &Vector6<T>) -> Self {
        let dt = delta.fixed_rows::<3>(0).into_owned();
        let dr = delta.fixed_rows::<3>(3).into_owned();
        Self {
            translation: self.translation + dt,
            rotation: renormalize(so3_exp(&dr) * self.rotation),
        }
    }

    /// The tangent `δ` with `base ⊞ δ = self`.
    pub fn boxminus(&self, base: &Self) -> Result<Vector6<T>, GeometryError> {
        let dt = self.translation - base.translation;
        let dr = so3_log(&(self.rotation * base.rotation.inverse()))?;
        Ok(Vector6::new(dt.x, dt.y, dt.z, dr.x, dr.y, dr.z))
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        let q = self.rotation.quaternion();
        let c = |v: T| U::lit(v.as_f64());
        Pose {
            translation: Vector3::new(
                c(self.translation.x),
                c(self.translation.y),
                c(self.translation.z),
            ),
            rotation: UnitQuaternion::new_normalize(Quaternion::new(c(q.w), c(q.i), c(q.j), c(q.k))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.as_f64().is_finite())
            && self.rotation.coords.iter().all(|v| v.as_f64().is_finite())
    }
}

fn renormalize<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Linear and angular velocity, both expressed in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        stack(&self.linear, &self.angular)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Linear and angular acceleration in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub linear_accel: Vector3<f64>,
    pub angular_accel: Vector3<f64>,
}

impl Control {
    pub fn new(linear_accel: Vector3<f64>, angular_accel: Vector3<f64>) -> Self {
        Self {
            linear_accel,
            angular_accel,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        stack(&self.linear_accel, &self.angular_accel)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear_accel: v.fixed_rows::<3>(0).into_owned(),
            angular_accel: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

fn stack(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Pinhole camera without distortion. `max_depth` bounds both observed and rendered depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub max_depth: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        max_depth: f64,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            max_depth,
        };
        k.validate()?;
        Ok(k)
    }

    /// A camera with the given horizontal field of view and the principal
    /// point at the image center.
    pub fn from_fov(width: usize, height: usize, hfov_rad: f64, max_depth: f64) -> Result<Self, GeometryError> {
        let f = width as f64 / 2.0 / (hfov_rad / 2.0).tan();
        Self::new(
            f,
            f,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            max_depth,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image must be non-empty");
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return bad("max_depth must be positive and finite");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// `(fx·x/z + cx, fy·y/z + cy)`.
    pub fn project<T: Real>(&self, p: &Vector3<T>) -> Result<Vector2<T>, GeometryError> {
        if p.z <= T::zero() {
            return Err(GeometryError::NonPositiveDepth(p.z.as_f64()));
        }
        Ok(Vector2::new(
            T::lit(self.fx) * p.x / p.z + T::lit(self.cx),
            T::lit(self.fy) * p.y / p.z + T::lit(self.cy),
        ))
    }

    /// Camera-frame point at z-depth `depth` behind pixel `px`.
    pub fn unproject<T: Real>(&self, px: &Vector2<T>, depth: T) -> Result<Vector3<T>, GeometryError> {
        if depth <= T::zero() {
            return Err(GeometryError::NonPositiveDepth(depth.as_f64()));
        }
        Ok(Vector3::new(
            (px.x - T::lit(self.cx)) / T::lit(self.fx) * depth,
            (px.y - T::lit(self.cy)) / T::lit(self.fy) * depth,
            depth,
        ))
    }

    /// Unnormalized camera-frame ray through a pixel, with unit z.
    pub fn ray_unit_z(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// The camera with images downsampled by an integer factor (box filter
    /// of `factor × factor` pixels).
    pub fn downsampled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            // pixel centers: u' + 0.5 = (u + 0.5) / f
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
            max_depth: self.max_depth,
        }
    }
}
