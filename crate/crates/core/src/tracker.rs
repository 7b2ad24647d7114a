//! Pose tracking against a rendered anchor: sampled L1 alignment with a
//! dynamics prior, Laplace covariance and velocity fusion.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, RowVector6, Vector2, Vector3, Vector6};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{cholesky_jittered, recombine, symmetrize, BeliefError, Gaussian, LinearGaussianConditional};
use crate::dynamics::StateBelief;
use crate::frame::RgbdFrame;
use crate::geometry::{skew, so3_log, GeometryError, Pose, Twist};
use crate::renderer::{depth_normals, render_rgbd, EmissionScales, RenderParams};
use crate::scalar::Real;
use crate::voxel_map::VoxelMapBelief;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("no valid pixel could be aligned to the anchor")]
    NoValidPixels,
    #[error("tracking lost: mean |geo| {mean_geo:.3} m, valid fraction {valid_fraction:.3}")]
    TrackingLost { mean_geo: f64, valid_fraction: f64 },
    #[error("invalid tracker parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerParams {
    pub steps: usize,
    pub lr_translation: f64,
    pub lr_rotation: f64,
    pub pixel_samples: usize,
    /// Point-to-plane distance above which a pixel is an outlier (meters).
    pub geo_outlier: f64,
    /// Color difference above which a pixel's color is an outlier.
    pub photo_outlier: f64,
    pub laplace_ema: f64,
    /// Relative damping of `2JᵀJ`, scaled by its mean diagonal.
    pub damping: f64,
    /// Below this fraction of aligned observed pixels tracking is lost.
    pub min_valid_fraction: f64,
    /// Second-moment decay of the optimizer.
    pub beta2: f64,
    /// Tangent step of the finite-difference Jacobians.
    pub fd_step: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_translation: 0.001,
            lr_rotation: 0.00036,
            pixel_samples: 200,
            geo_outlier: 0.45,
            photo_outlier: 0.15,
            laplace_ema: 0.8,
            damping: 1e-8,
            min_valid_fraction: 0.05,
            beta2: 0.999,
            fd_step: 1e-6,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let bad = |m: &str| Err(TrackerError::InvalidParams(m.into()));
        if self.steps == 0 || self.pixel_samples == 0 {
            return bad("steps and pixel samples must be positive");
        }
        if !(self.lr_translation > 0.0 && self.lr_rotation > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.geo_outlier > 0.0 && self.photo_outlier > 0.0) {
            return bad("outlier thresholds must be positive");
        }
        if !(0.0..1.0).contains(&self.laplace_ema) || !(0.0..1.0).contains(&self.beta2) {
            return bad("ema and beta2 must lie in [0, 1)");
        }
        if !(self.damping >= 0.0 && self.fd_step > 0.0) {
            return bad("damping must be non-negative and the FD step positive");
        }
        Ok(())
    }
}

/// Rendered prediction that observations are aligned against. Points and
/// normals are in the anchor camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub pose: Pose<f64>,
    pub frame: RgbdFrame,
    pub points: Vec<Option<Vector3<f64>>>,
    pub normals: Vec<Option<Vector3<f64>>>,
    /// Whether the 2×2 block with this top-left pixel lies on one surface,
    /// so that interpolating its colors does not blend across an edge.
    pub smooth_blocks: Vec<bool>,
}

impl Anchor {
    /// Normals are dropped where neighboring depths jump by more than `max_jump`.
    pub fn new(pose: Pose<f64>, frame: RgbdFrame, max_jump: f64) -> Self {
        let normals = depth_normals(&frame, max_jump);
        let points = (0..frame.len()).map(|i| frame.point(i)).collect();
        let (w, h) = (frame.width(), frame.height());
        let smooth_blocks = (0..frame.len())
            .map(|i| {
                let (u, v) = frame.pixel(i);
                if u + 1 >= w || v + 1 >= h {
                    return false;
                }
                let block = [i, i + 1, i + w, i + w + 1];
                if block.iter().any(|&j| !frame.valid[j]) {
                    return false;
                }
                let d = block.map(|j| frame.depth[j]);
                let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
                hi - lo <= max_jump
            })
            .collect();
        Self {
            pose,
            frame,
            points,
            normals,
            smooth_blocks,
        }
    }

    pub fn render<T: Real>(
        pose: Pose<f64>,
        map: &VoxelMapBelief<T>,
        params: &RenderParams,
        intrinsics: &crate::geometry::CameraIntrinsics,
        max_jump: f64,
    ) -> Self {
        Self::new(pose, render_rgbd(&pose, map, intrinsics, params), max_jump)
    }
}

/// Residuals of one observed pixel, already divided by their scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelResidual {
    pub pixel: usize,
    /// Point-to-plane distance against the associated anchor pixel.
    pub geo: Option<f64>,
    /// Anchor color at the warped location minus observed color.
    pub photo: Option<[f64; 3]>,
    /// Unscaled point-to-plane distance before outlier rejection.
    pub raw_geo: Option<f64>,
    pub anchor_pixel: usize,
}

/// Everything needed to evaluate alignment residuals.
#[derive(Debug, Clone, Copy)]
pub struct Alignment<'a> {
    pub obs: &'a RgbdFrame,
    pub anchor: &'a Anchor,
    pub scales: EmissionScales,
    pub params: &'a TrackerParams,
}

struct Frozen {
    rc: Matrix3<f64>,
    tc: Vector3<f64>,
    ra_t: Matrix3<f64>,
    ta: Vector3<f64>,
}

impl Frozen {
    fn new(candidate: &Pose<f64>, anchor: &Pose<f64>) -> Self {
        Self {
            rc: candidate.rotation_matrix(),
            tc: candidate.translation,
            ra_t: anchor.rotation_matrix().transpose(),
            ta: anchor.translation,
        }
    }
}

/// Scaled residual row gradients: geo then three color channels.
type PixelGrad = (Option<RowVector6<f64>>, Option<[RowVector6<f64>; 3]>);

impl<'a> Alignment<'a> {
    pub fn new(obs: &'a RgbdFrame, anchor: &'a Anchor, scales: EmissionScales, params: &'a TrackerParams) -> Self {
        Self {
            obs,
            anchor,
            scales,
            params,
        }
    }

    fn eval(&self, f: &Frozen, i: usize, with_grad: bool) -> Option<(PixelResidual, Option<PixelGrad>)> {
        let p = self.obs.point(i)?;
        let rp = f.rc * p;
        let q = f.ra_t * (rp + f.tc - f.ta);
        if q.z <= 1e-9 {
            return None;
        }
        let k = &self.anchor.frame.intrinsics;
        let (u, v) = (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
        let (ur, vr) = (u.round(), v.round());
        if !(ur >= 0.0 && vr >= 0.0 && ur < k.width as f64 && vr < k.height as f64) {
            return None;
        }
        let j = vr as usize * k.width + ur as usize;
        let mut res = PixelResidual {
            pixel: i,
            geo: None,
            photo: None,
            raw_geo: None,
            anchor_pixel: j,
        };
        let dq = if with_grad {
            let mut m = Matrix3x6::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&f.ra_t);
            m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-f.ra_t * skew(&rp)));
            Some(m)
        } else {
            None
        };
        let mut grad: PixelGrad = (None, None);
        if let (Some(ph), Some(n)) = (self.anchor.points[j], self.anchor.normals[j]) {
            let g = (ph - q).dot(&n);
            res.raw_geo = Some(g);
            if g.abs() <= self.params.geo_outlier {
                res.geo = Some(g / self.scales.geo);
                if let Some(dq) = &dq {
                    grad.0 = Some(-(n.transpose() * dq) / self.scales.geo);
                }
            }
        }
        let block = v.floor() as usize * k.width + u.floor() as usize;
        let smooth = u >= 0.0 && v >= 0.0 && self.anchor.smooth_blocks[block];
        if let Some((c, cg)) = self.anchor.frame.color_bilinear(u, v).filter(|_| smooth) {
            let o = self.obs.color[i];
            let r = [c[0] - o[0], c[1] - o[1], c[2] - o[2]];
            if r.iter().all(|x| x.abs() <= self.params.photo_outlier) {
                res.photo = Some(r.map(|x| x / self.scales.color));
                if let Some(dq) = &dq {
                    let du = Vector3::new(k.fx / q.z, 0.0, -k.fx * q.x / (q.z * q.z));
                    let dv = Vector3::new(0.0, k.fy / q.z, -k.fy * q.y / (q.z * q.z));
                    let rows = [0, 1, 2].map(|ch| {
                        let d = du * cg[0][ch] + dv * cg[1][ch];
                        d.transpose() * dq / self.scales.color
                    });
                    grad.1 = Some(rows);
                }
            }
        }
        Some((res, with_grad.then_some(grad)))
    }

    /// Residuals of `pixels` for a candidate pose. Pixels without any valid
    /// residual are omitted.
    pub fn residuals(&self, candidate: &Pose<f64>, pixels: &[usize]) -> Result<Vec<PixelResidual>, TrackerError> {
        let f = Frozen::new(candidate, &self.anchor.pose);
        let out: Vec<PixelResidual> = pixels
            .iter()
            .filter_map(|&i| self.eval(&f, i, false).map(|r| r.0))
            .filter(|r| r.geo.is_some() || r.photo.is_some())
            .collect();
        if out.is_empty() {
            return Err(TrackerError::NoValidPixels);
        }
        Ok(out)
    }

    /// L1 data term over `pixels` and its gradient in the world-frame
    /// tangent at `candidate`. Returns `None` if no pixel is valid.
    pub fn l1_with_gradient(&self, candidate: &Pose<f64>, pixels: &[usize]) -> Option<(f64, Vector6<f64>, usize)> {
        let f = Frozen::new(candidate, &self.anchor.pose);
        let (mut value, mut grad, mut n) = (0.0, RowVector6::zeros(), 0);
        for &i in pixels {
            let Some((r, Some(g))) = self.eval(&f, i, true) else { continue };
            let mut used = false;
            if let (Some(x), Some(gx)) = (r.geo, g.0) {
                value += x.abs();
                grad += gx * sign(x);
                used = true;
            }
            if let (Some(x), Some(gx)) = (r.photo, g.1) {
                for c in 0..3 {
                    value += x[c].abs();
                    grad += gx[c] * sign(x[c]);
                }
                used = true;
            }
            n += used as usize;
        }
        (n > 0).then(|| (value, grad.transpose(), n))
    }

    /// Observed pixels with depth.
    pub fn observed_pixels(&self) -> Vec<usize> {
        (0..self.obs.len()).filter(|i| self.obs.valid[*i]).collect()
    }
}

/// Subgradient of `|x|`, zero at zero.
#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Inverse left Jacobian of SO(3) at `phi`.
pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let s = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() - s * 0.5 + s * s / 12.0;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - s * 0.5 + s * s * coef
}

/// Jacobian of `(x ⊞ ε) ⊟ chart` with respect to `ε` at zero.
pub fn chart_jacobian(x: &Pose<f64>, chart: &Pose<f64>) -> Result<Matrix6<f64>, GeometryError> {
    let phi = so3_log(&(x.rotation * chart.rotation.inverse()))?;
    let mut j = Matrix6::identity();
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&so3_left_jacobian_inverse(&phi));
    Ok(j)
}

/// Log-density of `candidate ⊟ chart` under the pose prior, and its
/// gradient with respect to a world-frame perturbation of `candidate`.
pub fn prior_logpdf(
    candidate: &Pose<f64>,
    pose_prior: &Gaussian<f64>,
    chart: &Pose<f64>,
) -> Result<(f64, Vector6<f64>), TrackerError> {
    let e = DVector::from_column_slice(candidate.boxminus(chart)?.as_slice());
    let value = pose_prior.log_density(&e)?;
    let chol = cholesky_jittered(&pose_prior.covariance)?;
    let w = chol.solve(&(e - &pose_prior.mean));
    let w = Vector6::from_column_slice(w.as_slice());
    let j = chart_jacobian(candidate, chart)?;
    Ok((value, -(j.transpose() * w)))
}

/// Outcome of the pose optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub pose: Pose<f64>,
    /// Full-image objective at the initialization and at the result.
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Fraction of observed pixels with a valid residual at the result.
    pub valid_fraction: f64,
    pub mean_abs_geo: f64,
}

/// Full-image objective (L1 data term minus prior log-density) with the
/// fraction of aligned pixels and the mean unscaled |geo|.
pub fn full_objective(
    align: &Alignment,
    candidate: &Pose<f64>,
    pose_prior: &Gaussian<f64>,
    chart: &Pose<f64>,
) -> Result<(f64, f64, f64), TrackerError> {
    let pixels = align.observed_pixels();
    let prior = prior_logpdf(candidate, pose_prior, chart)?.0;
    let f = Frozen::new(candidate, &align.anchor.pose);
    let (mut data, mut n, mut geo_sum, mut geo_n) = (0.0, 0usize, 0.0, 0usize);
    for &i in &pixels {
        let Some((r, _)) = align.eval(&f, i, false) else { continue };
        if let Some(g) = r.raw_geo {
            geo_sum += g.abs();
            geo_n += 1;
        }
        if r.geo.is_none() && r.photo.is_none() {
            continue;
        }
        n += 1;
        data += r.geo.map_or(0.0, f64::abs) + r.photo.map_or(0.0, |p| p.iter().map(|x| x.abs()).sum());
    }
    let fraction = if pixels.is_empty() {
        0.0
    } else {
        n as f64 / pixels.len() as f64
    };
    let mean_geo = if geo_n > 0 { geo_sum / geo_n as f64 } else { f64::INFINITY };
    Ok((data - prior, fraction, mean_geo))
}

/// Stochastic descent on the sampled L1 objective plus the negative prior
/// log-density. Uses Adam without first moment; every step draws a fresh
/// uniform sample of observed pixels and applies the step as a world-frame
/// perturbation of the current estimate.
pub fn optimize_pose(
    align: &Alignment,
    init: &Pose<f64>,
    pose_prior: &Gaussian<f64>,
    chart: &Pose<f64>,
    rng: &mut impl Rng,
) -> Result<TrackResult, TrackerError> {
    let p = align.params;
    p.validate()?;
    let observed = align.observed_pixels();
    if observed.is_empty() {
        return Err(TrackerError::NoValidPixels);
    }
    let (initial_objective, _, _) = full_objective(align, init, pose_prior, chart)?;
    let lr = Vector6::new(
        p.lr_translation,
        p.lr_translation,
        p.lr_translation,
        p.lr_rotation,
        p.lr_rotation,
        p.lr_rotation,
    );
    let mut pose = *init;
    let mut second = Vector6::zeros();
    let mut sample = vec![0usize; p.pixel_samples];
    let mut decay = 1.0;
    for _ in 0..p.steps {
        let mut data = None;
        for _attempt in 0..10 {
            for s in sample.iter_mut() {
                *s = observed[rng.gen_range(0..observed.len())];
            }
            data = align.l1_with_gradient(&pose, &sample);
            if data.is_some() {
                break;
            }
        }
        let Some((_, data_grad, _)) = data else {
            return Err(TrackerError::NoValidPixels);
        };
        let (_, prior_grad) = prior_logpdf(&pose, pose_prior, chart)?;
        let g = data_grad - prior_grad;
        second = second * p.beta2 + g.component_mul(&g) * (1.0 - p.beta2);
        decay *= p.beta2;
        let v_hat = second / (1.0 - decay);
        let step = Vector6::from_fn(|i, _| -lr[i] * g[i] / (v_hat[i].sqrt() + 1e-12));
        pose = pose.boxplus(&step);
    }
    let (final_objective, valid_fraction, mean_abs_geo) = full_objective(align, &pose, pose_prior, chart)?;
    if valid_fraction < p.min_valid_fraction || !(mean_abs_geo <= p.geo_outlier) {
        return Err(TrackerError::TrackingLost {
            mean_geo: mean_abs_geo,
            valid_fraction,
        });
    }
    Ok(TrackResult {
        pose,
        initial_objective,
        final_objective,
        valid_fraction,
        mean_abs_geo,
    })
}

/// `(2JᵀJ + λI)⁻¹` with `λ = damping · trace(2JᵀJ) / 6`.
pub fn laplace_from_jacobian(j: &DMatrix<f64>, damping: f64) -> Result<Matrix6<f64>, TrackerError> {
    let h = j.transpose() * j * 2.0;
    let lambda = damping * h.trace() / 6.0;
    let h = symmetrize(&(h + DMatrix::identity(6, 6) * lambda));
    let chol = cholesky_jittered(&h)?;
    let cov = chol.inverse();
    Ok(Matrix6::from_column_slice(symmetrize(&cov).as_slice()))
}

/// Stacked residual Jacobian at `pose_map`: one row per scaled residual
/// that stays valid (and keeps its anchor association) at every
/// finite-difference evaluation, followed by the whitened prior rows.
pub fn laplace_jacobian(
    align: &Alignment,
    pose_map: &Pose<f64>,
    pose_prior: &Gaussian<f64>,
    chart: &Pose<f64>,
) -> Result<DMatrix<f64>, TrackerError> {
    let h = align.params.fd_step;
    let pixels = align.observed_pixels();
    let eval_all = |pose: &Pose<f64>| {
        let f = Frozen::new(pose, &align.anchor.pose);
        pixels.iter().map(|&i| align.eval(&f, i, false).map(|r| r.0)).collect::<Vec<_>>()
    };
    let center = eval_all(pose_map);
    let plus: Vec<Vec<Option<PixelResidual>>> = (0..6).map(|k| eval_all(&pose_map.boxplus(&Vector6::ith(k, h)))).collect();
    let minus: Vec<Vec<Option<PixelResidual>>> = (0..6).map(|k| eval_all(&pose_map.boxplus(&Vector6::ith(k, -h)))).collect();

    let mut rows: Vec<RowVector6<f64>> = Vec::new();
    for (n, c) in center.iter().enumerate() {
        let Some(c) = c else { continue };
        let same = |r: &Option<PixelResidual>| r.as_ref().is_some_and(|r| r.anchor_pixel == c.anchor_pixel);
        if !(0..6).all(|k| same(&plus[k][n]) && same(&minus[k][n])) {
            continue;
        }
        let get = |k: usize, sign: bool| if sign { plus[k][n].unwrap() } else { minus[k][n].unwrap() };
        if c.geo.is_some() && (0..6).all(|k| get(k, true).geo.is_some() && get(k, false).geo.is_some()) {
            rows.push(RowVector6::from_fn(|_, k| {
                (get(k, true).geo.unwrap() - get(k, false).geo.unwrap()) / (2.0 * h)
            }));
        }
        if c.photo.is_some() && (0..6).all(|k| get(k, true).photo.is_some() && get(k, false).photo.is_some()) {
            for ch in 0..3 {
                rows.push(RowVector6::from_fn(|_, k| {
                    (get(k, true).photo.unwrap()[ch] - get(k, false).photo.unwrap()[ch]) / (2.0 * h)
                }));
            }
        }
    }

    // whitened prior residual L⁻¹ (x ⊟ chart − μ)
    let chol = cholesky_jittered(&pose_prior.covariance)?;
    let l = chol.l();
    let prior_res = |pose: &Pose<f64>| -> Result<DVector<f64>, TrackerError> {
        let e = DVector::from_column_slice(pose.boxminus(chart)?.as_slice()) - &pose_prior.mean;
        l.solve_lower_triangular(&e).ok_or(TrackerError::Belief(BeliefError::NotPositiveDefinite))
    };
    let mut prior_j = DMatrix::zeros(6, 6);
    for k in 0..6 {
        let d = (prior_res(&pose_map.boxplus(&Vector6::ith(k, h)))? - prior_res(&pose_map.boxplus(&Vector6::ith(k, -h)))?)
            / (2.0 * h);
        prior_j.set_column(k, &d);
    }
    let mut j = DMatrix::zeros(rows.len() + 6, 6);
    for (r, row) in rows.iter().enumerate() {
        j.set_row(r, row);
    }
    j.view_mut((rows.len(), 0), (6, 6)).copy_from(&prior_j);
    Ok(j)
}

/// Laplace covariance of the pose posterior at `pose_map`.
pub fn laplace_covariance(
    align: &Alignment,
    pose_map: &Pose<f64>,
    pose_prior: &Gaussian<f64>,
    chart: &Pose<f64>,
) -> Result<Matrix6<f64>, TrackerError> {
    let j = laplace_jacobian(align, pose_map, pose_prior, chart)?;
    laplace_from_jacobian(&j, align.params.damping)
}

/// Exponential moving average `ema·previous + (1−ema)·current`.
pub fn smooth_covariance(current: &Matrix6<f64>, previous: Option<&Matrix6<f64>>, ema: f64) -> Matrix6<f64> {
    match previous {
        Some(prev) => prev * ema + current * (1.0 - ema),
        None => *current,
    }
}

/// Combines the pose posterior `N(pose_mean, pose_cov)` (tangent at the
/// mean) with the velocity conditional whose pose argument lives in the
/// chart at `chart`. The result is expressed in the chart at `pose_mean`.
pub fn fuse_velocity(
    pose_mean: &Pose<f64>,
    pose_cov: &Matrix6<f64>,
    vel_given_pose: &LinearGaussianConditional<f64>,
    chart: &Pose<f64>,
) -> Result<StateBelief, TrackerError> {
    let d0 = DVector::from_column_slice(pose_mean.boxminus(chart)?.as_slice());
    let jac = chart_jacobian(pose_mean, chart)?;
    let jac = DMatrix::from_column_slice(6, 6, jac.as_slice());
    let cond = LinearGaussianConditional {
        gain: &vel_given_pose.gain * jac,
        offset: vel_given_pose.mean_given(&d0),
        noise_covariance: vel_given_pose.noise_covariance.clone(),
    };
    let marginal = Gaussian::new(DVector::zeros(6), DMatrix::from_column_slice(6, 6, pose_cov.as_slice()))?;
    let joint = recombine(&marginal, &cond)?;
    let v = Vector6::from_column_slice(joint.mean.rows(6, 6).as_slice());
    Ok(StateBelief::new(*pose_mean, Twist::from_vector(&v), joint.covariance))
}

/// Camera-frame point behind a pixel, as used by the plane oracles.
pub fn pixel_point(frame: &RgbdFrame, u: usize, v: usize) -> Option<Vector3<f64>> {
    let i = frame.index(u, v);
    frame.valid[i].then(|| {
        frame
            .intrinsics
            .unproject(&Vector2::new(u as f64, v as f64), frame.depth[i])
            .expect("valid depth")
    })
}
