//! Trajectory error and uncertainty calibration metrics.

use std::io::{self, Write};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::geometry::Pose;

/// Default timestamp association window, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fewer than two timestamp associations")]
    NoAssociations,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("covariance {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("length mismatch: {0} residuals, {1} covariances")]
    LengthMismatch(usize, usize),
    #[error("residual {0}: {1}")]
    Geometry(usize, String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Pairs `(i, j)` of estimate and reference indices whose timestamps are
/// nearest within `window`. `reference` must be sorted by time.
pub fn associate(estimated: &[(f64, Pose<f64>)], reference: &[(f64, Pose<f64>)], window: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, (t, _)) in estimated.iter().enumerate() {
        let k = reference.partition_point(|(r, _)| r < t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < reference.len())
            .min_by(|&a, &b| (reference[a].0 - t).abs().total_cmp(&(reference[b].0 - t).abs()));
        if let Some(j) = best {
            if (reference[j].0 - t).abs() <= window {
                out.push((i, j));
            }
        }
    }
    out
}

/// Least-squares rigid transform `T` with `T·src ≈ dst` (no scale).
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose<f64> {
    let n = src.len().min(dst.len()).max(1) as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    let rotation = nalgebra::UnitQuaternion::from_matrix(&r);
    Pose::new(cd - rotation * cs, rotation)
}

/// Root-mean-square translation error over associated poses, optionally
/// after rigidly aligning the estimate onto the reference.
pub fn ate_rmse(estimated: &[(f64, Pose<f64>)], reference: &[(f64, Pose<f64>)], align: bool) -> Result<f64, EvalError> {
    ate_rmse_with_window(estimated, reference, align, ASSOCIATION_WINDOW)
}

pub fn ate_rmse_with_window(
    estimated: &[(f64, Pose<f64>)],
    reference: &[(f64, Pose<f64>)],
    align: bool,
    window: f64,
) -> Result<f64, EvalError> {
    let pairs = associate(estimated, reference, window);
    if pairs.len() < 2 {
        return Err(EvalError::NoAssociations);
    }
    let est: Vec<_> = pairs.iter().map(|&(i, _)| estimated[i].1.translation).collect();
    let gt: Vec<_> = pairs.iter().map(|&(_, j)| reference[j].1.translation).collect();
    let t = if align { rigid_alignment(&est, &gt) } else { Pose::identity() };
    let sq: f64 = est.iter().zip(&gt).map(|(e, g)| (t.transform_point(e) - g).norm_squared()).sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

/// Ground truth minus estimate in the tangent chart at the estimate:
/// translation difference, then the rotation vector of `q_gt q_est⁻¹`.
pub fn pose_residual(estimate: &Pose<f64>, truth: &Pose<f64>) -> Result<Vector6<f64>, String> {
    truth.boxminus(estimate).map_err(|e| e.to_string())
}

/// Global covariance scale `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleCorrection {
    pub s: f64,
    /// `s` is zero: every residual vanished.
    pub degenerate: bool,
}

fn mahalanobis(r: &Vector6<f64>, c: &Matrix6<f64>, index: usize) -> Result<f64, EvalError> {
    let chol = c.cholesky().ok_or(EvalError::NotPositiveDefinite(index))?;
    Ok(r.dot(&chol.solve(r)))
}

/// `s² = mean(rᵀΣ⁻¹r) / 6`; covariances scaled by `s²` have unit mean
/// squared whitened residual per dimension.
pub fn global_scale_correction(residuals: &[Vector6<f64>], covariances: &[Matrix6<f64>]) -> Result<ScaleCorrection, EvalError> {
    if residuals.len() != covariances.len() {
        return Err(EvalError::LengthMismatch(residuals.len(), covariances.len()));
    }
    if residuals.is_empty() {
        return Err(EvalError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut sum = 0.0;
    for (k, (r, c)) in residuals.iter().zip(covariances).enumerate() {
        sum += mahalanobis(r, c, k)?;
    }
    let s = (sum / residuals.len() as f64 / 6.0).sqrt();
    Ok(ScaleCorrection { s, degenerate: s == 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Whitened {
    /// `L⁻¹ r` with `L Lᵀ = s²Σ`.
    pub samples: Vec<Vector6<f64>>,
    /// Normalized squared sums, `|L⁻¹ r|²`.
    pub nssr: Vec<f64>,
    /// Per-dimension sample standard deviation; below 1 means pessimistic.
    pub stddev: [f64; 6],
}

/// Whitens residuals by the Cholesky factor of `s²Σ`.
pub fn whiten_residuals(residuals: &[Vector6<f64>], covariances: &[Matrix6<f64>], s: f64) -> Result<Whitened, EvalError> {
    if residuals.len() != covariances.len() {
        return Err(EvalError::LengthMismatch(residuals.len(), covariances.len()));
    }
    let mut samples = Vec::with_capacity(residuals.len());
    for (k, (r, c)) in residuals.iter().zip(covariances).enumerate() {
        let chol = (c * (s * s)).cholesky().ok_or(EvalError::NotPositiveDefinite(k))?;
        let w = chol.l().solve_lower_triangular(r).ok_or(EvalError::NotPositiveDefinite(k))?;
        samples.push(w);
    }
    let nssr = samples.iter().map(|w| w.norm_squared()).collect();
    let n = samples.len().max(1) as f64;
    let mut stddev = [0.0; 6];
    for (d, sd) in stddev.iter_mut().enumerate() {
        let mean = samples.iter().map(|w| w[d]).sum::<f64>() / n;
        let var = samples.iter().map(|w| (w[d] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        *sd = var.sqrt();
    }
    Ok(Whitened { samples, nssr, stddev })
}

/// Associates estimated beliefs `(timestamp, mean, pose covariance)` with
/// ground truth and whitens the residuals.
pub fn whitened_residuals(
    estimated: &[(f64, Pose<f64>, Matrix6<f64>)],
    reference: &[(f64, Pose<f64>)],
    s: f64,
) -> Result<Whitened, EvalError> {
    let (r, c) = associated_residuals(estimated, reference)?;
    whiten_residuals(&r, &c, s)
}

/// Residuals and covariances of the associated estimate/reference pairs.
pub fn associated_residuals(
    estimated: &[(f64, Pose<f64>, Matrix6<f64>)],
    reference: &[(f64, Pose<f64>)],
) -> Result<(Vec<Vector6<f64>>, Vec<Matrix6<f64>>), EvalError> {
    let poses: Vec<_> = estimated.iter().map(|(t, p, _)| (*t, *p)).collect();
    let pairs = associate(&poses, reference, ASSOCIATION_WINDOW);
    if pairs.is_empty() {
        return Err(EvalError::NoAssociations);
    }
    let mut res = Vec::with_capacity(pairs.len());
    let mut cov = Vec::with_capacity(pairs.len());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        res.push(pose_residual(&estimated[i].1, &reference[j].1).map_err(|e| EvalError::Geometry(k, e))?);
        cov.push(estimated[i].2);
    }
    Ok((res, cov))
}

/// Points `(predicted, observed)` of the calibration curve, sorted by
/// NSSR: predicted is the chi-squared CDF, observed the empirical CDF.
/// Points above the diagonal indicate pessimism.
pub fn chi_squared_curve(nssr: &[f64], dim: usize) -> Result<Vec<(f64, f64)>, EvalError> {
    if nssr.len() < 10 {
        return Err(EvalError::TooFewSamples {
            needed: 10,
            got: nssr.len(),
        });
    }
    let chi = ChiSquared::new(dim as f64).map_err(|_| EvalError::TooFewSamples { needed: 1, got: dim })?;
    let mut sorted = nssr.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out = Vec::with_capacity(sorted.len());
    for (i, &x) in sorted.iter().enumerate() {
        // ties share the upper empirical value
        let count = sorted[i..].partition_point(|&y| y <= x) + i;
        out.push((chi.cdf(x), count as f64 / n));
    }
    Ok(out)
}

/// Kolmogorov distance between the empirical distribution of `nssr` and
/// chi-squared(`dim`).
pub fn kolmogorov_distance(nssr: &[f64], dim: usize) -> Result<f64, EvalError> {
    let curve = chi_squared_curve(nssr, dim)?;
    let mut d: f64 = 0.0;
    let mut below = 0.0;
    for &(f, obs) in &curve {
        d = d.max((obs - f).abs()).max((f - below).abs());
        below = obs;
    }
    Ok(d)
}

pub fn write_curve_csv(mut out: impl Write, curve: &[(f64, f64)]) -> io::Result<()> {
    writeln!(out, "predicted,observed")?;
    for (p, o) in curve {
        writeln!(out, "{p:.9},{o:.9}")?;
    }
    Ok(())
}

pub fn write_whitened_csv(mut out: impl Write, whitened: &Whitened) -> io::Result<()> {
    writeln!(out, "tx,ty,tz,rx,ry,rz,nssr")?;
    for (w, q) in whitened.samples.iter().zip(&whitened.nssr) {
        let f: Vec<String> = w.iter().chain(std::iter::once(q)).map(|v| format!("{v:.9}")).collect();
        writeln!(out, "{}", f.join(","))?;
    }
    Ok(())
}

/// Metrics printed by the evaluation command.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub ate_rmse: f64,
    pub aligned: bool,
    pub scale: Option<ScaleCorrection>,
    pub whitened_stddev: Option<[f64; 6]>,
    pub kolmogorov: Option<f64>,
}

impl EvalSummary {
    pub fn write_text(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "ate_rmse_m {:.6} (aligned: {})", self.ate_rmse, self.aligned)?;
        if let Some(s) = self.scale {
            let flag = if s.degenerate { " (degenerate)" } else { "" };
            writeln!(out, "scale_correction {:.6}{flag}", s.s)?;
        }
        if let Some(sd) = self.whitened_stddev {
            let f: Vec<String> = sd.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(out, "whitened_stddev {}", f.join(" "))?;
        }
        if let Some(k) = self.kolmogorov {
            writeln!(out, "kolmogorov_distance {k:.6}")?;
        }
        Ok(())
    }

    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "metric,value")?;
        writeln!(out, "ate_rmse,{}", self.ate_rmse)?;
        if let Some(s) = self.scale {
            writeln!(out, "scale_correction,{}", s.s)?;
        }
        if let Some(sd) = self.whitened_stddev {
            for (name, v) in ["tx", "ty", "tz", "rx", "ry", "rz"].iter().zip(sd) {
                writeln!(out, "whitened_stddev_{name},{v}")?;
            }
        }
        if let Some(k) = self.kolmogorov {
            writeln!(out, "kolmogorov_distance,{k}")?;
        }
        Ok(())
    }
}
