//! Gaussian algebra used by both filters: diagonal products for the voxel
//! map, and dense linear-Gaussian propagation, conditioning and whitening
//! for the 12-dim state.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("head block of the joint is singular (min eigenvalue {0:e})")]
    SingularHeadBlock(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("split index {index} out of range for a {dim}-dim Gaussian")]
    InvalidSplit { index: usize, dim: usize },
}

fn mismatch(msg: impl Into<String>) -> BeliefError {
    BeliefError::DimensionMismatch(msg.into())
}

/// Returns `(C + Cᵀ) / 2`.
pub fn symmetrize<T: Real>(c: &DMatrix<T>) -> DMatrix<T> {
    (c + c.transpose()) * T::lit(0.5)
}

/// Cholesky factorization with jitter escalation for near-singular input.
///
/// Tries the matrix as given, then adds `{1e-12, 1e-10, 1e-8}·|trace|/n` to
/// the diagonal before giving up.
pub fn cholesky_jittered<T: Real>(m: &DMatrix<T>) -> Result<Cholesky<T, Dyn>, BeliefError> {
    if !m.is_square() {
        return Err(mismatch("cholesky of a non-square matrix"));
    }
    let n = m.nrows();
    if n == 0 {
        return Err(mismatch("cholesky of an empty matrix"));
    }
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    let scale = sym.trace().abs() / T::lit(n as f64);
    for j in [1e-12, 1e-10, 1e-8] {
        let mut jittered = sym.clone();
        for i in 0..n {
            jittered[(i, i)] += scale * T::lit(j);
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
    }
    Err(BeliefError::NotPositiveDefinite)
}

fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(T::max_value().unwrap(), |a, b| if b < a { b } else { a })
}

/// Dense multivariate Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian<T: Real = f64> {
    pub mean: DVector<T>,
    pub covariance: DMatrix<T>,
}

impl<T: Real> Gaussian<T> {
    /// Builds a Gaussian, symmetrizing the covariance.
    pub fn new(mean: DVector<T>, covariance: DMatrix<T>) -> Result<Self, BeliefError> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(mismatch(format!(
                "mean has {} entries, covariance is {}×{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(Self {
            mean,
            covariance: symmetrize(&covariance),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density at `x`. Requires a positive definite covariance.
    pub fn log_density(&self, x: &DVector<T>) -> Result<T, BeliefError> {
        if x.len() != self.dim() {
            return Err(mismatch("evaluation point dimension"));
        }
        let chol = Cholesky::new(self.covariance.clone()).ok_or(BeliefError::NotPositiveDefinite)?;
        let white = chol
            .l()
            .solve_lower_triangular(&(x - &self.mean))
            .ok_or(BeliefError::NotPositiveDefinite)?;
        let log_det: T = chol
            .l()
            .diagonal()
            .iter()
            .fold(T::zero(), |acc, d| acc + d.ln())
            * T::lit(2.0);
        let n = T::lit(self.dim() as f64);
        Ok(-T::lit(0.5) * (white.norm_squared() + log_det + n * T::two_pi().ln()))
    }

    /// Draws one sample `μ + L z`.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<DVector<T>, BeliefError> {
        let l = cholesky_jittered(&self.covariance)?.l();
        let z = DVector::from_fn(self.dim(), |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
        Ok(&self.mean + l * z)
    }
}

/// `y | x ~ N(G x + o, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianConditional<T: Real = f64> {
    pub gain: DMatrix<T>,
    pub offset: DVector<T>,
    pub noise_covariance: DMatrix<T>,
}

impl<T: Real> LinearGaussianConditional<T> {
    pub fn new(gain: DMatrix<T>, offset: DVector<T>, noise_covariance: DMatrix<T>) -> Result<Self, BeliefError> {
        let m = offset.len();
        if gain.nrows() != m || noise_covariance.nrows() != m || noise_covariance.ncols() != m {
            return Err(mismatch("conditional gain/offset/noise shapes disagree"));
        }
        Ok(Self {
            gain,
            offset,
            noise_covariance: symmetrize(&noise_covariance),
        })
    }

    /// Mean of `y` given `x`.
    pub fn mean_given(&self, x: &DVector<T>) -> DVector<T> {
        &self.gain * x + &self.offset
    }
}

/// Fully factorized Gaussian stored in precision form.
///
/// A precision of zero encodes an uninformed factor (infinite variance), so
/// the first product with it is exact and nothing overflows.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<T: Real = f64> {
    pub mean: DVector<T>,
    pub precision: DVector<T>,
}

impl<T: Real> DiagonalGaussian<T> {
    pub fn from_stddev(mean: DVector<T>, stddev: DVector<T>) -> Result<Self, BeliefError> {
        if mean.len() != stddev.len() {
            return Err(mismatch("mean and stddev lengths differ"));
        }
        let precision = stddev.map(|s| T::one() / (s * s));
        Ok(Self { mean, precision })
    }

    pub fn from_precision(mean: DVector<T>, precision: DVector<T>) -> Result<Self, BeliefError> {
        if mean.len() != precision.len() {
            return Err(mismatch("mean and precision lengths differ"));
        }
        Ok(Self { mean, precision })
    }

    /// Standard deviations; `inf` where the precision is zero.
    pub fn stddev(&self) -> DVector<T> {
        self.precision.map(|p| T::one() / p.sqrt())
    }
}

/// Scalar Gaussian product in precision form: returns `(mean, precision)`.
///
/// A zero-precision factor leaves the other one unchanged bit for bit.
#[inline]
pub fn product_scalar<T: Real>(mean_a: T, prec_a: T, mean_b: T, prec_b: T) -> (T, T) {
    if prec_b == T::zero() {
        return (mean_a, prec_a);
    }
    if prec_a == T::zero() {
        return (mean_b, prec_b);
    }
    let prec = prec_a + prec_b;
    ((prec_a * mean_a + prec_b * mean_b) / prec, prec)
}

/// Product of two factorized Gaussians: precisions add, means are precision-weighted.
pub fn product_diagonal<T: Real>(
    a: &DiagonalGaussian<T>,
    b: &DiagonalGaussian<T>,
) -> Result<DiagonalGaussian<T>, BeliefError> {
    if a.mean.len() != b.mean.len() {
        return Err(mismatch(format!("{} vs {} dims", a.mean.len(), b.mean.len())));
    }
    let n = a.mean.len();
    let mut mean = DVector::zeros(n);
    let mut precision = DVector::zeros(n);
    for i in 0..n {
        let (m, p) = product_scalar(a.mean[i], a.precision[i], b.mean[i], b.precision[i]);
        mean[i] = m;
        precision[i] = p;
    }
    Ok(DiagonalGaussian { mean, precision })
}

/// Pushes `x ~ prior` through `y = A x + b + w`, `w ~ N(0, Q)`.
pub fn propagate_linear<T: Real>(
    prior: &Gaussian<T>,
    a: &DMatrix<T>,
    b: &DVector<T>,
    q: &DMatrix<T>,
) -> Result<Gaussian<T>, BeliefError> {
    let n = prior.dim();
    let m = a.nrows();
    if a.ncols() != n || b.len() != m || q.nrows() != m || q.ncols() != m {
        return Err(mismatch(format!(
            "A is {}×{}, prior dim {}, b {}, Q {}×{}",
            a.nrows(),
            a.ncols(),
            n,
            b.len(),
            q.nrows(),
            q.ncols()
        )));
    }
    let mean = a * &prior.mean + b;
    let cov = a * &prior.covariance * a.transpose() + q;
    Ok(Gaussian {
        mean,
        covariance: symmetrize(&cov),
    })
}

/// Splits a joint over `(head, tail)` into the head marginal and the
/// conditional of the tail given the head.
pub fn split_joint<T: Real>(
    joint: &Gaussian<T>,
    split_index: usize,
) -> Result<(Gaussian<T>, LinearGaussianConditional<T>), BeliefError> {
    let n = joint.dim();
    if split_index == 0 || split_index >= n {
        return Err(BeliefError::InvalidSplit { index: split_index, dim: n });
    }
    let k = split_index;
    let m = n - k;
    let s11 = joint.covariance.view((0, 0), (k, k)).into_owned();
    let s21 = joint.covariance.view((k, 0), (m, k)).into_owned();
    let s22 = joint.covariance.view((k, k), (m, m)).into_owned();
    let mu1 = joint.mean.rows(0, k).into_owned();
    let mu2 = joint.mean.rows(k, m).into_owned();

    let min_eig = min_eigenvalue(&s11);
    if min_eig.as_f64() <= 1e-12 {
        return Err(BeliefError::SingularHeadBlock(min_eig.as_f64()));
    }
    let chol = Cholesky::new(symmetrize(&s11)).ok_or(BeliefError::SingularHeadBlock(min_eig.as_f64()))?;
    // gain = Σ21 Σ11⁻¹  ⇔  Σ11 gainᵀ = Σ12
    let gain = chol.solve(&s21.transpose()).transpose();
    let offset = &mu2 - &gain * &mu1;
    let noise = &s22 - &gain * s21.transpose();
    Ok((
        Gaussian {
            mean: mu1,
            covariance: symmetrize(&s11),
        },
        LinearGaussianConditional {
            gain,
            offset,
            noise_covariance: symmetrize(&noise),
        },
    ))
}

/// Inverse of [`split_joint`]: the joint of `x ~ marginal` and `y | x ~ cond`.
pub fn recombine<T: Real>(
    marginal: &Gaussian<T>,
    cond: &LinearGaussianConditional<T>,
) -> Result<Gaussian<T>, BeliefError> {
    let k = marginal.dim();
    let m = cond.offset.len();
    if cond.gain.ncols() != k || cond.gain.nrows() != m {
        return Err(mismatch(format!(
            "gain is {}×{}, marginal dim {k}",
            cond.gain.nrows(),
            cond.gain.ncols()
        )));
    }
    let mut mean = DVector::zeros(k + m);
    mean.rows_mut(0, k).copy_from(&marginal.mean);
    mean.rows_mut(k, m).copy_from(&cond.mean_given(&marginal.mean));
    let cross = &cond.gain * &marginal.covariance;
    let tail = &cross * cond.gain.transpose() + &cond.noise_covariance;
    let mut cov = DMatrix::zeros(k + m, k + m);
    cov.view_mut((0, 0), (k, k)).copy_from(&marginal.covariance);
    cov.view_mut((k, 0), (m, k)).copy_from(&cross);
    cov.view_mut((0, k), (k, m)).copy_from(&cross.transpose());
    cov.view_mut((k, k), (m, m)).copy_from(&tail);
    Ok(Gaussian {
        mean,
        covariance: symmetrize(&cov),
    })
}

/// `L⁻¹ r` for the lower Cholesky factor `L` of `covariance`.
pub fn whiten<T: Real>(residual: &DVector<T>, covariance: &DMatrix<T>) -> Result<DVector<T>, BeliefError> {
    if covariance.nrows() != residual.len() || covariance.ncols() != residual.len() {
        return Err(mismatch("residual and covariance dimensions differ"));
    }
    if min_eigenvalue(covariance).as_f64() <= 1e-12 {
        return Err(BeliefError::NotPositiveDefinite);
    }
    let chol = cholesky_jittered(covariance)?;
    chol.l()
        .solve_lower_triangular(residual)
        .ok_or(BeliefError::NotPositiveDefinite)
}
