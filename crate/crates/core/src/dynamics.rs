//! Euler transition model, its linearization and closed-form belief
//! propagation for the 12-dim state (pose tangent, velocity).

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beliefs::{propagate_linear, split_joint, BeliefError, Gaussian, LinearGaussianConditional};
use crate::geometry::{so3_exp, Control, GeometryError, Pose, Twist};

/// Central difference step used for the transition Jacobians.
pub const LINEARIZATION_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid transition parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransitionParams {
    pub dt: f64,
    /// Velocity noise stddevs: translational (3), rotational (3).
    pub sigma_vel: [f64; 6],
    /// Pose integration noise stddevs: translational (3), rotational (3).
    pub sigma_pose: [f64; 6],
    /// Power of `dt` multiplying the control in the velocity update.
    #[serde(default = "default_exponent")]
    pub dt_exponent: i32,
}

fn default_exponent() -> i32 {
    2
}

impl Default for TransitionParams {
    fn default() -> Self {
        Self {
            dt: 1.0 / 30.0,
            sigma_vel: [0.03; 6],
            sigma_pose: [0.05, 0.05, 0.05, 0.02, 0.02, 0.02],
            dt_exponent: 2,
        }
    }
}

impl TransitionParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::InvalidParams(format!("dt = {}", self.dt)));
        }
        if self
            .sigma_vel
            .iter()
            .chain(&self.sigma_pose)
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(DynamicsError::InvalidParams("noise scales must be positive".into()));
        }
        Ok(())
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    /// Control gain `dt^exponent`.
    pub fn control_gain(&self) -> f64 {
        self.dt.powi(self.dt_exponent)
    }

    pub fn velocity_noise(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_iterator(self.sigma_vel.iter().map(|s| s * s)))
    }

    pub fn pose_noise(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_iterator(self.sigma_pose.iter().map(|s| s * s)))
    }
}

/// Gaussian belief over the full state. The covariance is over the pose
/// tangent at `mean_pose` followed by the velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBelief {
    pub mean_pose: Pose<f64>,
    pub mean_velocity: Twist,
    pub covariance: DMatrix<f64>,
}

impl StateBelief {
    pub fn new(mean_pose: Pose<f64>, mean_velocity: Twist, covariance: DMatrix<f64>) -> Self {
        Self {
            mean_pose,
            mean_velocity,
            covariance,
        }
    }

    /// Known state with an isotropic covariance `stddev²·I`.
    pub fn isotropic(mean_pose: Pose<f64>, mean_velocity: Twist, stddev: f64) -> Self {
        Self::new(mean_pose, mean_velocity, DMatrix::identity(12, 12) * (stddev * stddev))
    }

    /// The 12-dim state mean in the chart at `mean_pose`.
    pub fn chart_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(12);
        m.rows_mut(6, 6).copy_from(&self.mean_velocity.to_vector());
        m
    }

    pub fn pose_covariance(&self) -> Matrix6<f64> {
        self.covariance.fixed_view::<6, 6>(0, 0).into_owned()
    }
}

/// First-order expansion `δ' ≈ A δ + B v + c` of the pose integration,
/// with input and output tangents both in the chart at `chart`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionLinearization {
    pub chart: Pose<f64>,
    pub a: Matrix6<f64>,
    pub b: Matrix6<f64>,
    pub c: Vector6<f64>,
}

impl TransitionLinearization {
    pub fn predict(&self, delta: &Vector6<f64>, v: &Vector6<f64>) -> Vector6<f64> {
        self.a * delta + self.b * v + self.c
    }
}

/// `v + u · dt^exponent` (exponent 2 by default).
pub fn integrate_velocity(v: &Twist, u: &Control, params: &TransitionParams) -> Twist {
    let g = params.control_gain();
    Twist::new(v.linear + u.linear_accel * g, v.angular + u.angular_accel * g)
}

/// Euler step of the pose with the already integrated velocity; the angular
/// velocity is world-frame.
pub fn integrate_pose(p: &Pose<f64>, v_next: &Twist, params: &TransitionParams) -> Pose<f64> {
    Pose::new(
        p.translation + v_next.linear * params.dt,
        so3_exp(&(v_next.angular * params.dt)) * p.rotation,
    )
}

/// Central-difference linearization of [`integrate_pose`] around `(p0, v0)`.
/// The offset makes the expansion exact at the expansion point.
pub fn linearize_pose_integration(
    p0: &Pose<f64>,
    v0: &Twist,
    params: &TransitionParams,
) -> Result<TransitionLinearization, DynamicsError> {
    let v0v = v0.to_vector();
    let g = |delta: &Vector6<f64>, v: &Vector6<f64>| -> Result<Vector6<f64>, GeometryError> {
        integrate_pose(&p0.boxplus(delta), &Twist::from_vector(v), params).boxminus(p0)
    };
    let h = LINEARIZATION_STEP;
    let mut a = Matrix6::zeros();
    let mut b = Matrix6::zeros();
    for j in 0..6 {
        let e = Vector6::ith(j, h);
        let col = (g(&e, &v0v)? - g(&-e, &v0v)?) / (2.0 * h);
        a.set_column(j, &col);
        let col = (g(&Vector6::zeros(), &(v0v + e))? - g(&Vector6::zeros(), &(v0v - e))?) / (2.0 * h);
        b.set_column(j, &col);
    }
    let c = g(&Vector6::zeros(), &v0v)? - b * v0v;
    Ok(TransitionLinearization {
        chart: *p0,
        a,
        b,
        c,
    })
}

/// Output of one prediction step. All pose tangents live in the chart at
/// `chart` (the previous mean pose).
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedBelief {
    pub chart: Pose<f64>,
    pub state_prior: Gaussian<f64>,
    pub pose_prior: Gaussian<f64>,
    pub vel_given_pose: LinearGaussianConditional<f64>,
    pub linearization: TransitionLinearization,
}

impl PropagatedBelief {
    /// Predicted mean pose.
    pub fn mean_pose(&self) -> Pose<f64> {
        let m = self.pose_prior.mean.fixed_rows::<6>(0).into_owned();
        self.chart.boxplus(&m)
    }
}

/// Pushes a 12-dim belief `(δ, v)` through `v' = v + u g + w_v`,
/// `δ' = A δ + B v' + c + w_p`, with `w_v ~ N(0, Q_v)`, `w_p ~ N(0, Q_p)`.
/// Velocity noise reaches the pose through `B`, which correlates the blocks.
pub fn propagate_linearized(
    prior: &Gaussian<f64>,
    lin: &TransitionLinearization,
    u: &Control,
    params: &TransitionParams,
) -> Result<Gaussian<f64>, DynamicsError> {
    let ug = u.to_vector() * params.control_gain();
    let mut m = DMatrix::zeros(12, 12);
    m.view_mut((0, 0), (6, 6)).copy_from(&lin.a);
    m.view_mut((0, 6), (6, 6)).copy_from(&lin.b);
    m.view_mut((6, 6), (6, 6)).fill_with_identity();
    let mut offset = DVector::zeros(12);
    offset.rows_mut(0, 6).copy_from(&(lin.b * ug + lin.c));
    offset.rows_mut(6, 6).copy_from(&ug);
    let qv = params.velocity_noise();
    let qp = params.pose_noise();
    let mut q = DMatrix::zeros(12, 12);
    q.view_mut((0, 0), (6, 6)).copy_from(&(lin.b * qv * lin.b.transpose() + qp));
    q.view_mut((0, 6), (6, 6)).copy_from(&(lin.b * qv));
    q.view_mut((6, 0), (6, 6)).copy_from(&(qv * lin.b.transpose()));
    q.view_mut((6, 6), (6, 6)).copy_from(&qv);
    Ok(propagate_linear(prior, &m, &offset, &q)?)
}

/// Predicts the next state belief and splits it into a pose prior and a
/// velocity conditional.
pub fn propagate_belief(
    prev: &StateBelief,
    u: &Control,
    params: &TransitionParams,
) -> Result<PropagatedBelief, DynamicsError> {
    params.validate()?;
    let v_bar = integrate_velocity(&prev.mean_velocity, u, params);
    let lin = linearize_pose_integration(&prev.mean_pose, &v_bar, params)?;
    let prior = Gaussian::new(prev.chart_mean(), prev.covariance.clone())?;
    let state_prior = propagate_linearized(&prior, &lin, u, params)?;
    let (pose_prior, vel_given_pose) = split_joint(&state_prior, 6)?;
    Ok(PropagatedBelief {
        chart: prev.mean_pose,
        state_prior,
        pose_prior,
        vel_given_pose,
        linearization: lin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beliefs::recombine;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn rand_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        Pose::exp(&Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
    }

    fn rand_twist(rng: &mut ChaCha8Rng, s: f64) -> Twist {
        Twist::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-s..s)))
    }

    #[test]
    fn velocity_integration() {
        let p = TransitionParams::default().with_dt(0.1);
        let v = Twist::new(Vector3::new(0.3, 0.0, -0.1), Vector3::new(0.0, 0.2, 0.0));
        assert_eq!(integrate_velocity(&v, &Control::zero(), &p), v);
        let u = Control::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        let out = integrate_velocity(&Twist::zero(), &u, &p);
        assert!((out.linear - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        let both = integrate_velocity(&Twist::from_vector(&(v.to_vector() * 2.0)), &u, &p);
        let lin = integrate_velocity(&v, &u, &p).to_vector() + v.to_vector();
        assert!((both.to_vector() - lin).norm() < 1e-15);
    }

    #[test]
    fn pose_integration() {
        let p = TransitionParams::default().with_dt(0.5);
        let start = Pose::new(Vector3::new(1.0, 2.0, 3.0), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        assert_eq!(integrate_pose(&start, &Twist::zero(), &p).translation, start.translation);
        let moved = integrate_pose(&Pose::identity(), &Twist::new(Vector3::x(), Vector3::zeros()), &p);
        assert!((moved.translation - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
        let yawed = integrate_pose(&Pose::identity(), &Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI)), &p);
        let want = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI / 2.0);
        assert!(yawed.rotation.angle_to(&want) < 1e-9);
    }

    #[test]
    fn pose_integration_is_reversible() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = TransitionParams::default();
        for _ in 0..100 {
            let start = rand_pose(&mut rng);
            let v = rand_twist(&mut rng, 2.0);
            let back = Twist::from_vector(&-v.to_vector());
            let end = integrate_pose(&integrate_pose(&start, &v, &p), &back, &p);
            assert!((end.translation - start.translation).norm() < 1e-9);
            assert!(end.rotation.angle_to(&start.rotation) < 1e-9);
        }
    }

    #[test]
    fn small_motion_limit() {
        let p = TransitionParams::default().with_dt(1e-6);
        let lin = linearize_pose_integration(&Pose::identity(), &Twist::zero(), &p).unwrap();
        assert!((lin.a - Matrix6::identity()).abs().max() < 1e-4);
        assert!((lin.b - Matrix6::identity() * 1e-6).abs().max() < 1e-4);
        let p = TransitionParams::default().with_dt(0.1);
        let lin = linearize_pose_integration(&Pose::identity(), &Twist::zero(), &p).unwrap();
        assert!((lin.b - Matrix6::identity() * 0.1).abs().max() < 1e-6);
    }

    #[test]
    fn linearization_is_exact_at_expansion_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = TransitionParams::default();
        for _ in 0..20 {
            let p0 = rand_pose(&mut rng);
            let v0 = rand_twist(&mut rng, 1.0);
            let lin = linearize_pose_integration(&p0, &v0, &p).unwrap();
            let exact = integrate_pose(&p0, &v0, &p).boxminus(&p0).unwrap();
            assert!((lin.predict(&Vector6::zeros(), &v0.to_vector()) - exact).norm() < 1e-10);
        }
    }

    #[test]
    fn linearization_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let p = TransitionParams::default().with_dt(0.1);
        for _ in 0..20 {
            let p0 = rand_pose(&mut rng);
            let v0 = rand_twist(&mut rng, 2.0);
            let lin = linearize_pose_integration(&p0, &v0, &p).unwrap();
            let dir_p = Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let dir_v = Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
            let err = |s: f64| {
                let (dp, dv) = (dir_p * s, v0.to_vector() + dir_v * s);
                let exact = integrate_pose(&p0.boxplus(&dp), &Twist::from_vector(&dv), &p)
                    .boxminus(&p0)
                    .unwrap();
                (lin.predict(&dp, &dv) - exact).norm()
            };
            let ratio = err(0.02) / err(0.01);
            assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn deterministic_limit_matches_euler() {
        let p = TransitionParams::default().with_dt(0.1);
        let pose = Pose::new(Vector3::new(0.5, -1.0, 2.0), UnitQuaternion::from_euler_angles(0.3, -0.2, 1.0));
        let v = Twist::new(Vector3::new(0.2, 0.1, 0.0), Vector3::new(0.1, 0.4, -0.3));
        let u = Control::new(Vector3::new(1.0, 0.5, 0.0), Vector3::new(0.0, 0.0, 2.0));
        let prev = StateBelief::new(pose, v, DMatrix::zeros(12, 12));
        let lin = linearize_pose_integration(&pose, &integrate_velocity(&v, &u, &p), &p).unwrap();
        let prior = Gaussian::new(prev.chart_mean(), prev.covariance.clone()).unwrap();
        let mut quiet = p;
        quiet.sigma_vel = [0.0; 6];
        quiet.sigma_pose = [0.0; 6];
        let out = propagate_linearized(&prior, &lin, &u, &quiet).unwrap();
        let v1 = integrate_velocity(&v, &u, &p);
        let p1 = integrate_pose(&pose, &v1, &p);
        let mean_pose = pose.boxplus(&out.mean.fixed_rows::<6>(0).into_owned());
        assert!((mean_pose.translation - p1.translation).norm() < 1e-10);
        assert!(mean_pose.rotation.angle_to(&p1.rotation) < 1e-10);
        assert!((out.mean.rows(6, 6) - v1.to_vector()).norm() < 1e-12);
        assert!(out.covariance.abs().max() < 1e-20);
    }

    #[test]
    fn identity_blocks_add_process_noise() {
        let p = TransitionParams::default();
        let lin = TransitionLinearization {
            chart: Pose::identity(),
            a: Matrix6::identity(),
            b: Matrix6::zeros(),
            c: Vector6::zeros(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let l = DMatrix::from_fn(12, 12, |_, _| rng.gen_range(-0.1..0.1));
        let prior = Gaussian::new(DVector::zeros(12), &l * l.transpose()).unwrap();
        let out = propagate_linearized(&prior, &lin, &Control::zero(), &p).unwrap();
        let mut q = DMatrix::zeros(12, 12);
        q.view_mut((0, 0), (6, 6)).copy_from(&p.pose_noise());
        q.view_mut((6, 6), (6, 6)).copy_from(&p.velocity_noise());
        assert!((out.covariance - (&prior.covariance + q)).abs().max() < 1e-15);
    }

    #[test]
    fn split_outputs_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let p = TransitionParams::default();
        for _ in 0..10 {
            let l = DMatrix::from_fn(12, 12, |_, _| rng.gen_range(-0.05..0.05));
            let prev = StateBelief::new(rand_pose(&mut rng), rand_twist(&mut rng, 1.0), &l * l.transpose());
            let u = Control::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
            let out = propagate_belief(&prev, &u, &p).unwrap();
            assert_eq!(out.pose_prior.mean, out.state_prior.mean.rows(0, 6).into_owned());
            assert_eq!(
                out.pose_prior.covariance,
                out.state_prior.covariance.view((0, 0), (6, 6)).into_owned()
            );
            let joint = recombine(&out.pose_prior, &out.vel_given_pose).unwrap();
            assert!((joint.mean - &out.state_prior.mean).norm() < 1e-9);
            assert!((joint.covariance - &out.state_prior.covariance).abs().max() < 1e-9);
            let qp = p.pose_noise();
            let qv = p.velocity_noise();
            for i in 0..6 {
                assert!(out.state_prior.covariance[(i, i)] >= qp[(i, i)]);
                assert!(out.state_prior.covariance[(i + 6, i + 6)] >= qv[(i, i)]);
            }
        }
    }

    #[test]
    fn monte_carlo_through_linearized_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let p = TransitionParams::default();
        let l = DMatrix::from_fn(12, 12, |_, _| rng.gen_range(-0.05..0.05));
        let prev = StateBelief::new(rand_pose(&mut rng), rand_twist(&mut rng, 1.0), &l * l.transpose());
        let u = Control::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
        let out = propagate_belief(&prev, &u, &p).unwrap();
        let lin = &out.linearization;
        let prior = Gaussian::new(prev.chart_mean(), prev.covariance.clone()).unwrap();
        let n = 100_000;
        let g = p.control_gain();
        let samples: Vec<DVector<f64>> = (0..n)
            .map(|_| {
                let x = prior.sample(&mut rng).unwrap();
                let wv = Vector6::from_fn(|i, _| p.sigma_vel[i] * rng.sample::<f64, _>(StandardNormal));
                let wp = Vector6::from_fn(|i, _| p.sigma_pose[i] * rng.sample::<f64, _>(StandardNormal));
                let v1 = x.fixed_rows::<6>(6).into_owned() + u.to_vector() * g + wv;
                let d1 = lin.predict(&x.fixed_rows::<6>(0).into_owned(), &v1) + wp;
                DVector::from_iterator(12, d1.iter().chain(v1.iter()).copied())
            })
            .collect();
        let mean = samples.iter().fold(DVector::zeros(12), |a, s| a + s) / n as f64;
        let cov = samples
            .iter()
            .fold(DMatrix::zeros(12, 12), |a, s| a + (s - &mean) * (s - &mean).transpose())
            / (n - 1) as f64;
        let sc = &out.state_prior.covariance;
        for i in 0..12 {
            let se = (sc[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - out.state_prior.mean[i]).abs() < 3.0 * se + 1e-12);
            for j in 0..12 {
                let se = ((sc[(i, i)] * sc[(j, j)] + sc[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov[(i, j)] - sc[(i, j)]).abs() < 3.0 * se, "({i},{j})");
            }
        }
    }
}
