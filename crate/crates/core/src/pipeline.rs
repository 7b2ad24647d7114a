//! Per-frame filter loop: predict, render anchor, track, Laplace, fuse
//! velocity, update the map.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{propagate_belief, DynamicsError, StateBelief, TransitionParams};
use crate::frame::RgbdFrame;
use crate::geometry::{Control, Pose, Twist};
use crate::renderer::{EmissionScales, RenderParams};
use crate::scalar::Real;
use crate::tracker::{
    fuse_velocity, laplace_covariance, optimize_pose, smooth_covariance, Alignment, Anchor, TrackerError, TrackerParams,
};
use crate::voxel_map::{compute_sdf_update, GridSpec, MapDigest, MapError, UpdateParams, VoxelMapBelief};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("frame intrinsics do not match the first frame")]
    IntrinsicsMismatch,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error("{context}: {message}")]
    Parse { context: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub grid: GridSpec,
    pub render: RenderParams,
    pub transition: TransitionParams,
    pub tracker: TrackerParams,
    pub update: UpdateParams,
    /// The anchor is re-rendered every `render_period` frames.
    pub render_period: usize,
    pub initial_state: StateBelief,
    /// Seed of the pixel sampler.
    pub seed: u64,
    /// Take `dt` from frame timestamps when they increase.
    pub use_timestamps: bool,
    /// Depth jump that invalidates anchor normals, meters.
    pub normal_max_jump: f64,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.render_period == 0 {
            return bad("render_period must be at least 1".into());
        }
        self.grid.validate()?;
        if let Err(e) = self.render.validate() {
            return bad(e.to_string());
        }
        self.transition.validate()?;
        self.tracker.validate()?;
        if !(self.update.truncation > 0.0 && self.update.sigma_update > 0.0) {
            return bad("truncation and sigma_update must be positive".into());
        }
        if self.initial_state.covariance.shape() != (12, 12) || !self.initial_state.mean_pose.is_finite() {
            return bad("initial state must be a finite 12-dim belief".into());
        }
        if !(self.normal_max_jump > 0.0) {
            return bad("normal_max_jump must be positive".into());
        }
        Ok(())
    }

    /// Depth range above which a 4-neighborhood is treated as discontinuous.
    pub fn discontinuity_threshold(&self) -> f64 {
        2.0 * self.update.truncation
    }
}

/// Wall-clock seconds spent in each stage of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub propagate: f64,
    pub render: f64,
    pub track: f64,
    pub laplace: f64,
    pub map_update: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.propagate + self.render + self.track + self.laplace + self.map_update
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: StateBelief,
    pub map_digest: MapDigest,
    pub final_objective: f64,
    pub valid_fraction: f64,
    /// Tracking failed and the belief coasted on the prediction.
    pub tracking_lost: bool,
    pub timings: StageTimings,
}

/// Everything the filter carries between frames.
#[derive(Debug, Clone)]
pub struct FilterState<T: Real = f32> {
    pub config: FilterConfig,
    pub map: VoxelMapBelief<T>,
    pub state: StateBelief,
    pub anchor: Option<Anchor>,
    pub previous_laplace: Option<Matrix6<f64>>,
    /// Number of completed `step` calls.
    pub steps: usize,
    pub last_timestamp: Option<f64>,
    rng: ChaCha8Rng,
}

/// Prior map and the configured initial state; nothing is fused yet.
pub fn initialize<T: Real>(config: &FilterConfig) -> Result<FilterState<T>, PipelineError> {
    config.validate()?;
    Ok(FilterState {
        config: config.clone(),
        map: VoxelMapBelief::prior(config.grid)?,
        state: config.initial_state.clone(),
        anchor: None,
        previous_laplace: None,
        steps: 0,
        last_timestamp: None,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    })
}

fn masked(obs: &RgbdFrame, threshold: f64) -> RgbdFrame {
    let mut f = obs.clone();
    f.mask_depth_discontinuities(threshold);
    f
}

impl<T: Real> FilterState<T> {
    /// Fuses the first observation at the known initial pose.
    pub fn fuse_first(&mut self, obs: &RgbdFrame) -> Result<MapDigest, PipelineError> {
        let obs = masked(obs, self.config.discontinuity_threshold());
        let updated = self.fuse(&obs, &self.state.mean_pose.clone())?;
        self.last_timestamp = Some(obs.timestamp);
        Ok(MapDigest {
            updated_voxels: updated,
            mean_stddev: self.map.mean_stddev(),
        })
    }

    fn fuse(&mut self, obs: &RgbdFrame, pose: &Pose<f64>) -> Result<usize, PipelineError> {
        match compute_sdf_update::<T>(obs, pose, &self.config.grid, &self.config.update) {
            Ok(update) => Ok(self.map.apply_update(&update)?),
            Err(MapError::EmptyUpdate) => Ok(0),
            Err(e) => Err(e.into()),
        }
    }

    fn transition_for(&self, obs: &RgbdFrame) -> TransitionParams {
        let mut params = self.config.transition;
        if self.config.use_timestamps {
            if let Some(last) = self.last_timestamp {
                let dt = obs.timestamp - last;
                if dt > 0.0 && dt.is_finite() {
                    params.dt = dt;
                }
            }
        }
        params
    }

    /// One filter step. Tracking failures are not errors: the belief
    /// coasts on the prediction, the map is left untouched and the result
    /// is flagged.
    pub fn step(&mut self, obs: &RgbdFrame, control: Option<Control>) -> Result<StepResult, PipelineError> {
        let mut timings = StageTimings::default();
        let cfg = self.config.clone();
        let u = control.unwrap_or_else(Control::zero);

        let t0 = Instant::now();
        let transition = self.transition_for(obs);
        let prop = propagate_belief(&self.state, &u, &transition)?;
        let chart = prop.chart;
        let prior_mean = prop.mean_pose();
        timings.propagate = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        if self.anchor.is_none() || self.steps % cfg.render_period == 0 {
            self.anchor = Some(Anchor::render(
                self.state.mean_pose,
                &self.map,
                &cfg.render,
                &obs.intrinsics,
                cfg.normal_max_jump,
            ));
        }
        timings.render = t0.elapsed().as_secs_f64();

        let obs = masked(obs, cfg.discontinuity_threshold());
        let anchor = self.anchor.as_ref().expect("anchor rendered above");
        let align = Alignment::new(&obs, anchor, cfg.render.emission_scales, &cfg.tracker);

        let t0 = Instant::now();
        let tracked = optimize_pose(&align, &prior_mean, &prop.pose_prior, &chart, &mut self.rng);
        timings.track = t0.elapsed().as_secs_f64();

        self.steps += 1;
        self.last_timestamp = Some(obs.timestamp);
        let track = match tracked {
            Ok(t) => t,
            Err(TrackerError::TrackingLost { .. }) | Err(TrackerError::NoValidPixels) => {
                let pose_cov = propagated_pose_covariance(&prop.pose_prior.covariance);
                self.state = fuse_velocity(&prior_mean, &pose_cov, &prop.vel_given_pose, &chart)?;
                return Ok(StepResult {
                    state: self.state.clone(),
                    map_digest: MapDigest {
                        updated_voxels: 0,
                        mean_stddev: self.map.mean_stddev(),
                    },
                    final_objective: f64::NAN,
                    valid_fraction: 0.0,
                    tracking_lost: true,
                    timings,
                });
            }
            Err(e) => return Err(e.into()),
        };

        let t0 = Instant::now();
        let cov = laplace_covariance(&align, &track.pose, &prop.pose_prior, &chart)?;
        let cov = smooth_covariance(&cov, self.previous_laplace.as_ref(), cfg.tracker.laplace_ema);
        self.previous_laplace = Some(cov);
        self.state = fuse_velocity(&track.pose, &cov, &prop.vel_given_pose, &chart)?;
        timings.laplace = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        let pose = self.state.mean_pose;
        let updated = self.fuse(&obs, &pose)?;
        timings.map_update = t0.elapsed().as_secs_f64();

        Ok(StepResult {
            state: self.state.clone(),
            map_digest: MapDigest {
                updated_voxels: updated,
                mean_stddev: self.map.mean_stddev(),
            },
            final_objective: track.final_objective,
            valid_fraction: track.valid_fraction,
            tracking_lost: false,
            timings,
        })
    }
}

fn propagated_pose_covariance(c: &DMatrix<f64>) -> Matrix6<f64> {
    Matrix6::from_fn(|i, j| c[(i, j)])
}

/// Result of running the filter over a sequence.
#[derive(Debug, Clone)]
pub struct RunOutput<T: Real = f32> {
    /// One belief per frame, keyed by frame timestamp; the first is the
    /// initial state.
    pub trajectory: Vec<(f64, StateBelief)>,
    pub lost: Vec<bool>,
    pub timings: Vec<StageTimings>,
    pub map: VoxelMapBelief<T>,
}

/// Initializes, fuses the first frame at the known initial state and steps
/// through the rest.
pub fn run_sequence<T: Real>(
    config: &FilterConfig,
    frames: impl IntoIterator<Item = (RgbdFrame, Option<Control>)>,
) -> Result<RunOutput<T>, PipelineError> {
    run_sequence_with(config, frames, |_, _| {})
}

/// [`run_sequence`] with a callback after every step.
pub fn run_sequence_with<T: Real>(
    config: &FilterConfig,
    frames: impl IntoIterator<Item = (RgbdFrame, Option<Control>)>,
    mut observe: impl FnMut(&FilterState<T>, &StepResult),
) -> Result<RunOutput<T>, PipelineError> {
    let mut frames = frames.into_iter();
    let (first, _) = frames.next().ok_or(PipelineError::EmptySequence)?;
    let mut state = initialize::<T>(config)?;
    state.fuse_first(&first)?;
    let mut out = RunOutput {
        trajectory: vec![(first.timestamp, state.state.clone())],
        lost: vec![false],
        timings: vec![StageTimings::default()],
        map: VoxelMapBelief {
            spec: config.grid,
            mean: Vec::new(),
            stddev: Vec::new(),
        },
    };
    for (obs, control) in frames {
        if obs.intrinsics != first.intrinsics {
            return Err(PipelineError::IntrinsicsMismatch);
        }
        let r = state.step(&obs, control)?;
        observe(&state, &r);
        out.trajectory.push((obs.timestamp, r.state.clone()));
        out.lost.push(r.tracking_lost);
        out.timings.push(r.timings);
    }
    out.map = state.map;
    Ok(out)
}

/// TUM trajectory lines: `timestamp tx ty tz qx qy qz qw`.
pub fn write_tum_trajectory(mut out: impl Write, poses: &[(f64, Pose<f64>)]) -> io::Result<()> {
    for (t, p) in poses {
        let [w, x, y, z] = p.wxyz();
        let tr = p.translation;
        writeln!(
            out,
            "{t:.6} {:.9} {:.9} {:.9} {x:.9} {y:.9} {z:.9} {w:.9}",
            tr.x, tr.y, tr.z
        )?;
    }
    Ok(())
}

pub const COVARIANCE_HEADER: &str = "timestamp,c00,c01,c02,c03,c04,c05,c11,c12,c13,c14,c15,c22,c23,c24,c25,c33,c34,c35,c44,c45,c55,tx,ty,tz,rx,ry,rz,vx,vy,vz,wx,wy,wz";

/// One row per belief: timestamp, the 21 upper-triangle entries of the
/// pose covariance (row-major), then the 12-dim mean as pose log
/// (translation, rotation vector) followed by the velocity.
pub fn write_covariances_csv(mut out: impl Write, beliefs: &[(f64, StateBelief)]) -> Result<(), PipelineError> {
    writeln!(out, "{COVARIANCE_HEADER}")?;
    for (t, b) in beliefs {
        let mut fields = vec![format!("{t:.6}")];
        for i in 0..6 {
            for j in i..6 {
                fields.push(format!("{:e}", b.covariance[(i, j)]));
            }
        }
        let log = b.mean_pose.log().map_err(|e| PipelineError::Parse {
            context: format!("belief at {t}"),
            message: e.to_string(),
        })?;
        fields.extend(log.iter().chain(b.mean_velocity.to_vector().iter()).map(|v| format!("{v:e}")));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Reads the rows written by [`write_covariances_csv`] into
/// `(timestamp, pose mean, 6×6 pose covariance)`.
pub fn read_covariances_csv(input: impl BufRead) -> Result<Vec<(f64, Pose<f64>, Matrix6<f64>)>, PipelineError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with("timestamp") || line.starts_with('#') {
            continue;
        }
        let err = |message: String| PipelineError::Parse {
            context: format!("covariances line {}", n + 1),
            message,
        };
        let v: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        if v.len() != 1 + 21 + 12 {
            return Err(err(format!("expected 34 fields, found {}", v.len())));
        }
        let mut c = Matrix6::zeros();
        let mut k = 1;
        for i in 0..6 {
            for j in i..6 {
                c[(i, j)] = v[k];
                c[(j, i)] = v[k];
                k += 1;
            }
        }
        let log = nalgebra::Vector6::from_column_slice(&v[22..28]);
        out.push((v[0], Pose::exp(&log), c));
    }
    Ok(out)
}

pub const TIMING_HEADER: &str = "frame,timestamp,propagate,render,track,laplace,map_update,total";

pub fn write_timings_csv(mut out: impl Write, timestamps: &[f64], timings: &[StageTimings]) -> io::Result<()> {
    writeln!(out, "{TIMING_HEADER}")?;
    for (k, (t, s)) in timestamps.iter().zip(timings).enumerate() {
        writeln!(
            out,
            "{k},{t:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            s.propagate,
            s.render,
            s.track,
            s.laplace,
            s.map_update,
            s.total()
        )?;
    }
    Ok(())
}

/// Known initial state: exact pose, given velocity, small isotropic
/// covariance (pose) and velocity covariance `σ_vel²`.
pub fn known_initial_state(pose: Pose<f64>, velocity: Twist, pose_stddev: f64, velocity_stddev: f64) -> StateBelief {
    let mut d = DVector::from_element(12, pose_stddev * pose_stddev);
    d.rows_mut(6, 6).fill(velocity_stddev * velocity_stddev);
    StateBelief::new(pose, velocity, DMatrix::from_diagonal(&d))
}

/// Dataset profiles with their default map, rendering and update settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Euroc,
    Tum,
    Blackbird,
    Synthetic,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Euroc => "euroc",
            Profile::Tum => "tum",
            Profile::Blackbird => "blackbird",
            Profile::Synthetic => "synthetic",
        }
    }

    /// Edge of the cubic map, meters.
    pub fn grid_side(self) -> f64 {
        match self {
            Profile::Euroc | Profile::Tum => 14.0,
            Profile::Blackbird => 25.0,
            Profile::Synthetic => 5.0,
        }
    }

    pub fn max_depth(self) -> f64 {
        match self {
            Profile::Euroc => 7.0,
            Profile::Tum | Profile::Synthetic => 8.0,
            Profile::Blackbird => 20.0,
        }
    }

    pub fn truncation_voxels(self) -> f64 {
        match self {
            Profile::Blackbird => 4.0,
            _ => 2.0,
        }
    }

    pub fn emission_scales(self) -> EmissionScales {
        match self {
            Profile::Blackbird => EmissionScales::noisy(),
            _ => EmissionScales::clean(),
        }
    }

    /// Working image size `(width, height)`.
    pub fn image_size(self) -> (usize, usize) {
        match self {
            Profile::Euroc | Profile::Synthetic => (80, 60),
            Profile::Tum => (160, 120),
            Profile::Blackbird => (256, 192),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euroc" => Ok(Profile::Euroc),
            "tum" => Ok(Profile::Tum),
            "blackbird" => Ok(Profile::Blackbird),
            "synthetic" => Ok(Profile::Synthetic),
            other => Err(PipelineError::InvalidConfig(format!("unknown profile `{other}`"))),
        }
    }
}

/// The on-disk run configuration. Unset optional fields take the profile
/// defaults; [`RunConfig::effective`] fills them in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub render_period: usize,
    /// Voxels per map edge.
    pub resolution: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_side: Option<f64>,
    /// Map center; defaults to the scene center or the first pose.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_center: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation_voxels: Option<f64>,
    pub sigma_update: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emission_scales: Option<EmissionScales>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_height: Option<usize>,
    pub use_timestamps: bool,
    pub normal_max_jump: f64,
    pub initial_pose_stddev: f64,
    pub initial_velocity_stddev: f64,
    /// Frames in a synthetic run.
    pub synthetic_frames: usize,
    pub depth_noise: f64,
    pub transition: TransitionParams,
    pub tracker: TrackerParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Synthetic,
            seed: 0,
            render_period: 1,
            resolution: 200,
            grid_side: None,
            grid_center: None,
            max_depth: None,
            truncation_voxels: None,
            sigma_update: 1.0,
            emission_scales: None,
            image_width: None,
            image_height: None,
            use_timestamps: true,
            normal_max_jump: 0.1,
            initial_pose_stddev: 1e-3,
            initial_velocity_stddev: 0.03,
            synthetic_frames: 100,
            depth_noise: 0.0,
            transition: TransitionParams::default(),
            tracker: TrackerParams::default(),
        }
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Parse {
            context: "config".into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> Result<String, PipelineError> {
        toml::to_string_pretty(self).map_err(|e| PipelineError::Parse {
            context: "config".into(),
            message: e.to_string(),
        })
    }

    /// Copy with every profile-dependent option resolved; `center` is used
    /// when no grid center is configured.
    pub fn effective(&self, center: [f64; 3]) -> Self {
        let p = self.profile;
        let (w, h) = p.image_size();
        Self {
            grid_side: Some(self.grid_side.unwrap_or(p.grid_side())),
            grid_center: Some(self.grid_center.unwrap_or(center)),
            max_depth: Some(self.max_depth.unwrap_or(p.max_depth())),
            truncation_voxels: Some(self.truncation_voxels.unwrap_or(p.truncation_voxels())),
            emission_scales: Some(self.emission_scales.unwrap_or(p.emission_scales())),
            image_width: Some(self.image_width.unwrap_or(w)),
            image_height: Some(self.image_height.unwrap_or(h)),
            ..self.clone()
        }
    }

    /// Builds the filter configuration for a run starting at `pose` with
    /// `velocity`.
    pub fn filter_config(&self, center: [f64; 3], pose: Pose<f64>, velocity: Twist) -> Result<FilterConfig, PipelineError> {
        let e = self.effective(center);
        let (side, center) = (e.grid_side.unwrap(), e.grid_center.unwrap());
        let grid = GridSpec::cube(center, side, e.resolution)?;
        let mut update = UpdateParams::for_grid(&grid, e.truncation_voxels.unwrap());
        update.sigma_update = e.sigma_update;
        let cfg = FilterConfig {
            grid,
            render: RenderParams::for_grid(&grid, e.max_depth.unwrap(), e.emission_scales.unwrap()),
            transition: e.transition,
            tracker: e.tracker,
            update,
            render_period: e.render_period,
            initial_state: known_initial_state(pose, velocity, e.initial_pose_stddev, e.initial_velocity_stddev),
            seed: e.seed,
            use_timestamps: e.use_timestamps,
            normal_max_jump: e.normal_max_jump,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::render_rgbd;
    use crate::worlds::{room_orbit, synthesize_sequence};
    use crate::voxel_map::PRIOR_OCCUPANCY;

    fn small_config(pose: Pose<f64>, velocity: Twist) -> FilterConfig {
        let grid = GridSpec::cube([0.0, 0.0, 1.25], 4.8, 96).unwrap();
        FilterConfig {
            grid,
            render: RenderParams::for_grid(&grid, 8.0, EmissionScales::clean()),
            transition: TransitionParams::default(),
            tracker: TrackerParams {
                steps: 200,
                ..TrackerParams::default()
            },
            update: UpdateParams::for_grid(&grid, 2.0),
            render_period: 1,
            initial_state: known_initial_state(pose, velocity, 1e-3, 0.03),
            seed: 5,
            use_timestamps: true,
            normal_max_jump: 0.1,
        }
    }

    #[test]
    fn fresh_state() {
        let setup = room_orbit(2, 32, 24, 0.0);
        let cfg = small_config(setup.sequence.trajectory[0].1, Twist::zero());
        let s = initialize::<f32>(&cfg).unwrap();
        assert!(s.map.mean.iter().all(|m| m[0] == PRIOR_OCCUPANCY as f32));
        let mut bad = cfg.clone();
        bad.render_period = 0;
        assert!(matches!(initialize::<f32>(&bad), Err(PipelineError::InvalidConfig(_))));
    }

    #[test]
    fn first_fusion_renders_back() {
        let setup = room_orbit(2, 40, 30, 0.0);
        let frames: Vec<_> = synthesize_sequence(&setup.scene, &setup.sequence, 1, 2).unwrap().collect();
        let cfg = small_config(frames[0].pose, frames[0].velocity);
        let mut s = initialize::<f32>(&cfg).unwrap();
        let d = s.fuse_first(&frames[0].frame).unwrap();
        assert!(d.updated_voxels > 0);
        let r = render_rgbd(&frames[0].pose, &s.map, &frames[0].frame.intrinsics, &cfg.render);
        let obs = &frames[0].frame;
        let (mut err, mut n) = (0.0, 0);
        for i in 0..r.len() {
            if r.valid[i] && obs.valid[i] {
                err += (r.depth[i] - obs.depth[i]).abs();
                n += 1;
            }
        }
        assert!(n > r.len() / 2);
        assert!(err / n as f64 <= 0.5 * cfg.grid.voxel_size());
    }

    #[test]
    fn all_invalid_observation_coasts() {
        let setup = room_orbit(3, 32, 24, 0.0);
        let frames: Vec<_> = synthesize_sequence(&setup.scene, &setup.sequence, 1, 2).unwrap().collect();
        let cfg = small_config(frames[0].pose, frames[0].velocity);
        let mut s = initialize::<f32>(&cfg).unwrap();
        s.fuse_first(&frames[0].frame).unwrap();
        let map_before = s.map.clone();
        let prev = s.state.clone();
        let mut blank = frames[1].frame.clone();
        blank.valid.iter_mut().for_each(|v| *v = false);
        let r = s.step(&blank, Some(frames[1].control)).unwrap();
        assert!(r.tracking_lost);
        assert_eq!(s.map, map_before);
        let prop = propagate_belief(&prev, &frames[1].control, &cfg.transition).unwrap();
        for i in 0..6 {
            assert!(r.state.covariance[(i, i)] >= prop.pose_prior.covariance[(i, i)] * (1.0 - 1e-9));
        }
        assert!((r.state.mean_pose.translation - prop.mean_pose().translation).norm() < 1e-12);
    }

    #[test]
    fn short_run_tracks_and_is_deterministic() {
        let setup = room_orbit(6, 80, 60, 0.0);
        let frames: Vec<_> = synthesize_sequence(&setup.scene, &setup.sequence, 1, 2).unwrap().collect();
        let mut cfg = small_config(frames[0].pose, frames[0].velocity);
        cfg.tracker = TrackerParams::default();
        let input = || frames.iter().map(|f| (f.frame.clone(), Some(f.control)));
        let a = run_sequence::<f32>(&cfg, input()).unwrap();
        let b = run_sequence::<f32>(&cfg, input()).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert!(a.lost.iter().all(|l| !l));
        for ((_, s), f) in a.trajectory.iter().zip(&frames) {
            assert!((s.mean_pose.translation - f.pose.translation).norm() < 0.01);
        }
        let one = run_sequence::<f32>(&cfg, input().take(1)).unwrap();
        assert_eq!(one.trajectory.len(), 1);
        assert_eq!(one.trajectory[0].1, cfg.initial_state);
    }

    #[test]
    fn output_formats_round_trip() {
        let b = known_initial_state(
            Pose::new(nalgebra::Vector3::new(1.0, 2.0, 3.0), nalgebra::UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3)),
            Twist::zero(),
            0.1,
            0.2,
        );
        let mut buf = Vec::new();
        write_covariances_csv(&mut buf, &[(1.5, b.clone())]).unwrap();
        let rows = read_covariances_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0, 1.5);
        assert!((rows[0].1.translation - b.mean_pose.translation).norm() < 1e-9);
        assert!((rows[0].2[(3, 3)] - 0.01).abs() < 1e-15);
        let mut t = Vec::new();
        write_tum_trajectory(&mut t, &[(1.5, b.mean_pose)]).unwrap();
        let line = String::from_utf8(t).unwrap();
        assert_eq!(line.split_whitespace().count(), 8);
        let mut t = Vec::new();
        write_timings_csv(&mut t, &[0.0], &[StageTimings::default()]).unwrap();
        assert!(String::from_utf8(t).unwrap().starts_with(TIMING_HEADER));
    }

    #[test]
    fn run_config_round_trip() {
        let c = RunConfig::from_toml_str("profile = \"tum\"\nseed = 3\n[tracker]\nsteps = 10\n").unwrap();
        assert_eq!(c.profile, Profile::Tum);
        assert_eq!(c.tracker.steps, 10);
        assert_eq!(c.tracker.pixel_samples, 200);
        let e = c.effective([1.0, 2.0, 3.0]);
        assert_eq!(e.grid_side, Some(14.0));
        assert_eq!(e.image_width, Some(160));
        let back = RunConfig::from_toml_str(&e.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.effective([0.0; 3]), e);
        let f = e.filter_config([0.0; 3], Pose::identity(), Twist::zero()).unwrap();
        assert!((f.grid.voxel_size() - 0.07).abs() < 1e-12);
        assert!((f.update.truncation - 0.14).abs() < 1e-12);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        let b = RunConfig::for_profile(Profile::Blackbird).effective([0.0; 3]);
        assert_eq!(b.truncation_voxels, Some(4.0));
        assert_eq!(b.emission_scales, Some(EmissionScales::noisy()));
    }
}
