//! `mslam`: run the filter, render map snapshots, evaluate trajectories.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use marginal_slam::evaluation::{self, EvalSummary};
use marginal_slam::frame::RgbdFrame;
use marginal_slam::pipeline::{self, Profile, RunConfig, StageTimings};
use marginal_slam::renderer::{render_rgbd, write_color_png, write_depth_png, RenderParams};
use marginal_slam::voxel_map::{Axis, CHANNELS};
use marginal_slam::worlds::{self, TumConfig};
use marginal_slam::{CameraIntrinsics, Control, MapF32, Pose64, Twist};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

#[derive(Parser)]
#[command(name = "mslam", version, about = "Probabilistic RGB-D SLAM over a Gaussian voxel map")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the filter over a TUM RGB-D directory or a synthetic scenario.
    Run(RunArgs),
    /// Render a saved map from a pose and export uncertainty slices.
    Render(RenderArgs),
    /// Trajectory error and calibration metrics against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; profile defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TUM RGB-D sequence directory.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    dataset: Option<PathBuf>,
    /// Named synthetic scenario (`room_orbit`).
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    render_period: Option<usize>,
    /// Voxels per map edge (200 or 400 in the reference setups).
    #[arg(long)]
    resolution: Option<usize>,
    /// euroc, tum, blackbird or synthetic; overrides the config file.
    #[arg(long)]
    profile: Option<String>,
    /// Synthetic sequence length.
    #[arg(long)]
    frames: Option<usize>,
    /// Stop after this many dataset frames.
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SliceAxis {
    X,
    Y,
    Z,
}

#[derive(Args)]
struct RenderArgs {
    /// Map snapshot written by `run`.
    #[arg(long)]
    map: PathBuf,
    /// Camera pose as `tx ty tz qx qy qz qw`.
    #[arg(long, num_args = 7, allow_hyphen_values = true, value_names = ["TX", "TY", "TZ", "QX", "QY", "QZ", "QW"])]
    pose: Vec<f64>,
    #[arg(long, default_value_t = 80)]
    width: usize,
    #[arg(long, default_value_t = 60)]
    height: usize,
    /// Horizontal field of view, degrees.
    #[arg(long, default_value_t = 70.0)]
    hfov: f64,
    /// Pinhole intrinsics `fx fy cx cy`; overrides --hfov.
    #[arg(long, num_args = 4, value_names = ["FX", "FY", "CX", "CY"])]
    intrinsics: Option<Vec<f64>>,
    #[arg(long, default_value_t = 8.0)]
    max_depth: f64,
    #[arg(long, value_enum, default_value_t = SliceAxis::Z)]
    slice_axis: SliceAxis,
    /// Slice index along the axis; defaults to the slice through the camera.
    #[arg(long)]
    slice_index: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory, TUM format.
    #[arg(long)]
    trajectory: PathBuf,
    /// Ground-truth trajectory, TUM format.
    #[arg(long)]
    groundtruth: PathBuf,
    /// Covariance sidecar written by `run`.
    #[arg(long)]
    covariances: Option<PathBuf>,
    /// Rigidly align the estimate before computing ATE.
    #[arg(long, overrides_with = "no_align")]
    align: bool,
    #[arg(long, overrides_with = "align")]
    no_align: bool,
    /// Directory for the curve and metric CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::from_toml_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RunConfig::for_profile(if args.dataset.is_some() { Profile::Tum } else { Profile::Synthetic }),
    };
    if let Some(p) = &args.profile {
        cfg.profile = p.parse()?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.render_period {
        cfg.render_period = r;
    }
    if let Some(r) = args.resolution {
        cfg.resolution = r;
    }
    if let Some(n) = args.frames {
        cfg.synthetic_frames = n;
    }
    Ok(cfg)
}

type Input = Box<dyn Iterator<Item = Result<(RgbdFrame, Option<Control>, Option<Pose64>)>>>;

struct Source {
    center: [f64; 3],
    first_pose: Pose64,
    first_velocity: Twist,
    frames: Input,
}

fn synthetic_source(name: &str, cfg: &RunConfig) -> Result<Source> {
    let e = cfg.effective([0.0; 3]);
    let (w, h) = (e.image_width.unwrap(), e.image_height.unwrap());
    let setup = worlds::named_synthetic(name, cfg.synthetic_frames, w, h, cfg.depth_noise)
        .ok_or_else(|| anyhow!("unknown synthetic scenario `{name}` (available: room_orbit)"))?;
    let frames: Vec<_> = worlds::synthesize_sequence(&setup.scene, &setup.sequence, cfg.seed, cfg.transition.dt_exponent)?
        .collect();
    let first = frames.first().ok_or_else(|| anyhow!("synthetic scenario has no frames"))?;
    let (lo, hi) = (Vector3::from(setup.scene.bounds_min), Vector3::from(setup.scene.bounds_max));
    let c = (lo + hi) / 2.0;
    Ok(Source {
        center: [c.x, c.y, c.z],
        first_pose: first.pose,
        first_velocity: first.velocity,
        frames: Box::new(frames.into_iter().map(|f| Ok((f.frame, Some(f.control), Some(f.pose))))),
    })
}

fn dataset_source(dir: &Path, cfg: &RunConfig, max_frames: Option<usize>) -> Result<Source> {
    let e = cfg.effective([0.0; 3]);
    let tum = TumConfig {
        target_width: e.image_width.unwrap(),
        target_height: e.image_height.unwrap(),
        ..TumConfig::default()
    };
    let mut seq = worlds::load_tum_rgbd(dir, &tum).with_context(|| format!("loading dataset {}", dir.display()))?;
    let first = seq.next().ok_or_else(|| anyhow!("dataset {} has no associated frames", dir.display()))??;
    let pose = first
        .ground_truth
        .ok_or_else(|| anyhow!("the first frame needs a ground-truth pose to initialize the filter"))?;
    let t = pose.translation;
    let limit = max_frames.unwrap_or(usize::MAX);
    let rest = seq.map(|r| r.map(|f| (f.frame, None, f.ground_truth)).map_err(anyhow::Error::from));
    let frames = std::iter::once(Ok((first.frame, None, first.ground_truth))).chain(rest).take(limit);
    Ok(Source {
        center: [t.x, t.y, t.z],
        first_pose: pose,
        first_velocity: Twist::zero(),
        frames: Box::new(frames),
    })
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let source = match (&args.dataset, &args.synthetic) {
        (Some(dir), _) => dataset_source(dir, &cfg, args.max_frames)?,
        (None, Some(name)) => synthetic_source(name, &cfg)?,
        (None, None) => bail!("one of --dataset or --synthetic is required"),
    };
    let effective = cfg.effective(source.center);
    let filter = effective.filter_config(source.center, source.first_pose, source.first_velocity)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("config.toml"), effective.to_toml_string()?)?;

    let started = Instant::now();
    let mut state = pipeline::initialize::<f32>(&filter)?;
    let mut beliefs = Vec::new();
    let mut timings = Vec::new();
    let mut truth = Vec::new();
    let mut lost = 0usize;
    for (k, item) in source.frames.enumerate() {
        let (frame, control, gt) = item.with_context(|| format!("reading frame {k}"))?;
        if let Some(p) = gt {
            truth.push((frame.timestamp, p));
        }
        if k == 0 {
            state.fuse_first(&frame)?;
            beliefs.push((frame.timestamp, state.state.clone()));
            timings.push(StageTimings::default());
            continue;
        }
        let r = state.step(&frame, control).with_context(|| format!("filter step at frame {k}"))?;
        if r.tracking_lost {
            lost += 1;
            eprintln!("frame {k}: tracking lost, coasting on the prediction");
        }
        beliefs.push((frame.timestamp, r.state));
        timings.push(r.timings);
    }

    let poses: Vec<_> = beliefs.iter().map(|(t, b)| (*t, b.mean_pose)).collect();
    let stamps: Vec<_> = beliefs.iter().map(|(t, _)| *t).collect();
    let mut w = create(&args.out.join("trajectory.txt"))?;
    pipeline::write_tum_trajectory(&mut w, &poses)?;
    w.flush()?;
    let mut w = create(&args.out.join("covariances.csv"))?;
    pipeline::write_covariances_csv(&mut w, &beliefs)?;
    w.flush()?;
    let mut w = create(&args.out.join("timings.csv"))?;
    pipeline::write_timings_csv(&mut w, &stamps, &timings)?;
    w.flush()?;
    if !truth.is_empty() {
        let mut w = create(&args.out.join("groundtruth.txt"))?;
        pipeline::write_tum_trajectory(&mut w, &truth)?;
        w.flush()?;
    }
    state.map.save(&args.out.join("map.bin"))?;

    let steps = timings.len().saturating_sub(1).max(1) as f64;
    let mean_step = timings.iter().map(|t| t.total()).sum::<f64>() / steps;
    println!("frames {}", beliefs.len());
    println!("tracking_lost {lost}");
    println!("mean_step_seconds {mean_step:.4}");
    println!("wall_seconds {:.2}", started.elapsed().as_secs_f64());
    if truth.len() >= 2 {
        if let Ok(ate) = evaluation::ate_rmse(&poses, &truth, false) {
            println!("ate_rmse_m {ate:.6}");
        }
    }
    Ok(())
}

fn parse_pose(v: &[f64]) -> Result<Pose64> {
    if v.len() != 7 {
        bail!("--pose needs 7 values: tx ty tz qx qy qz qw");
    }
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    if !(q.norm() > 0.0) {
        bail!("--pose quaternion has zero norm");
    }
    Ok(Pose64::new(Vector3::new(v[0], v[1], v[2]), UnitQuaternion::from_quaternion(q)))
}

fn render(args: RenderArgs) -> Result<()> {
    let map = MapF32::load(&args.map).with_context(|| format!("loading map {}", args.map.display()))?;
    let pose = parse_pose(&args.pose)?;
    let k = match &args.intrinsics {
        Some(v) => CameraIntrinsics::new(v[0], v[1], v[2], v[3], args.width, args.height, args.max_depth)?,
        None => CameraIntrinsics::from_fov(args.width, args.height, args.hfov.to_radians(), args.max_depth)?,
    };
    let params = RenderParams::for_grid(&map.spec, args.max_depth, Profile::Synthetic.emission_scales());
    let frame = render_rgbd(&pose, &map, &k, &params);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_color_png(&frame, &args.out.join("color.png"))?;
    write_depth_png(&frame, &args.out.join("depth.png"))?;

    let (axis, a, name) = match args.slice_axis {
        SliceAxis::X => (Axis::X, 0, "x"),
        SliceAxis::Y => (Axis::Y, 1, "y"),
        SliceAxis::Z => (Axis::Z, 2, "z"),
    };
    let index = args.slice_index.unwrap_or_else(|| {
        let v = map.spec.voxel_size();
        let i = ((pose.translation[a] - map.spec.origin[a]) / v).round();
        (i.max(0.0) as usize).min(map.spec.resolution[a] - 1)
    });
    for channel in 0..CHANNELS {
        let slice = map.uncertainty_slice(axis, index, channel)?;
        let label = ["occupancy", "red", "green", "blue"][channel];
        let mut w = create(&args.out.join(format!("stddev_{label}_{name}{index}.csv")))?;
        slice.write_csv(&mut w)?;
        w.flush()?;
        if channel == 0 {
            slice.write_png16(&args.out.join(format!("stddev_{label}_{name}{index}.png")), -3.0, 3.0)?;
        }
    }
    println!("valid_pixels {}/{}", frame.valid_count(), frame.len());
    println!("slice {name}={index}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let est = worlds::read_tum_trajectory(&args.trajectory).with_context(|| format!("reading {}", args.trajectory.display()))?;
    let gt = worlds::read_tum_trajectory(&args.groundtruth).with_context(|| format!("reading {}", args.groundtruth.display()))?;
    let align = args.align && !args.no_align;
    let ate = evaluation::ate_rmse(&est, &gt, align)?;
    let mut summary = EvalSummary {
        ate_rmse: ate,
        aligned: align,
        scale: None,
        whitened_stddev: None,
        kolmogorov: None,
    };
    let mut curve = None;
    let mut whitened = None;
    if let Some(path) = &args.covariances {
        let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
        let beliefs = pipeline::read_covariances_csv(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))?;
        let (res, cov) = evaluation::associated_residuals(&beliefs, &gt)?;
        let scale = evaluation::global_scale_correction(&res, &cov)?;
        summary.scale = Some(scale);
        if !scale.degenerate {
            let w = evaluation::whiten_residuals(&res, &cov, scale.s)?;
            summary.whitened_stddev = Some(w.stddev);
            if w.nssr.len() >= 10 {
                summary.kolmogorov = Some(evaluation::kolmogorov_distance(&w.nssr, 6)?);
                curve = Some(evaluation::chi_squared_curve(&w.nssr, 6)?);
            } else {
                eprintln!("warning: fewer than 10 associated poses, skipping the calibration curve");
            }
            whitened = Some(w);
        }
    }
    summary.write_text(std::io::stdout().lock())?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut w = create(&out.join("metrics.csv"))?;
        summary.write_csv(&mut w)?;
        w.flush()?;
        if let Some(c) = &curve {
            let mut w = create(&out.join("calibration_curve.csv"))?;
            evaluation::write_curve_csv(&mut w, c)?;
            w.flush()?;
        }
        if let Some(wh) = &whitened {
            let mut w = create(&out.join("whitened_residuals.csv"))?;
            evaluation::write_whitened_csv(&mut w, wh)?;
            w.flush()?;
        }
    }
    Ok(())
}
