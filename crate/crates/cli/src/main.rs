use std::fmt::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use svcalib::bev::{render_bev, BevConfig};
use svcalib::calibration::{calibrate, rig_heights, zone_counts, CalibrationProblem, GradientMode, SolverConfig};
use svcalib::experiment::{build_scenario, RoughnessExperiment, ScenarioConfig};
use svcalib::io::{self, KeypointFile, LoadOptions, RigDocument};
use svcalib::metrics::mde;
use svcalib::optimize::Termination;
use svcalib::raster::MaskedRaster;
use svcalib::scene::Scene;
use svcalib::synthetic::{align_planar, pose_error, RoughnessMode, SyntheticRigSpec};
use svcalib::Error;

/// Extrinsic calibration of four-camera surround-view fisheye rigs from
/// clicked ground correspondences.
///
/// Log verbosity comes from SVCALIB_LOG (falling back to RUST_LOG), e.g.
/// SVCALIB_LOG=info.
#[derive(Debug, Parser)]
#[command(name = "svcalib", version)]
struct Cli {
    /// Print machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Reject unknown fields in input JSON files.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize the rig extrinsics from keypoint pairs.
    Calibrate(CalibrateArgs),
    /// Mean distance error of a rig on (held-out) keypoints.
    Evaluate(EvaluateArgs),
    /// Render the bird's-eye view of one frame.
    RenderBev(RenderBevArgs),
    /// Generate a synthetic rig, perturbed initial rig and keypoints.
    Synth(SynthArgs),
    /// Run the uneven-ground robustness experiment.
    SimulateRoughness(RoughnessArgs),
    /// Serve the annotation HTTP API for a session directory.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GradientArg {
    Analytic,
    CentralDifference,
}

impl From<GradientArg> for GradientMode {
    fn from(g: GradientArg) -> Self {
        match g {
            GradientArg::Analytic => GradientMode::Analytic,
            GradientArg::CentralDifference => GradientMode::CentralDifference,
        }
    }
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Initial rig (RigFile JSON).
    #[arg(long)]
    rig: PathBuf,
    /// Clicked keypoints (KeypointFile JSON).
    #[arg(long)]
    keypoints: PathBuf,
    /// Where to write the optimized rig.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SolverConfig::default().max_iterations)]
    max_iter: usize,
    #[arg(long, default_value_t = SolverConfig::default().gradient_tolerance)]
    gradient_tolerance: f64,
    #[arg(long, value_enum, default_value_t = GradientArg::Analytic)]
    gradient: GradientArg,
    /// Also print the error of every keypoint and the per-zone counts.
    #[arg(long)]
    report: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    rig: PathBuf,
    /// Evaluation keypoints (KeypointFile JSON).
    #[arg(long)]
    keypoints: PathBuf,
    /// Ground-truth rig; adds pose errors after planar alignment.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderBevArgs {
    #[arg(long)]
    rig: PathBuf,
    /// Directory holding `<camera>.png|jpg` for each camera.
    #[arg(long)]
    images: PathBuf,
    /// Side length of the square ground region, meters.
    #[arg(long, default_value_t = 25.0)]
    extent: f64,
    /// Output pixels per meter.
    #[arg(long, default_value_t = 20.0)]
    ppm: f64,
    /// Output path; `.npy` writes float64 with NaN outside the valid mask,
    /// anything else an 8-bit PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write each camera's layer next to the output as `<stem>_<camera>.<ext>`.
    #[arg(long)]
    layers: bool,
}

/// `min:max` range in meters.
#[derive(Debug, Clone, Copy)]
struct Range(f64, f64);

fn parse_range(s: &str) -> Result<Range, String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
    let min: f64 = a.trim().parse().map_err(|e| format!("bad minimum: {e}"))?;
    let max: f64 = b.trim().parse().map_err(|e| format!("bad maximum: {e}"))?;
    if !(min >= 0.0 && max > min) {
        return Err(format!("need 0 <= min < max, got {min}:{max}"));
    }
    Ok(Range(min, max))
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Nominal rig description (SyntheticRigSpec JSON); built-in rig if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    n_per_zone: usize,
    #[arg(long, default_value_t = 5)]
    eval_per_zone: usize,
    /// Keypoint distance range from the vehicle origin, meters.
    #[arg(long, default_value = "2:15", value_parser = parse_range)]
    range: Range,
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Pixel noise sigma on calibration keypoints.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Translation perturbation of the initial rig, meters.
    #[arg(long, default_value_t = 0.10)]
    perturb_translation: f64,
    /// Rotation perturbation of the initial rig, degrees.
    #[arg(long, default_value_t = 2.0)]
    perturb_rotation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Render checkerboard frame images under `frames/`.
    #[arg(long)]
    images: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Slope,
    Random,
}

#[derive(Debug, Args)]
struct RoughnessArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Maximum keypoint height deviation, meters.
    #[arg(long, default_value_t = 0.12)]
    delta_z: f64,
    /// Distance at which the slope reaches `delta-z`, meters.
    #[arg(long, default_value_t = 20.0)]
    range: f64,
    /// Road roughness recorded in the report, m/km.
    #[arg(long, default_value_t = 6.0)]
    iri: f64,
    /// First seed; runs use `seed..seed+runs`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    runs: u64,
    #[arg(long, default_value_t = 10)]
    n_per_zone: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Skip the flat-ground reference row.
    #[arg(long)]
    no_baseline: bool,
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8000)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Session directory containing rig.json and frames/.
    #[arg(long)]
    session: PathBuf,
}

/// Failure with its exit code: 1 for solver or metric failures, 2 for
/// usage and I/O errors.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::BadInitialization { .. }
            | Error::SolverFailure(_)
            | Error::UndefinedMetric(_)
            | Error::NoConvergence { .. }
            | Error::ZoneGeometry { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

struct Output {
    json: bool,
}

impl Output {
    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
        } else {
            print!("{}", text());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = std::env::var("SVCALIB_LOG")
        .or_else(|_| std::env::var("RUST_LOG"))
        .unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new().parse_filters(&filter).init();

    let out = Output { json: cli.json };
    let opts = LoadOptions { strict: cli.strict };
    let result = match cli.command {
        Command::Calibrate(a) => run_calibrate(a, opts, &out),
        Command::Evaluate(a) => run_evaluate(a, opts, &out),
        Command::RenderBev(a) => run_render_bev(a, opts, &out),
        Command::Synth(a) => run_synth(a, &out),
        Command::SimulateRoughness(a) => run_roughness(a, &out),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if out.json {
                println!("{}", json!({"error": f.message, "exit_code": f.code}));
            }
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_spec(path: Option<&Path>) -> Result<SyntheticRigSpec, Failure> {
    let Some(path) = path else {
        return Ok(SyntheticRigSpec::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn run_calibrate(a: CalibrateArgs, opts: LoadOptions, out: &Output) -> CliResult {
    let doc = io::load_rig(&a.rig, opts)?;
    let kps = io::load_keypoints(&a.keypoints, opts)?;
    kps.validate(&doc.rig, &a.keypoints)?;
    let solver = SolverConfig {
        max_iterations: a.max_iter,
        gradient_tolerance: a.gradient_tolerance,
        gradient: a.gradient.into(),
        ..SolverConfig::default()
    };
    let problem = CalibrationProblem::new(doc.rig.clone(), kps.pairs(), doc.fixed_heights.clone(), solver)?;
    let result = calibrate(&problem)?;
    io::save_rig(
        &a.out,
        &RigDocument {
            rig: result.rig_optimized.clone(),
            fixed_heights: doc.fixed_heights,
        },
    )?;

    let per_keypoint: Vec<_> = kps
        .keypoints
        .iter()
        .zip(&result.per_keypoint_errors)
        .map(|(k, e)| json!({"id": k.id, "frame_id": k.frame_id, "cam_i": k.cam_i, "cam_j": k.cam_j, "error": e}))
        .collect();
    let zones: Vec<_> = zone_counts(&problem.keypoints)
        .into_iter()
        .map(|((x, y), n)| json!({"zone": format!("{x}-{y}"), "keypoints": n}))
        .collect();
    let mut summary = json!({
        "objective_initial": result.objective_initial,
        "objective_final": result.objective_final,
        "iterations": result.iterations,
        "converged": result.converged,
        "termination": result.termination,
        "output": a.out,
    });
    if a.report {
        summary["per_keypoint"] = per_keypoint.into();
        summary["zones"] = zones.into();
    }
    out.emit(&summary, || {
        let mut s = String::new();
        let _ = writeln!(s, "initial J: {:.6} m", result.objective_initial);
        let _ = writeln!(s, "final J:   {:.6} m", result.objective_final);
        let _ = writeln!(s, "iterations: {} ({:?})", result.iterations, result.termination);
        if a.report {
            let _ = writeln!(s, "\n{:>5} {:>10} {:>13} {:>12}", "id", "frame", "pair", "error [m]");
            for (k, e) in kps.keypoints.iter().zip(&result.per_keypoint_errors) {
                let id = k.id.map(|v| v.to_string()).unwrap_or_default();
                let pair = format!("{}-{}", k.cam_i, k.cam_j);
                let _ = writeln!(s, "{id:>5} {:>10} {pair:>13} {e:>12.6}", k.frame_id);
            }
            let _ = writeln!(s);
            for ((x, y), n) in zone_counts(&problem.keypoints) {
                let _ = writeln!(s, "zone {x}-{y}: {n} keypoints");
            }
        }
        let _ = writeln!(s, "wrote {}", a.out.display());
        s
    });
    if result.termination == Termination::MaxIterations {
        return Err(Failure {
            code: 1,
            message: format!(
                "solver stopped at the iteration limit ({}) before converging; result written anyway",
                a.max_iter
            ),
        });
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs, opts: LoadOptions, out: &Output) -> CliResult {
    let doc = io::load_rig(&a.rig, opts)?;
    let kps = io::load_keypoints(&a.keypoints, opts)?;
    kps.validate(&doc.rig, &a.keypoints)?;
    let report = mde(&kps.pairs(), &doc.rig)?;
    let pose = match &a.gt {
        Some(path) => {
            let gt = io::load_rig(path, opts)?;
            Some(pose_error(&gt.rig, &align_planar(&doc.rig, &gt.rig)?)?)
        }
        None => None,
    };
    let value = json!({"mde": report, "pose_error": pose});
    out.emit(&value, || {
        let mut s = format!("{report}\n");
        if let Some(p) = &pose {
            let _ = writeln!(
                s,
                "pose error after planar alignment: max translation {:.4} m, max angle {:.4} deg",
                p.max_translation(),
                p.max_angle()
            );
        }
        s
    });
    Ok(())
}

fn layer_path(out: &Path, id: impl std::fmt::Display) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("bev");
    let name = match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_{id}.{ext}"),
        None => format!("{stem}_{id}"),
    };
    out.with_file_name(name)
}

fn save_masked(path: &Path, img: &MaskedRaster) -> Result<(), Error> {
    let is_npy = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("npy"));
    if is_npy {
        io::save_npy(path, &img.raster, Some(&img.mask))
    } else {
        io::save_png(path, &img.raster)
    }
}

fn run_render_bev(a: RenderBevArgs, opts: LoadOptions, out: &Output) -> CliResult {
    let doc = io::load_rig(&a.rig, opts)?;
    let cfg = BevConfig::new(a.extent, a.ppm)?;
    let images = io::load_frame_dir(&a.images, &doc.rig)?;
    let bev = render_bev(&images, &doc.rig, &cfg)?;
    save_masked(&a.out, &bev.composite)?;
    let mut written = vec![a.out.clone()];
    if a.layers {
        for (id, layer) in &bev.layers {
            let path = layer_path(&a.out, id);
            save_masked(&path, layer)?;
            written.push(path);
        }
    }
    let value = json!({
        "size": cfg.size(),
        "meters_per_pixel": bev.meters_per_pixel,
        "valid_pixels": bev.composite.valid_count(),
        "written": written,
    });
    out.emit(&value, || {
        let mut s = format!(
            "{0}x{0} px at {1} m/px, {2} valid pixels\n",
            cfg.size(),
            bev.meters_per_pixel,
            bev.composite.valid_count()
        );
        for p in &written {
            let _ = writeln!(s, "wrote {}", p.display());
        }
        s
    });
    Ok(())
}

fn run_synth(a: SynthArgs, out: &Output) -> CliResult {
    let spec = load_spec(a.spec.as_deref())?;
    let cfg = ScenarioConfig {
        n_per_zone: a.n_per_zone,
        eval_per_zone: a.eval_per_zone,
        min_range: a.range.0,
        max_range: a.range.1,
        frames: a.frames,
        pixel_noise: a.noise,
        perturb_translation: a.perturb_translation,
        perturb_rotation_deg: a.perturb_rotation,
        seed: a.seed,
    };
    let sc = build_scenario(&spec, &cfg)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", a.out_dir.display()),
    })?;
    let dir = &a.out_dir;
    let heights = rig_heights(&sc.ground_truth);
    io::save_rig(
        &dir.join("rig.json"),
        &RigDocument {
            rig: sc.initial.clone(),
            fixed_heights: heights,
        },
    )?;
    io::save_rig(&dir.join("rig_gt.json"), &RigDocument::from_rig(sc.ground_truth.clone()))?;

    let mut calib = KeypointFile::from_pairs(&sc.calibration.keypoints);
    if a.images {
        let renders = Scene::checkerboard(1.0).render_rig(&sc.ground_truth);
        for frame in &mut calib.frames {
            let rel = Path::new("frames").join(&frame.frame_id);
            for (id, img) in &renders {
                let file = rel.join(format!("{id}.png"));
                let path = dir.join(&file);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Failure {
                        code: 2,
                        message: format!("{}: {e}", parent.display()),
                    })?;
                }
                io::save_png(&path, img)?;
                frame.images.insert(*id, file);
            }
        }
    }
    io::save_keypoints(&dir.join("keypoints.json"), &calib)?;
    io::save_keypoints(
        &dir.join("eval_keypoints.json"),
        &KeypointFile::from_pairs(&sc.evaluation.keypoints),
    )?;
    let sidecar = json!({
        "seed": a.seed,
        "scenario": cfg,
        "spec": spec,
        "calibration_points": sc.calibration.points,
        "evaluation_points": sc.evaluation.points,
    });
    io::save_json(&dir.join("points.json"), &sidecar)?;

    let value = json!({
        "out_dir": dir,
        "calibration_keypoints": sc.calibration.len(),
        "evaluation_keypoints": sc.evaluation.len(),
        "images": a.images,
    });
    out.emit(&value, || {
        format!(
            "wrote rig.json, rig_gt.json, keypoints.json ({} pairs), eval_keypoints.json ({} pairs), points.json{} to {}\n",
            sc.calibration.len(),
            sc.evaluation.len(),
            if a.images { ", frames/" } else { "" },
            dir.display()
        )
    });
    Ok(())
}

fn run_roughness(a: RoughnessArgs, out: &Output) -> CliResult {
    let spec = load_spec(a.spec.as_deref())?;
    let experiment = RoughnessExperiment {
        scenario: ScenarioConfig {
            n_per_zone: a.n_per_zone,
            pixel_noise: a.noise,
            ..ScenarioConfig::default()
        },
        mode: match a.mode {
            ModeArg::Slope => RoughnessMode::Slope,
            ModeArg::Random => RoughnessMode::Random,
        },
        delta_z: a.delta_z,
        range: a.range,
        iri: a.iri,
        seeds: (a.seed..a.seed + a.runs).collect(),
        include_baseline: !a.no_baseline,
    };
    let solver = SolverConfig {
        max_iterations: a.max_iter,
        ..SolverConfig::default()
    };
    let report = experiment.run(&spec, solver)?;
    out.emit(&report, || report.to_string());
    let stalled: usize = report.rows.iter().flat_map(|r| &r.runs).filter(|r| !r.converged).count();
    if stalled > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{stalled} runs hit the iteration limit ({})", a.max_iter),
        });
    }
    Ok(())
}

fn run_serve(a: ServeArgs) -> CliResult {
    let session = svcalib_service::Session::open(&a.session)?;
    let addr = SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: 2,
        message: format!("cannot start the async runtime: {e}"),
    })?;
    eprintln!("serving {} on http://{addr}", a.session.display());
    runtime.block_on(svcalib_service::serve(addr, session)).map_err(|e| Failure {
        code: 2,
        message: format!("{addr}: {e}"),
    })
}
