//! Command-line front end: calibrate joint heights, localize per frame,
//! track on the ground plane, score against ground truth, and generate
//! synthetic scenes.
//!
//! Every output starts with a reproducibility header (version, hash of the
//! consumed config files, seed), so identical inputs produce byte-identical
//! outputs. Errors exit with a one-line machine-parsable category:
//! 2 = config error, 3 = data error, 4 = numerical failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use egoloc::camera::CameraModel;
use egoloc::config::RunConfig;
use egoloc::evalkit::synth::{frames_lines, generate_scene, states_csv, SyntheticSceneConfig};
use egoloc::evalkit::{
    compute_metrics, ground_truth_lines, load_ground_truth, LocationSample, MetricReport,
};
use egoloc::observation::{load_frames, reduce_to_four_points, RawJointFrame};
use egoloc::pipeline::{localize_frames, EstimateOutcome, FrameEstimate};
use egoloc::solver::JointHeights;
use egoloc::tracking::Tracker;

#[derive(Parser)]
#[command(name = "egoloc", version, about = "Camera-attitude and person localization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a person's joint heights from static frames.
    Calibrate {
        /// JSON-lines detection file.
        frames: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Person id to calibrate; defaults to the person with the most
        /// fully visible frames.
        #[arg(long)]
        person: Option<u64>,
    },
    /// Per-frame localization to a CSV of states and pelvis positions.
    Localize {
        frames: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Localization followed by Kalman tracking on the ground plane.
    Track {
        frames: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score an estimates CSV against a ground-truth sidecar.
    Eval {
        estimates: PathBuf,
        truth: PathBuf,
        /// Metric report JSON.
        #[arg(long)]
        output: PathBuf,
        /// Optional per-frame error CSV for plotting.
        #[arg(long)]
        per_frame: Option<PathBuf>,
    },
    /// Generate a synthetic scene: frames, ground truth and true states.
    Synth {
        scene: PathBuf,
        /// Overrides the camera embedded in the scene config.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the scene config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for frames.jsonl, truth.jsonl and states.csv.
        #[arg(long)]
        output: PathBuf,
    },
}

struct CliError {
    category: &'static str,
    code: u8,
    message: String,
}

impl CliError {
    fn new(category: &'static str, code: u8, message: impl Into<String>) -> Self {
        Self {
            category,
            code,
            message: message.into(),
        }
    }

    fn config_missing(path: &Path) -> Self {
        Self::new("config_missing", 2, format!("{} not found", path.display()))
    }

    fn config_invalid(message: impl Into<String>) -> Self {
        Self::new("config_invalid", 2, message)
    }

    fn data_missing(path: &Path) -> Self {
        Self::new("data_missing", 3, format!("{} not found", path.display()))
    }

    fn parse_error(message: impl Into<String>) -> Self {
        Self::new("parse_error", 3, message)
    }

    fn insufficient_data(message: impl Into<String>) -> Self {
        Self::new("insufficient_data", 3, message)
    }

    fn numerical_failure(message: impl Into<String>) -> Self {
        Self::new("numerical_failure", 4, message)
    }

    fn io(message: impl Into<String>) -> Self {
        Self::new("io_error", 3, message)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category, e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Hash of every config-like input, for the reproducibility header.
struct Provenance {
    config_hash: String,
    seed: u64,
}

impl Provenance {
    fn new(paths: &[Option<&Path>], seed: u64) -> Result<Self, CliError> {
        let mut hasher = Sha256::new();
        let mut any = false;
        for path in paths.iter().flatten() {
            let bytes = fs::read(path)
                .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
            hasher.update(&bytes);
            any = true;
        }
        let config_hash = if any {
            let digest = hasher.finalize();
            let mut hex = String::new();
            for byte in digest.iter().take(8) {
                let _ = write!(hex, "{byte:02x}");
            }
            hex
        } else {
            "default".to_string()
        };
        Ok(Self { config_hash, seed })
    }

    fn csv_header(&self) -> String {
        format!(
            "# egoloc {} config={} seed={}\n",
            env!("CARGO_PKG_VERSION"),
            self.config_hash,
            self.seed
        )
    }

    fn meta(&self) -> Meta {
        Meta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: String,
    config_hash: String,
    seed: u64,
}

/// Person profile file: calibrated joint heights.
#[derive(Debug, Serialize, Deserialize)]
struct PersonProfile {
    person: u64,
    heights: ProfileHeights,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<Meta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileHeights {
    neck: f64,
    hip: f64,
    knee: f64,
    ankle: f64,
}

fn require_exists(path: &Path, as_config: bool) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else if as_config {
        Err(CliError::config_missing(path))
    } else {
        Err(CliError::data_missing(path))
    }
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            require_exists(p, true)?;
            RunConfig::load(p).map_err(|e| CliError::config_invalid(e.to_string()))
        }
    }
}

fn load_camera(path: &Path) -> Result<CameraModel, CliError> {
    require_exists(path, true)?;
    CameraModel::load(path).map_err(|e| CliError::config_invalid(e.to_string()))
}

fn load_detections(path: &Path) -> Result<Vec<RawJointFrame>, CliError> {
    require_exists(path, false)?;
    load_frames(path).map_err(|e| CliError::parse_error(e.to_string()))
}

fn load_profile(path: &Path) -> Result<(u64, JointHeights), CliError> {
    require_exists(path, true)?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    let profile: PersonProfile =
        serde_json::from_str(&text).map_err(|e| CliError::config_invalid(e.to_string()))?;
    let heights = JointHeights::new(
        profile.heights.neck,
        profile.heights.hip,
        profile.heights.knee,
        profile.heights.ankle,
    )
    .map_err(|e| CliError::config_invalid(e.to_string()))?;
    Ok((profile.person, heights))
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, contents)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Calibrate {
            frames,
            camera,
            config,
            output,
            person,
        } => run_calibrate(&frames, &camera, &config, &output, person),
        Command::Localize {
            frames,
            camera,
            profile,
            config,
            output,
        } => run_localize(&frames, &camera, &profile, &config, &output),
        Command::Track {
            frames,
            camera,
            profile,
            config,
            output,
        } => run_track(&frames, &camera, &profile, &config, &output),
        Command::Eval {
            estimates,
            truth,
            output,
            per_frame,
        } => run_eval(&estimates, &truth, &output, &per_frame),
        Command::Synth {
            scene,
            camera,
            config,
            seed,
            output,
        } => run_synth(&scene, &camera, &config, seed, &output),
    }
}

fn run_calibrate(
    frames_path: &Path,
    camera_path: &Path,
    config_path: &Option<PathBuf>,
    output: &Path,
    person: Option<u64>,
) -> Result<(), CliError> {
    let camera = load_camera(camera_path)?;
    let run_config = load_run_config(config_path)?;
    let frames = load_detections(frames_path)?;
    let provenance = Provenance::new(
        &[Some(camera_path), config_path.as_deref()],
        0,
    )?;

    // Fully visible four-point observations per person.
    let mut by_person: BTreeMap<u64, Vec<egoloc::observation::FourPointObservation>> =
        BTreeMap::new();
    for frame in &frames {
        if let Ok(obs) =
            reduce_to_four_points(frame, &camera, run_config.observation.confidence_threshold)
        {
            if obs.visible_count() == 4 {
                by_person.entry(frame.person_id).or_default().push(obs);
            }
        }
    }
    let person_id = match person {
        Some(id) => id,
        None => by_person
            .iter()
            .max_by_key(|(_, v)| v.len())
            .map(|(id, _)| *id)
            .ok_or_else(|| {
                CliError::insufficient_data("no frames with all four points visible")
            })?,
    };
    let observations = by_person.remove(&person_id).unwrap_or_default();
    if observations.is_empty() {
        return Err(CliError::insufficient_data(format!(
            "no fully visible frames for person {person_id}"
        )));
    }

    let attitude = (
        run_config.calibration.pitch_deg.to_radians(),
        run_config.calibration.roll_deg.to_radians(),
    );
    let solution = egoloc::calibration::calibrate_heights(
        &observations,
        attitude,
        run_config.calibration.camera_height,
        &run_config.weights,
    )
    .map_err(|e| CliError::numerical_failure(e.to_string()))?;

    let profile = PersonProfile {
        person: person_id,
        heights: ProfileHeights {
            neck: solution.heights.neck,
            hip: solution.heights.hip,
            knee: solution.heights.knee,
            ankle: solution.heights.ankle,
        },
        meta: Some(provenance.meta()),
    };
    let mut text = serde_json::to_string_pretty(&profile)
        .map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    write_output(output, &text)?;

    let condition = &solution.condition;
    println!(
        "calibrated person {person_id} from {} frames; condition number {:.3e}",
        observations.len(),
        condition.condition_number
    );
    println!(
        "singular values: {}",
        condition
            .singular_values
            .iter()
            .map(|s| format!("{s:.3e}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    if condition.condition_number > 1e6 {
        println!("warning: calibration system is poorly conditioned; add more varied frames");
    }
    Ok(())
}

const LOCALIZE_HEADER: &str = "frame,t,person,X_F,Z_F,h_C,theta_deg,phi_deg,pelvis_x,pelvis_y,pelvis_z,distance,cost,converged,skipped\n";

fn localize_csv(estimates: &[FrameEstimate], provenance: &Provenance) -> String {
    let mut out = provenance.csv_header();
    out.push_str(LOCALIZE_HEADER);
    for est in estimates {
        match &est.outcome {
            EstimateOutcome::Solved {
                state,
                pelvis,
                distance,
                cost,
                converged,
            } => {
                let _ = writeln!(
                    out,
                    "{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.9e},{},",
                    est.frame_id,
                    est.timestamp,
                    est.person_id,
                    state.lateral,
                    state.depth,
                    state.camera_height,
                    state.pitch.to_degrees(),
                    state.roll.to_degrees(),
                    pelvis.x,
                    pelvis.y,
                    pelvis.z,
                    distance,
                    cost,
                    converged,
                );
            }
            EstimateOutcome::Skipped(reason) => {
                let _ = writeln!(
                    out,
                    "{},{:.6},{},,,,,,,,,,,,{}",
                    est.frame_id,
                    est.timestamp,
                    est.person_id,
                    reason.as_str(),
                );
            }
        }
    }
    out
}

fn run_localize(
    frames_path: &Path,
    camera_path: &Path,
    profile_path: &Path,
    config_path: &Option<PathBuf>,
    output: &Path,
) -> Result<(), CliError> {
    let camera = load_camera(camera_path)?;
    let run_config = load_run_config(config_path)?;
    let (_, heights) = load_profile(profile_path)?;
    let frames = load_detections(frames_path)?;
    let provenance = Provenance::new(
        &[
            Some(camera_path),
            Some(profile_path),
            config_path.as_deref(),
        ],
        0,
    )?;

    let estimates = localize_frames(
        &frames,
        &camera,
        &heights,
        &run_config.weights,
        &run_config.solver.to_solver_config(),
        run_config.observation.confidence_threshold,
    );
    write_output(output, &localize_csv(&estimates, &provenance))?;
    println!(
        "localized {} of {} frames to {}",
        estimates
            .iter()
            .filter(|e| matches!(e.outcome, EstimateOutcome::Solved { .. }))
            .count(),
        estimates.len(),
        output.display()
    );
    Ok(())
}

fn run_track(
    frames_path: &Path,
    camera_path: &Path,
    profile_path: &Path,
    config_path: &Option<PathBuf>,
    output: &Path,
) -> Result<(), CliError> {
    let camera = load_camera(camera_path)?;
    let run_config = load_run_config(config_path)?;
    let (_, heights) = load_profile(profile_path)?;
    let frames = load_detections(frames_path)?;
    let provenance = Provenance::new(
        &[
            Some(camera_path),
            Some(profile_path),
            config_path.as_deref(),
        ],
        0,
    )?;

    let estimates = localize_frames(
        &frames,
        &camera,
        &heights,
        &run_config.weights,
        &run_config.solver.to_solver_config(),
        run_config.observation.confidence_threshold,
    );

    // Group solved estimates per frame, in file order.
    let mut frame_groups: Vec<(u64, f64, Vec<(f64, f64)>)> = Vec::new();
    for est in &estimates {
        if frame_groups.last().map(|(id, _, _)| *id) != Some(est.frame_id) {
            frame_groups.push((est.frame_id, est.timestamp, Vec::new()));
        }
        if let EstimateOutcome::Solved { state, .. } = &est.outcome {
            frame_groups
                .last_mut()
                .expect("group just pushed")
                .2
                .push((state.lateral, state.depth));
        }
    }

    let mut tracker = Tracker::new(run_config.tracking);
    let mut out = provenance.csv_header();
    out.push_str("frame,t,track_id,x,z,vx,vz,status\n");
    for (frame_id, t, detections) in frame_groups {
        tracker.step(t, &detections);
        for track in tracker.tracks() {
            let (x, z) = track.position();
            let (vx, vz) = track.velocity();
            let _ = writeln!(
                out,
                "{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{}",
                frame_id,
                t,
                track.id,
                x,
                z,
                vx,
                vz,
                track.status.as_str(),
            );
        }
    }
    write_output(output, &out)?;
    println!("tracked to {}", output.display());
    Ok(())
}

/// Reads pelvis estimates back out of a localize CSV, skipping comment lines
/// and skipped frames.
fn read_estimates_csv(path: &Path) -> Result<Vec<LocationSample>, CliError> {
    require_exists(path, false)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::parse_error(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::parse_error(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize, CliError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::parse_error(format!("estimates CSV lacks column `{name}`")))
    };
    let (c_frame, c_person) = (col("frame")?, col("person")?);
    let (c_px, c_py, c_pz) = (col("pelvis_x")?, col("pelvis_y")?, col("pelvis_z")?);
    let c_skipped = col("skipped")?;

    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::parse_error(e.to_string()))?;
        if record.get(c_skipped).is_some_and(|s| !s.is_empty()) {
            continue;
        }
        let field = |c: usize, name: &str| -> Result<f64, CliError> {
            record
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| {
                    CliError::parse_error(format!("row {}: bad {name}", idx + 2))
                })
        };
        samples.push(LocationSample {
            frame_id: field(c_frame, "frame")? as u64,
            person_id: field(c_person, "person")? as u64,
            point: egoloc::camera::CameraFramePoint::new(
                field(c_px, "pelvis_x")?,
                field(c_py, "pelvis_y")?,
                field(c_pz, "pelvis_z")?,
            ),
        });
    }
    Ok(samples)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    meta: Meta,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn run_eval(
    estimates_path: &Path,
    truth_path: &Path,
    output: &Path,
    per_frame: &Option<PathBuf>,
) -> Result<(), CliError> {
    let estimates = read_estimates_csv(estimates_path)?;
    require_exists(truth_path, false)?;
    let truth = load_ground_truth(truth_path).map_err(|e| CliError::parse_error(e.to_string()))?;
    let provenance = Provenance::new(&[], 0)?;

    let report =
        compute_metrics(&estimates, &truth).map_err(|e| CliError::insufficient_data(e.to_string()))?;

    let doc = EvalOutput {
        meta: provenance.meta(),
        report: &report,
    };
    let mut text =
        serde_json::to_string_pretty(&doc).map_err(|e| CliError::io(e.to_string()))?;
    text.push('\n');
    write_output(output, &text)?;

    let errors_path = match per_frame {
        Some(p) => p.clone(),
        None => output.with_extension("errors.csv"),
    };
    let mut csv_text = provenance.csv_header();
    csv_text.push_str("frame,person,location_error,distance_error\n");
    for e in &report.per_frame {
        let _ = writeln!(
            csv_text,
            "{},{},{},{:.6}",
            e.frame_id,
            e.person_id,
            e.location_error
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default(),
            e.distance_error,
        );
    }
    write_output(&errors_path, &csv_text)?;

    match (report.ale, report.vle) {
        (Some(ale), Some(vle)) => println!(
            "ALE {:.4} m  ADE {:.4} m  VLE {:.6} m^2  VDE {:.6} m^2  ({} frames)",
            ale, report.ade, vle, report.vde, report.frame_count
        ),
        _ => println!(
            "ADE {:.4} m  VDE {:.6} m^2  ({} frames, distance-only ground truth)",
            report.ade, report.vde, report.frame_count
        ),
    }
    Ok(())
}

fn run_synth(
    scene_path: &Path,
    camera_path: &Option<PathBuf>,
    config_path: &Option<PathBuf>,
    seed: Option<u64>,
    output: &Path,
) -> Result<(), CliError> {
    require_exists(scene_path, true)?;
    let text = fs::read_to_string(scene_path)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", scene_path.display())))?;
    let mut scene_config: SyntheticSceneConfig =
        if scene_path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::config_invalid(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::config_invalid(e.to_string()))?
        };
    if let Some(seed) = seed {
        scene_config.seed = seed;
    }
    if let Some(camera_path) = camera_path {
        require_exists(camera_path, true)?;
        let camera_text = fs::read_to_string(camera_path)
            .map_err(|e| CliError::io(format!("cannot read {}: {e}", camera_path.display())))?;
        scene_config.camera = if camera_path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&camera_text).map_err(|e| CliError::config_invalid(e.to_string()))?
        } else {
            serde_json::from_str(&camera_text)
                .map_err(|e| CliError::config_invalid(e.to_string()))?
        };
    }
    let run_config = load_run_config(config_path)?;
    let bounds = run_config.solver.bounds.to_bounds();

    let scene = generate_scene(&scene_config, &bounds)
        .map_err(|e| CliError::config_invalid(e.to_string()))?;

    let provenance = Provenance::new(
        &[
            Some(scene_path),
            camera_path.as_deref(),
            config_path.as_deref(),
        ],
        scene_config.seed,
    )?;

    fs::create_dir_all(output)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", output.display())))?;
    write_output(&output.join("frames.jsonl"), &frames_lines(&scene.frames))?;
    write_output(&output.join("truth.jsonl"), &ground_truth_lines(&scene.truth))?;
    let states = format!("{}{}", provenance.csv_header(), states_csv(&scene.states));
    write_output(&output.join("states.csv"), &states)?;
    println!(
        "generated {} frames (seed {}) into {}",
        scene.frames.len(),
        scene_config.seed,
        output.display()
    );
    Ok(())
}
