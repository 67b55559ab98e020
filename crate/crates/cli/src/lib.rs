//! Command implementations behind the `mmvo` binary: scene simulation,
//! pipeline runs over track files, trajectory evaluation, and batch reports.
//!
//! Every command is a plain function returning `Result` so integration tests
//! can drive them in-process; the binary maps errors to exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmvo::eval::{self, Metrics};
use mmvo::geometry::{Pose, StereoCamera};
use mmvo::pipeline::{self, PipelineConfig};
use mmvo::sim::{self, PresetParams};

pub type DynError = Box<dyn std::error::Error>;
pub type CmdResult = Result<(), DynError>;

// ---------------------------------------------------------------------------
// Camera intrinsics file.

/// Writes stereo intrinsics as `key = value` lines, full precision.
pub fn write_camera(path: &Path, cam: &StereoCamera) -> std::io::Result<()> {
    let text = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nbaseline = {}\n",
        cam.fx, cam.fy, cam.cx, cam.cy, cam.baseline
    );
    fs::write(path, text)
}

/// Reads intrinsics written by [`write_camera`]. All five keys are required;
/// `#` comments and blank lines are skipped.
pub fn read_camera(path: &Path) -> Result<StereoCamera, DynError> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read camera file {}: {e}", path.display()))?;
    let (mut fx, mut fy, mut cx, mut cy, mut baseline) = (None, None, None, None, None);
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), idx + 1))?;
        let key = key.trim();
        let value: f64 = value.trim().parse().map_err(|_| {
            format!("{}:{}: bad number for `{key}`", path.display(), idx + 1)
        })?;
        match key {
            "fx" => fx = Some(value),
            "fy" => fy = Some(value),
            "cx" => cx = Some(value),
            "cy" => cy = Some(value),
            "baseline" => baseline = Some(value),
            other => {
                return Err(format!(
                    "{}:{}: unknown camera key `{other}`",
                    path.display(),
                    idx + 1
                )
                .into())
            }
        }
    }
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| format!("{}: missing camera key `{name}`", path.display()))
    };
    Ok(StereoCamera::new(
        need(fx, "fx")?,
        need(fy, "fy")?,
        need(cx, "cx")?,
        need(cy, "cy")?,
        need(baseline, "baseline")?,
    ))
}

// ---------------------------------------------------------------------------
// simulate

/// Renders a preset scene into `out`: `tracks.txt` (pipeline input),
/// `camera.txt`, `gt_body_<id>.txt` per body, and `truth_labels.txt`
/// (`track_id body_id` per persistent track).
pub fn cmd_simulate(preset: &str, out: &Path, params: &PresetParams) -> CmdResult {
    let scene = sim::preset_scene_custom(preset, params)?;
    fs::create_dir_all(out)?;
    let mut frames = Vec::with_capacity(scene.frames);
    for frame_id in 0..scene.frames {
        frames.push(sim::render_frame(&scene, frame_id)?);
    }
    pipeline::write_tracks(&out.join("tracks.txt"), &frames)?;
    sim::export_ground_truth(&scene, out)?;
    write_camera(&out.join("camera.txt"), &scene.camera)?;
    let mut truth = String::new();
    for (track, (body, _)) in scene.track_table().iter().enumerate() {
        writeln!(truth, "{track} {body}").expect("string formatting");
    }
    fs::write(out.join("truth_labels.txt"), truth)?;
    eprintln!(
        "simulated `{preset}`: {} frames, {} tracks -> {}",
        scene.frames,
        scene.track_table().len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run

/// Runs the pipeline over a track file and writes `traj_robot.txt`,
/// `traj_object_<label>.txt` per tracked object, `labels.txt` (per-keyframe
/// `frame_id track_id label` rows), and `run_meta.txt` (effective
/// configuration plus run outcome).
///
/// The camera file defaults to `camera.txt` next to the track file; the
/// configuration file is optional (built-in defaults apply).
pub fn cmd_run(
    tracks: &Path,
    config_path: Option<&Path>,
    camera_path: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let camera_file = match camera_path {
        Some(p) => p.to_path_buf(),
        None => tracks.parent().unwrap_or(Path::new(".")).join("camera.txt"),
    };
    let cam = read_camera(&camera_file)?;
    let config = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| format!("cannot read config file {}: {e}", p.display()))?;
            pipeline::parse_config(&text)?
        }
        None => PipelineConfig::default(),
    };
    let frames = pipeline::ingest_tracks(tracks)?;
    let n_frames = frames.len();
    let started = Instant::now();
    let output = pipeline::run(frames, &cam, &config)?;
    eprintln!(
        "processed {n_frames} frames in {:.1} s ({} keyframes, mode {})",
        started.elapsed().as_secs_f64(),
        output.keyframe_labels.len(),
        output.config.mode.as_str()
    );

    fs::create_dir_all(out)?;
    // Stale object trajectories from an earlier run of a different
    // configuration must not survive into this run's output set.
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if name.starts_with("traj_object_") && name.ends_with(".txt") {
            fs::remove_file(&path)?;
        }
    }
    let stamped = |poses: &[(usize, Pose)]| -> Vec<(f64, Pose)> {
        poses.iter().map(|&(f, p)| (output.timestamps[&f], p)).collect()
    };
    eval::write_trajectory(&out.join("traj_robot.txt"), &stamped(&output.robot))?;
    for (label, traj) in &output.objects {
        eval::write_trajectory(
            &out.join(format!("traj_object_{label}.txt")),
            &stamped(&traj.poses),
        )?;
    }

    let mut labels_text = String::new();
    for (frame_id, labels) in &output.keyframe_labels {
        for (track, label) in labels {
            writeln!(labels_text, "{frame_id} {track} {label}").expect("string formatting");
        }
    }
    fs::write(out.join("labels.txt"), labels_text)?;

    let mut meta = pipeline::write_config(&output.config);
    match output.background {
        Some(label) => writeln!(meta, "background_label = {label}").expect("string formatting"),
        None => writeln!(meta, "background_label = none").expect("string formatting"),
    }
    writeln!(meta, "divergence = {}", output.divergence).expect("string formatting");
    fs::write(out.join("run_meta.txt"), meta)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Renders metrics as a short human table followed by machine-readable
/// `key=value` lines.
pub fn render_metrics(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "position RMSE   {:>12.6} m", m.position_rmse);
    let _ = writeln!(s, "rotation RMSE   {:>12.6} deg", m.rotation_rmse_deg);
    let _ = writeln!(s, "aligned poses   {:>12}", m.n_poses);
    let _ = writeln!(s, "divergence      {:>12}", if m.divergence { "yes" } else { "no" });
    let _ = writeln!(s);
    let _ = writeln!(s, "position_rmse={:.6}", m.position_rmse);
    let _ = writeln!(s, "rotation_rmse_deg={:.6}", m.rotation_rmse_deg);
    let _ = writeln!(s, "n_poses={}", m.n_poses);
    let _ = writeln!(s, "divergence={}", m.divergence);
    s
}

/// Compares an estimated trajectory against ground truth and prints metrics.
/// Optionally writes a per-pose error series as CSV.
pub fn cmd_eval(est: &Path, gt: &Path, per_frame_csv: Option<&Path>) -> CmdResult {
    let est_rows = eval::read_trajectory(est)?;
    let gt_rows = eval::read_trajectory(gt)?;
    let metrics = eval::rmse(&est_rows, &gt_rows)?;
    print!("{}", render_metrics(&metrics));
    if let Some(csv) = per_frame_csv {
        let mut text = String::from("timestamp,position_error_m,rotation_error_deg\n");
        for (t, pos, rot) in eval::per_pose_errors(&est_rows, &gt_rows)? {
            writeln!(text, "{t:.6},{pos:.6},{rot:.6}").expect("string formatting");
        }
        fs::write(csv, text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report

/// One evaluated trajectory within a sequence directory.
struct ReportRow {
    trajectory: String,
    truth: String,
    metrics: Metrics,
}

/// Pairs every estimated trajectory in `dir` with ground truth: the robot
/// against body 0, then objects against the remaining bodies greedily by
/// lowest position RMSE. Returns `None` when `dir` is not a sequence
/// directory (missing robot estimate or ground truth).
fn evaluate_sequence(dir: &Path) -> Result<Option<Vec<ReportRow>>, DynError> {
    let robot_est = dir.join("traj_robot.txt");
    let robot_gt = dir.join("gt_body_0.txt");
    if !robot_est.is_file() || !robot_gt.is_file() {
        return Ok(None);
    }
    let mut rows = vec![ReportRow {
        trajectory: "robot".into(),
        truth: "body_0".into(),
        metrics: eval::rmse(
            &eval::read_trajectory(&robot_est)?,
            &eval::read_trajectory(&robot_gt)?,
        )?,
    }];

    // Collect object estimates and non-robot ground-truth bodies.
    let mut objects: Vec<(u32, Vec<(f64, Pose)>)> = Vec::new();
    let mut bodies: Vec<(u32, Vec<(f64, Pose)>)> = Vec::new();
    let mut entries: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    entries.sort();
    for name in &entries {
        if let Some(label) = name
            .strip_prefix("traj_object_")
            .and_then(|s| s.strip_suffix(".txt"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            objects.push((label, eval::read_trajectory(&dir.join(name))?));
        } else if let Some(id) = name
            .strip_prefix("gt_body_")
            .and_then(|s| s.strip_suffix(".txt"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            if id != 0 {
                bodies.push((id, eval::read_trajectory(&dir.join(name))?));
            }
        }
    }

    // Greedy assignment: repeatedly take the (object, body) pair with the
    // lowest position RMSE; ties resolve to the smaller label, then body id.
    let mut candidates: Vec<(f64, usize, usize, Metrics)> = Vec::new();
    for (oi, (_, est)) in objects.iter().enumerate() {
        for (bi, (_, gt)) in bodies.iter().enumerate() {
            if let Ok(m) = eval::rmse(est, gt) {
                candidates.push((m.position_rmse, oi, bi, m));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("RMSE is finite")
            .then(objects[a.1].0.cmp(&objects[b.1].0))
            .then(bodies[a.2].0.cmp(&bodies[b.2].0))
    });
    let mut object_used = vec![false; objects.len()];
    let mut body_used = vec![false; bodies.len()];
    let mut matched: Vec<(usize, usize, Metrics)> = Vec::new();
    for (_, oi, bi, m) in candidates {
        if !object_used[oi] && !body_used[bi] {
            object_used[oi] = true;
            body_used[bi] = true;
            matched.push((oi, bi, m));
        }
    }
    matched.sort_by_key(|&(oi, _, _)| objects[oi].0);
    for (oi, bi, m) in matched {
        rows.push(ReportRow {
            trajectory: format!("object_{}", objects[oi].0),
            truth: format!("body_{}", bodies[bi].0),
            metrics: m,
        });
    }
    for (oi, used) in object_used.iter().enumerate() {
        if !used {
            rows.push(ReportRow {
                trajectory: format!("object_{}", objects[oi].0),
                truth: "unmatched".into(),
                metrics: Metrics {
                    position_rmse: f64::NAN,
                    rotation_rmse_deg: f64::NAN,
                    n_poses: 0,
                    divergence: false,
                },
            });
        }
    }
    Ok(Some(rows))
}

/// Summarizes every sequence directory under `dir`: one line per trajectory,
/// RMSE computed exactly as `eval` computes it.
pub fn cmd_report(dir: &Path) -> CmdResult {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("cannot read {}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();

    let mut out = String::new();
    let _ = writeln!(
        out,
        "# RMSE per sequence, first-pose aligned: each estimate is rigidly"
    );
    let _ = writeln!(
        out,
        "# premultiplied so its first pose equals the first ground-truth pose."
    );
    let _ = writeln!(
        out,
        "{:<20} {:<12} {:<10} {:>14} {:>18} {:>8}",
        "sequence", "trajectory", "truth", "position_rmse", "rotation_rmse_deg", "n_poses"
    );
    let mut evaluated = 0usize;
    for sub in &subdirs {
        let Some(rows) = evaluate_sequence(sub)? else {
            continue;
        };
        evaluated += 1;
        let name = sub.file_name().unwrap_or_default().to_string_lossy();
        for r in rows {
            if r.truth == "unmatched" {
                let _ = writeln!(
                    out,
                    "{:<20} {:<12} {:<10} {:>14} {:>18} {:>8}",
                    name, r.trajectory, r.truth, "-", "-", "-"
                );
            } else {
                let _ = writeln!(
                    out,
                    "{:<20} {:<12} {:<10} {:>14.6} {:>18.6} {:>8}",
                    name,
                    r.trajectory,
                    r.truth,
                    r.metrics.position_rmse,
                    r.metrics.rotation_rmse_deg,
                    r.metrics.n_poses
                );
            }
        }
    }
    if evaluated == 0 {
        return Err(format!(
            "no sequence directories with traj_robot.txt and gt_body_0.txt under {}",
            dir.display()
        )
        .into());
    }
    print!("{out}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared helpers for the binary.

/// Builds simulator overrides from optional CLI flags.
pub fn preset_overrides(
    speed: Option<f64>,
    noise: Option<f64>,
    outliers: Option<f64>,
    dropout: Option<f64>,
    seed: Option<u64>,
) -> PresetParams {
    PresetParams {
        robot_speed: speed,
        pixel_noise_sigma: noise,
        outlier_rate: outliers,
        dropout_rate: dropout,
        seed,
    }
}

/// Known preset names, for `--help` and error messages.
pub fn preset_names() -> &'static [&'static str] {
    &sim::PRESET_NAMES
}
