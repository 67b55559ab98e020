//! Synthetic stereo scene generator.
//!
//! A scene is a set of rigid bodies, each with a timed waypoint trajectory and
//! a sampled surface point cloud. Body 0 is special: its waypoints are the
//! robot (camera) trajectory and its surface points are the static background,
//! placed directly in the ground frame. Bodies 1.. are independently moving
//! objects whose points ride along with their poses.
//!
//! Rendering is pure per (scene, frame_id): every frame draws from its own
//! seeded RNG stream, so frames can be generated in any order and a re-run
//! reproduces identical observations bit for bit.

use crate::geometry::{Point3, Pose, StereoCamera, StereoObs};
use crate::{mix_seed, BodyId, TrackId};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Closest range the stereo rig can match, in meters. Nearer points drop out.
const Z_NEAR: f64 = 0.3;
/// Farthest range used when drawing outlier disparities.
const Z_FAR: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("query time {t} outside waypoint span [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// One rigid body: a timed pose trajectory plus surface sample points.
#[derive(Debug, Clone)]
pub struct BodySpec {
    pub body_id: BodyId,
    /// (time, ground pose) waypoints, strictly increasing in time, at least 2.
    pub waypoints: Vec<(f64, Pose)>,
    /// Surface samples in the body frame (ground frame for body 0).
    pub surface_points: Vec<Point3>,
}

/// Complete description of a synthetic sequence.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    /// Body 0 carries the robot trajectory and the static background points.
    pub bodies: Vec<BodySpec>,
    pub camera: StereoCamera,
    pub img_width: f64,
    pub img_height: f64,
    pub frames: usize,
    pub frame_rate: f64,
    /// Gaussian sigma added to u, v and disparity, in pixels.
    pub pixel_noise_sigma: f64,
    /// Fraction of emitted observations replaced by uniform in-image junk.
    pub outlier_rate: f64,
    /// Fraction of tracks omitted per frame.
    pub dropout_rate: f64,
    /// Upper bound on the number of persistent tracks drawn from the bodies.
    pub target_track_count: usize,
    pub rng_seed: u64,
}

/// One rendered stereo frame.
#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_id: usize,
    pub timestamp: f64,
    pub observations: Vec<(TrackId, StereoObs)>,
    /// True body per emitted track. Empty for ingested (non-simulated) data.
    pub truth_labels: BTreeMap<TrackId, BodyId>,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::InvalidScene(msg));
        if self.bodies.is_empty() {
            return fail("no bodies".into());
        }
        if self.bodies[0].body_id != 0 {
            return fail("body 0 must come first".into());
        }
        for body in &self.bodies {
            if body.waypoints.len() < 2 {
                return fail(format!("body {} has fewer than 2 waypoints", body.body_id));
            }
            if !body.waypoints.windows(2).all(|w| w[0].0 < w[1].0) {
                return fail(format!("body {} waypoint times not increasing", body.body_id));
            }
            if body.surface_points.len() < 20 {
                return fail(format!("body {} has fewer than 20 surface points", body.body_id));
            }
        }
        if self.frames == 0 || self.frame_rate <= 0.0 {
            return fail("need at least one frame and a positive frame rate".into());
        }
        if self.pixel_noise_sigma < 0.0 {
            return fail("negative noise sigma".into());
        }
        if !(0.0..1.0).contains(&self.outlier_rate) || !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("outlier and dropout rates must lie in [0, 1)".into());
        }
        if self.target_track_count < 50 {
            return fail("target_track_count below 50".into());
        }
        let last_t = (self.frames - 1) as f64 / self.frame_rate;
        for body in &self.bodies {
            let lo = body.waypoints[0].0;
            let hi = body.waypoints.last().unwrap().0;
            if lo > 0.0 || hi + 1e-9 < last_t {
                return fail(format!(
                    "body {} waypoints [{lo}, {hi}] do not cover frame times [0, {last_t}]",
                    body.body_id
                ));
            }
        }
        Ok(())
    }

    /// Timestamp of frame `k`.
    pub fn frame_time(&self, frame_id: usize) -> f64 {
        frame_id as f64 / self.frame_rate
    }

    /// Stable (body, surface point index) pair per track id.
    ///
    /// When the bodies carry more points than `target_track_count`, per-body
    /// quotas are allocated proportionally (largest remainder) and the first
    /// points of each body's list are used, which keeps ids stable.
    pub fn track_table(&self) -> Vec<(BodyId, usize)> {
        let total: usize = self.bodies.iter().map(|b| b.surface_points.len()).sum();
        let mut quotas: Vec<usize> = if total <= self.target_track_count {
            self.bodies.iter().map(|b| b.surface_points.len()).collect()
        } else {
            let target = self.target_track_count as f64;
            let shares: Vec<f64> = self
                .bodies
                .iter()
                .map(|b| b.surface_points.len() as f64 * target / total as f64)
                .collect();
            let mut quotas: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
            let mut leftover = self.target_track_count - quotas.iter().sum::<usize>();
            let mut order: Vec<usize> = (0..shares.len()).collect();
            order.sort_by(|&a, &b| {
                let fa = shares[a] - shares[a].floor();
                let fb = shares[b] - shares[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            for idx in order {
                if leftover == 0 {
                    break;
                }
                if quotas[idx] < self.bodies[idx].surface_points.len() {
                    quotas[idx] += 1;
                    leftover -= 1;
                }
            }
            quotas
        };
        // Quotas can exceed list lengths only through rounding; clamp to be safe.
        for (q, b) in quotas.iter_mut().zip(&self.bodies) {
            *q = (*q).min(b.surface_points.len());
        }
        let mut table = Vec::new();
        for (body, quota) in self.bodies.iter().zip(quotas) {
            for idx in 0..quota {
                table.push((body.body_id, idx));
            }
        }
        table
    }
}

/// Pose of a body at time `t`: piecewise-linear translation, geodesic rotation.
pub fn interpolate_trajectory(spec: &BodySpec, t: f64) -> Result<Pose, SimError> {
    let lo = spec.waypoints[0].0;
    let hi = spec.waypoints.last().unwrap().0;
    // Tiny slack absorbs timestamp rounding at the span edges.
    if t < lo - 1e-9 || t > hi + 1e-9 {
        return Err(SimError::TimeOutOfRange { t, lo, hi });
    }
    let t = t.clamp(lo, hi);
    let seg = match spec.waypoints.binary_search_by(|(wt, _)| wt.partial_cmp(&t).unwrap()) {
        Ok(i) => return Ok(spec.waypoints[i].1),
        Err(i) => i - 1,
    };
    let (t0, ref a) = spec.waypoints[seg];
    let (t1, ref b) = spec.waypoints[seg + 1];
    let alpha = (t - t0) / (t1 - t0);
    Ok(a.interpolate(b, alpha))
}

/// Renders frame `frame_id`. Pure in (scene, frame_id).
pub fn render_frame(scene: &SceneConfig, frame_id: usize) -> Result<Frame, SimError> {
    let t = scene.frame_time(frame_id);
    let robot = interpolate_trajectory(&scene.bodies[0], t)?;
    let robot_inv = robot.inverse();
    let mut body_poses: BTreeMap<BodyId, Pose> = BTreeMap::new();
    for body in &scene.bodies[1..] {
        body_poses.insert(body.body_id, interpolate_trajectory(body, t)?);
    }
    let body_index: BTreeMap<BodyId, usize> = scene
        .bodies
        .iter()
        .enumerate()
        .map(|(i, b)| (b.body_id, i))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.rng_seed, frame_id as u64));
    let noise = Normal::new(0.0, scene.pixel_noise_sigma).expect("validated sigma");
    let d_min = scene.camera.fx * scene.camera.baseline / Z_FAR;
    let d_max = scene.camera.fx * scene.camera.baseline / Z_NEAR;

    let mut observations = Vec::new();
    let mut truth_labels = BTreeMap::new();
    for (track, &(body_id, point_idx)) in scene.track_table().iter().enumerate() {
        let track_id = track as TrackId;
        let surface = scene.bodies[body_index[&body_id]].surface_points[point_idx];
        let ground = if body_id == 0 {
            surface
        } else {
            body_poses[&body_id].apply(&surface)
        };
        let cam_pt = robot_inv.apply(&ground);
        if cam_pt.z < Z_NEAR {
            continue;
        }
        let Ok(mut obs) = scene.camera.project(&cam_pt) else {
            continue;
        };
        if scene.dropout_rate > 0.0 && rng.random::<f64>() < scene.dropout_rate {
            continue;
        }
        let is_outlier = scene.outlier_rate > 0.0 && rng.random::<f64>() < scene.outlier_rate;
        if is_outlier {
            obs = StereoObs {
                u_left: rng.random_range(0.0..scene.img_width),
                v: rng.random_range(0.0..scene.img_height),
                disparity: rng.random_range(d_min..d_max),
            };
        } else if scene.pixel_noise_sigma > 0.0 {
            obs.u_left += noise.sample(&mut rng);
            obs.v += noise.sample(&mut rng);
            obs.disparity += noise.sample(&mut rng);
        }
        let in_bounds = obs.u_left >= 0.0
            && obs.u_left < scene.img_width
            && obs.v >= 0.0
            && obs.v < scene.img_height
            && obs.disparity > 0.0;
        if !in_bounds {
            continue;
        }
        observations.push((track_id, obs));
        truth_labels.insert(track_id, body_id);
    }
    Ok(Frame {
        frame_id,
        timestamp: t,
        observations,
        truth_labels,
    })
}

/// Writes one trajectory file per body (`gt_body_<id>.txt`) with a line per
/// frame, in the shared trajectory format.
pub fn export_ground_truth(scene: &SceneConfig, dir: &Path) -> Result<(), crate::eval::TrajError> {
    for body in &scene.bodies {
        let mut rows = Vec::with_capacity(scene.frames);
        for frame_id in 0..scene.frames {
            let t = scene.frame_time(frame_id);
            let pose = interpolate_trajectory(body, t)
                .expect("validated scenes cover all frame times");
            rows.push((t, pose));
        }
        let path = dir.join(format!("gt_body_{}.txt", body.body_id));
        crate::eval::write_trajectory(&path, &rows)?;
    }
    Ok(())
}

/// Uniform samples on the surface of an axis-aligned box with the given full
/// extents, centered on the origin. Faces are weighted by area.
pub fn sample_box_points(extent: Vector3<f64>, n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = extent / 2.0;
    let areas = [
        extent.y * extent.z, // +-x faces
        extent.x * extent.z, // +-y faces
        extent.x * extent.y, // +-z faces
    ];
    let total: f64 = 2.0 * areas.iter().sum::<f64>();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 0;
            for (i, &a) in areas.iter().enumerate() {
                if pick < 2.0 * a {
                    axis = i;
                    break;
                }
                pick -= 2.0 * a;
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let a = rng.random_range(-1.0..1.0);
            let b = rng.random_range(-1.0..1.0);
            match axis {
                0 => Point3::new(sign * h.x, a * h.y, b * h.z),
                1 => Point3::new(a * h.x, sign * h.y, b * h.z),
                _ => Point3::new(a * h.x, b * h.y, sign * h.z),
            }
        })
        .collect()
}

/// Uniform samples on a cylinder surface (axis along y), caps included.
pub fn sample_cylinder_points(radius: f64, height: f64, n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lateral = std::f64::consts::TAU * radius * height;
    let caps = 2.0 * std::f64::consts::PI * radius * radius;
    (0..n)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            if rng.random_range(0.0..lateral + caps) < lateral {
                let y = rng.random_range(-height / 2.0..height / 2.0);
                Point3::new(radius * theta.cos(), y, radius * theta.sin())
            } else {
                let r = radius * rng.random::<f64>().sqrt();
                let y = if rng.random::<bool>() { height / 2.0 } else { -height / 2.0 };
                Point3::new(r * theta.cos(), y, r * theta.sin())
            }
        })
        .collect()
}

/// Uniform scatter inside an axis-aligned box given by min/max corners.
fn scatter_in_box(min: Point3, max: Point3, n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(min.x..max.x),
                rng.random_range(min.y..max.y),
                rng.random_range(min.z..max.z),
            )
        })
        .collect()
}

/// Overrides applied on top of a preset's defaults.
#[derive(Debug, Clone, Default)]
pub struct PresetParams {
    pub robot_speed: Option<f64>,
    pub pixel_noise_sigma: Option<f64>,
    pub outlier_rate: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub seed: Option<u64>,
}

/// Builds one of the named benchmark scenes with default parameters.
pub fn preset_scene(name: &str) -> Result<SceneConfig, SimError> {
    preset_scene_custom(name, &PresetParams::default())
}

/// Builds a named benchmark scene, honoring parameter overrides.
pub fn preset_scene_custom(name: &str, params: &PresetParams) -> Result<SceneConfig, SimError> {
    let scene = match name {
        "L-static" => presets::l_static(params),
        "S-static" => presets::s_static(params),
        "L-1obj" => presets::l_1obj(params),
        "S-1obj" => presets::s_1obj(params),
        "fwdback-2obj" => presets::fwdback_2obj(params),
        other => return Err(SimError::UnknownPreset(other.to_string())),
    };
    scene.validate()?;
    Ok(scene)
}

/// Names accepted by [`preset_scene`].
pub const PRESET_NAMES: [&str; 5] = ["L-static", "S-static", "L-1obj", "S-1obj", "fwdback-2obj"];

mod presets {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, TAU};

    const FRAME_RATE: f64 = 10.0;
    /// Camera height above the floor; the ground frame has y pointing down.
    const FLOOR_Y: f64 = 1.2;

    fn camera() -> StereoCamera {
        StereoCamera::new(700.0, 700.0, 640.0, 360.0, 0.12)
    }

    /// Planar path sampler: constant speed, yaw about the (downward) y axis,
    /// motion in the x-z plane. Arcs are sampled densely enough that linear
    /// interpolation between waypoints stays well under a millimeter off.
    pub(super) struct PathBuilder {
        t: f64,
        pos: Point3,
        yaw: f64,
        speed: f64,
        waypoints: Vec<(f64, Pose)>,
    }

    impl PathBuilder {
        pub fn new(speed: f64) -> Self {
            let mut b = Self {
                t: 0.0,
                pos: Point3::zeros(),
                yaw: 0.0,
                speed,
                waypoints: Vec::new(),
            };
            b.emit();
            b
        }

        fn heading(&self) -> Vector3<f64> {
            Vector3::new(self.yaw.sin(), 0.0, self.yaw.cos())
        }

        fn emit(&mut self) {
            let pose = Pose::from_axis_angle(Vector3::y(), self.yaw, self.pos);
            self.waypoints.push((self.t, pose));
        }

        /// Straight segment; negative length means driving in reverse.
        pub fn straight(mut self, len: f64) -> Self {
            self.pos += self.heading() * len;
            self.t += len.abs() / self.speed;
            self.emit();
            self
        }

        /// Constant-radius arc through `angle_deg` (sign picks the side).
        pub fn arc(mut self, angle_deg: f64, radius: f64) -> Self {
            let angle = angle_deg.to_radians();
            let arc_len = angle.abs() * radius;
            let duration = arc_len / self.speed;
            let steps = (arc_len / 0.05).ceil().max(4.0) as usize;
            let (t0, yaw0, pos0) = (self.t, self.yaw, self.pos);
            // Center of the turn sits perpendicular to the heading.
            let side = angle.signum();
            let normal = Vector3::new(yaw0.cos(), 0.0, -yaw0.sin()) * side;
            let center = pos0 + normal * radius;
            for i in 1..=steps {
                let frac = i as f64 / steps as f64;
                let phi = angle * frac;
                self.yaw = yaw0 + phi;
                self.pos = center - normal_at(yaw0 + phi, side) * radius;
                self.t = t0 + duration * frac;
                self.emit();
            }
            return self;

            fn normal_at(yaw: f64, side: f64) -> Vector3<f64> {
                Vector3::new(yaw.cos(), 0.0, -yaw.sin()) * side
            }
        }

        /// Holds the current pose for `seconds`.
        pub fn dwell(mut self, seconds: f64) -> Self {
            self.t += seconds;
            self.emit();
            self
        }

        pub fn build(self) -> Vec<(f64, Pose)> {
            self.waypoints
        }
    }

    /// Gait oscillation of a walking body around its mean path: stride-rate
    /// speed pulsing plus lateral sway and vertical bob. A walker that rides
    /// its path perfectly smoothly never happens in practice, and the sway
    /// and bob are what make a follower at matched mean speed distinguishable
    /// from the background between nearby keyframes — the background streams
    /// straight past the camera and never oscillates sideways or vertically.
    /// The along-path pulse is kept small: a large one would sweep the
    /// walker's per-keyframe motion through the background's own motion at
    /// one gait phase and fuse the two bodies there.
    const GAIT_HZ: f64 = 0.9;
    const GAIT_ALONG_M: f64 = 0.01;
    const GAIT_SWAY_M: f64 = 0.04;
    const GAIT_BOB_M: f64 = 0.03;

    /// Replays `path` with a time shift of `lead` seconds and glues on a body
    /// height, a small lateral offset, and gait oscillation, yielding a
    /// walking follower trajectory. Resampled densely so neither the shift
    /// nor the gait lands between sparse waypoints.
    fn shifted_follower(
        path: &[(f64, Pose)],
        lead: f64,
        lateral: f64,
        height: f64,
    ) -> Vec<(f64, Pose)> {
        let track = BodySpec {
            body_id: u32::MAX,
            waypoints: path.to_vec(),
            surface_points: Vec::new(),
        };
        let end = path.last().unwrap().0;
        let steps = ((end - lead) / 0.05).floor() as usize;
        let speed = {
            let a = interpolate_trajectory(&track, lead).unwrap();
            let b = interpolate_trajectory(&track, lead + 1.0).unwrap();
            (b.translation() - a.translation()).norm()
        };
        (0..=steps)
            .map(|i| {
                let t = lead + (end - lead) * i as f64 / steps as f64;
                let phase = TAU * GAIT_HZ * (t - lead);
                // Speed pulsing advances and retards the body along its path.
                let t_path = (t + GAIT_ALONG_M / speed * phase.sin()).clamp(lead, end);
                let p = interpolate_trajectory(&track, t_path).expect("t within path span");
                let sway = lateral + GAIT_SWAY_M * (phase + FRAC_PI_2).sin();
                let bob = height + GAIT_BOB_M * (2.0 * phase).sin();
                let offset = p.apply(&Point3::new(sway, 0.0, 0.0)) - p.translation()
                    + Vector3::new(0.0, bob, 0.0);
                let pose = Pose::new(*p.rotation(), p.translation() + offset);
                (t - lead, pose)
            })
            .collect()
    }

    fn scene(
        bodies: Vec<BodySpec>,
        frames: usize,
        seed: u64,
        params: &PresetParams,
    ) -> SceneConfig {
        let target = bodies.iter().map(|b| b.surface_points.len()).sum();
        SceneConfig {
            bodies,
            camera: camera(),
            img_width: 1280.0,
            img_height: 720.0,
            frames,
            frame_rate: FRAME_RATE,
            pixel_noise_sigma: params.pixel_noise_sigma.unwrap_or(0.5),
            outlier_rate: params.outlier_rate.unwrap_or(0.05),
            dropout_rate: params.dropout_rate.unwrap_or(0.02),
            target_track_count: target,
            rng_seed: params.seed.unwrap_or(seed),
        }
    }

    /// Corridor-shaped background scatter around an L or S path footprint.
    fn corridor(min_xz: (f64, f64), max_xz: (f64, f64), n: usize, seed: u64) -> Vec<Point3> {
        scatter_in_box(
            Point3::new(min_xz.0, -0.6, min_xz.1),
            Point3::new(max_xz.0, FLOOR_Y + 0.1, max_xz.1),
            n,
            seed,
        )
    }

    pub(super) fn l_static(params: &PresetParams) -> SceneConfig {
        let speed = params.robot_speed.unwrap_or(0.25);
        // 12.75 + quarter arc (r 3.5) + 12.75 = 31 m.
        let path = PathBuilder::new(speed)
            .straight(12.75)
            .arc(90.0, 3.5)
            .straight(12.75)
            .dwell(1.0)
            .build();
        let frames = (31.0 / speed * FRAME_RATE) as usize;
        let background = BodySpec {
            body_id: 0,
            waypoints: path,
            surface_points: corridor((-4.0, -1.0), (20.0, 20.0), 1200, 9001),
        };
        scene(vec![background], frames, 101, params)
    }

    pub(super) fn s_static(params: &PresetParams) -> SceneConfig {
        let speed = params.robot_speed.unwrap_or(0.25);
        // 8 + arc + 8 + arc + 8 = 35 m with r = 3.5 arcs (5.5 m each).
        let path = PathBuilder::new(speed)
            .straight(8.0)
            .arc(90.0, 3.5)
            .straight(8.0)
            .arc(-90.0, 3.5)
            .straight(8.0)
            .dwell(1.0)
            .build();
        let frames = (35.0 / speed * FRAME_RATE) as usize;
        // The path ends at (15, 23) heading +z; the scatter extends well past
        // every leg so the camera never faces empty space.
        let background = BodySpec {
            body_id: 0,
            waypoints: path,
            surface_points: corridor((-4.0, -1.0), (23.0, 31.0), 2000, 9002),
        };
        scene(vec![background], frames, 102, params)
    }

    /// Person-sized box cloud for the walking objects.
    fn walker_points(n: usize, seed: u64) -> Vec<Point3> {
        sample_box_points(Vector3::new(0.45, 1.5, 0.6), n, seed)
    }

    pub(super) fn l_1obj(params: &PresetParams) -> SceneConfig {
        let speed = params.robot_speed.unwrap_or(0.2);
        let lead_dist = 4.0;
        // Robot drives 25 m; the path continues another 4 m so the walker
        // leading it by `lead_dist` never runs off the end.
        let path = PathBuilder::new(speed)
            .straight(9.75)
            .arc(90.0, 3.5)
            .straight(9.75 + lead_dist)
            .dwell(1.0)
            .build();
        let frames = (25.0 / speed * FRAME_RATE) as usize;
        // The walker's path end sits at x ≈ 21; keep scatter well past it so
        // the final stretch still sees background ahead.
        let background = BodySpec {
            body_id: 0,
            waypoints: path.clone(),
            surface_points: corridor((-4.0, -1.0), (27.0, 20.0), 1000, 9003),
        };
        let walker = BodySpec {
            body_id: 1,
            waypoints: shifted_follower(&path, lead_dist / speed, 0.3, 0.35),
            surface_points: walker_points(450, 9103),
        };
        scene(vec![background, walker], frames, 103, params)
    }

    pub(super) fn s_1obj(params: &PresetParams) -> SceneConfig {
        let speed = params.robot_speed.unwrap_or(0.2);
        let lead_dist = 4.0;
        let path = PathBuilder::new(speed)
            .straight(6.0)
            .arc(90.0, 3.5)
            .straight(4.0)
            .arc(-90.0, 3.5)
            .straight(5.0 + lead_dist)
            .dwell(1.0)
            .build();
        let frames = (26.0 / speed * FRAME_RATE) as usize;
        // The final straight ends at (11, 22) heading +z; scatter continues
        // past it, and x covers the second arc's outside bulge.
        let background = BodySpec {
            body_id: 0,
            waypoints: path.clone(),
            surface_points: corridor((-4.0, -1.0), (20.0, 30.0), 1000, 9004),
        };
        let walker = BodySpec {
            body_id: 1,
            waypoints: shifted_follower(&path, lead_dist / speed, 0.3, 0.35),
            surface_points: walker_points(450, 9104),
        };
        scene(vec![background, walker], frames, 104, params)
    }

    pub(super) fn fwdback_2obj(params: &PresetParams) -> SceneConfig {
        let speed = params.robot_speed.unwrap_or(0.15);
        let robot_path = PathBuilder::new(speed)
            .straight(4.5)
            .straight(-4.5)
            .dwell(2.0)
            .build();
        let frames = (9.0 / speed * FRAME_RATE) as usize;
        let duration = frames as f64 / FRAME_RATE + 1.0;

        // Square walker: rounded 1.4 m square in front of the robot, looping
        // for the whole sequence.
        let lap = PathBuilder::new(0.35)
            .straight(0.9)
            .arc(90.0, 0.25)
            .straight(0.9)
            .arc(90.0, 0.25)
            .straight(0.9)
            .arc(90.0, 0.25)
            .straight(0.9)
            .arc(90.0, 0.25)
            .build();
        let lap_time = lap.last().unwrap().0;
        let laps = (duration / lap_time).ceil() as usize;
        let mut square_wp = Vec::new();
        for k in 0..laps {
            let t0 = k as f64 * lap_time;
            let skip = usize::from(k > 0); // the lap closes on its first pose
            for (t, p) in lap.iter().skip(skip) {
                let shifted = Pose::new(
                    *p.rotation(),
                    p.translation() + Vector3::new(-0.7, 0.35, 6.8),
                );
                square_wp.push((t0 + t, shifted));
            }
        }

        // In-place rotator: fixed position, constant-rate yaw.
        let spin_rate = 40f64.to_radians();
        let rotator_pos = Vector3::new(1.1, 0.5, 6.5);
        let steps = (duration / 0.5).ceil() as usize;
        let rotator_wp: Vec<(f64, Pose)> = (0..=steps)
            .map(|i| {
                let t = i as f64 * 0.5;
                (t, Pose::from_axis_angle(Vector3::y(), spin_rate * t, rotator_pos))
            })
            .collect();

        let background = BodySpec {
            body_id: 0,
            waypoints: robot_path,
            surface_points: scatter_in_box(
                Point3::new(-5.0, -0.6, 0.8),
                Point3::new(5.0, FLOOR_Y + 0.1, 13.0),
                620,
                9005,
            ),
        };
        let square = BodySpec {
            body_id: 1,
            waypoints: square_wp,
            surface_points: walker_points(280, 9105),
        };
        let rotator = BodySpec {
            body_id: 2,
            waypoints: rotator_wp,
            surface_points: sample_cylinder_points(0.16, 0.5, 200, 9205),
        };
        scene(vec![background, square, rotator], frames, 105, params)
    }
}
