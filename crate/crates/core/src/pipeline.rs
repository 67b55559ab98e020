//! The end-to-end odometry pipeline.
//!
//! Frames stream in once, in order. Observations are triangulated, keyframes
//! selected, and every keyframe pair is segmented into rigid motions that the
//! label tracker binds to persistent object identities. Each label's
//! robot-relative pose chain grows keyframe by keyframe, its surface points
//! accumulate in its first-observation frame, and the frames between
//! keyframes are aligned against their nearest keyframe. When the stream
//! ends, the per-label chains are converted into ground-frame trajectories.
//!
//! The traditional single-motion baseline runs through the very same code
//! path with the segmentation stage replaced by one motion model over all
//! points, so the two modes are directly comparable.

use crate::geometry::{Point3, Pose, StereoCamera, StereoObs};
use crate::labels::{
    self, KeyFrame, KeyframeParams, LabelParams, LabelRegistry, SlidingWindow,
};
use crate::seg::{self, Correspondence, CorrespondenceSet, MotionModel, SegmentParams,
    SegmentationResult};
use crate::sim::Frame;
use crate::vo::{self, LabeledPoints, RelativePoseTrack, VoParams};
use crate::world::{self, GroundTrajectory, SurfacePointSet};
use crate::{mix_seed, Label, TrackId};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Robot motion between consecutive keyframes beyond which the run is
/// flagged as diverged (per keyframe, not per second).
const DIVERGENCE_TRANSLATION_M: f64 = 1.0;
const DIVERGENCE_ROTATION_RAD: f64 = 30.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Which motion machinery a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One motion model over all points per keyframe pair; no segmentation,
    /// no object labels. The baseline that moving objects are known to break.
    Traditional,
    /// The full loop: motion segmentation, label tracking, per-object
    /// odometry, ground-frame conversion for every tracked object.
    MultiMotion,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Traditional => "traditional",
            Mode::MultiMotion => "multi_motion",
        }
    }

    /// Case-insensitive parse of [`Mode::as_str`] names.
    pub fn parse(s: &str) -> Option<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "traditional" => Some(Mode::Traditional),
            "multi_motion" => Some(Mode::MultiMotion),
            _ => None,
        }
    }
}

/// Every knob of a pipeline run. Serializable as flat `key = value` text via
/// [`write_config`] / [`parse_config`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// A keyframe at least every this many frames.
    pub interval_frames: usize,
    /// A keyframe as soon as fewer tracks than this match the previous one.
    pub min_matches: usize,
    /// Keyframes the label voting window holds (current plus predecessors).
    pub window_len: usize,
    /// Vote weight per window keyframe, newest first, strictly decreasing.
    pub weights: Vec<f64>,
    /// Total vote weight below which a track's history is unconvincing.
    pub new_object_threshold: f64,
    /// Neighbor count for label assignment of newly triangulated points.
    pub knn_k: usize,
    /// Segmentation: motion hypotheses sampled per keyframe pair.
    pub n_hyp: usize,
    /// Segmentation and odometry inlier threshold, in pixels.
    pub inlier_threshold_px: f64,
    /// Segmentation: smallest point count that keeps a motion model alive.
    pub min_support: usize,
    /// Segmentation: inlier-set overlap at or above which models merge.
    pub overlap_merge_ratio: f64,
    /// Per-object odometry: motion hypotheses per keyframe step.
    pub vo_n_hyp: usize,
    /// Per-object odometry: minimum shared tracks and consensus size.
    pub vo_min_support: usize,
    /// Occupancy grid resolution for object gravity centers, in meters.
    pub voxel_size: f64,
    pub mode: Mode,
    /// Base seed; every randomized stage derives its own stream from it.
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            interval_frames: 5,
            min_matches: 500,
            window_len: 5,
            weights: vec![0.8, 0.6, 0.4, 0.2],
            new_object_threshold: 0.3,
            knn_k: 5,
            n_hyp: 500,
            inlier_threshold_px: 2.0,
            min_support: 15,
            overlap_merge_ratio: 0.5,
            vo_n_hyp: 100,
            vo_min_support: 6,
            voxel_size: 0.05,
            mode: Mode::MultiMotion,
            rng_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::InvalidConfig(msg));
        if self.interval_frames == 0 {
            return fail("interval_frames must be at least 1".into());
        }
        if self.min_matches == 0 {
            return fail("min_matches must be at least 1".into());
        }
        if self.window_len < 2 {
            return fail("window_len must be at least 2".into());
        }
        if self.weights.is_empty() {
            return fail("weights must not be empty".into());
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return fail(format!("weights must be positive, got {:?}", self.weights));
        }
        if self.weights.windows(2).any(|w| w[1] >= w[0]) {
            return fail(format!(
                "weights must strictly decrease, got {:?}",
                self.weights
            ));
        }
        if !(self.new_object_threshold > 0.0) {
            return fail("new_object_threshold must be positive".into());
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1".into());
        }
        if self.n_hyp == 0 || self.vo_n_hyp == 0 {
            return fail("hypothesis counts must be at least 1".into());
        }
        if !(self.inlier_threshold_px > 0.0) {
            return fail("inlier_threshold_px must be positive".into());
        }
        if self.min_support < 3 || self.vo_min_support < 3 {
            return fail("support thresholds must be at least 3".into());
        }
        if !(self.overlap_merge_ratio > 0.0 && self.overlap_merge_ratio <= 1.0) {
            return fail("overlap_merge_ratio must be in (0, 1]".into());
        }
        if !(self.voxel_size > 0.0) {
            return fail("voxel_size must be positive".into());
        }
        Ok(())
    }
}

/// Renders a config as `key = value` lines, one per field, in a fixed order.
/// Floats print in full precision, so a write/parse round trip is exact.
pub fn write_config(config: &PipelineConfig) -> String {
    let weights = config
        .weights
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        writeln!(out, "{k} = {v}").expect("writing to a String cannot fail");
    };
    kv("interval_frames", config.interval_frames.to_string());
    kv("min_matches", config.min_matches.to_string());
    kv("window_len", config.window_len.to_string());
    kv("weights", weights);
    kv("new_object_threshold", config.new_object_threshold.to_string());
    kv("knn_k", config.knn_k.to_string());
    kv("n_hyp", config.n_hyp.to_string());
    kv("inlier_threshold_px", config.inlier_threshold_px.to_string());
    kv("min_support", config.min_support.to_string());
    kv("overlap_merge_ratio", config.overlap_merge_ratio.to_string());
    kv("vo_n_hyp", config.vo_n_hyp.to_string());
    kv("vo_min_support", config.vo_min_support.to_string());
    kv("voxel_size", config.voxel_size.to_string());
    kv("mode", config.mode.as_str().to_string());
    kv("rng_seed", config.rng_seed.to_string());
    out
}

/// Parses `key = value` config text. Unset keys keep their defaults; unknown
/// keys and malformed values are errors carrying the 1-based line number.
/// Blank lines and `#` comments are ignored. The result is validated.
pub fn parse_config(text: &str) -> Result<PipelineConfig, PipelineError> {
    fn value<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, PipelineError>
    where
        T::Err: std::fmt::Display,
    {
        s.parse().map_err(|e| PipelineError::ConfigParse {
            line,
            msg: format!("bad value `{s}`: {e}"),
        })
    }

    let mut config = PipelineConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, val)) = trimmed.split_once('=') else {
            return Err(PipelineError::ConfigParse {
                line,
                msg: format!("expected `key = value`, got `{trimmed}`"),
            });
        };
        let (key, val) = (key.trim(), val.trim());
        match key {
            "interval_frames" => config.interval_frames = value(val, line)?,
            "min_matches" => config.min_matches = value(val, line)?,
            "window_len" => config.window_len = value(val, line)?,
            "weights" => {
                config.weights = val
                    .split(',')
                    .map(|w| value(w.trim(), line))
                    .collect::<Result<_, _>>()?;
            }
            "new_object_threshold" => config.new_object_threshold = value(val, line)?,
            "knn_k" => config.knn_k = value(val, line)?,
            "n_hyp" => config.n_hyp = value(val, line)?,
            "inlier_threshold_px" => config.inlier_threshold_px = value(val, line)?,
            "min_support" => config.min_support = value(val, line)?,
            "overlap_merge_ratio" => config.overlap_merge_ratio = value(val, line)?,
            "vo_n_hyp" => config.vo_n_hyp = value(val, line)?,
            "vo_min_support" => config.vo_min_support = value(val, line)?,
            "voxel_size" => config.voxel_size = value(val, line)?,
            "mode" => {
                config.mode = Mode::parse(val).ok_or_else(|| PipelineError::ConfigParse {
                    line,
                    msg: format!("unknown mode `{val}` (traditional | multi_motion)"),
                })?;
            }
            "rng_seed" => config.rng_seed = value(val, line)?,
            other => {
                return Err(PipelineError::ConfigParse {
                    line,
                    msg: format!("unknown key `{other}`"),
                });
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Robot pose in the ground frame at every frame, in frame order.
    pub robot: Vec<(usize, Pose)>,
    /// Ground-frame trajectories of the non-background labels.
    pub objects: BTreeMap<Label, GroundTrajectory>,
    /// Label of every point at each keyframe, in keyframe order. The very
    /// first keyframe is absent: labels need a keyframe pair to exist.
    pub keyframe_labels: Vec<(usize, BTreeMap<TrackId, Label>)>,
    /// Timestamp of every frame seen, for trajectory export.
    pub timestamps: BTreeMap<usize, f64>,
    /// The label the run decided is the static background, if any.
    pub background: Option<Label>,
    /// True when some consecutive-keyframe robot motion exceeded the sanity
    /// bound (1 m or 30 degrees): the machine-readable "this run failed".
    pub divergence: bool,
    /// Echo of the configuration the run used (includes the seed).
    pub config: PipelineConfig,
}

/// Runs the pipeline over a frame stream.
///
/// Frames are consumed once, in order; memory grows only with the keyframe
/// window, the per-keyframe interval buffer, the label registry, and the
/// per-object surface sets. An empty or single-frame stream yields an empty
/// output. Identical inputs and config produce bit-identical outputs.
pub fn run<I>(
    frames: I,
    cam: &StereoCamera,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError>
where
    I: IntoIterator<Item = Frame>,
{
    config.validate()?;
    match config.mode {
        Mode::Traditional => {
            let mut engine = Engine::new(cam, config);
            for frame in frames {
                engine.feed(frame);
            }
            Ok(engine.finish())
        }
        Mode::MultiMotion => {
            // Labels depend only on segmentation and voting, never on the
            // odometry, so a labeling-only scout pass settles every track's
            // home label first. The full pass then repeats the identical
            // label evolution while the odometry is gated by the settled
            // homes from the start — without this, a body's motion is biased
            // by guest points whose home takes a few keyframes to emerge.
            let frames: Vec<Frame> = frames.into_iter().collect();
            let mut scout = Engine::new(cam, config);
            scout.labels_only = true;
            for frame in frames.iter().cloned() {
                scout.feed(frame);
            }
            let mut engine = Engine::new(cam, config);
            engine.frozen_homes = Some(scout.registry.homes());
            for frame in frames {
                engine.feed(frame);
            }
            Ok(engine.finish())
        }
    }
}

/// Mutable state of one streaming run.
struct Engine<'a> {
    cam: &'a StereoCamera,
    config: &'a PipelineConfig,
    kf_params: KeyframeParams,
    label_params: LabelParams,
    window: SlidingWindow,
    registry: LabelRegistry,
    /// The previous keyframe. The very first keyframe carries placeholder
    /// labels — it never enters the voting window.
    last_kf: Option<KeyFrame>,
    /// Normal frames since the last keyframe: (frame_id, timestamp, points).
    pending: Vec<(usize, f64, BTreeMap<TrackId, Point3>)>,
    /// Latest label of every track, refreshed at each keyframe.
    current_labels: BTreeMap<TrackId, Label>,
    tracks: BTreeMap<Label, RelativePoseTrack>,
    /// Per-frame poses per label, keyframes included, in frame order.
    dense: BTreeMap<Label, Vec<(usize, Pose)>>,
    /// Raw per-keyframe surface observations per label: which tracks the
    /// label covered and where they sat in the camera frame. Surfaces are
    /// built from these at the end of the run, once track↔label attachment
    /// has settled, so transient mislabelings never enter an object's shape.
    surface_obs: BTreeMap<Label, Vec<(usize, Vec<(TrackId, Point3)>)>>,
    keyframe_labels: Vec<(usize, BTreeMap<TrackId, Label>)>,
    timestamps: BTreeMap<usize, f64>,
    divergence: bool,
    /// Scout-pass switch: evolve labels and the registry, skip everything
    /// downstream of them (odometry, surfaces, densification).
    labels_only: bool,
    /// Settled per-track homes from the scout pass; when present they gate
    /// odometry membership instead of the still-evolving registry census.
    frozen_homes: Option<BTreeMap<TrackId, Label>>,
}

impl<'a> Engine<'a> {
    fn new(cam: &'a StereoCamera, config: &'a PipelineConfig) -> Self {
        Self {
            cam,
            config,
            kf_params: KeyframeParams {
                interval_frames: config.interval_frames,
                min_matches: config.min_matches,
            },
            label_params: LabelParams {
                weights: config.weights.clone(),
                new_object_threshold: config.new_object_threshold,
                knn_k: config.knn_k,
            },
            window: SlidingWindow::new(config.window_len),
            registry: LabelRegistry::default(),
            last_kf: None,
            pending: Vec::new(),
            current_labels: BTreeMap::new(),
            tracks: BTreeMap::new(),
            dense: BTreeMap::new(),
            surface_obs: BTreeMap::new(),
            keyframe_labels: Vec::new(),
            timestamps: BTreeMap::new(),
            divergence: false,
            labels_only: false,
            frozen_homes: None,
        }
    }

    /// The home gate for odometry membership: settled homes when available,
    /// the running census otherwise.
    fn settled_home(&self, track: TrackId) -> Option<Label> {
        match &self.frozen_homes {
            Some(homes) => homes.get(&track).copied(),
            None => self.registry.home_of(track),
        }
    }

    fn feed(&mut self, frame: Frame) {
        let points: BTreeMap<TrackId, Point3> = frame
            .observations
            .iter()
            .filter_map(|(t, obs)| self.cam.triangulate(obs).ok().map(|p| (*t, p)))
            .collect();
        self.timestamps.insert(frame.frame_id, frame.timestamp);
        let Some(last) = &self.last_kf else {
            // The first frame is always a keyframe. It stays unlabeled (a
            // keyframe pair is needed for segmentation), so it only serves
            // as the reference the next keyframe is matched against.
            self.last_kf = Some(placeholder_keyframe(frame.frame_id, frame.timestamp, &points));
            return;
        };
        let track_ids: BTreeSet<TrackId> = points.keys().copied().collect();
        if labels::is_keyframe(frame.frame_id, &track_ids, last, &self.kf_params) {
            self.process_keyframe(frame.frame_id, frame.timestamp, points);
        } else {
            self.pending.push((frame.frame_id, frame.timestamp, points));
        }
    }

    fn process_keyframe(
        &mut self,
        frame_id: usize,
        timestamp: f64,
        points: BTreeMap<TrackId, Point3>,
    ) {
        let prev = self.last_kf.take().expect("keyframes start from the second");
        let c = correspondences(&prev, &points);

        let seg_result = match self.config.mode {
            Mode::MultiMotion => {
                let params = SegmentParams {
                    n_hyp: self.config.n_hyp,
                    inlier_threshold_px: self.config.inlier_threshold_px,
                    min_support: self.config.min_support,
                    overlap_merge_ratio: self.config.overlap_merge_ratio,
                    seed: mix_seed(self.config.rng_seed, (frame_id as u64) << 1),
                };
                // Too few shared tracks to segment: fall through with no
                // models and let the label stage handle every point.
                seg::segment(&c, self.cam, &params).unwrap_or_else(|_| SegmentationResult {
                    models: Vec::new(),
                    assignment: BTreeMap::new(),
                })
            }
            Mode::Traditional => single_motion_result(&c, self.cam),
        };

        let kf = labels::reconcile_segmentation(
            frame_id,
            timestamp,
            &points,
            &seg_result,
            &self.window,
            &mut self.registry,
            &self.label_params,
        );

        if self.labels_only {
            self.pending.clear();
            self.window.push(kf.clone());
            self.last_kf = Some(kf);
            return;
        }

        // Per-label odometry across the keyframe pair. Both endpoints are
        // selected by the current labels — the freshest rigid grouping —
        // minus tracks whose settled home is a different label. Near the
        // focus of expansion a point of one body can sit inside another
        // body's model for many keyframes (its apparent motion stays under
        // the inlier threshold), and such guests bias the host's motion;
        // the home gate identifies them.
        let mut prev_labeled: LabeledPoints = BTreeMap::new();
        for (t, (_, l)) in &kf.points {
            if self.settled_home(*t).is_some_and(|h| h != *l) {
                continue;
            }
            if let Some((a, _)) = prev.points.get(t) {
                prev_labeled.insert(*t, (*a, *l));
            }
        }
        if std::env::var_os("MMVO_DEBUG_VO").is_some() {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open("/tmp/vo_inputs.txt")
                .unwrap();
            for (t, (_, l)) in &prev_labeled {
                if kf.points.get(t).map(|(_, cl)| cl) == Some(l) {
                    writeln!(f, "{} {} {}", frame_id, t, l).unwrap();
                }
            }
        }
        let labels_now: BTreeSet<Label> = kf.points.values().map(|(_, l)| *l).collect();
        let mut updated: BTreeSet<Label> = BTreeSet::new();
        for &label in &labels_now {
            let vo_params = self.vo_params(frame_id, label);
            let estimated =
                vo::estimate_relative_motion(&prev_labeled, &kf.points, label, self.cam, &vo_params);
            match estimated {
                Ok(motion) => {
                    // The chain holds robot poses in the object's anchor
                    // frame, so each step is the inverted point motion.
                    let step = motion.inverse();
                    if let Some(track) = self.tracks.get_mut(&label) {
                        track.chain(frame_id, &step);
                    } else {
                        // First estimate for this label: its anchor is the
                        // previous keyframe, where its points first appear.
                        let mut track = RelativePoseTrack::start(label, prev.frame_id);
                        track.chain(frame_id, &step);
                        self.tracks.insert(label, track);
                        let first_points: Vec<(TrackId, Point3)> = prev_labeled
                            .iter()
                            .filter(|(_, (_, l))| *l == label)
                            .map(|(t, (p, _))| (*t, *p))
                            .collect();
                        self.record_surface(label, prev.frame_id, first_points);
                    }
                    if Some(label) == self.registry.background_label()
                        && (step.translation().norm() > DIVERGENCE_TRANSLATION_M
                            || step.rotation_angle_to(&Pose::identity()) > DIVERGENCE_ROTATION_RAD)
                    {
                        self.divergence = true;
                    }
                }
                Err(_) => {
                    // No usable motion this step: hold an existing chain
                    // through the gap, or anchor a brand-new label here.
                    match self.tracks.get_mut(&label) {
                        Some(track) => track.hold(frame_id),
                        None => {
                            self.tracks.insert(label, RelativePoseTrack::start(label, frame_id));
                        }
                    }
                }
            }
            updated.insert(label);
        }
        // Labels whose object went unobserved this keyframe keep their last
        // pose and are flagged as gaps.
        for (label, track) in self.tracks.iter_mut() {
            if !updated.contains(label) {
                track.hold(frame_id);
            }
        }

        // Surface observations for every observed label.
        for &label in &labels_now {
            let pts: Vec<(TrackId, Point3)> = kf
                .points
                .iter()
                .filter(|(_, (_, l))| *l == label)
                .map(|(t, (p, _))| (*t, *p))
                .collect();
            self.record_surface(label, frame_id, pts);
        }

        // Densify the closed interval. The interval's frames are labeled by
        // the freshest per-track view, which also covers the first keyframe.
        for (t, (_, l)) in &kf.points {
            self.current_labels.insert(*t, *l);
        }
        let mut frames_map: BTreeMap<usize, LabeledPoints> = BTreeMap::new();
        let prev_points: BTreeMap<TrackId, Point3> =
            prev.points.iter().map(|(t, (p, _))| (*t, *p)).collect();
        frames_map.insert(prev.frame_id, self.relabel(&prev_points));
        for (f, _, pts) in &self.pending {
            frames_map.insert(*f, self.relabel(pts));
        }
        let kf_points: BTreeMap<TrackId, Point3> =
            kf.points.iter().map(|(t, (p, _))| (*t, *p)).collect();
        frames_map.insert(frame_id, self.relabel(&kf_points));
        self.densify(&frames_map, prev.frame_id, frame_id);

        self.keyframe_labels.push((
            frame_id,
            kf.points.iter().map(|(t, (_, l))| (*t, *l)).collect(),
        ));
        self.pending.clear();
        self.window.push(kf.clone());
        self.last_kf = Some(kf);
    }

    fn vo_params(&self, frame_id: usize, label: Label) -> VoParams {
        VoParams {
            n_hyp: self.config.vo_n_hyp,
            inlier_threshold_px: self.config.inlier_threshold_px,
            min_support: self.config.vo_min_support,
            seed: mix_seed(
                mix_seed(self.config.rng_seed, ((frame_id as u64) << 1) | 1),
                label as u64,
            ),
        }
    }

    /// Labels a raw frame with the freshest per-track labels, leaving out
    /// tracks that have settled on a different home — the same guard the
    /// keyframe odometry applies.
    fn relabel(&self, points: &BTreeMap<TrackId, Point3>) -> LabeledPoints {
        points
            .iter()
            .filter_map(|(t, p)| self.current_labels.get(t).map(|l| (*t, (*p, *l))))
            .filter(|(t, (_, l))| self.settled_home(*t).is_none_or(|h| h == *l))
            .collect()
    }

    fn record_surface(&mut self, label: Label, frame_id: usize, points: Vec<(TrackId, Point3)>) {
        self.surface_obs.entry(label).or_default().push((frame_id, points));
    }

    /// Rebuilds one label's surface point set and its anchor-offset history
    /// from the recorded observations, keeping only tracks whose settled home
    /// is this label. The robot pose used to back-project each observation is
    /// the chain pose of that keyframe, exactly as it stood when recorded.
    fn build_anchors(&self, label: Label) -> BTreeMap<usize, Pose> {
        let mut anchors = BTreeMap::new();
        let (Some(obs), Some(track)) = (self.surface_obs.get(&label), self.tracks.get(&label))
        else {
            return anchors;
        };
        let pose_at: BTreeMap<usize, Pose> = track.poses.iter().copied().collect();
        let mut surf = SurfacePointSet::new(label);
        for (frame_id, points) in obs {
            let Some(robot_in_object) = pose_at.get(frame_id) else {
                continue;
            };
            let pts: Vec<Point3> = points
                .iter()
                .filter(|(t, _)| self.settled_home(*t) == Some(label))
                .map(|(_, p)| *p)
                .collect();
            surf.accumulate(&pts, &robot_in_object.inverse());
            if let Ok(center) = world::gravity_center(&surf, self.config.voxel_size) {
                anchors.insert(*frame_id, world::init_pose(&center));
            }
        }
        anchors
    }

    /// Interpolates every label's pose over the frames in `frames_map`
    /// (keyframes included) and appends the new frames to the dense chains.
    fn densify(
        &mut self,
        frames_map: &BTreeMap<usize, LabeledPoints>,
        from_frame: usize,
        to_frame: usize,
    ) {
        for (label, track) in &self.tracks {
            if !track.poses.iter().any(|(f, _)| *f == from_frame) {
                continue; // born after the interval opened
            }
            let vo_params = self.vo_params(to_frame, *label);
            let chunk = vo::interpolate_normal_frames(track, frames_map, self.cam, &vo_params);
            let dense = self.dense.entry(*label).or_default();
            for (f, p) in chunk {
                if dense.last().is_none_or(|(lf, _)| f > *lf) {
                    dense.push((f, p));
                }
            }
        }
    }

    fn finish(mut self) -> PipelineOutput {
        if std::env::var_os("MMVO_DEBUG_CENSUS").is_some() {
            for label in self.registry.labels().collect::<Vec<_>>() {
                eprintln!(
                    "census: label {} -> {} distinct model-backed tracks",
                    label,
                    self.registry.member_count(label)
                );
            }
        }
        // Frames trailing the final keyframe: align them against it.
        if let Some(prev) = self.last_kf.take() {
            if !self.pending.is_empty() && !self.tracks.is_empty() {
                let mut frames_map: BTreeMap<usize, LabeledPoints> = BTreeMap::new();
                let prev_points: BTreeMap<TrackId, Point3> =
                    prev.points.iter().map(|(t, (p, _))| (*t, *p)).collect();
                frames_map.insert(prev.frame_id, self.relabel(&prev_points));
                let last_pending = self.pending.last().expect("non-empty").0;
                for (f, _, pts) in &std::mem::take(&mut self.pending) {
                    frames_map.insert(*f, self.relabel(pts));
                }
                self.densify(&frames_map, prev.frame_id, last_pending);
            }
        }

        if std::env::var_os("MMVO_DEBUG_CHAIN").is_some() {
            use std::io::Write;
            let mut f = std::fs::File::create("/tmp/chain_dump.txt").unwrap();
            for (label, track) in &self.tracks {
                let history = self.build_anchors(*label);
                for (fr, pose) in &track.poses {
                    let a = history
                        .range(..=*fr)
                        .next_back()
                        .or_else(|| history.iter().next())
                        .map(|(_, a)| *a.translation())
                        .unwrap_or_else(nalgebra::Vector3::zeros);
                    let t = pose.translation();
                    writeln!(
                        f,
                        "{label} {fr} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4} {}",
                        t.x,
                        t.y,
                        t.z,
                        a.x,
                        a.y,
                        a.z,
                        track.gaps.contains(fr) as u8
                    )
                    .unwrap();
                }
            }
        }
        let background = self.registry.background_label();
        let robot: Vec<(usize, Pose)> = background
            .and_then(|bg| self.dense.get(&bg))
            .cloned()
            .unwrap_or_default();
        let robot_at: BTreeMap<usize, Pose> = robot.iter().copied().collect();

        let mut objects = BTreeMap::new();
        if background.is_some() {
            for (label, chain) in &self.dense {
                if Some(*label) == background {
                    continue;
                }
                // A label no surviving track calls home never matched a real
                // object; its chain is transient noise, so it is not reported.
                let history = self.build_anchors(*label);
                if history.is_empty() {
                    continue;
                }
                let poses: Vec<(usize, Pose)> = chain
                    .iter()
                    .filter_map(|(f, relative)| {
                        let robot_pose = robot_at.get(f)?;
                        let anchor = history
                            .range(..=*f)
                            .next_back()
                            .or_else(|| history.iter().next())
                            .map(|(_, a)| *a)
                            .expect("anchor history checked non-empty");
                        Some((*f, world::to_ground(robot_pose, relative, &anchor)))
                    })
                    .collect();
                if !poses.is_empty() {
                    objects.insert(*label, GroundTrajectory { label: *label, poses });
                }
            }
        }

        PipelineOutput {
            robot,
            objects,
            keyframe_labels: self.keyframe_labels,
            timestamps: self.timestamps,
            background,
            divergence: self.divergence,
            config: self.config.clone(),
        }
    }
}

/// A keyframe record carrying placeholder labels, used only as the matching
/// reference for the next keyframe (never pushed into the voting window).
fn placeholder_keyframe(
    frame_id: usize,
    timestamp: f64,
    points: &BTreeMap<TrackId, Point3>,
) -> KeyFrame {
    KeyFrame {
        frame_id,
        timestamp,
        points: points.iter().map(|(t, p)| (*t, (*p, 0))).collect(),
    }
}

/// Point correspondences over the tracks two keyframes share.
fn correspondences(prev: &KeyFrame, curr: &BTreeMap<TrackId, Point3>) -> CorrespondenceSet {
    let pairs = curr
        .iter()
        .filter_map(|(t, b)| {
            prev.points.get(t).map(|(a, _)| Correspondence {
                track_id: *t,
                a: *a,
                b: *b,
            })
        })
        .collect();
    CorrespondenceSet { pairs }
}

/// The traditional baseline's stand-in for segmentation: one motion model
/// fitted to all correspondences, every track assigned to it.
fn single_motion_result(c: &CorrespondenceSet, cam: &StereoCamera) -> SegmentationResult {
    let Ok(fitted) = seg::rigid_fit(&c.pairs) else {
        return SegmentationResult {
            models: Vec::new(),
            assignment: BTreeMap::new(),
        };
    };
    let motion = seg::refine_reprojection(fitted, &c.pairs, cam, 10);
    let inliers: BTreeSet<TrackId> = c.pairs.iter().map(|p| p.track_id).collect();
    let mean_residual = c
        .pairs
        .iter()
        .map(|p| seg::residual(&motion, p, cam))
        .sum::<f64>()
        / c.len() as f64;
    let assignment = inliers.iter().map(|t| (*t, Some(0))).collect();
    SegmentationResult {
        models: vec![MotionModel {
            motion,
            inliers,
            mean_residual,
        }],
        assignment,
    }
}

/// Reads frames from the external track format: one observation per line,
/// `frame_id timestamp track_id u_left v disparity`, blank lines and `#`
/// comments ignored. A frame's rows must be contiguous, frame ids strictly
/// increasing, timestamps consistent within a frame, disparities positive.
pub fn ingest_tracks(path: &Path) -> Result<Vec<Frame>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let err = |line: usize, msg: String| PipelineError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut frames: Vec<Frame> = Vec::new();
    let mut seen: BTreeSet<TrackId> = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(err(line, format!("expected 6 fields, got {}", fields.len())));
        }
        let frame_id: usize = fields[0]
            .parse()
            .map_err(|e| err(line, format!("bad frame id `{}`: {e}", fields[0])))?;
        let timestamp: f64 = fields[1]
            .parse()
            .map_err(|e| err(line, format!("bad timestamp `{}`: {e}", fields[1])))?;
        let track_id: TrackId = fields[2]
            .parse()
            .map_err(|e| err(line, format!("bad track id `{}`: {e}", fields[2])))?;
        let mut obs = [0.0f64; 3];
        for (slot, field) in obs.iter_mut().zip(&fields[3..6]) {
            *slot = field
                .parse()
                .map_err(|e| err(line, format!("bad number `{field}`: {e}")))?;
        }
        let [u_left, v, disparity] = obs;
        if !(disparity > 0.0) {
            return Err(err(line, format!("disparity must be positive, got {disparity}")));
        }
        let obs = StereoObs { u_left, v, disparity };
        match frames.last_mut() {
            Some(f) if f.frame_id == frame_id => {
                if f.timestamp != timestamp {
                    return Err(err(
                        line,
                        format!(
                            "timestamp {timestamp} differs from frame {frame_id}'s {}",
                            f.timestamp
                        ),
                    ));
                }
                if !seen.insert(track_id) {
                    return Err(err(line, format!("duplicate track {track_id} in frame {frame_id}")));
                }
                f.observations.push((track_id, obs));
            }
            Some(f) if frame_id <= f.frame_id => {
                return Err(err(
                    line,
                    format!("frame ids must strictly increase, got {frame_id} after {}", f.frame_id),
                ));
            }
            _ => {
                seen = BTreeSet::from([track_id]);
                frames.push(Frame {
                    frame_id,
                    timestamp,
                    observations: vec![(track_id, obs)],
                    truth_labels: BTreeMap::new(),
                });
            }
        }
    }
    Ok(frames)
}

/// Writes frames in the external track format read by [`ingest_tracks`].
/// Floats print in full precision, so a write/ingest round trip is exact.
pub fn write_tracks(path: &Path, frames: &[Frame]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for frame in frames {
        for (track, obs) in &frame.observations {
            writeln!(
                out,
                "{} {} {} {} {} {}",
                frame.frame_id, frame.timestamp, track, obs.u_left, obs.v, obs.disparity
            )
            .expect("writing to a String cannot fail");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
