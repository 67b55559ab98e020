//! Multi-motion segmentation between two keyframes.
//!
//! Given 3D point correspondences, the segmenter proposes rigid-motion
//! hypotheses from random minimal triples, scores every point against every
//! hypothesis by stereo reprojection error, greedily extracts the motions with
//! the largest support, and merges models whose inlier sets largely overlap.
//! Everything is deterministic for a fixed seed; the residual matrix is the
//! only parallel part and is computed as an order-preserving indexed map.

use crate::geometry::{Point3, Pose, StereoCamera};
use crate::TrackId;
use nalgebra::{Matrix3, Matrix3x6, Matrix6, Rotation3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Minimal-triple triangle area (m²) below which a sample is degenerate.
const COLLINEAR_AREA: f64 = 1e-6;
/// Resampling attempts per hypothesis before giving up on a triple slot.
const MAX_TRIPLE_RETRIES: usize = 100;
/// Motion-agreement merge thresholds: duplicate models closer than this in
/// both translation and rotation are fused even without inlier overlap.
const MERGE_TRANSLATION_M: f64 = 0.05;
const MERGE_ROTATION_RAD: f64 = 2.0 * std::f64::consts::PI / 180.0;
/// A point explained by two models within this residual margin (as a fraction
/// of the inlier threshold) is left unassigned: two views genuinely cannot
/// tell such points apart (e.g. low-parallax points near the epipole), and a
/// coin-flip membership would leak them between labels downstream.
const AMBIGUITY_MARGIN_FRACTION: f64 = 0.25;
/// Two models are the same motion if one refit on the union of their inliers
/// keeps at least this fraction of the inliers exclusive to each side.
const UNION_MERGE_COVERAGE: f64 = 0.9;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum SegError {
    #[error("need at least {need} correspondences, got {got}")]
    InsufficientPoints { got: usize, need: usize },
    #[error("correspondences are collinear within tolerance")]
    DegenerateConfiguration,
}

/// One feature track seen in both keyframes, triangulated in each camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub track_id: TrackId,
    /// Point in the earlier keyframe's camera frame.
    pub a: Point3,
    /// The same point in the later keyframe's camera frame.
    pub b: Point3,
}

/// Correspondences between one pair of keyframes. Track ids must be unique.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One recovered rigid motion and the tracks moving with it.
#[derive(Debug, Clone)]
pub struct MotionModel {
    /// Maps points from the earlier keyframe's camera frame to the later one's.
    pub motion: Pose,
    pub inliers: BTreeSet<TrackId>,
    /// Mean reprojection residual over the inliers, in pixels.
    pub mean_residual: f64,
}

/// Output of [`segment`]: disjoint motion models plus a per-track verdict.
/// `None` marks an outlier that fits no model within the inlier threshold.
#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub models: Vec<MotionModel>,
    pub assignment: BTreeMap<TrackId, Option<usize>>,
}

/// Tuning knobs for [`segment`].
#[derive(Debug, Clone)]
pub struct SegmentParams {
    pub n_hyp: usize,
    pub inlier_threshold_px: f64,
    pub min_support: usize,
    /// Jaccard overlap of full inlier sets at or above which models merge.
    pub overlap_merge_ratio: f64,
    pub seed: u64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            n_hyp: 500,
            inlier_threshold_px: 2.0,
            min_support: 15,
            overlap_merge_ratio: 0.5,
            seed: 0,
        }
    }
}

fn triangle_area(p0: &Point3, p1: &Point3, p2: &Point3) -> f64 {
    (p1 - p0).cross(&(p2 - p0)).norm() / 2.0
}

/// Least-squares rigid transform mapping the `a` points onto the `b` points:
/// centroid alignment plus orthogonal factorization of the cross-covariance.
pub fn rigid_fit(pairs: &[Correspondence]) -> Result<Pose, SegError> {
    if pairs.len() < 3 {
        return Err(SegError::InsufficientPoints {
            got: pairs.len(),
            need: 3,
        });
    }
    let n = pairs.len() as f64;
    let ca: Vector3<f64> = pairs.iter().map(|p| p.a).sum::<Vector3<f64>>() / n;
    let cb: Vector3<f64> = pairs.iter().map(|p| p.b).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for p in pairs {
        h += (p.a - ca) * (p.b - cb).transpose();
    }
    let svd = h.svd(true, true);
    // A collinear cloud leaves rotation about the line unconstrained.
    if svd.singular_values[1] <= svd.singular_values[0] * 1e-12 {
        return Err(SegError::DegenerateConfiguration);
    }
    let u = svd.u.expect("3x3 svd yields u");
    let v_t = svd.v_t.expect("3x3 svd yields v_t");
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum())) * u.transpose();
    let translation = cb - rotation * ca;
    Ok(Pose::new(rotation, translation))
}

/// Rigid fit from exactly three non-collinear correspondences.
pub fn minimal_rigid_fit(pairs: &[Correspondence]) -> Result<Pose, SegError> {
    if pairs.len() != 3 {
        return Err(SegError::InsufficientPoints {
            got: pairs.len(),
            need: 3,
        });
    }
    let thin_a = triangle_area(&pairs[0].a, &pairs[1].a, &pairs[2].a) < COLLINEAR_AREA;
    let thin_b = triangle_area(&pairs[0].b, &pairs[1].b, &pairs[2].b) < COLLINEAR_AREA;
    if thin_a || thin_b {
        return Err(SegError::DegenerateConfiguration);
    }
    rigid_fit(pairs)
}

/// Rigid-motion hypotheses from random minimal triples. Degenerate triples
/// are resampled a bounded number of times, so a pathological cloud yields
/// fewer than `n_hyp` results rather than an endless loop.
pub fn generate_hypotheses(
    c: &CorrespondenceSet,
    n_hyp: usize,
    seed: u64,
) -> Result<Vec<Pose>, SegError> {
    if c.len() < 3 {
        return Err(SegError::InsufficientPoints {
            got: c.len(),
            need: 3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hypotheses = Vec::with_capacity(n_hyp);
    for _ in 0..n_hyp {
        for _ in 0..MAX_TRIPLE_RETRIES {
            let i = rng.random_range(0..c.len());
            let j = rng.random_range(0..c.len());
            let k = rng.random_range(0..c.len());
            if i == j || j == k || i == k {
                continue;
            }
            let triple = [c.pairs[i], c.pairs[j], c.pairs[k]];
            if let Ok(pose) = minimal_rigid_fit(&triple) {
                hypotheses.push(pose);
                break;
            }
        }
    }
    if hypotheses.is_empty() {
        return Err(SegError::DegenerateConfiguration);
    }
    Ok(hypotheses)
}

/// Reprojection error of `pair` under `motion`, in pixels: the motion carries
/// the earlier point into the later frame, both sides are projected, and the
/// error is the larger of the left-image distance and the disparity gap.
/// Points that land behind the camera score infinite.
pub fn residual(motion: &Pose, pair: &Correspondence, cam: &StereoCamera) -> f64 {
    let predicted = motion.apply(&pair.a);
    let (Ok(pred), Ok(obs)) = (cam.project(&predicted), cam.project(&pair.b)) else {
        return f64::INFINITY;
    };
    let du = pred.u_left - obs.u_left;
    let dv = pred.v - obs.v;
    let dd = pred.disparity - obs.disparity;
    du.hypot(dv).max(dd.abs())
}

/// Gauss-Newton iterations minimizing the stereo reprojection error
/// (du, dv, d-disparity) of `pairs` under a left-multiplied pose update.
///
/// The closed-form 3D fit weights all points alike, so depth noise on far
/// points (which grows quadratically with range) drags the motion off; a few
/// pixel-space iterations remove that bias. Callers guard the result.
pub fn refine_reprojection(
    motion: Pose,
    pairs: &[Correspondence],
    cam: &StereoCamera,
    iterations: usize,
) -> Pose {
    let mut m = motion;
    for _ in 0..iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for pair in pairs {
            let p = m.apply(&pair.a);
            if p.z <= 1e-6 {
                continue;
            }
            let (Ok(pred), Ok(obs)) = (cam.project(&p), cam.project(&pair.b)) else {
                continue;
            };
            let r = Vector3::new(
                pred.u_left - obs.u_left,
                pred.v - obs.v,
                pred.disparity - obs.disparity,
            );
            let z2 = p.z * p.z;
            #[rustfmt::skip]
            let dproj = Matrix3::new(
                cam.fx / p.z, 0.0,          -cam.fx * p.x / z2,
                0.0,          cam.fy / p.z, -cam.fy * p.y / z2,
                0.0,          0.0,          -cam.fx * cam.baseline / z2,
            );
            // Point under a left perturbation: d(exp(dw, dt) * p) = [I | -[p]x].
            let mut dp = Matrix3x6::<f64>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&-skew(&p));
            let j = dproj * dp;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(delta) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else {
            break;
        };
        let rot = Rotation3::new(Vector3::new(delta[3], delta[4], delta[5]));
        let update = Pose::new(
            rot.into_inner(),
            Vector3::new(delta[0], delta[1], delta[2]),
        );
        m = update.compose(&m);
        if delta.norm() < 1e-12 {
            break;
        }
    }
    m
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Refits `motion` on the pairs at `member_idx` — closed-form 3D fit followed
/// by reprojection iterations — keeping each step only when it does not
/// worsen the mean residual, so refinement is monotone. Returns the motion
/// and its mean residual over the members.
pub(crate) fn guarded_refit(
    motion: Pose,
    member_idx: &BTreeSet<usize>,
    c: &CorrespondenceSet,
    cam: &StereoCamera,
) -> (Pose, f64) {
    let mean = |m: &Pose| {
        member_idx
            .iter()
            .map(|&i| residual(m, &c.pairs[i], cam))
            .sum::<f64>()
            / member_idx.len() as f64
    };
    let members: Vec<Correspondence> = member_idx.iter().map(|&i| c.pairs[i]).collect();
    let mut best = (motion, mean(&motion));
    if let Ok(refit) = rigid_fit(&members) {
        let score = mean(&refit);
        if score <= best.1 {
            best = (refit, score);
        }
    }
    let polished = refine_reprojection(best.0, &members, cam, 10);
    let score = mean(&polished);
    if score <= best.1 {
        best = (polished, score);
    }
    best
}

/// Splits the correspondences into rigid motion models.
///
/// Stages: hypothesis generation, residual scoring, greedy largest-support
/// extraction with refit, overlap/agreement merging, and a final pass that
/// assigns every point to its best-fitting surviving model (or outlier).
pub fn segment(
    c: &CorrespondenceSet,
    cam: &StereoCamera,
    params: &SegmentParams,
) -> Result<SegmentationResult, SegError> {
    if c.len() < params.min_support.max(3) {
        return Err(SegError::InsufficientPoints {
            got: c.len(),
            need: params.min_support.max(3),
        });
    }
    debug_assert!(
        {
            let ids: BTreeSet<_> = c.pairs.iter().map(|p| p.track_id).collect();
            ids.len() == c.len()
        },
        "duplicate track ids in correspondence set"
    );
    let raw = generate_hypotheses(c, params.n_hyp, params.seed)?;

    // Polish each hypothesis on its own loosely-thresholded inliers before
    // scoring preferences. A minimal triple under pixel noise carries meters
    // of depth error, so the raw motion rarely explains its whole group within
    // the strict threshold; one refit round fixes that without biasing the
    // later stages (it is a no-op on clean data).
    let hypotheses: Vec<Pose> = raw
        .par_iter()
        .map(|h| {
            let members: BTreeSet<usize> = (0..c.len())
                .filter(|&i| {
                    residual(h, &c.pairs[i], cam) < 3.0 * params.inlier_threshold_px
                })
                .collect();
            if members.len() >= 3 {
                guarded_refit(*h, &members, c, cam).0
            } else {
                *h
            }
        })
        .collect();

    // Preference sets: which points each hypothesis explains.
    let inlier_sets: Vec<Vec<usize>> = hypotheses
        .par_iter()
        .map(|h| {
            (0..c.len())
                .filter(|&i| residual(h, &c.pairs[i], cam) < params.inlier_threshold_px)
                .collect()
        })
        .collect();

    // Greedy extraction: largest unclaimed support wins, ties to the lower
    // hypothesis index; each extracted model is refit on its claimed points.
    let mut claimed = vec![false; c.len()];
    let mut models: Vec<(Pose, f64)> = Vec::new();
    loop {
        let mut best: Option<(usize, usize)> = None; // (support, hyp index)
        for (idx, set) in inlier_sets.iter().enumerate() {
            let support = set.iter().filter(|&&p| !claimed[p]).count();
            if best.is_none_or(|(s, _)| support > s) {
                best = Some((support, idx));
            }
        }
        let Some((support, idx)) = best else { break };
        if support < params.min_support {
            break;
        }
        let members: BTreeSet<usize> = inlier_sets[idx]
            .iter()
            .copied()
            .filter(|&p| !claimed[p])
            .collect();
        for &p in &members {
            claimed[p] = true;
        }
        models.push(guarded_refit(hypotheses[idx], &members, c, cam));
    }

    // Merge models that describe the same motion: their full inlier sets
    // (over all points, not just claimed ones) overlap strongly, the motions
    // themselves agree, or — the data-driven test — one motion refit on the
    // union explains nearly all of both sets. The last case catches a single
    // rotating body split into tangential slices, where each slice supports
    // its own translation-like motion but the union pins down the true
    // rotation. The union is refit and the scan restarts.
    'merge: loop {
        let full: Vec<BTreeSet<usize>> = models
            .iter()
            .map(|(m, _)| {
                (0..c.len())
                    .filter(|&i| residual(m, &c.pairs[i], cam) < params.inlier_threshold_px)
                    .collect()
            })
            .collect();
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                let inter = full[i].intersection(&full[j]).count();
                let union = full[i].union(&full[j]).count();
                let jaccard = if union == 0 {
                    0.0
                } else {
                    inter as f64 / union as f64
                };
                let agree = models[i].0.translation_distance_to(&models[j].0)
                    < MERGE_TRANSLATION_M
                    && models[i].0.rotation_angle_to(&models[j].0) < MERGE_ROTATION_RAD;
                let union_set: BTreeSet<usize> = full[i].union(&full[j]).copied().collect();
                let mut merged: Option<(Pose, f64)> = None;
                if jaccard >= params.overlap_merge_ratio || agree {
                    merged = Some(guarded_refit(models[i].0, &union_set, c, cam));
                } else if !full[i].is_empty() && !full[j].is_empty() {
                    // Judge the union refit only on the points that tell the
                    // two models apart; shared low-parallax points fit any
                    // motion and would wave every merge through.
                    let candidate = guarded_refit(models[i].0, &union_set, c, cam);
                    let covered = |own: &BTreeSet<usize>, other: &BTreeSet<usize>| {
                        let exclusive: Vec<usize> =
                            own.difference(other).copied().collect();
                        let kept = exclusive
                            .iter()
                            .filter(|&&p| {
                                residual(&candidate.0, &c.pairs[p], cam)
                                    < params.inlier_threshold_px
                            })
                            .count();
                        kept as f64 >= UNION_MERGE_COVERAGE * exclusive.len() as f64
                    };
                    if covered(&full[i], &full[j]) && covered(&full[j], &full[i]) {
                        merged = Some(candidate);
                    }
                }
                if let Some(m) = merged {
                    models[i] = m;
                    models.remove(j);
                    continue 'merge;
                }
            }
        }
        break;
    }

    // Final assignment: each point goes to the model with the smallest
    // residual, provided it beats the inlier threshold AND beats the runner-up
    // model by a clear margin; ambiguous points stay unassigned rather than
    // flipping between models on noise. Models that end up under minimum
    // support are dropped (smallest first) and their points redistributed,
    // which keeps the survivors' supports honest.
    let margin = AMBIGUITY_MARGIN_FRACTION * params.inlier_threshold_px;
    loop {
        let mut assignment: Vec<Option<usize>> = vec![None; c.len()];
        let mut support = vec![0usize; models.len()];
        for (i, pair) in c.pairs.iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            let mut second = f64::INFINITY;
            for (m, (motion, _)) in models.iter().enumerate() {
                let r = residual(motion, pair, cam);
                if r >= params.inlier_threshold_px {
                    continue;
                }
                match best {
                    Some((br, _)) if r >= br => second = second.min(r),
                    _ => {
                        second = best.map_or(f64::INFINITY, |(br, _)| second.min(br));
                        best = Some((r, m));
                    }
                }
            }
            if let Some((br, m)) = best {
                if second - br >= margin {
                    assignment[i] = Some(m);
                    support[m] += 1;
                }
            }
        }
        if let Some(weakest) = (0..models.len())
            .filter(|&m| support[m] < params.min_support)
            .min_by_key(|&m| support[m])
        {
            models.remove(weakest);
            continue;
        }

        // Order models by descending support for a stable, readable output.
        let mut order: Vec<usize> = (0..models.len()).collect();
        order.sort_by_key(|&m| (usize::MAX - support[m], m));
        let rank: BTreeMap<usize, usize> =
            order.iter().enumerate().map(|(r, &m)| (m, r)).collect();

        let mut final_models: Vec<MotionModel> = order
            .iter()
            .map(|&m| MotionModel {
                motion: models[m].0,
                inliers: BTreeSet::new(),
                mean_residual: 0.0,
            })
            .collect();
        let mut result_assignment = BTreeMap::new();
        for (i, pair) in c.pairs.iter().enumerate() {
            let slot = assignment[i].map(|m| rank[&m]);
            result_assignment.insert(pair.track_id, slot);
            if let Some(r) = slot {
                final_models[r].inliers.insert(pair.track_id);
                final_models[r].mean_residual +=
                    residual(&final_models[r].motion, pair, cam);
            }
        }
        for m in &mut final_models {
            if !m.inliers.is_empty() {
                m.mean_residual /= m.inliers.len() as f64;
            }
        }
        return Ok(SegmentationResult {
            models: final_models,
            assignment: result_assignment,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_camera() -> StereoCamera {
        StereoCamera::new(700.0, 700.0, 640.0, 360.0, 0.12)
    }

    /// Random points inside the camera frustum, a few meters out.
    fn frustum_cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                let z = rng.random_range(2.0..8.0);
                Point3::new(
                    rng.random_range(-0.6..0.6) * z,
                    rng.random_range(-0.4..0.4) * z,
                    z,
                )
            })
            .collect()
    }

    fn pairs_under_motion(points: &[Point3], motion: &Pose, first_id: TrackId) -> Vec<Correspondence> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| Correspondence {
                track_id: first_id + i as TrackId,
                a: *p,
                b: motion.apply(p),
            })
            .collect()
    }

    /// Re-observes the `b` points through the camera with pixel noise.
    fn add_pixel_noise(pairs: &mut [Correspondence], sigma: f64, rng: &mut ChaCha8Rng) {
        use rand_distr::{Distribution, Normal};
        let cam = test_camera();
        let normal = Normal::new(0.0, sigma).unwrap();
        for pair in pairs {
            let mut obs = cam.project(&pair.b).unwrap();
            obs.u_left += normal.sample(rng);
            obs.v += normal.sample(rng);
            obs.disparity += normal.sample(rng);
            pair.b = cam.triangulate(&obs).unwrap();
        }
    }

    #[test]
    fn minimal_fit_of_aligned_pairs_is_identity() {
        let pairs: Vec<Correspondence> = [
            Point3::new(1.0, 0.0, 3.0),
            Point3::new(-1.0, 0.5, 4.0),
            Point3::new(0.0, -1.0, 5.0),
        ]
        .iter()
        .enumerate()
        .map(|(i, p)| Correspondence {
            track_id: i as TrackId,
            a: *p,
            b: *p,
        })
        .collect();
        let pose = minimal_rigid_fit(&pairs).unwrap();
        assert!(pose.rotation_angle_to(&Pose::identity()) < 1e-9);
        assert!(pose.translation().norm() < 1e-9);
    }

    #[test]
    fn minimal_fit_recovers_generating_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let motion = crate::geometry::random_pose(&mut rng);
            let points = frustum_cloud(3, &mut rng);
            // Thin triangles amplify floating-point error past the tolerance;
            // keep only well-shaped draws (area relative to longest edge).
            let longest = (points[0] - points[1])
                .norm()
                .max((points[1] - points[2]).norm())
                .max((points[2] - points[0]).norm());
            if triangle_area(&points[0], &points[1], &points[2]) < 0.05 * longest * longest {
                continue;
            }
            let pairs = pairs_under_motion(&points, &motion, 0);
            let fit = minimal_rigid_fit(&pairs).unwrap();
            let (dr, dt) = (
                fit.rotation_angle_to(&motion),
                fit.translation_distance_to(&motion),
            );
            assert!(dr < 1e-9 && dt < 1e-9, "dr {dr:.3e} dt {dt:.3e}");
        }
    }

    #[test]
    fn minimal_fit_rejects_collinear_points() {
        let points = [
            Point3::new(0.0, 0.0, 3.0),
            Point3::new(0.5, 0.5, 4.0),
            Point3::new(1.0, 1.0, 5.0),
        ];
        let pairs = pairs_under_motion(&points, &Pose::identity(), 0);
        assert!(matches!(
            minimal_rigid_fit(&pairs),
            Err(SegError::DegenerateConfiguration)
        ));
    }

    #[test]
    fn single_motion_hypotheses_all_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let motion = Pose::from_axis_angle(
            Vector3::y(),
            0.2,
            Vector3::new(0.3, 0.0, 0.1),
        );
        let points = frustum_cloud(50, &mut rng);
        let c = CorrespondenceSet {
            pairs: pairs_under_motion(&points, &motion, 0),
        };
        let hyps = generate_hypotheses(&c, 100, 77).unwrap();
        assert_eq!(hyps.len(), 100);
        for h in &hyps {
            assert!(h.rotation_angle_to(&motion) < 1e-6);
            assert!(h.translation_distance_to(&motion) < 1e-6);
        }
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let points = frustum_cloud(2, &mut rng);
        let c = CorrespondenceSet {
            pairs: pairs_under_motion(&points, &Pose::identity(), 0),
        };
        assert!(matches!(
            generate_hypotheses(&c, 10, 0),
            Err(SegError::InsufficientPoints { got: 2, need: 3 })
        ));
    }

    #[test]
    fn hypothesis_generation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pairs = pairs_under_motion(
            &frustum_cloud(80, &mut rng),
            &Pose::from_axis_angle(Vector3::x(), 0.1, Vector3::new(0.0, 0.2, 0.0)),
            0,
        );
        add_pixel_noise(&mut pairs, 0.5, &mut rng);
        let c = CorrespondenceSet { pairs };
        let a = generate_hypotheses(&c, 50, 123).unwrap();
        let b = generate_hypotheses(&c, 50, 123).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.rotation(), y.rotation());
            assert_eq!(x.translation(), y.translation());
        }
    }

    #[test]
    fn residual_is_zero_for_exact_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let motion = crate::geometry::random_pose(&mut rng);
        let p = Point3::new(0.2, -0.1, 4.0);
        let pair = Correspondence {
            track_id: 0,
            a: p,
            b: motion.apply(&p),
        };
        // Keep only draws where both sides project (z > 0).
        if motion.apply(&p).z > 0.1 {
            assert!(residual(&motion, &pair, &test_camera()) < 1e-9);
        }
    }

    #[test]
    fn one_pixel_offset_gives_one_pixel_residual() {
        let cam = test_camera();
        let a = Point3::new(0.2, -0.1, 4.0);
        let mut obs = cam.project(&a).unwrap();
        obs.u_left += 1.0;
        let pair = Correspondence {
            track_id: 0,
            a,
            b: cam.triangulate(&obs).unwrap(),
        };
        let r = residual(&Pose::identity(), &pair, &cam);
        assert!((r - 1.0).abs() < 1e-9, "residual {r}");
    }

    #[test]
    fn residual_is_nonnegative_and_infinite_behind_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = test_camera();
        for _ in 0..1000 {
            let motion = crate::geometry::random_pose(&mut rng);
            let pair = Correspondence {
                track_id: 0,
                a: frustum_cloud(1, &mut rng)[0],
                b: frustum_cloud(1, &mut rng)[0],
            };
            assert!(residual(&motion, &pair, &cam) >= 0.0);
        }
        let behind = Correspondence {
            track_id: 0,
            a: Point3::new(0.0, 0.0, 2.0),
            b: Point3::new(0.0, 0.0, -2.0),
        };
        assert!(residual(&Pose::identity(), &behind, &cam).is_infinite());
    }

    #[test]
    fn single_motion_yields_one_model_with_all_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let motion = Pose::from_axis_angle(Vector3::y(), 0.1, Vector3::new(0.1, 0.0, 0.3));
        let c = CorrespondenceSet {
            pairs: pairs_under_motion(&frustum_cloud(200, &mut rng), &motion, 0),
        };
        let result = segment(&c, &test_camera(), &SegmentParams::default()).unwrap();
        assert_eq!(result.models.len(), 1);
        assert_eq!(result.models[0].inliers.len(), 200);
        assert!(result.assignment.values().all(|a| *a == Some(0)));
    }

    #[test]
    fn two_motions_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ma = Pose::identity();
        let mb = Pose::from_axis_angle(
            Vector3::z(),
            20f64.to_radians(),
            Vector3::new(0.5, 0.0, 0.0),
        );
        let mut pairs = pairs_under_motion(&frustum_cloud(100, &mut rng), &ma, 0);
        pairs.extend(pairs_under_motion(&frustum_cloud(100, &mut rng), &mb, 100));
        add_pixel_noise(&mut pairs, 0.5, &mut rng);
        let c = CorrespondenceSet { pairs };
        let result = segment(&c, &test_camera(), &SegmentParams::default()).unwrap();
        assert_eq!(result.models.len(), 2, "expected 2 models");

        // Count agreement under the best model-to-truth pairing.
        let truth = |id: TrackId| usize::from(id >= 100);
        let mut counts = [[0usize; 2]; 2];
        for (id, slot) in &result.assignment {
            if let Some(m) = slot {
                counts[*m][truth(*id)] += 1;
            }
        }
        let direct = counts[0][0] + counts[1][1];
        let crossed = counts[0][1] + counts[1][0];
        let correct = direct.max(crossed);
        assert!(correct >= 190, "only {correct}/200 correctly assigned");
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let motions = [
            Pose::identity(),
            Pose::from_axis_angle(Vector3::z(), 0.3, Vector3::new(0.6, 0.0, 0.0)),
            Pose::from_axis_angle(Vector3::x(), -0.25, Vector3::new(0.0, 0.4, -0.3)),
        ];
        let mut pairs = Vec::new();
        for (g, motion) in motions.iter().enumerate() {
            pairs.extend(pairs_under_motion(
                &frustum_cloud(100, &mut rng),
                motion,
                (g * 100) as TrackId,
            ));
        }
        // Replace 20% with unrelated points: correspondence gross errors.
        let n_outliers = 75;
        let junk = frustum_cloud(n_outliers, &mut rng);
        let mut outlier_ids = BTreeSet::new();
        for (k, j) in junk.into_iter().enumerate() {
            let idx = k * 4; // every 4th point
            pairs[idx].b = j;
            outlier_ids.insert(pairs[idx].track_id);
        }
        add_pixel_noise(&mut pairs, 0.5, &mut rng);
        let c = CorrespondenceSet { pairs };
        let result = segment(&c, &test_camera(), &SegmentParams::default()).unwrap();
        assert_eq!(result.models.len(), 3, "expected 3 models");
        let caught = outlier_ids
            .iter()
            .filter(|id| result.assignment[id].is_none())
            .count();
        assert!(
            caught as f64 >= 0.8 * n_outliers as f64,
            "outlier recall {caught}/{n_outliers}"
        );
    }

    #[test]
    fn models_are_disjoint_and_respect_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ma = Pose::identity();
        let mb = Pose::from_axis_angle(Vector3::y(), 0.4, Vector3::new(0.3, 0.0, 0.2));
        let mut pairs = pairs_under_motion(&frustum_cloud(120, &mut rng), &ma, 0);
        pairs.extend(pairs_under_motion(&frustum_cloud(80, &mut rng), &mb, 200));
        add_pixel_noise(&mut pairs, 0.5, &mut rng);
        let c = CorrespondenceSet { pairs };
        let params = SegmentParams::default();
        let result = segment(&c, &test_camera(), &params).unwrap();

        let mut seen = BTreeSet::new();
        for model in &result.models {
            assert!(model.inliers.len() >= params.min_support);
            assert!(model.mean_residual <= params.inlier_threshold_px);
            for id in &model.inliers {
                assert!(seen.insert(*id), "track {id} in two models");
                let pair = c.pairs.iter().find(|p| p.track_id == *id).unwrap();
                assert!(residual(&model.motion, pair, &test_camera()) < params.inlier_threshold_px);
            }
        }
        // Assignment and model inlier sets must tell the same story.
        for (id, slot) in &result.assignment {
            match slot {
                Some(m) => assert!(result.models[*m].inliers.contains(id)),
                None => assert!(result.models.iter().all(|m| !m.inliers.contains(id))),
            }
        }
    }

    #[test]
    fn refit_never_increases_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cam = test_camera();
        for _ in 0..50 {
            let motion = Pose::from_axis_angle(
                Vector3::y(),
                rng.random_range(-0.3..0.3),
                Vector3::new(rng.random_range(-0.3..0.3), 0.0, rng.random_range(-0.3..0.3)),
            );
            let mut pairs = pairs_under_motion(&frustum_cloud(60, &mut rng), &motion, 0);
            add_pixel_noise(&mut pairs, 0.5, &mut rng);
            let c = CorrespondenceSet { pairs };
            let rough = generate_hypotheses(&c, 1, rng.random())
                .unwrap()
                .remove(0);
            let members: BTreeSet<usize> = (0..c.len())
                .filter(|&i| residual(&rough, &c.pairs[i], &cam) < 2.0)
                .collect();
            if members.len() < 3 {
                continue;
            }
            let before = members
                .iter()
                .map(|&i| residual(&rough, &c.pairs[i], &cam))
                .sum::<f64>()
                / members.len() as f64;
            let (_, after) = guarded_refit(rough, &members, &c, &cam);
            assert!(after <= before + 1e-9, "{after} > {before}");
        }
    }

    #[test]
    fn segmentation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mb = Pose::from_axis_angle(Vector3::z(), 0.25, Vector3::new(0.4, 0.0, 0.0));
        let mut pairs = pairs_under_motion(&frustum_cloud(100, &mut rng), &Pose::identity(), 0);
        pairs.extend(pairs_under_motion(&frustum_cloud(70, &mut rng), &mb, 100));
        add_pixel_noise(&mut pairs, 0.5, &mut rng);
        let c = CorrespondenceSet { pairs };
        let params = SegmentParams {
            seed: 99,
            ..SegmentParams::default()
        };
        let a = segment(&c, &test_camera(), &params).unwrap();
        let b = segment(&c, &test_camera(), &params).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.models.len(), b.models.len());
        for (x, y) in a.models.iter().zip(&b.models) {
            assert_eq!(x.motion.rotation(), y.motion.rotation());
            assert_eq!(x.motion.translation(), y.motion.translation());
            assert_eq!(x.inliers, y.inliers);
        }
    }

    #[test]
    fn small_two_motion_instances_match_exhaustive_search() {
        // Scaled-down version of the acceptance oracle: every zero-noise
        // instance with two motions must match the best exhaustive 2-partition.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for case in 0..10 {
            let (result, truth_split, c) = random_small_instance(&mut rng);
            let oracle = exhaustive_two_partition(&c);
            assert_eq!(
                result, oracle,
                "case {case}: segment disagrees with exhaustive search"
            );
            assert_eq!(result, truth_split, "case {case}: wrong partition");
        }
    }

    /// Builds a zero-noise 2-motion instance, segments it, and returns the
    /// recovered and true partitions as sets of track-id sets.
    fn random_small_instance(
        rng: &mut ChaCha8Rng,
    ) -> (BTreeSet<BTreeSet<TrackId>>, BTreeSet<BTreeSet<TrackId>>, CorrespondenceSet) {
        let na = rng.random_range(4..=6);
        let nb = rng.random_range(4..=6);
        let ma = crate::geometry::random_planar_motion(rng, 0.4);
        let mut mb;
        loop {
            mb = crate::geometry::random_planar_motion(rng, 0.4);
            // Keep the two motions clearly distinct.
            if ma.rotation_angle_to(&mb) > 0.15 || ma.translation_distance_to(&mb) > 0.3 {
                break;
            }
        }
        let mut pairs = pairs_under_motion(&frustum_cloud(na, rng), &ma, 0);
        pairs.extend(pairs_under_motion(&frustum_cloud(nb, rng), &mb, na as TrackId));
        let c = CorrespondenceSet { pairs };
        let params = SegmentParams {
            n_hyp: 300,
            min_support: 3,
            seed: rng.random(),
            ..SegmentParams::default()
        };
        let result = segment(&c, &test_camera(), &params).unwrap();
        let got: BTreeSet<BTreeSet<TrackId>> = result
            .models
            .iter()
            .map(|m| m.inliers.clone())
            .collect();
        let truth: BTreeSet<BTreeSet<TrackId>> = [
            (0..na as TrackId).collect(),
            (na as TrackId..(na + nb) as TrackId).collect(),
        ]
        .into_iter()
        .collect();
        (got, truth, c)
    }

    /// Best 2-partition by total squared 3D alignment error over all splits.
    fn exhaustive_two_partition(c: &CorrespondenceSet) -> BTreeSet<BTreeSet<TrackId>> {
        let n = c.len();
        let mut best: Option<(f64, BTreeSet<BTreeSet<TrackId>>)> = None;
        for mask in 1u32..(1 << n) - 1 {
            let (mut ga, mut gb) = (Vec::new(), Vec::new());
            for (i, pair) in c.pairs.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    ga.push(*pair);
                } else {
                    gb.push(*pair);
                }
            }
            if ga.len() < 3 || gb.len() < 3 {
                continue;
            }
            let (Ok(fa), Ok(fb)) = (rigid_fit(&ga), rigid_fit(&gb)) else {
                continue;
            };
            let err = |m: &Pose, g: &[Correspondence]| {
                g.iter().map(|p| (m.apply(&p.a) - p.b).norm_squared()).sum::<f64>()
            };
            let total = err(&fa, &ga) + err(&fb, &gb);
            if best.as_ref().is_none_or(|(b, _)| total < *b) {
                let split: BTreeSet<BTreeSet<TrackId>> = [
                    ga.iter().map(|p| p.track_id).collect(),
                    gb.iter().map(|p| p.track_id).collect(),
                ]
                .into_iter()
                .collect();
                best = Some((total, split));
            }
        }
        best.expect("instances always admit a valid split").1
    }
}
