//! Diagnostic replay: per-keyframe-pair walker odometry on truth-pure
//! memberships, reporting the per-step translation bias of the estimate
//! against the ground-truth relative motion.

use std::collections::BTreeMap;
use std::path::Path;

use mmvo::geometry::{Pose, StereoCamera, StereoObs};
use mmvo::vo::{self, LabeledPoints, VoParams};
use mmvo::TrackId;
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

fn read_poses(path: &Path) -> BTreeMap<i64, Pose> {
    let mut out = BTreeMap::new();
    for line in std::fs::read_to_string(path).unwrap().lines() {
        let f: Vec<f64> = line.split_whitespace().map(|v| v.parse().unwrap()).collect();
        let t = (f[0] * 10.0).round() as i64;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(f[7], f[4], f[5], f[6]));
        let r: Matrix3<f64> = *q.to_rotation_matrix().matrix();
        out.insert(t, Pose::new(r, Vector3::new(f[1], f[2], f[3])));
    }
    out
}

fn mmvo_cli_read_camera(path: &Path) -> StereoCamera {
    let text = std::fs::read_to_string(path).unwrap();
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().parse::<f64>().unwrap());
        }
    }
    StereoCamera::new(kv["fx"], kv["fy"], kv["cx"], kv["cy"], kv["baseline"])
}

fn main() {
    let dir = std::env::args().nth(1).expect("usage: probe <scene-dir> [interval]");
    let interval: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let dir = Path::new(&dir).to_owned();

    let cam = mmvo_cli_read_camera(&dir.join("camera.txt"));
    let truth: BTreeMap<TrackId, u32> = std::fs::read_to_string(dir.join("truth_labels.txt"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut it = l.split_whitespace();
            (
                it.next().unwrap().parse().unwrap(),
                it.next().unwrap().parse().unwrap(),
            )
        })
        .collect();

    // frame -> track -> camera point
    let mut frames: BTreeMap<usize, BTreeMap<TrackId, mmvo::geometry::Point3>> = BTreeMap::new();
    for line in std::fs::read_to_string(dir.join("tracks.txt")).unwrap().lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let frame: usize = f[0].parse().unwrap();
        let track: TrackId = f[2].parse().unwrap();
        let obs = StereoObs {
            u_left: f[3].parse().unwrap(),
            v: f[4].parse().unwrap(),
            disparity: f[5].parse().unwrap(),
        };
        if let Ok(p) = cam.triangulate(&obs) {
            frames.entry(frame).or_default().insert(track, p);
        }
    }

    let cam_poses = read_poses(&dir.join("gt_body_0.txt"));
    let body_poses = read_poses(&dir.join("gt_body_1.txt"));

    let body: u32 = std::env::var("PROBE_BODY").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    let label = 9u32;
    let max_frame = *frames.keys().last().unwrap();
    let mut sum = Vector3::zeros();
    let mut sum_true = Vector3::zeros();
    let mut n = 0usize;
    let mut chain_err = Pose::identity();
    for a in (0..max_frame).step_by(interval) {
        let b = a + interval;
        let (Some(fa), Some(fb)) = (frames.get(&a), frames.get(&b)) else { continue };
        let la: LabeledPoints = fa
            .iter()
            .filter(|(t, _)| truth.get(t) == Some(&body))
            .map(|(t, p)| (*t, (*p, label)))
            .collect();
        let lb: LabeledPoints = fb
            .iter()
            .filter(|(t, _)| truth.get(t) == Some(&body))
            .map(|(t, p)| (*t, (*p, label)))
            .collect();
        let params = VoParams {
            n_hyp: 500,
            inlier_threshold_px: 2.0,
            min_support: 6,
            seed: 1234 + a as u64,
        };
        let Ok(est) = vo::estimate_relative_motion(&la, &lb, label, &cam, &params) else {
            println!("pair {a}->{b}: no estimate ({} pts)", la.len());
            continue;
        };
        // true motion of body points between camera frames a,b
        let (ca, cb) = (&cam_poses[&(a as i64)], &cam_poses[&(b as i64)]);
        let (ba, bb) = (&body_poses[&(a as i64)], &body_poses[&(b as i64)]);
        let truth_m = cb
            .inverse()
            .compose(bb)
            .compose(&ba.inverse())
            .compose(ca);
        let d = est.translation() - truth_m.translation();
        sum += d;
        sum_true += truth_m.translation();
        n += 1;
        chain_err = chain_err.compose(&est.inverse().compose(&truth_m));
        if a % 250 == 0 {
            println!(
                "pair {a:4}->{b:4}: n={:3} d=({:+.4},{:+.4},{:+.4}) |chain_err|={:.3}",
                la.len(),
                d.x,
                d.y,
                d.z,
                chain_err.translation().norm()
            );
        }
    }
    println!(
        "pairs={n} mean step bias=({:+.5},{:+.5},{:+.5}) m, mean true step=({:+.4},{:+.4},{:+.4})",
        sum.x / n as f64,
        sum.y / n as f64,
        sum.z / n as f64,
        sum_true.x / n as f64,
        sum_true.y / n as f64,
        sum_true.z / n as f64
    );
}
