//! Trajectory files and accuracy metrics.
//!
//! Trajectories are plain text, one pose per line: `timestamp tx ty tz qx qy
//! qz qw` with six decimal places, LF endings, and the quaternion sign chosen
//! so qw >= 0. Metrics follow the usual absolute-trajectory-error recipe:
//! nearest-timestamp association, first-pose alignment, then RMSE over
//! translation distances and geodesic rotation angles.

use crate::geometry::Pose;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: timestamps not strictly increasing at row {row}")]
    NotIncreasing { path: String, row: usize },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectories share fewer than 2 associated timestamps")]
    NoOverlap,
    #[error("track {0} has no ground-truth body")]
    MissingTruth(crate::TrackId),
}

/// Accuracy of an estimated trajectory against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub position_rmse: f64,
    pub rotation_rmse_deg: f64,
    /// Number of associated pose pairs the RMSEs average over.
    pub n_poses: usize,
    /// Carried over from the run; evaluation itself never sets it.
    pub divergence: bool,
}

/// Writes `rows` in the trajectory format. Timestamps must strictly increase.
pub fn write_trajectory(path: &Path, rows: &[(f64, Pose)]) -> Result<(), TrajError> {
    let mut out = String::with_capacity(rows.len() * 64);
    let mut prev = f64::NEG_INFINITY;
    for (row, (t, pose)) in rows.iter().enumerate() {
        if *t <= prev {
            return Err(TrajError::NotIncreasing {
                path: path.display().to_string(),
                row,
            });
        }
        prev = *t;
        let q = pose.unit_quaternion();
        let (qx, qy, qz, qw) = if q.w < 0.0 {
            (-q.i, -q.j, -q.k, -q.w)
        } else {
            (q.i, q.j, q.k, q.w)
        };
        let tr = pose.translation();
        writeln!(
            out,
            "{t:.6} {:.6} {:.6} {:.6} {qx:.6} {qy:.6} {qz:.6} {qw:.6}",
            tr.x, tr.y, tr.z
        )
        .expect("writing to a String cannot fail");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a trajectory file. Blank lines and `#` comments are skipped; any
/// other malformed line is reported with its 1-based line number.
pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>, TrajError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let fail = |line: usize, msg: String| TrajError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| fail(line_no, format!("bad number: {e}")))?;
        if fields.len() != 8 {
            return Err(fail(line_no, format!("expected 8 fields, got {}", fields.len())));
        }
        let [t, tx, ty, tz, qx, qy, qz, qw] = fields[..] else { unreachable!() };
        let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(fail(line_no, format!("quaternion norm {norm} not 1")));
        }
        rows.push((t, Pose::from_quaternion(qx, qy, qz, qw, nalgebra::Vector3::new(tx, ty, tz))));
        if rows.len() >= 2 && rows[rows.len() - 2].0 >= t {
            return Err(TrajError::NotIncreasing {
                path: path.display().to_string(),
                row: rows.len() - 1,
            });
        }
    }
    Ok(rows)
}

/// Per-pose errors after association and first-pose alignment:
/// `(timestamp, position error m, rotation error deg)`.
pub fn per_pose_errors(
    est: &[(f64, Pose)],
    gt: &[(f64, Pose)],
) -> Result<Vec<(f64, f64, f64)>, EvalError> {
    if est.is_empty() || gt.len() < 2 {
        return Err(EvalError::NoOverlap);
    }
    // Association window: half the median ground-truth frame period.
    let mut gaps: Vec<f64> = gt.windows(2).map(|w| w[1].0 - w[0].0).collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let half_period = gaps[gaps.len() / 2] / 2.0;

    let gt_times: Vec<f64> = gt.iter().map(|r| r.0).collect();
    let mut pairs: Vec<(f64, &Pose, &Pose)> = Vec::new();
    for (t, pose) in est {
        let idx = match gt_times.binary_search_by(|g| g.partial_cmp(t).unwrap()) {
            Ok(i) => i,
            Err(i) => {
                // Nearest of the two neighbors.
                if i == 0 {
                    0
                } else if i == gt_times.len() {
                    gt_times.len() - 1
                } else if (gt_times[i] - t).abs() < (t - gt_times[i - 1]).abs() {
                    i
                } else {
                    i - 1
                }
            }
        };
        if (gt_times[idx] - t).abs() <= half_period {
            pairs.push((*t, pose, &gt[idx].1));
        }
    }
    if pairs.len() < 2 {
        return Err(EvalError::NoOverlap);
    }

    // Premultiply so the first estimated pose coincides with ground truth.
    let align = pairs[0].2.compose(&pairs[0].1.inverse());
    Ok(pairs
        .iter()
        .map(|(t, est_pose, gt_pose)| {
            let aligned = align.compose(est_pose);
            let dp = aligned.translation_distance_to(gt_pose);
            let dr = aligned.rotation_angle_to(gt_pose).to_degrees();
            (*t, dp, dr)
        })
        .collect())
}

/// Position and rotation RMSE of `est` against `gt`.
pub fn rmse(est: &[(f64, Pose)], gt: &[(f64, Pose)]) -> Result<Metrics, EvalError> {
    let errors = per_pose_errors(est, gt)?;
    let n = errors.len() as f64;
    let pos = (errors.iter().map(|e| e.1 * e.1).sum::<f64>() / n).sqrt();
    let rot = (errors.iter().map(|e| e.2 * e.2).sum::<f64>() / n).sqrt();
    Ok(Metrics {
        position_rmse: pos,
        rotation_rmse_deg: rot,
        n_poses: errors.len(),
        divergence: false,
    })
}

/// Fraction of tracks whose label maps to their true body under the best
/// injective label-to-body assignment.
pub fn segmentation_score(
    labels: &BTreeMap<crate::TrackId, crate::Label>,
    truth: &BTreeMap<crate::TrackId, crate::BodyId>,
) -> Result<f64, EvalError> {
    if labels.is_empty() {
        return Ok(1.0);
    }
    // Contingency table: joint counts per (label, body).
    let mut table: BTreeMap<crate::Label, BTreeMap<crate::BodyId, usize>> = BTreeMap::new();
    for (track, label) in labels {
        let body = truth.get(track).ok_or(EvalError::MissingTruth(*track))?;
        *table.entry(*label).or_default().entry(*body).or_default() += 1;
    }
    let bodies: Vec<crate::BodyId> = {
        let mut set: Vec<_> = table.values().flat_map(|m| m.keys().copied()).collect();
        set.sort_unstable();
        set.dedup();
        set
    };
    let rows: Vec<Vec<usize>> = table
        .values()
        .map(|m| bodies.iter().map(|b| m.get(b).copied().unwrap_or(0)).collect())
        .collect();

    let matched = if bodies.len() <= 20 {
        best_assignment(&rows, bodies.len())
    } else {
        greedy_assignment(&rows, bodies.len())
    };
    Ok(matched as f64 / labels.len() as f64)
}

/// Exact maximum-weight injective assignment of rows (labels) to columns
/// (bodies) by dynamic programming over column subsets.
fn best_assignment(rows: &[Vec<usize>], n_cols: usize) -> usize {
    let mut dp = vec![0usize; 1 << n_cols];
    for row in rows {
        let mut next = dp.clone(); // leaving the row unassigned is always allowed
        for (mask, &base) in dp.iter().enumerate() {
            for (col, &count) in row.iter().enumerate() {
                if mask & (1 << col) == 0 {
                    let m = mask | (1 << col);
                    next[m] = next[m].max(base + count);
                }
            }
        }
        dp = next;
    }
    dp.into_iter().max().unwrap_or(0)
}

/// Greedy fallback for implausibly many bodies: repeatedly takes the largest
/// remaining (label, body) cell.
fn greedy_assignment(rows: &[Vec<usize>], n_cols: usize) -> usize {
    let mut cells: Vec<(usize, usize, usize)> = rows
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &v)| (v, r, c)))
        .collect();
    cells.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; rows.len()];
    let mut col_used = vec![false; n_cols];
    let mut total = 0;
    for (v, r, c) in cells {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            total += v;
        }
    }
    total
}
