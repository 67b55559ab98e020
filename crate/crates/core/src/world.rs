//! Ground-frame conversion.
//!
//! Each object's triangulated points are carried back into the frame where
//! the object was first observed (its anchor frame); the growing point set is
//! voxelized into an occupancy grid whose gravity center defines the object's
//! local origin. Combining the robot's ground trajectory, its object-relative
//! trajectory, and that local origin turns every per-object pose chain into a
//! trajectory in the common ground frame.

use crate::geometry::{Point3, Pose};
use crate::Label;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum WorldError {
    #[error("cannot take the gravity center of an empty point set")]
    EmptySet,
}

/// Points on one object's surface, expressed in its anchor frame (the camera
/// frame of the object's first observation). The set only ever grows; every
/// new observation stacks more points onto the same rigid shape.
#[derive(Debug, Clone)]
pub struct SurfacePointSet {
    pub label: Label,
    pub points: Vec<Point3>,
}

impl SurfacePointSet {
    pub fn new(label: Label) -> Self {
        Self {
            label,
            points: Vec::new(),
        }
    }

    /// Back-projects one frame's camera-frame points into the anchor frame
    /// and appends them. `object_in_camera` is the anchor frame's pose
    /// expressed in the current camera frame. Points are never removed;
    /// duplicates are welcome — the occupancy grid absorbs them.
    pub fn accumulate(&mut self, new_points: &[Point3], object_in_camera: &Pose) {
        self.points
            .extend(new_points.iter().map(|p| back_project(p, object_in_camera)));
    }
}

/// Voxelization of a surface point set: a voxel is occupied exactly when at
/// least one point falls inside it, no matter how many do.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub voxel_size: f64,
    pub occupied: BTreeSet<(i64, i64, i64)>,
}

impl OccupancyGrid {
    pub fn from_points(points: &[Point3], voxel_size: f64) -> Self {
        let occupied = points
            .iter()
            .map(|p| {
                (
                    (p.x / voxel_size).floor() as i64,
                    (p.y / voxel_size).floor() as i64,
                    (p.z / voxel_size).floor() as i64,
                )
            })
            .collect();
        Self {
            voxel_size,
            occupied,
        }
    }

    /// Center of the voxel with the given index.
    pub fn voxel_center(&self, index: (i64, i64, i64)) -> Point3 {
        Point3::new(
            (index.0 as f64 + 0.5) * self.voxel_size,
            (index.1 as f64 + 0.5) * self.voxel_size,
            (index.2 as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Occupied voxel indices as text, one `i j k` triple per line, in index
    /// order. For debugging dumps.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, j, k) in &self.occupied {
            writeln!(out, "{i} {j} {k}").expect("writing to a String cannot fail");
        }
        out
    }
}

/// One object's trajectory in the ground frame.
#[derive(Debug, Clone)]
pub struct GroundTrajectory {
    pub label: Label,
    /// (frame_id, pose of the object's local frame in the ground frame),
    /// in frame order — the same frame set as the source pose chain.
    pub poses: Vec<(usize, Pose)>,
}

/// Maps a camera-frame point into the object's anchor frame.
///
/// `object_in_camera` is the anchor frame's pose expressed in the current
/// camera frame, so its inverse carries camera coordinates into the anchor.
pub fn back_project(p_cam: &Point3, object_in_camera: &Pose) -> Point3 {
    object_in_camera.inverse().apply(p_cam)
}

/// Gravity center of the occupied voxels of `set` at the given resolution:
/// the unweighted mean of occupied voxel centers. Voxel occupancy is binary,
/// so a freshly observed edge of the object counts exactly as much as the
/// densely re-observed parts.
pub fn gravity_center(set: &SurfacePointSet, voxel_size: f64) -> Result<Point3, WorldError> {
    let grid = OccupancyGrid::from_points(&set.points, voxel_size);
    if grid.occupied.is_empty() {
        return Err(WorldError::EmptySet);
    }
    let sum: Point3 = grid
        .occupied
        .iter()
        .map(|&idx| grid.voxel_center(idx))
        .sum();
    Ok(sum / grid.occupied.len() as f64)
}

/// Initial pose of an object inside its anchor frame: the local origin sits
/// at the gravity center, and the local axes are the anchor frame's axes —
/// only a position can be read off a bare point cloud, so the orientation is
/// anchored to the first-observation camera frame. The resulting constant
/// orientation offset is removed by trajectory alignment during evaluation.
pub fn init_pose(center: &Point3) -> Pose {
    Pose::new(nalgebra::Matrix3::identity(), *center)
}

/// Converts one object-relative robot pose into the object's ground pose.
///
/// `robot_in_ground` and `robot_in_object` are the robot's pose in the ground
/// frame and in the object's anchor frame at the same instant; `anchor_offset`
/// is the object's local origin from [`init_pose`]. The composition hops from
/// the object's local frame to the anchor, from the anchor to the camera, and
/// from the camera to the ground, yielding the pose of the object's local
/// frame in the ground frame. For the background label the two robot poses
/// coincide and the offset is identity, so the result collapses to identity.
pub fn to_ground(robot_in_ground: &Pose, robot_in_object: &Pose, anchor_offset: &Pose) -> Pose {
    robot_in_ground
        .compose(&robot_in_object.inverse())
        .compose(anchor_offset)
}
