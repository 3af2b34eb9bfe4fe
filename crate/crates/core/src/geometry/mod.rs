//! Poses, pinhole cameras, pointmaps, focal recovery and point-set alignment.

mod align;
mod camera;
mod focal;
mod se3;
mod trajectory;

pub use align::{align_joints, mean_distance, rms_distance, umeyama, umeyama_min_rank, AlignMode};
pub use camera::{unproject, CameraIntrinsics, Pointmap};
pub use focal::{weiszfeld_focal, WEISZFELD_FLOOR, WEISZFELD_MAX_ITERS, WEISZFELD_TOL};
pub use se3::{look_at, PoseRecord, SE3Pose, Sim3, Vec3};
pub use trajectory::{read_trajectory, write_trajectory, TrajectoryRecord};
