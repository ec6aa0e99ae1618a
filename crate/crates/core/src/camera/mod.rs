//! Pinhole cameras, SE(3) pose algebra, trajectory files, primitive camera
//! paths and similarity alignment.

mod align;
mod pose;
mod trajectory;

pub use align::{align_positions, align_sim3, rms_error, Sim3, COLLINEAR_RATIO};
pub use pose::{
    compose, inverse, orthonormality_error, polar_rotation, relative_pose, rot_axis_angle, rot_x,
    rot_y, rot_z, rotation_geodesic_deg, Pose, ORTHO_EXACT_TOL, ORTHO_REPAIR_TOL,
};
pub use trajectory::{
    make_primitive_trajectory, parse_trajectory_text, serialize_trajectory, trajectory_diagnostics,
    Intrinsics, Trajectory, TrajectoryDiagnostics, TrajectoryKind, DEFAULT_FRAME_RATE,
    ORBIT_RADIUS,
};

#[cfg(test)]
pub(crate) use pose::test_util;
