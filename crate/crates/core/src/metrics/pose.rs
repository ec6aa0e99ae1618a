use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::mse;
use crate::camera::{
    align_positions, rot_x, rot_y, rot_z, rotation_geodesic_deg, trajectory_diagnostics, Intrinsics, Pose, Sim3,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::{render, Scene, FAR_DEPTH};

/// Coarse-to-fine photometric pose search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSearch {
    /// Grid half-width per level: rotation in degrees, translation in world
    /// units.
    pub levels: [[f64; 2]; 3],
    /// Grid points on each side of the current best.
    pub grid_points: usize,
    /// Sweeps over the six parameters per level, stopping early once a
    /// sweep finds nothing better.
    pub grid_sweeps: usize,
    /// Descent stops once the rotation step falls below this, in degrees.
    pub min_step: f64,
    pub max_iterations: usize,
    /// Sideways translation turns the camera to keep a point this far ahead
    /// fixed, so translation and rotation move the image independently.
    /// `None` uses the median scene depth seen from the initial pose.
    pub pivot_depth: Option<f64>,
}

impl Default for PoseSearch {
    fn default() -> Self {
        Self {
            levels: [[2.0, 0.1], [0.5, 0.025], [0.125, 0.00625]],
            grid_points: 2,
            grid_sweeps: 4,
            min_step: 1e-4,
            max_iterations: 200,
            pivot_depth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub mse: f64,
    pub init_mse: f64,
    /// Accepted grid moves and accepted descent moves.
    pub grid_improvements: usize,
    pub descent_improvements: usize,
    /// Descent sweeps over all six parameters.
    pub iterations: usize,
    /// False when the iteration cap was hit before the step shrank below
    /// `min_step`; the best pose found is still returned.
    pub converged: bool,
}

/// Offsets `[rx, ry, rz]` in degrees about the camera axes and `[tx, ty, tz]`
/// along them, applied to `init`. Sideways moves orbit a point `pivot`
/// ahead of the camera.
fn perturb(init: &Pose, x: &[f64; 6], pivot: f64) -> Pose {
    if x.iter().all(|&v| v == 0.0) {
        return *init;
    }
    let wc = init.rotation.transpose();
    let yaw = -(x[3] / pivot).atan().to_degrees();
    let pitch = (x[4] / pivot).atan().to_degrees();
    let r = wc * rot_x(pitch) * rot_y(yaw) * rot_x(x[0]) * rot_y(x[1]) * rot_z(x[2]);
    let c = init.center() + wc * Vector3::new(x[3], x[4], x[5]);
    Pose::from_center(r, c)
}

/// Camera pose of `frame` found by minimizing the mean squared error against
/// renders of `scene`: a per-parameter grid at three shrinking scales, then
/// coordinate descent with step halving.
pub fn estimate_pose_photometric(
    frame: &Image,
    scene: &Scene,
    intrinsics: &Intrinsics,
    init: &Pose,
    frame_index: usize,
    search: &PoseSearch,
) -> Result<PoseEstimate> {
    if frame.dims() != (intrinsics.width, intrinsics.height) {
        return Err(Error::ResolutionMismatch {
            expected: (intrinsics.width, intrinsics.height),
            actual: frame.dims(),
        });
    }
    let pivot = search.pivot_depth.unwrap_or_else(|| {
        let (_, depth, _) = render(scene, init, intrinsics, frame_index);
        let mut d: Vec<f32> = depth.data.iter().copied().filter(|z| *z < FAR_DEPTH).collect();
        d.sort_by(f32::total_cmp);
        d.get(d.len() / 2).map_or(4.0, |&z| f64::from(z))
    });
    let cost = |x: &[f64; 6]| mse(&render(scene, &perturb(init, x, pivot), intrinsics, frame_index).0, frame);
    let mut x = [0.0; 6];
    let mut best = cost(&x);
    let init_mse = best;
    let mut grid_improvements = 0;
    for [rot, trans] in search.levels {
        for _ in 0..search.grid_sweeps.max(1) {
            let before = grid_improvements;
            for p in 0..6 {
                let half = if p < 3 { rot } else { trans };
                let center = x[p];
                let n = search.grid_points.max(1);
                for k in (1..=n).flat_map(|k| [k as f64, -(k as f64)]) {
                    let mut cand = x;
                    cand[p] = center + half * k / n as f64;
                    let c = cost(&cand);
                    if c < best {
                        best = c;
                        x = cand;
                        grid_improvements += 1;
                    }
                }
            }
            if grid_improvements == before {
                break;
            }
        }
    }
    let [last_rot, last_trans] = search.levels[2];
    let ratio = last_trans / last_rot;
    let mut step = last_rot / (2 * search.grid_points.max(1)) as f64;
    let (mut iterations, mut descent_improvements) = (0, 0);
    while step >= search.min_step && iterations < search.max_iterations {
        iterations += 1;
        let mut moved = false;
        for p in 0..6 {
            let h = if p < 3 { step } else { step * ratio };
            for dir in [1.0, -1.0] {
                let mut cand = x;
                cand[p] += dir * h;
                let c = cost(&cand);
                if c < best {
                    best = c;
                    x = cand;
                    moved = true;
                    descent_improvements += 1;
                    break;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    Ok(PoseEstimate {
        pose: perturb(init, &x, pivot),
        mse: best,
        init_mse,
        grid_improvements,
        descent_improvements,
        iterations,
        converged: step < search.min_step,
    })
}

/// Estimates one pose per frame, each search starting from the previous
/// estimate. Returns `source` followed by the estimates.
pub fn estimate_trajectory(
    frames: &[Image],
    scene: &Scene,
    intrinsics: &Intrinsics,
    source: &Pose,
    frame_indices: &[usize],
    search: &PoseSearch,
) -> Result<(Trajectory, Vec<PoseEstimate>)> {
    if frames.len() != frame_indices.len() {
        return Err(Error::LengthMismatch {
            expected: frames.len(),
            actual: frame_indices.len(),
        });
    }
    let mut poses = vec![*source];
    let mut estimates = Vec::with_capacity(frames.len());
    for (frame, &fi) in frames.iter().zip(frame_indices) {
        let e = estimate_pose_photometric(frame, scene, intrinsics, poses.last().unwrap(), fi, search)?;
        poses.push(e.pose);
        estimates.push(e);
    }
    Ok((Trajectory::new(poses, *intrinsics), estimates))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryErrors {
    /// Mean geodesic angle after applying the alignment rotation.
    pub r_err_deg: f64,
    /// Mean aligned position error over the reference path length.
    pub t_err: f64,
    /// The reference path has zero length; `t_err` is the raw mean error.
    pub unnormalized: bool,
    pub rot_err_deg: Vec<f64>,
    pub pos_err: Vec<f64>,
    pub alignment: Sim3,
}

/// Rotation and translation error of `est` against `gt` after similarity
/// alignment of the camera centres.
pub fn trajectory_errors(est: &Trajectory, gt: &Trajectory) -> Result<TrajectoryErrors> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            actual: est.len(),
        });
    }
    let alignment = align_positions(&est.centers(), &gt.centers())?;
    let q = alignment.transform.rotation;
    let rot_err_deg: Vec<f64> = est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(e, g)| rotation_geodesic_deg(&(q * e.rotation.transpose()), &g.rotation.transpose()))
        .collect();
    let pos_err: Vec<f64> = est
        .centers()
        .iter()
        .zip(gt.centers())
        .map(|(e, g)| (alignment.apply(e) - g).norm())
        .collect();
    let n = est.len() as f64;
    let path = trajectory_diagnostics(gt).path_length;
    let unnormalized = path < 1e-9;
    let mean_pos = pos_err.iter().sum::<f64>() / n;
    Ok(TrajectoryErrors {
        r_err_deg: rot_err_deg.iter().sum::<f64>() / n,
        t_err: if unnormalized { mean_pos } else { mean_pos / path },
        unnormalized,
        rot_err_deg,
        pos_err,
        alignment,
    })
}
