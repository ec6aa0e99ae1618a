use nalgebra::{Matrix3, Vector3};

use super::pose::{rot_axis_angle, Pose};
use super::trajectory::Trajectory;
use crate::error::{Error, Result};

/// Result of a similarity alignment `p ↦ s·Q·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    /// Rotation `Q` and translation `t`.
    pub transform: Pose,
    /// Set when the ground-truth positions were coincident or collinear and
    /// the closed form had to fall back.
    pub degenerate: bool,
}

impl Sim3 {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.transform.rotation * p) + self.transform.translation
    }
}

/// Point sets whose second principal spread is below this fraction of the
/// first are aligned as lines; the roll about a nearly straight path is not
/// observable from noisy centres.
pub const COLLINEAR_RATIO: f64 = 1e-2;

/// Least-squares similarity mapping `est` camera centres onto `gt` camera
/// centres (Umeyama).
pub fn align_sim3(est: &Trajectory, gt: &Trajectory) -> Result<(f64, Pose)> {
    let s = align_positions(&est.centers(), &gt.centers())?;
    Ok((s.scale, s.transform))
}

/// Umeyama alignment of point sets.
///
/// Coincident ground truth keeps scale 1 and identity rotation. Collinear
/// or nearly collinear ground truth has no usable rotation about its line;
/// the minimal rotation carrying the estimated principal direction onto the
/// true one is used.
pub fn align_positions(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Sim3> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            actual: est.len(),
        });
    }
    if est.is_empty() {
        return Err(Error::InvalidArgument("cannot align empty trajectories".into()));
    }
    let n = est.len() as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / n;
    let var_e = est.iter().map(|p| (p - mu_e).norm_squared()).sum::<f64>() / n;
    let var_g = gt.iter().map(|p| (p - mu_g).norm_squared()).sum::<f64>() / n;

    let translation_only = |degenerate| Sim3 {
        scale: 1.0,
        transform: Pose::from_translation(mu_g - mu_e),
        degenerate,
    };
    if var_g < 1e-18 || var_e < 1e-18 {
        return Ok(translation_only(true));
    }

    let mut cov = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        cov += (g - mu_g) * (e - mu_e).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = svd.singular_values;

    // singular values are not guaranteed sorted
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let (d0, d1) = (d[order[0]], d[order[1]]);

    let (rotation, trace_ds, degenerate) = if d1 <= COLLINEAR_RATIO * d0.max(1e-300) {
        let dir_g = u.column(order[0]).into_owned();
        let dir_e = v_t.row(order[0]).transpose();
        (minimal_rotation(&dir_e, &dir_g), d0, true)
    } else {
        let mut fix = Matrix3::identity();
        if u.determinant() * v_t.determinant() < 0.0 {
            fix[(order[2], order[2])] = -1.0;
        }
        let trace_ds = (0..3).map(|i| d[i] * fix[(i, i)]).sum::<f64>();
        (u * fix * v_t, trace_ds, false)
    };
    let scale = trace_ds / var_e;
    if !(scale.is_finite() && scale > 0.0) {
        return Ok(translation_only(true));
    }
    let translation = mu_g - scale * (rotation * mu_e);
    Ok(Sim3 {
        scale,
        transform: Pose {
            rotation,
            translation,
        },
        degenerate,
    })
}

/// Smallest rotation taking unit direction `a` to unit direction `b`.
fn minimal_rotation(a: &Vector3<f64>, b: &Vector3<f64>) -> Matrix3<f64> {
    let a = a.normalize();
    let b = b.normalize();
    let axis = a.cross(&b);
    let c = a.dot(&b).clamp(-1.0, 1.0);
    if axis.norm() < 1e-12 {
        if c > 0.0 {
            return Matrix3::identity();
        }
        // antiparallel: rotate 180° about any perpendicular axis
        let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        return rot_axis_angle(&a.cross(&helper), 180.0);
    }
    rot_axis_angle(&axis, c.acos().to_degrees())
}

pub fn rms_error(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    (s / a.len().max(1) as f64).sqrt()
}
