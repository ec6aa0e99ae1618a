use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

/// Orthonormality error accepted without repair.
pub const ORTHO_EXACT_TOL: f64 = 1e-9;
/// Largest orthonormality error that is repaired by polar decomposition.
pub const ORTHO_REPAIR_TOL: f64 = 1e-3;

/// Rigid transform `x -> R x + t`.
///
/// Trajectories store camera-from-world poses; world-from-camera is always
/// obtained through [`Pose::inverse`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, repairing small rotation drift and rejecting large.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rotation = checked_rotation(rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self {
            rotation: r,
            translation: Vector3::zeros(),
        }
    }

    /// Camera-from-world pose for a camera centred at `center` whose
    /// world-from-camera rotation is `world_from_camera`.
    pub fn from_center(world_from_camera: Matrix3<f64>, center: Vector3<f64>) -> Self {
        let rotation = world_from_camera.transpose();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Applies `b` first, then `self`.
    pub fn compose(&self, b: &Pose) -> Pose {
        let mut rotation = self.rotation * b.rotation;
        if orthonormality_error(&rotation) > ORTHO_EXACT_TOL {
            rotation = polar_rotation(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera centre in world coordinates, for a camera-from-world pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }
}

/// Free-function form of [`Pose::compose`].
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

/// Returns `a_from_b` such that `world_from_a ∘ a_from_b = world_from_b`.
pub fn relative_pose(world_from_a: &Pose, world_from_b: &Pose) -> Pose {
    world_from_a.inverse().compose(world_from_b)
}

/// `max(|det R - 1|, ‖RᵀR - I‖∞)`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    (r.determinant() - 1.0).abs().max(gram.abs().max())
}

/// Nearest rotation in the Frobenius sense.
pub fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    u * fix * v_t
}

pub(crate) fn checked_rotation(r: Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::NonOrthonormal {
            error: f64::INFINITY,
            line: None,
        });
    }
    let err = orthonormality_error(&r);
    if err <= ORTHO_EXACT_TOL {
        Ok(r)
    } else if err <= ORTHO_REPAIR_TOL {
        Ok(polar_rotation(&r))
    } else {
        Err(Error::NonOrthonormal {
            error: err,
            line: None,
        })
    }
}

pub fn rot_x(deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()).matrix()
}

pub fn rot_y(deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).matrix()
}

pub fn rot_z(deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).matrix()
}

pub fn rot_axis_angle(axis: &Vector3<f64>, deg: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), deg.to_radians()).matrix()
}

/// Geodesic distance on SO(3) in degrees, in `[0, 180]`.
pub fn rotation_geodesic_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let m = ra.transpose() * rb;
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = 0.5
        * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm();
    // atan2 of the same half-trace/skew pair is the arccos form without its
    // loss of precision near 0 degrees.
    s.atan2(c).to_degrees()
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
        rot_axis_angle(&axis, rng.random_range(0.0..179.0))
    }

    pub fn random_pose(rng: &mut impl Rng) -> Pose {
        Pose {
            rotation: random_rotation(rng),
            translation: Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        }
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}
