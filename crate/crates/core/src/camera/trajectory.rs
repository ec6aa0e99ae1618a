use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::pose::{
    checked_rotation, orthonormality_error, rot_x, rot_y, rotation_geodesic_deg, Pose,
    ORTHO_REPAIR_TOL,
};
use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image centre, focal length
    /// equal to the image width (about 53° horizontal field of view).
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidIntrinsics(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return bad("principal point outside the image");
        }
        Ok(())
    }

    /// Camera-frame point at depth `z` behind pixel coordinate `(u, v)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Continuous pixel coordinates of a camera-frame point.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Camera-from-world poses.
    pub poses: Vec<Pose>,
    /// Per-pose timestamps (microseconds in RealEstate10K-style files).
    pub timestamps: Vec<f64>,
    pub intrinsics: Intrinsics,
    pub frame_rate: f64,
}

pub const DEFAULT_FRAME_RATE: f64 = 30.0;

impl Trajectory {
    pub fn new(poses: Vec<Pose>, intrinsics: Intrinsics) -> Self {
        let timestamps = (0..poses.len())
            .map(|i| (i as f64 * 1e6 / DEFAULT_FRAME_RATE).round())
            .collect();
        Self {
            poses,
            timestamps,
            intrinsics,
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }

    /// `frames` copies of the identity pose.
    pub fn constant(frames: usize, intrinsics: Intrinsics) -> Self {
        Self::new(vec![Pose::identity(); frames], intrinsics)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(Pose::center).collect()
    }

    /// Keeps the poses at `indices` (timestamps follow).
    pub fn select(&self, indices: &[usize]) -> Trajectory {
        Trajectory {
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
            timestamps: indices.iter().map(|&i| self.timestamps[i]).collect(),
            intrinsics: self.intrinsics,
            frame_rate: self.frame_rate,
        }
    }

    /// Re-expresses every pose relative to the camera of frame `anchor`, so
    /// that pose `anchor` becomes the identity.
    pub fn rebased(&self, anchor: usize) -> Trajectory {
        let world_from_anchor = self.poses[anchor].inverse();
        let mut t = self.clone();
        for p in &mut t.poses {
            *p = p.compose(&world_from_anchor);
        }
        t
    }
}

/// Parses RealEstate10K-style camera text. Each data line holds 19 numbers:
/// timestamp, normalized `fx fy cx cy`, two unused zeros, and a row-major
/// 3×4 camera-from-world matrix. Intrinsics are denormalized with the
/// supplied image size.
pub fn parse_trajectory_text(text: &str, width: usize, height: usize) -> Result<Trajectory> {
    let mut poses = Vec::new();
    let mut timestamps = Vec::new();
    let mut intrinsics: Option<Intrinsics> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 19 {
            return Err(Error::MalformedLine {
                line: line_no,
                field: fields.len().min(19) + usize::from(fields.len() < 19),
                reason: format!("expected 19 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0f64; 19];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedLine {
                    line: line_no,
                    field: i + 1,
                    reason: format!("`{f}` is not a finite decimal number"),
                })?;
        }
        let k = Intrinsics {
            fx: vals[1] * width as f64,
            fy: vals[2] * height as f64,
            cx: vals[3] * width as f64,
            cy: vals[4] * height as f64,
            width,
            height,
        };
        k.validate().map_err(|e| Error::MalformedLine {
            line: line_no,
            field: 2,
            reason: e.to_string(),
        })?;
        if intrinsics.is_none() {
            intrinsics = Some(k);
        }
        let m = &vals[7..19];
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let t = Vector3::new(m[3], m[7], m[11]);
        let err = orthonormality_error(&r);
        if err > ORTHO_REPAIR_TOL {
            return Err(Error::NonOrthonormal {
                error: err,
                line: Some(line_no),
            });
        }
        let rotation = checked_rotation(r).map_err(|_| Error::NonOrthonormal {
            error: err,
            line: Some(line_no),
        })?;
        poses.push(Pose {
            rotation,
            translation: t,
        });
        timestamps.push(vals[0]);
    }

    let intrinsics = intrinsics.ok_or(Error::EmptyTrajectory)?;
    let frame_rate = estimate_frame_rate(&timestamps);
    Ok(Trajectory {
        poses,
        timestamps,
        intrinsics,
        frame_rate,
    })
}

fn estimate_frame_rate(ts: &[f64]) -> f64 {
    if ts.len() < 2 {
        return DEFAULT_FRAME_RATE;
    }
    let span = ts[ts.len() - 1] - ts[0];
    if span > 0.0 {
        (ts.len() - 1) as f64 * 1e6 / span
    } else {
        DEFAULT_FRAME_RATE
    }
}

/// Writes the text format read by [`parse_trajectory_text`]. Camera fields
/// are fixed-point with nine fractional digits.
pub fn serialize_trajectory(t: &Trajectory) -> String {
    let k = &t.intrinsics;
    let (w, h) = (k.width as f64, k.height as f64);
    let mut out = String::new();
    for (pose, ts) in t.poses.iter().zip(&t.timestamps) {
        let r = &pose.rotation;
        let tr = &pose.translation;
        let fields = [
            k.fx / w,
            k.fy / h,
            k.cx / w,
            k.cy / h,
            0.0,
            0.0,
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            tr.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            tr.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            tr.z,
        ];
        let _ = write!(out, "{ts}");
        for v in fields {
            // avoid emitting "-0.000000000"
            let v = if v.abs() < 5e-10 { 0.0 } else { v };
            let _ = write!(out, " {v:.9}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    PanLeft,
    PanRight,
    TiltUp,
    TiltDown,
    DollyIn,
    DollyOut,
    TruckLeft,
    TruckRight,
    Orbit,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 9] = [
        Self::PanLeft,
        Self::PanRight,
        Self::TiltUp,
        Self::TiltDown,
        Self::DollyIn,
        Self::DollyOut,
        Self::TruckLeft,
        Self::TruckRight,
        Self::Orbit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PanLeft => "pan_left",
            Self::PanRight => "pan_right",
            Self::TiltUp => "tilt_up",
            Self::TiltDown => "tilt_down",
            Self::DollyIn => "dolly_in",
            Self::DollyOut => "dolly_out",
            Self::TruckLeft => "truck_left",
            Self::TruckRight => "truck_right",
            Self::Orbit => "orbit",
        }
    }

    /// Rotational kinds take their magnitude in degrees, the others in
    /// world units.
    pub fn is_rotational(self) -> bool {
        matches!(
            self,
            Self::PanLeft | Self::PanRight | Self::TiltUp | Self::TiltDown | Self::Orbit
        )
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind {
                what: "trajectory kind",
                name: s.to_string(),
            })
    }
}

/// Distance from the starting camera to the orbit pivot, world units.
pub const ORBIT_RADIUS: f64 = 4.0;

/// Constant-velocity primitive camera motion starting at the identity.
///
/// Cameras use the x-right, y-down, z-forward convention: `tilt_up` turns
/// the optical axis towards -y, `pan_left` towards -x, and `orbit` circles
/// a pivot [`ORBIT_RADIUS`] ahead of the first camera while looking at it.
pub fn make_primitive_trajectory(
    kind: TrajectoryKind,
    frames: usize,
    magnitude: f64,
    intrinsics: Intrinsics,
) -> Result<Trajectory> {
    if frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "primitive trajectory needs at least 2 frames, got {frames}"
        )));
    }
    if !(magnitude > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "magnitude must be positive, got {magnitude}"
        )));
    }
    let poses = (0..frames)
        .map(|i| {
            let s = i as f64 / (frames - 1) as f64 * magnitude;
            let (rot, center) = match kind {
                TrajectoryKind::PanLeft => (rot_y(-s), Vector3::zeros()),
                TrajectoryKind::PanRight => (rot_y(s), Vector3::zeros()),
                TrajectoryKind::TiltUp => (rot_x(s), Vector3::zeros()),
                TrajectoryKind::TiltDown => (rot_x(-s), Vector3::zeros()),
                TrajectoryKind::DollyIn => (Matrix3::identity(), Vector3::new(0.0, 0.0, s)),
                TrajectoryKind::DollyOut => (Matrix3::identity(), Vector3::new(0.0, 0.0, -s)),
                TrajectoryKind::TruckLeft => (Matrix3::identity(), Vector3::new(-s, 0.0, 0.0)),
                TrajectoryKind::TruckRight => (Matrix3::identity(), Vector3::new(s, 0.0, 0.0)),
                TrajectoryKind::Orbit => {
                    let r = rot_y(s);
                    let pivot = Vector3::new(0.0, 0.0, ORBIT_RADIUS);
                    (r, pivot + r * Vector3::new(0.0, 0.0, -ORBIT_RADIUS))
                }
            };
            Pose::from_center(rot, center)
        })
        .collect();
    Ok(Trajectory::new(poses, intrinsics))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryDiagnostics {
    pub rot_mean_deg: f64,
    pub rot_max_deg: f64,
    pub trans_dir_angle_mean_deg: f64,
    pub path_length: f64,
}

/// Rotation statistics over frames `1..T` relative to frame 0, the mean
/// angle between consecutive step directions of the camera centre (steps
/// shorter than 1e-9 skipped), and the summed step length.
pub fn trajectory_diagnostics(traj: &Trajectory) -> TrajectoryDiagnostics {
    if traj.len() < 2 {
        return TrajectoryDiagnostics::default();
    }
    let r0 = traj.poses[0].rotation;
    let angles: Vec<f64> = traj.poses[1..]
        .iter()
        .map(|p| rotation_geodesic_deg(&r0, &p.rotation))
        .collect();
    let rot_mean_deg = angles.iter().sum::<f64>() / angles.len() as f64;
    let rot_max_deg = angles.iter().cloned().fold(0.0, f64::max);

    let centers = traj.centers();
    let steps: Vec<Vector3<f64>> = centers.windows(2).map(|w| w[1] - w[0]).collect();
    let path_length = steps.iter().map(|s| s.norm()).sum();
    let dirs: Vec<Vector3<f64>> = steps
        .iter()
        .filter(|s| s.norm() >= 1e-9)
        .map(|s| s.normalize())
        .collect();
    let dir_angles: Vec<f64> = dirs
        .windows(2)
        .map(|w| w[0].dot(&w[1]).clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    let trans_dir_angle_mean_deg = if dir_angles.is_empty() {
        0.0
    } else {
        dir_angles.iter().sum::<f64>() / dir_angles.len() as f64
    };
    TrajectoryDiagnostics {
        rot_mean_deg,
        rot_max_deg,
        trans_dir_angle_mean_deg,
        path_length,
    }
}
