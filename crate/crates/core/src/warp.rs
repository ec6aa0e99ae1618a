//! Camera-induced warp construction: unproject one observed frame with its
//! depth, forward-splat the coloured points into every target camera with a
//! z-buffer, and record which target pixels received an observation.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{parse_trajectory_text, serialize_trajectory, trajectory_diagnostics, Intrinsics, Pose, Trajectory};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image, Mask};
use crate::synth::{foreground_motion, ClipRecord};

/// Depths closer than this to the target camera plane are discarded.
pub const MIN_SPLAT_DEPTH: f64 = 1e-6;
/// Depths within this distance count as equal in the z-test.
pub const DEPTH_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpFrame {
    /// Zero wherever `valid` is false.
    pub rgb: Image,
    pub valid: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Footprint {
    /// Nearest pixel only.
    #[default]
    Single,
    /// The 2×2 block of pixels nearest the projection.
    Quad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpVideo {
    pub frames: Vec<WarpFrame>,
    pub source_frame_index: usize,
    pub trajectory: Trajectory,
}

impl WarpVideo {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.frames.iter().map(|f| f.valid.clone()).collect()
    }

    pub fn images(&self) -> Vec<Image> {
        self.frames.iter().map(|f| f.rgb.clone()).collect()
    }

    /// Writes `warp_NNN.ppm`, `valid_NNN.pgm`, `trajectory.txt` and a
    /// `warp.json` manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.frames.len();
        let manifest = WarpManifest {
            format: WARP_FORMAT.into(),
            version: WARP_VERSION,
            width: self.trajectory.intrinsics.width,
            height: self.trajectory.intrinsics.height,
            frame_count: n,
            source_frame_index: self.source_frame_index,
            frames: (0..n).map(|i| format!("warp_{i:03}.ppm")).collect(),
            masks: (0..n).map(|i| format!("valid_{i:03}.pgm")).collect(),
            trajectory: "trajectory.txt".into(),
            invisible_ratio: self.frames.iter().map(|f| invisible_ratio(&f.valid)).collect(),
        };
        for ((f, fname), mname) in self.frames.iter().zip(&manifest.frames).zip(&manifest.masks) {
            f.rgb.write_ppm(&dir.join(fname))?;
            f.valid.write_pgm(&dir.join(mname))?;
        }
        let tpath = dir.join(&manifest.trajectory);
        fs::write(&tpath, serialize_trajectory(&self.trajectory)).map_err(|e| Error::io(&tpath, e))?;
        let mpath = dir.join(WARP_MANIFEST);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))
    }

    pub fn read(dir: &Path) -> Result<WarpVideo> {
        let mpath = dir.join(WARP_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: WarpManifest = serde_json::from_str(&text)?;
        if m.format != WARP_FORMAT || m.version != WARP_VERSION {
            return Err(Error::format(&mpath, 0, format!("unsupported warp format {} v{}", m.format, m.version)));
        }
        if m.frames.len() != m.frame_count || m.masks.len() != m.frame_count {
            return Err(Error::format(&mpath, 0, "frame/mask list length disagrees with frame_count"));
        }
        let tpath = dir.join(&m.trajectory);
        let ttext = fs::read_to_string(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let trajectory = parse_trajectory_text(&ttext, m.width, m.height)?;
        if trajectory.len() != m.frame_count {
            return Err(Error::LengthMismatch { expected: m.frame_count, actual: trajectory.len() });
        }
        let mut frames = Vec::with_capacity(m.frame_count);
        for (fname, mname) in m.frames.iter().zip(&m.masks) {
            let rgb = Image::read_ppm(&dir.join(fname))?;
            let valid = Mask::read_pgm(&dir.join(mname))?;
            for dims in [rgb.dims(), valid.dims()] {
                if dims != (m.width, m.height) {
                    return Err(Error::ResolutionMismatch { expected: (m.width, m.height), actual: dims });
                }
            }
            frames.push(WarpFrame { rgb, valid });
        }
        Ok(WarpVideo { frames, source_frame_index: m.source_frame_index, trajectory })
    }
}

pub const WARP_MANIFEST: &str = "warp.json";
const WARP_FORMAT: &str = "wah-warp";
const WARP_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WarpManifest {
    format: String,
    version: u32,
    width: usize,
    height: usize,
    frame_count: usize,
    source_frame_index: usize,
    frames: Vec<String>,
    masks: Vec<String>,
    trajectory: String,
    invisible_ratio: Vec<f64>,
}

/// One world-space point per pixel:
/// `world_from_camera · (depth · K⁻¹ · (u + 0.5, v + 0.5, 1))`.
pub fn unproject(
    frame: &Image,
    depth: &DepthMap,
    intrinsics: &Intrinsics,
    camera_from_world: &Pose,
) -> Result<PointCloud> {
    let dims = (intrinsics.width, intrinsics.height);
    if frame.dims() != dims || depth.dims() != dims {
        return Err(Error::ResolutionMismatch {
            expected: dims,
            actual: if frame.dims() != dims { frame.dims() } else { depth.dims() },
        });
    }
    let world_from_camera = camera_from_world.inverse();
    let n = dims.0 * dims.1;
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for v in 0..dims.1 {
        for u in 0..dims.0 {
            let z = depth.get(u, v);
            if !(z.is_finite() && z > 0.0) {
                return Err(Error::NonPositiveDepth { x: u, y: v, value: z });
            }
            let p = intrinsics.unproject(u as f64 + 0.5, v as f64 + 0.5, f64::from(z));
            points.push(world_from_camera.transform_point(&p));
            colors.push(frame.pixel(u, v));
        }
    }
    Ok(PointCloud { points, colors })
}

/// Pixel footprint of one projected point, or nothing when it falls behind
/// the camera or outside the image. Returns (depth, up to four pixel indices).
#[inline]
fn splat_targets(
    p: &Vector3<f64>,
    target: &Pose,
    k: &Intrinsics,
    footprint: Footprint,
) -> Option<(f64, [Option<usize>; 4])> {
    let pc = target.transform_point(p);
    if !(pc.z > MIN_SPLAT_DEPTH) {
        return None;
    }
    let (x, y) = k.project(&pc);
    if !(x.is_finite() && y.is_finite()) {
        return None;
    }
    let (w, h) = (k.width as i64, k.height as i64);
    let idx = |px: i64, py: i64| -> Option<usize> {
        (px >= 0 && py >= 0 && px < w && py < h).then(|| (py * w + px) as usize)
    };
    let out = match footprint {
        Footprint::Single => [idx(x.floor() as i64, y.floor() as i64), None, None, None],
        Footprint::Quad => {
            let (x0, y0) = ((x - 0.5).floor() as i64, (y - 0.5).floor() as i64);
            [idx(x0, y0), idx(x0 + 1, y0), idx(x0, y0 + 1), idx(x0 + 1, y0 + 1)]
        }
    };
    Some((pc.z, out))
}

/// Z-buffered forward splat. Each pixel keeps the point with the smallest
/// target depth; points within [`DEPTH_TIE_EPS`] of that minimum are
/// resolved in favour of the smaller source index.
pub fn forward_splat(cloud: &PointCloud, target: &Pose, intrinsics: &Intrinsics) -> WarpFrame {
    forward_splat_with(cloud, target, intrinsics, Footprint::Single)
}

pub fn forward_splat_with(
    cloud: &PointCloud,
    target: &Pose,
    intrinsics: &Intrinsics,
    footprint: Footprint,
) -> WarpFrame {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let projected: Vec<_> = cloud
        .points
        .iter()
        .map(|p| splat_targets(p, target, intrinsics, footprint))
        .collect();

    let mut zbuf = vec![f64::INFINITY; w * h];
    for (z, pix) in projected.iter().flatten() {
        for &i in pix.iter().flatten() {
            if *z < zbuf[i] {
                zbuf[i] = *z;
            }
        }
    }
    let mut winner: Vec<Option<usize>> = vec![None; w * h];
    for (src, entry) in projected.iter().enumerate() {
        let Some((z, pix)) = entry else { continue };
        for &i in pix.iter().flatten() {
            if winner[i].is_none() && *z <= zbuf[i] + DEPTH_TIE_EPS {
                winner[i] = Some(src);
            }
        }
    }

    let mut rgb = Image::new(w, h);
    let mut valid = Mask::new(w, h, false);
    for (i, win) in winner.iter().enumerate() {
        if let Some(src) = win {
            rgb.data[i * 3..i * 3 + 3].copy_from_slice(&cloud.colors[*src]);
            valid.data[i] = true;
        }
    }
    WarpFrame { rgb, valid }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpOptions {
    pub footprint: Footprint,
    /// Worker threads for per-frame warping; `0` uses the global pool.
    pub jobs: usize,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self {
            footprint: Footprint::Single,
            jobs: 0,
        }
    }
}

/// Warps observation `source_frame_index` of `clip` into every camera of
/// `target`, in order.
pub fn build_warp_video(
    clip: &ClipRecord,
    target: &Trajectory,
    source_frame_index: usize,
) -> Result<WarpVideo> {
    build_warp_video_with(clip, target, source_frame_index, &WarpOptions::default())
}

pub fn build_warp_video_with(
    clip: &ClipRecord,
    target: &Trajectory,
    source_frame_index: usize,
    opts: &WarpOptions,
) -> Result<WarpVideo> {
    if source_frame_index >= clip.len() {
        return Err(Error::InvalidArgument(format!(
            "source frame {source_frame_index} outside clip of {} frames",
            clip.len()
        )));
    }
    let k = target.intrinsics;
    if clip.dims() != (k.width, k.height) {
        return Err(Error::ResolutionMismatch {
            expected: clip.dims(),
            actual: (k.width, k.height),
        });
    }
    let cloud = unproject(
        &clip.frames[source_frame_index],
        &clip.depths[source_frame_index],
        &clip.trajectory.intrinsics,
        &clip.trajectory.poses[source_frame_index],
    )?;
    let warp_all = || -> Vec<WarpFrame> {
        target
            .poses
            .par_iter()
            .map(|p| forward_splat_with(&cloud, p, &k, opts.footprint))
            .collect()
    };
    let frames = if opts.jobs == 0 {
        warp_all()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(warp_all)
    };
    Ok(WarpVideo {
        frames,
        source_frame_index,
        trajectory: target.clone(),
    })
}

/// Fraction of pixels without a valid warp sample.
pub fn invisible_ratio(mask: &Mask) -> f64 {
    if mask.data.is_empty() {
        return 0.0;
    }
    1.0 - mask.fraction()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceDiagnostics {
    pub inv_ratio_mean: f64,
    pub inv_ratio_max: f64,
    pub rot_mean_deg: f64,
    pub rot_max_deg: f64,
    pub trans_dir_angle_mean_deg: f64,
    /// Mean foreground-centroid displacement per frame over the image diagonal.
    pub fg_motion: f64,
    /// Mean foreground area fraction.
    pub fg_area_mean: f64,
}

impl SourceDiagnostics {
    pub const COLUMNS: [&'static str; 7] = [
        "inv_mean",
        "inv_max",
        "rot_mean_deg",
        "rot_max_deg",
        "trans_dir_angle_mean_deg",
        "fg_motion",
        "fg_area_mean",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.inv_ratio_mean,
            self.inv_ratio_max,
            self.rot_mean_deg,
            self.rot_max_deg,
            self.trans_dir_angle_mean_deg,
            self.fg_motion,
            self.fg_area_mean,
        ]
    }
}

/// Profiles a candidate training clip: invisible ratios from warping frame
/// 0 through the clip's own cameras (frames `1..T`), camera rotation and
/// heading statistics, and foreground motion and area.
pub fn source_diagnostics(clip: &ClipRecord) -> Result<SourceDiagnostics> {
    if clip.len() < 2 {
        return Err(Error::InvalidArgument("source diagnostics need at least 2 frames".into()));
    }
    let warp = build_warp_video(clip, &clip.trajectory, 0)?;
    let inv: Vec<f64> = warp.frames[1..].iter().map(|f| invisible_ratio(&f.valid)).collect();
    let td = trajectory_diagnostics(&clip.trajectory);
    let fg_area_mean =
        clip.fg_masks.iter().map(Mask::fraction).sum::<f64>() / clip.fg_masks.len() as f64;
    Ok(SourceDiagnostics {
        inv_ratio_mean: inv.iter().sum::<f64>() / inv.len() as f64,
        inv_ratio_max: inv.iter().cloned().fold(0.0, f64::max),
        rot_mean_deg: td.rot_mean_deg,
        rot_max_deg: td.rot_max_deg,
        trans_dir_angle_mean_deg: td.trans_dir_angle_mean_deg,
        fg_motion: foreground_motion(&clip.fg_masks),
        fg_area_mean,
    })
}
