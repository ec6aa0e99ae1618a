//! Image quality, camera adherence and runtime measurement.

mod pose;
mod profile;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::Trajectory;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::synth::Scene;

pub use pose::{
    estimate_pose_photometric, estimate_trajectory, trajectory_errors, PoseEstimate, PoseSearch, TrajectoryErrors,
};
pub use profile::{profile_chunk, regime_masks, ProfileRegime, RuntimeProfile, TokenCounts};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Masked metrics are undefined below this share of valid pixels.
pub const MIN_VALID_FRACTION: f64 = 0.01;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ResolutionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    if let Some(m) = mask {
        if m.dims() != a.dims() {
            return Err(Error::ResolutionMismatch {
                expected: a.dims(),
                actual: m.dims(),
            });
        }
    }
    Ok(())
}

fn enough_valid(mask: Option<&Mask>) -> bool {
    mask.is_none_or(|m| m.count() > 0 && m.fraction() >= MIN_VALID_FRACTION)
}

/// `10·log10(1/MSE)` over all pixels, or over mask-valid pixels; `None`
/// when the mask leaves under 1% of the frame.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<Option<f64>> {
    check_pair(a, b, mask)?;
    if !enough_valid(mask) {
        return Ok(None);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (pa, pb)) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m.data[i]) {
            continue;
        }
        for c in 0..3 {
            let d = f64::from(pa[c]) - f64::from(pb[c]);
            sum += d * d;
        }
        n += 3;
    }
    let mse = sum / n as f64;
    Ok(Some(if mse <= 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) }))
}

/// Mean SSIM over 8×8 windows at stride 1, per channel with uniform
/// weights. With a mask, statistics use the valid pixels of windows that are
/// at least half valid; `None` when no window qualifies.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<Option<f64>> {
    check_pair(a, b, mask)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW || !enough_valid(mask) {
        return Ok(None);
    }
    let valid = |x: usize, y: usize| mask.is_none_or(|m| m.get(x, y));
    let (mut total, mut windows) = (0.0, 0usize);
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let pixels: Vec<(usize, usize)> = (y0..y0 + SSIM_WINDOW)
                .flat_map(|y| (x0..x0 + SSIM_WINDOW).map(move |x| (x, y)))
                .filter(|&(x, y)| valid(x, y))
                .collect();
            if 2 * pixels.len() < SSIM_WINDOW * SSIM_WINDOW {
                continue;
            }
            let n = pixels.len() as f64;
            let mut score = 0.0;
            for c in 0..3 {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for &(x, y) in &pixels {
                    let va = f64::from(a.pixel(x, y)[c]);
                    let vb = f64::from(b.pixel(x, y)[c]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                score += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
            total += score / 3.0;
            windows += 1;
        }
    }
    Ok((windows > 0).then(|| (total / windows as f64).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub vis_psnr_db: Option<f64>,
    pub vis_ssim: Option<f64>,
    pub rot_err_deg: f64,
    pub pos_err: f64,
}

/// Scores of one generated chunk. `None` marks a masked metric that is
/// undefined for lack of valid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub vis_psnr_db: Option<f64>,
    pub vis_ssim: Option<f64>,
    pub r_err_deg: f64,
    pub t_err: f64,
    /// Set when the reference path has zero length and `t_err` is the raw
    /// mean position error.
    pub t_err_unnormalized: bool,
    /// Frames whose pose search hit its iteration cap.
    pub unconverged_frames: usize,
    pub frames: Vec<FrameMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores generated frames against the reference render and estimates the
/// camera of each frame from the scene.
///
/// `commanded` holds the source camera followed by one camera per generated
/// frame; `frame_indices` gives each generated frame's clip time, which
/// places the moving sprite. Pose search for frame `j` starts from the
/// estimate for frame `j − 1`, and the source camera anchors both paths.
pub fn score_chunk(
    generated: &[Image],
    reference: &[Image],
    valid: &[Mask],
    scene: &Scene,
    commanded: &Trajectory,
    frame_indices: &[usize],
    search: &PoseSearch,
) -> Result<MetricsReport> {
    let n = generated.len();
    for (len, what) in [(reference.len(), n), (valid.len(), n), (frame_indices.len(), n), (commanded.len(), n + 1)] {
        if len != what {
            return Err(Error::LengthMismatch {
                expected: what,
                actual: len,
            });
        }
    }
    let (estimated, searches) =
        estimate_trajectory(generated, scene, &commanded.intrinsics, &commanded.poses[0], frame_indices, search)?;
    let errors = trajectory_errors(&estimated, commanded)?;
    let frames = (0..n)
        .map(|j| {
            Ok(FrameMetrics {
                psnr_db: psnr(&generated[j], &reference[j], None)?.unwrap_or(f64::NAN),
                ssim: ssim(&generated[j], &reference[j], None)?.unwrap_or(f64::NAN),
                vis_psnr_db: psnr(&generated[j], &reference[j], Some(&valid[j]))?,
                vis_ssim: ssim(&generated[j], &reference[j], Some(&valid[j]))?,
                rot_err_deg: errors.rot_err_deg[j + 1],
                pos_err: errors.pos_err[j + 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n.max(1) as f64;
    Ok(MetricsReport {
        psnr_db: mean(&|f| f.psnr_db),
        ssim: mean(&|f| f.ssim),
        vis_psnr_db: mean_defined(frames.iter().map(|f| f.vis_psnr_db)),
        vis_ssim: mean_defined(frames.iter().map(|f| f.vis_ssim)),
        r_err_deg: errors.r_err_deg,
        t_err: errors.t_err,
        t_err_unnormalized: errors.unnormalized,
        unconverged_frames: searches.iter().filter(|s| !s.converged).count(),
        frames,
    })
}

/// Column order of the per-clip CSV.
pub const REPORT_COLUMNS: [&str; 8] =
    ["clip", "r_err_deg", "t_err", "psnr_db", "ssim", "vis_psnr_db", "vis_ssim", "unconverged_frames"];

/// Text written for an undefined metric.
pub const UNDEFINED: &str = "undefined";

pub fn fmt_metric(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.6}"))
}

/// One CSV row per clip in [`REPORT_COLUMNS`] order.
pub fn write_reports_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for (clip, r) in rows {
        w.write_record([
            clip.clone(),
            fmt_metric(Some(r.r_err_deg)),
            fmt_metric(Some(r.t_err)),
            fmt_metric(Some(r.psnr_db)),
            fmt_metric(Some(r.ssim)),
            fmt_metric(r.vis_psnr_db),
            fmt_metric(r.vis_ssim),
            r.unconverged_frames.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    clip: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

/// JSON document with per-frame arrays for every clip.
pub fn write_reports_json(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    let docs: Vec<ReportDoc> = rows.iter().map(|(clip, report)| ReportDoc { clip, report }).collect();
    fs::write(path, serde_json::to_string_pretty(&docs)?).map_err(|e| Error::io(path, e))
}

/// Renders `scene` for every pose of `trajectory`, frame `i` at clip time
/// `frame_indices[i]`.
pub fn render_reference(scene: &Scene, trajectory: &Trajectory, frame_indices: &[usize]) -> Vec<Image> {
    trajectory
        .poses
        .iter()
        .zip(frame_indices)
        .map(|(p, &i)| crate::synth::render(scene, p, &trajectory.intrinsics, i).0)
        .collect()
}

/// Mean squared error between two equally sized images.
pub(crate) fn mse(a: &Image, b: &Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / a.data.len().max(1) as f64
}
