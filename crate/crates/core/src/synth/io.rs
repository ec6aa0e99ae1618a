use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClipRecord, Scene};
use crate::camera::{parse_trajectory_text, serialize_trajectory};
use crate::error::{Error, Result};
use crate::image::{read_depth_video, write_depth_video, Image, Mask};

pub const CLIP_MANIFEST: &str = "clip.json";
const CLIP_FORMAT: &str = "wah-clip";
const CLIP_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipManifest {
    format: String,
    version: u32,
    width: usize,
    height: usize,
    frame_count: usize,
    scene_seed: u64,
    frames: Vec<String>,
    masks: Vec<String>,
    depth: String,
    trajectory: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene: Option<Scene>,
}

/// Writes `frame_NNN.ppm`, `fg_NNN.pgm`, `depth.wahd`, `trajectory.txt` and
/// the `clip.json` manifest into `dir`.
pub fn write_clip(clip: &ClipRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (width, height) = clip.dims();
    let n = clip.len();
    let frames: Vec<String> = (0..n).map(|i| format!("frame_{i:03}.ppm")).collect();
    let masks: Vec<String> = (0..n).map(|i| format!("fg_{i:03}.pgm")).collect();
    for (img, name) in clip.frames.iter().zip(&frames) {
        img.write_ppm(&dir.join(name))?;
    }
    for (m, name) in clip.fg_masks.iter().zip(&masks) {
        m.write_pgm(&dir.join(name))?;
    }
    write_depth_video(&dir.join("depth.wahd"), &clip.depths)?;
    let traj_path = dir.join("trajectory.txt");
    fs::write(&traj_path, serialize_trajectory(&clip.trajectory)).map_err(|e| Error::io(&traj_path, e))?;
    let manifest = ClipManifest {
        format: CLIP_FORMAT.into(),
        version: CLIP_VERSION,
        width,
        height,
        frame_count: n,
        scene_seed: clip.scene_seed,
        frames,
        masks,
        depth: "depth.wahd".into(),
        trajectory: "trajectory.txt".into(),
        scene: clip.scene.clone(),
    };
    let path = dir.join(CLIP_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_clip(dir: &Path) -> Result<ClipRecord> {
    let path = dir.join(CLIP_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ClipManifest = serde_json::from_str(&text)?;
    if m.format != CLIP_FORMAT || m.version != CLIP_VERSION {
        return Err(Error::format(
            &path,
            0,
            format!("unsupported clip format {} v{}", m.format, m.version),
        ));
    }
    if m.frames.len() != m.frame_count || m.masks.len() != m.frame_count {
        return Err(Error::format(&path, 0, "frame/mask list length disagrees with frame_count"));
    }
    let frames = m
        .frames
        .iter()
        .map(|f| Image::read_ppm(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let fg_masks = m
        .masks
        .iter()
        .map(|f| Mask::read_pgm(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let depth_path = dir.join(&m.depth);
    let depths = read_depth_video(&depth_path)?;
    if depths.len() != m.frame_count {
        return Err(Error::format(
            &depth_path,
            12,
            format!("expected {} depth frames, found {}", m.frame_count, depths.len()),
        ));
    }
    let traj_path = dir.join(&m.trajectory);
    let traj_text = fs::read_to_string(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
    let trajectory = parse_trajectory_text(&traj_text, m.width, m.height)?;
    if trajectory.len() != m.frame_count {
        return Err(Error::LengthMismatch {
            expected: m.frame_count,
            actual: trajectory.len(),
        });
    }
    for dims in frames
        .iter()
        .map(Image::dims)
        .chain(fg_masks.iter().map(Mask::dims))
        .chain(depths.iter().map(|d| d.dims()))
    {
        if dims != (m.width, m.height) {
            return Err(Error::ResolutionMismatch {
                expected: (m.width, m.height),
                actual: dims,
            });
        }
    }
    Ok(ClipRecord {
        frames,
        depths,
        fg_masks,
        trajectory,
        scene_seed: m.scene_seed,
        scene: m.scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_primitive_trajectory, Intrinsics, TrajectoryKind};
    use crate::synth::{generate_scene, make_clip};

    #[test]
    fn clip_round_trip() {
        let k = Intrinsics::default_for(24, 16);
        let t = make_primitive_trajectory(TrajectoryKind::Orbit, 4, 6.0, k).unwrap();
        let clip = make_clip(&generate_scene(12), &t);
        let dir = tempfile::tempdir().unwrap();
        write_clip(&clip, dir.path()).unwrap();
        let back = read_clip(dir.path()).unwrap();
        assert_eq!(back.frames, clip.frames);
        assert_eq!(back.fg_masks, clip.fg_masks);
        assert_eq!(back.depths, clip.depths);
        assert_eq!(back.scene, clip.scene);
        for (a, b) in back.trajectory.poses.iter().zip(&clip.trajectory.poses) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
    }

    #[test]
    fn truncated_depth_is_format_violation() {
        let k = Intrinsics::default_for(8, 8);
        let t = make_primitive_trajectory(TrajectoryKind::TruckLeft, 2, 0.2, k).unwrap();
        let clip = make_clip(&generate_scene(1), &t);
        let dir = tempfile::tempdir().unwrap();
        write_clip(&clip, dir.path()).unwrap();
        let p = dir.path().join("depth.wahd");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match read_clip(dir.path()) {
            Err(Error::FormatViolation { reason, .. }) => {
                assert!(reason.contains("expected 528 bytes, found 524"), "{reason}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
