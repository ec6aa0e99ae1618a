use nalgebra::Vector3;
use proptest::prelude::*;
use wah_core::camera::{make_primitive_trajectory, rot_x, rot_y, Intrinsics, Pose, Trajectory, TrajectoryKind};
use wah_core::image::{DepthMap, Image, Mask};
use wah_core::synth::{generate_scene, generate_scene_with, make_clip, SceneOptions, SpriteMode};
use wah_core::warp::{build_warp_video, forward_splat, invisible_ratio, unproject, PointCloud, WarpFrame};

/// Quadratic reference: for every target pixel, scan every point.
fn brute_force_splat(cloud: &PointCloud, target: &Pose, k: &Intrinsics) -> WarpFrame {
    let (w, h) = (k.width, k.height);
    let mut rgb = Image::new(w, h);
    let mut valid = Mask::new(w, h, false);
    for py in 0..h {
        for px in 0..w {
            let hits: Vec<(f64, usize)> = cloud
                .points
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let c = target.transform_point(p);
                    if c.z <= 1e-6 {
                        return None;
                    }
                    let (u, v) = k.project(&c);
                    (u.floor() == px as f64 && v.floor() == py as f64).then_some((c.z, i))
                })
                .collect();
            let zmin = hits.iter().map(|h| h.0).fold(f64::INFINITY, f64::min);
            let best = hits.iter().filter(|h| h.0 <= zmin + 1e-12).min_by_key(|h| h.1);
            if let Some(&(_, i)) = best {
                rgb.set_pixel(px, py, cloud.colors[i]);
                valid.set(px, py, true);
            }
        }
    }
    WarpFrame { rgb, valid }
}

fn random_target(seed: u64) -> Pose {
    let f = |k: u64| ((seed.wrapping_mul(2654435761).wrapping_add(k * 97)) % 1000) as f64 / 1000.0 - 0.5;
    Pose::from_center(rot_y(f(1) * 16.0) * rot_x(f(2) * 10.0), Vector3::new(f(3) * 0.6, f(4) * 0.4, f(5) * 0.8))
}

#[test]
fn splat_matches_brute_force_oracle() {
    for seed in 0..60u64 {
        let n = 16 + (seed as usize % 17);
        let k = Intrinsics::default_for(n, n);
        let scene = generate_scene(seed);
        let source = random_target(seed + 1000);
        let clip = make_clip(&scene, &Trajectory::new(vec![source], k));
        let cloud = unproject(&clip.frames[0], &clip.depths[0], &k, &source).unwrap();
        let target = random_target(seed);
        let fast = forward_splat(&cloud, &target, &k);
        let slow = brute_force_splat(&cloud, &target, &k);
        assert_eq!(fast, slow, "seed {seed} size {n}");
    }
}

#[test]
fn near_plane_fully_occludes_far_plane() {
    let k = Intrinsics::default_for(12, 12);
    let near = 2.0f32;
    let mut depth = DepthMap::new(12, 12);
    depth.data.iter_mut().for_each(|z| *z = near);
    let cloud_near = unproject(&Image::filled(12, 12, [0.2, 0.9, 0.1]), &depth, &k, &Pose::identity()).unwrap();
    depth.data.iter_mut().for_each(|z| *z = 5.0);
    let cloud_far = unproject(&Image::filled(12, 12, [0.8, 0.1, 0.7]), &depth, &k, &Pose::identity()).unwrap();
    // far plane first so it would win any tie-break
    let cloud = PointCloud {
        points: cloud_far.points.iter().chain(&cloud_near.points).cloned().collect(),
        colors: cloud_far.colors.iter().chain(&cloud_near.colors).cloned().collect(),
    };
    let wf = forward_splat(&cloud, &Pose::identity(), &k);
    assert_eq!(wf.valid.count(), 144);
    assert!(wf.rgb.data.chunks(3).all(|c| c == [0.2, 0.9, 0.1]));
}

#[test]
fn dolly_in_disocclusion_is_monotone() {
    for seed in 0..10u64 {
        let k = Intrinsics::default_for(32, 32);
        let scene = generate_scene_with(seed, &SceneOptions { sprite: SpriteMode::Static });
        let traj = make_primitive_trajectory(TrajectoryKind::DollyIn, 12, 1.0, k).unwrap();
        let clip = make_clip(&scene, &traj);
        let warp = build_warp_video(&clip, &traj, 0).unwrap();
        let inv: Vec<f64> = warp.frames.iter().map(|f| invisible_ratio(&f.valid)).collect();
        for w in inv.windows(2) {
            assert!(w[1] >= w[0] - 0.01, "seed {seed}: {inv:?}");
        }
    }
}

#[test]
fn pan_warp_has_chunk_length() {
    let k = Intrinsics::default_for(16, 16);
    let traj = make_primitive_trajectory(TrajectoryKind::PanLeft, 33, 10.0, k).unwrap();
    let clip = make_clip(&generate_scene(0), &traj);
    assert_eq!(build_warp_video(&clip, &traj, 0).unwrap().len(), 33);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_warp_exact(seed in 0u64..10_000, w in 4usize..40, h in 4usize..40) {
        let k = Intrinsics::default_for(w, h);
        let cam = random_target(seed);
        let clip = make_clip(&generate_scene(seed), &Trajectory::new(vec![cam], k));
        let cloud = unproject(&clip.frames[0], &clip.depths[0], &k, &cam).unwrap();
        let wf = forward_splat(&cloud, &cam, &k);
        prop_assert_eq!(&wf.rgb, &clip.frames[0]);
        prop_assert_eq!(wf.valid.count(), w * h);
    }

    #[test]
    fn frame_order_independent(seed in 0u64..10_000) {
        let k = Intrinsics::default_for(20, 14);
        let traj = make_primitive_trajectory(TrajectoryKind::Orbit, 6, 12.0, k).unwrap();
        let clip = make_clip(&generate_scene(seed), &traj);
        let fwd = build_warp_video(&clip, &traj, 0).unwrap();
        let rev_idx: Vec<usize> = (0..6).rev().collect();
        let rev = build_warp_video(&clip, &traj.select(&rev_idx), 0).unwrap();
        for (a, b) in fwd.frames.iter().zip(rev.frames.iter().rev()) {
            prop_assert_eq!(a, b);
        }
    }
}
