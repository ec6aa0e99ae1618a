use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wah_core::camera::{
    align_sim3, make_primitive_trajectory, rot_axis_angle, rotation_geodesic_deg, Intrinsics, Pose, Trajectory,
    TrajectoryKind,
};
use wah_core::image::Image;
use wah_core::metrics::{estimate_pose_photometric, estimate_trajectory, trajectory_errors, PoseSearch};
use wah_core::synth::{generate_scene, make_clip, render};

fn random_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 {
            return v.normalize();
        }
    }
}

#[test]
fn geodesic_angle_is_exact_on_axis_angle_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let base = rot_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..180.0));
        let angle = rng.random_range(0.0..179.0);
        let other = base * rot_axis_angle(&random_axis(&mut rng), angle);
        let got = rotation_geodesic_deg(&base, &other);
        assert!((got - angle).abs() <= 1e-6, "{got} vs {angle}");
    }
}

#[test]
fn alignment_recovers_synthetic_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = Intrinsics::default_for(32, 32);
    for _ in 0..50 {
        let gt: Vec<Pose> = (0..10)
            .map(|_| {
                let c = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                Pose::from_center(rot_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..90.0)), c)
            })
            .collect();
        let s: f64 = rng.random_range(0.2..5.0);
        let q: Matrix3<f64> = rot_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..180.0));
        let t = Vector3::new(rng.random_range(-3.0..3.0), 1.0, -2.0);
        // est = inverse similarity of gt, so aligning est onto gt recovers (s, q, t)
        let est: Vec<Pose> = gt
            .iter()
            .map(|p| Pose::from_center(q.transpose() * p.rotation.transpose(), q.transpose() * (p.center() - t) / s))
            .collect();
        let (scale, tr) = align_sim3(&Trajectory::new(est.clone(), k), &Trajectory::new(gt.clone(), k)).unwrap();
        assert!((scale - s).abs() <= 1e-6);
        assert!((tr.rotation - q).abs().max() <= 1e-6);
        assert!((tr.translation - t).abs().max() <= 1e-6);
        let e = trajectory_errors(&Trajectory::new(est, k), &Trajectory::new(gt, k)).unwrap();
        assert!(e.r_err_deg <= 1e-6 && e.t_err <= 1e-6, "{} {}", e.r_err_deg, e.t_err);
    }
}

fn self_consistency(kind: TrajectoryKind, magnitude: f64, seed: u64) -> (f64, f64) {
    let k = Intrinsics::default_for(32, 32);
    let traj = make_primitive_trajectory(kind, 33, magnitude, k).unwrap();
    let clip = make_clip(&generate_scene(seed), &traj);
    let idx: Vec<usize> = (1..33).collect();
    let scene = clip.scene.as_ref().unwrap();
    let (est, searches) =
        estimate_trajectory(&clip.frames[1..], scene, &k, &traj.poses[0], &idx, &PoseSearch::default()).unwrap();
    assert!(searches.iter().all(|s| s.iterations <= 200));
    let e = trajectory_errors(&est, &traj).unwrap();
    (e.r_err_deg, e.t_err)
}

#[test]
fn pose_search_is_self_consistent_on_noiseless_renders() {
    for (i, (kind, mag)) in [
        (TrajectoryKind::PanRight, 20.0),
        (TrajectoryKind::TiltDown, 12.0),
        (TrajectoryKind::Orbit, 20.0),
        (TrajectoryKind::DollyIn, 1.0),
        (TrajectoryKind::TruckLeft, 0.6),
    ]
    .into_iter()
    .enumerate()
    {
        let (r, t) = self_consistency(kind, mag, 40 + i as u64);
        assert!(r < 0.5 && t < 0.01, "{kind}: r_err {r} t_err {t}");
    }
}

#[test]
fn pose_search_tolerates_pixel_noise() {
    let k = Intrinsics::default_for(32, 32);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = generate_scene(100 + seed);
        let truth = Pose::from_center(
            rot_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..6.0)),
            Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
        );
        let init = Pose::from_center(
            truth.rotation.transpose() * rot_axis_angle(&random_axis(&mut rng), 1.0),
            truth.center() + 0.03 * random_axis(&mut rng),
        );
        let clean = render(&scene, &truth, &k, 0).0;
        let noisy = Image {
            data: clean.data.iter().map(|v| v + 0.01 * rng.sample::<f32, _>(StandardNormal)).collect(),
            ..clean
        };
        let e = estimate_pose_photometric(&noisy, &scene, &k, &init, 0, &PoseSearch::default()).unwrap();
        let err = rotation_geodesic_deg(&e.pose.rotation, &truth.rotation);
        assert!(err < 0.5, "seed {seed}: {err} deg");
    }
}
