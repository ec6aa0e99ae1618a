//! Procedural layered worlds with exact depth, foreground masks and camera
//! paths. Every scene is a stack of fronto-parallel (in world space)
//! textured planes with seeded cut-out coverage, optionally fronted by a
//! moving textured disk.

mod io;
pub mod noise;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose, Trajectory};
use crate::image::{DepthMap, Image, Mask};
use noise::fractal_noise;

pub use io::{read_clip, write_clip, CLIP_MANIFEST};

/// Depth reported for rays that hit nothing (never happens for cameras
/// looking into the scene).
pub const FAR_DEPTH: f32 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub seed: u64,
    /// Size of one noise cell, world units.
    pub cell: f64,
    /// Opaque where the noise exceeds this value.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// World z of the plane.
    pub depth: f64,
    pub texture_seed: u64,
    pub base_color: [f32; 3],
    /// Texture cell size, world units.
    pub cell: f64,
    /// `None` for the opaque backdrop.
    pub coverage: Option<Coverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub depth: f64,
    /// World xy of the disk centre at frame 0.
    pub center: [f64; 2],
    /// World xy displacement per frame.
    pub velocity: [f64; 2],
    pub radius: f64,
    pub texture_seed: u64,
    pub base_color: [f32; 3],
}

impl Sprite {
    pub fn center_at(&self, frame_index: usize) -> [f64; 2] {
        let f = frame_index as f64;
        [
            self.center[0] + self.velocity[0] * f,
            self.center[1] + self.velocity[1] * f,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub layers: Vec<Layer>,
    pub sprite: Option<Sprite>,
    pub background_color: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteMode {
    None,
    Static,
    #[default]
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneOptions {
    pub sprite: SpriteMode,
}

pub fn generate_scene(seed: u64) -> Scene {
    generate_scene_with(seed, &SceneOptions::default())
}

pub fn generate_scene_with(seed: u64, opts: &SceneOptions) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(noise::mix64(seed ^ 0x5EED_5CE4E));
    let layer_count = rng.random_range(3..=5usize);
    let mut depth = rng.random_range(2.0..3.0);
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let backdrop = i + 1 == layer_count;
        layers.push(Layer {
            depth,
            texture_seed: rng.random(),
            base_color: random_color(&mut rng),
            cell: depth * rng.random_range(0.18..0.28),
            coverage: (!backdrop).then(|| Coverage {
                seed: rng.random(),
                cell: depth * rng.random_range(0.35..0.55),
                threshold: rng.random_range(0.45..0.6),
            }),
        });
        depth += rng.random_range(1.2..2.5);
    }
    let sprite = match opts.sprite {
        SpriteMode::None => None,
        mode => {
            let z = rng.random_range(1.3..(layers[0].depth - 0.3));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = if mode == SpriteMode::Moving {
                z * rng.random_range(0.004..0.009)
            } else {
                0.0
            };
            Some(Sprite {
                depth: z,
                center: [
                    z * rng.random_range(-0.2..0.2),
                    z * rng.random_range(-0.2..0.2),
                ],
                velocity: [speed * angle.cos(), speed * angle.sin()],
                radius: z * rng.random_range(0.1..0.16),
                texture_seed: rng.random(),
                base_color: random_color(&mut rng),
            })
        }
    };
    Scene {
        seed,
        layers,
        sprite,
        background_color: random_color(&mut rng),
    }
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
    ]
}

fn texture(seed: u64, base: &[f32; 3], cell: f64, x: f64, y: f64) -> [f32; 3] {
    let (u, v) = (x / cell, y / cell);
    let lum = fractal_noise(seed, u, v, 3) - 0.5;
    let mut out = [0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let chroma = fractal_noise(seed.wrapping_add(101 + c as u64), u * 0.7, v * 0.7, 3) - 0.5;
        *o = (f64::from(base[c]) + 1.6 * lum + 0.5 * chroma).clamp(0.0, 1.0) as f32;
    }
    out
}

impl Scene {
    pub fn validate(&self) -> bool {
        let n = self.layers.len();
        let increasing = self.layers.windows(2).all(|w| w[0].depth < w[1].depth);
        let sprite_ok = match (&self.sprite, self.layers.first()) {
            (Some(s), Some(l)) => s.depth > 0.0 && s.depth < l.depth,
            _ => true,
        };
        (2..=6).contains(&n) && increasing && sprite_ok && self.layers[0].depth > 0.0
    }

    /// Traces one ray (world origin + direction). Returns colour, camera
    /// depth scale `λ` along the ray, and whether the sprite was hit.
    fn trace(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        frame_index: usize,
    ) -> Option<([f32; 3], f64, bool)> {
        if dir.z <= 1e-12 {
            return None;
        }
        let hit_plane = |z: f64| -> Option<(f64, f64, f64)> {
            let lambda = (z - origin.z) / dir.z;
            (lambda > 1e-9).then(|| (lambda, origin.x + lambda * dir.x, origin.y + lambda * dir.y))
        };
        if let Some(s) = &self.sprite {
            if let Some((lambda, x, y)) = hit_plane(s.depth) {
                let c = s.center_at(frame_index);
                let (dx, dy) = (x - c[0], y - c[1]);
                if dx * dx + dy * dy <= s.radius * s.radius {
                    let col = texture(s.texture_seed, &s.base_color, s.radius * 0.6, dx, dy);
                    return Some((col, lambda, true));
                }
            }
        }
        for layer in &self.layers {
            let Some((lambda, x, y)) = hit_plane(layer.depth) else {
                continue;
            };
            let opaque = match &layer.coverage {
                None => true,
                Some(cov) => fractal_noise(cov.seed, x / cov.cell, y / cov.cell, 2) > cov.threshold,
            };
            if opaque {
                return Some((texture(layer.texture_seed, &layer.base_color, layer.cell, x, y), lambda, false));
            }
        }
        None
    }
}

/// Renders `scene` from a camera-from-world pose. Pixel `(u, v)` samples
/// the ray through `(u + 0.5, v + 0.5)`; colours are quantized to 8-bit
/// levels and depth is the camera-space z of the visible surface.
pub fn render(
    scene: &Scene,
    camera: &Pose,
    intrinsics: &Intrinsics,
    frame_index: usize,
) -> (Image, DepthMap, Mask) {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut frame = Image::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut fg = Mask::new(w, h, false);
    let world_from_cam = camera.rotation.transpose();
    let origin = camera.center();
    for v in 0..h {
        for u in 0..w {
            let d_cam = intrinsics.unproject(u as f64 + 0.5, v as f64 + 0.5, 1.0);
            let d_world = world_from_cam * d_cam;
            let i = v * w + u;
            match scene.trace(&origin, &d_world, frame_index) {
                Some((rgb, lambda, sprite)) => {
                    frame.set_pixel(u, v, rgb);
                    depth.data[i] = lambda as f32;
                    fg.data[i] = sprite;
                }
                None => {
                    frame.set_pixel(u, v, scene.background_color);
                    depth.data[i] = FAR_DEPTH;
                }
            }
        }
    }
    frame.quantize_u8();
    (frame, depth, fg)
}

/// Rendered frames, depth and foreground masks along a camera path.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub frames: Vec<Image>,
    pub depths: Vec<DepthMap>,
    pub fg_masks: Vec<Mask>,
    pub trajectory: Trajectory,
    pub scene_seed: u64,
    /// The generating scene, when known.
    pub scene: Option<Scene>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map(Image::dims).unwrap_or((0, 0))
    }

    pub fn validate(&self) -> bool {
        let dims = self.dims();
        let n = self.frames.len();
        n >= 2
            && self.depths.len() == n
            && self.fg_masks.len() == n
            && self.trajectory.len() == n
            && self.frames.iter().all(|f| f.dims() == dims)
            && self.depths.iter().all(|d| d.dims() == dims)
            && self.fg_masks.iter().all(|m| m.dims() == dims)
            && self
                .depths
                .iter()
                .all(|d| d.data.iter().all(|&z| z.is_finite() && z > 0.0))
    }
}

/// Renders every pose of `trajectory`; frame `i` drives the sprite to its
/// `i`-th position.
pub fn make_clip(scene: &Scene, trajectory: &Trajectory) -> ClipRecord {
    let rendered: Vec<_> = trajectory
        .poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| render(scene, p, &trajectory.intrinsics, i))
        .collect();
    let mut frames = Vec::with_capacity(rendered.len());
    let mut depths = Vec::with_capacity(rendered.len());
    let mut fg_masks = Vec::with_capacity(rendered.len());
    for (f, d, m) in rendered {
        frames.push(f);
        depths.push(d);
        fg_masks.push(m);
    }
    ClipRecord {
        frames,
        depths,
        fg_masks,
        trajectory: trajectory.clone(),
        scene_seed: scene.seed,
        scene: Some(scene.clone()),
    }
}

/// Centroid of the set pixels in pixel units.
pub fn mask_centroid(mask: &Mask) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Mean per-frame displacement of the foreground centroid, divided by the
/// image diagonal. Frame pairs where either mask is empty are skipped.
pub fn foreground_motion(masks: &[Mask]) -> f64 {
    let Some(first) = masks.first() else {
        return 0.0;
    };
    let diag = ((first.width * first.width + first.height * first.height) as f64).sqrt();
    let centroids: Vec<_> = masks.iter().map(mask_centroid).collect();
    let steps: Vec<f64> = centroids
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => Some(((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt() / diag),
            _ => None,
        })
        .collect();
    if steps.is_empty() {
        0.0
    } else {
        steps.iter().sum::<f64>() / steps.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_primitive_trajectory, Intrinsics, TrajectoryKind};
    use rand::Rng;

    fn k() -> Intrinsics {
        Intrinsics::default_for(32, 32)
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        assert_eq!(generate_scene(42), generate_scene(42));
        assert_ne!(generate_scene(42), generate_scene(43));
        for seed in 0..100 {
            assert!(generate_scene(seed).validate(), "seed {seed}");
            let s = generate_scene_with(seed, &SceneOptions { sprite: SpriteMode::None });
            assert!(s.sprite.is_none() && s.validate());
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = generate_scene(3);
        let a = render(&s, &Pose::identity(), &k(), 0);
        let b = render(&s, &Pose::identity(), &k(), 0);
        assert_eq!(a, b);
        assert!(a.1.data.iter().all(|&z| z > 0.0 && z < FAR_DEPTH));
    }

    #[test]
    fn sprite_mask_matches_visibility() {
        let s = generate_scene(5);
        let sprite = s.sprite.clone().unwrap();
        let (_, depth, fg) = render(&s, &Pose::identity(), &k(), 0);
        assert!(fg.count() > 0);
        for (i, &m) in fg.data.iter().enumerate() {
            let at_sprite = (f64::from(depth.data[i]) - sprite.depth).abs() < 1e-4;
            assert_eq!(m, at_sprite);
        }
        let none = generate_scene_with(5, &SceneOptions { sprite: SpriteMode::None });
        let traj = make_primitive_trajectory(TrajectoryKind::PanLeft, 5, 8.0, k()).unwrap();
        assert!(make_clip(&none, &traj).fg_masks.iter().all(|m| m.count() == 0));
    }

    #[test]
    fn depth_reprojects_to_same_pixel() {
        let s = generate_scene(8);
        let kk = Intrinsics::default_for(48, 40);
        let cam = make_primitive_trajectory(TrajectoryKind::Orbit, 3, 10.0, kk).unwrap().poses[2];
        let (_, depth, _) = render(&s, &cam, &kk, 0);
        let mut r = crate::camera::test_util::rng(1);
        for _ in 0..1000 {
            let (u, v) = (r.random_range(0..48usize), r.random_range(0..40usize));
            let z = f64::from(depth.get(u, v));
            let p_cam = kk.unproject(u as f64 + 0.5, v as f64 + 0.5, z);
            let world = cam.inverse().transform_point(&p_cam);
            let (pu, pv) = kk.project(&cam.transform_point(&world));
            assert!((pu - (u as f64 + 0.5)).abs() < 0.5 && (pv - (v as f64 + 0.5)).abs() < 0.5);
        }
    }

    #[test]
    fn parallax_decreases_with_depth() {
        let s = generate_scene(11);
        let kk = k();
        let cam = Pose::from_center(nalgebra::Matrix3::identity(), Vector3::new(0.3, 0.0, 0.0));
        let mut prev = f64::INFINITY;
        for layer in &s.layers {
            let p = Vector3::new(0.1, -0.05, layer.depth);
            let (u0, _) = kk.project(&Pose::identity().transform_point(&p));
            let (u1, _) = kk.project(&cam.transform_point(&p));
            let shift = (u1 - u0).abs();
            assert!(shift < prev);
            prev = shift;
        }
        // the rendered depth of a pixel landing on each layer shifts by the same rule
        let (_, d0, _) = render(&s, &Pose::identity(), &kk, 0);
        assert!(d0.data.iter().any(|&z| (f64::from(z) - s.layers.last().unwrap().depth).abs() < 1e-3));
    }

    #[test]
    fn clip_invariants() {
        let s = generate_scene_with(2, &SceneOptions { sprite: SpriteMode::None });
        let still = Trajectory::constant(6, k());
        let clip = make_clip(&s, &still);
        assert!(clip.validate());
        assert!(clip.frames.windows(2).all(|w| w[0] == w[1]));
        let t = make_primitive_trajectory(TrajectoryKind::DollyIn, 33, 1.0, k()).unwrap();
        assert_eq!(make_clip(&s, &t).len(), 33);
    }

    #[test]
    fn moving_sprite_has_more_foreground_motion() {
        let t = Trajectory::constant(10, k());
        let moving = make_clip(&generate_scene_with(4, &SceneOptions { sprite: SpriteMode::Moving }), &t);
        let fixed = make_clip(&generate_scene_with(4, &SceneOptions { sprite: SpriteMode::Static }), &t);
        assert!(foreground_motion(&moving.fg_masks) > foreground_motion(&fixed.fg_masks));
        assert_eq!(foreground_motion(&fixed.fg_masks), 0.0);
    }
}
