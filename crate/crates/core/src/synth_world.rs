//! Deterministic synthetic scenes and camera trajectories.
//!
//! A scene is the inside of an axis-aligned room with optional box obstacles,
//! painted with seeded 3D value noise. Every camera ray is intersected in closed
//! form, so depth maps are exact and colors are sampled at the surface point that
//! defines the depth.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Z_MIN};
use crate::raster::{Grid, RgbImage};

/// Scene depths must stay within this range for every rendered pixel.
pub const MIN_SCENE_DEPTH: f64 = 0.5;
pub const MAX_SCENE_DEPTH: f64 = 100.0;

/// Relative depth disagreement above which a correspondence counts as occluded.
pub const OCCLUSION_REL_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    /// Entry distance of a ray hitting the box from outside.
    fn ray_entry(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 >= t0 && t0 > 0.0).then_some(t0)
    }

    /// Exit distance of a ray starting inside the box.
    fn ray_exit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
        let mut t = f64::INFINITY;
        for a in 0..3 {
            if d[a] > 0.0 {
                t = t.min((self.max[a] - o[a]) / d[a]);
            } else if d[a] < 0.0 {
                t = t.min((self.min[a] - o[a]) / d[a]);
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TextureSpec {
    /// Value noise summed over octaves; `cell_size` is the coarsest lattice spacing in meters.
    Noise {
        seed: u64,
        cell_size: f64,
        octaves: u32,
        contrast: f64,
    },
    Constant { rgb: [f32; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: Aabb,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
    pub texture: TextureSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: Aabb {
                min: [-6.0, -2.0, -6.0],
                max: [6.0, 2.0, 10.0],
            },
            obstacles: vec![
                Aabb {
                    min: [-3.5, -2.0, 5.0],
                    max: [-2.5, 2.0, 6.0],
                },
                Aabb {
                    min: [2.0, 0.5, 6.5],
                    max: [3.5, 2.0, 7.5],
                },
            ],
            texture: TextureSpec::Noise {
                seed: 7,
                cell_size: 0.8,
                octaves: 3,
                contrast: 0.45,
            },
        }
    }
}

/// A renderable scene. Pure data; every query is a pure function.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    spec: SceneSpec,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn with_constant_texture(mut self, rgb: [f32; 3]) -> Self {
        self.spec.texture = TextureSpec::Constant { rgb };
        self
    }

    /// Ray parameter of the first surface hit for a ray `o + t d`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        if !self.spec.room.contains(o) {
            return None;
        }
        let mut t = self.spec.room.ray_exit(o, d);
        for b in &self.spec.obstacles {
            if let Some(tb) = b.ray_entry(o, d) {
                t = t.min(tb);
            }
        }
        (t.is_finite() && t > 0.0).then_some(t)
    }

    /// Z-depth of the surface seen through `pixel` by a camera at `world_from_camera`.
    pub fn depth_at(&self, k: &CameraIntrinsics, world_from_camera: &Pose, pixel: &Vector2<f64>) -> Option<f64> {
        let d = world_from_camera.rotation * k.ray(pixel);
        self.intersect(&world_from_camera.translation, &d)
    }

    pub fn color_at(&self, p: &Vector3<f64>) -> [f32; 3] {
        match &self.spec.texture {
            TextureSpec::Constant { rgb } => *rgb,
            TextureSpec::Noise {
                seed,
                cell_size,
                octaves,
                contrast,
            } => {
                let mut rgb = [0f32; 3];
                for (c, out) in rgb.iter_mut().enumerate() {
                    let mut sum = 0.0;
                    let mut amp = 1.0;
                    let mut norm = 0.0;
                    let mut cell = *cell_size;
                    for o in 0..*octaves {
                        let s = seed.wrapping_mul(0x9E37_79B9).wrapping_add((c as u64) * 131 + o as u64);
                        sum += amp * value_noise(&(p / cell), s);
                        norm += amp;
                        amp *= 0.5;
                        cell *= 0.5;
                    }
                    *out = (0.5 + contrast * sum / norm).clamp(0.0, 1.0) as f32;
                }
                rgb
            }
        }
    }

    /// Renders color and z-depth for one camera pose.
    pub fn render(&self, k: &CameraIntrinsics, world_from_camera: &Pose) -> Option<(RgbImage, Grid<f64>)> {
        let mut depth = Grid::filled(k.width, k.height, 0.0);
        let mut image = RgbImage::filled(k.width, k.height, [0.0; 3]);
        for y in 0..k.height {
            for x in 0..k.width {
                let px = Vector2::new(x as f64, y as f64);
                let dir = world_from_camera.rotation * k.ray(&px);
                let t = self.intersect(&world_from_camera.translation, &dir)?;
                let hit = world_from_camera.translation + dir * t;
                *depth.get_mut(x, y) = t;
                *image.get_mut(x, y) = self.color_at(&hit);
            }
        }
        Some((image, depth))
    }

    /// Unsigned distance from a point to the nearest surface of the scene.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let room = &self.spec.room;
        let mut best = f64::INFINITY;
        for a in 0..3 {
            best = best.min((p[a] - room.min[a]).abs()).min((room.max[a] - p[a]).abs());
        }
        for b in &self.spec.obstacles {
            let mut outside = Vector3::zeros();
            let mut inside: f64 = f64::NEG_INFINITY;
            for a in 0..3 {
                let q = (b.min[a] - p[a]).max(p[a] - b.max[a]);
                outside[a] = q.max(0.0);
                inside = inside.max(q);
            }
            let sdf = outside.norm() + inside.min(0.0);
            best = best.min(sdf.abs());
        }
        best
    }
}

fn hash3(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (iz as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let (fx, fy, fz) = (quintic(p.x - f.x), quintic(p.y - f.y), quintic(p.z - f.z));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c = |dx: i64, dy: i64, dz: i64| hash3(ix + dx, iy + dy, iz + dz, seed);
    let x00 = lerp(c(0, 0, 0), c(1, 0, 0), fx);
    let x10 = lerp(c(0, 1, 0), c(1, 1, 0), fx);
    let x01 = lerp(c(0, 0, 1), c(1, 0, 1), fx);
    let x11 = lerp(c(0, 1, 1), c(1, 1, 1), fx);
    lerp(lerp(x00, x10, fy), lerp(x01, x11, fy), fz)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Straight,
    Arc,
    Orbit,
    Zigzag,
}

fn default_frame_interval() -> f64 {
    0.1
}

fn default_zigzag_period() -> usize {
    3
}

fn default_wobble_period() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Path length in meters.
    pub length: f64,
    pub n_frames: usize,
    #[serde(default)]
    pub start: [f64; 3],
    /// Initial yaw about the vertical axis, degrees. Zero looks down +z.
    #[serde(default)]
    pub heading_deg: f64,
    /// Arc: heading change per frame. Zigzag: half-angle between the two legs.
    #[serde(default)]
    pub turn_deg: f64,
    #[serde(default = "default_zigzag_period")]
    pub zigzag_period: usize,
    /// Orbit center; the camera circles it while looking at it.
    #[serde(default)]
    pub orbit_center: [f64; 3],
    /// Sinusoidal yaw oscillation on top of the heading, degrees.
    #[serde(default)]
    pub yaw_wobble_deg: f64,
    #[serde(default = "default_wobble_period")]
    pub wobble_period: usize,
    #[serde(default = "default_frame_interval")]
    pub frame_interval: f64,
}

impl TrajectorySpec {
    pub fn straight(length: f64, n_frames: usize) -> Self {
        Self {
            kind: TrajectoryKind::Straight,
            length,
            n_frames,
            start: [0.0; 3],
            heading_deg: 0.0,
            turn_deg: 0.0,
            zigzag_period: default_zigzag_period(),
            orbit_center: [0.0; 3],
            yaw_wobble_deg: 0.0,
            wobble_period: default_wobble_period(),
            frame_interval: default_frame_interval(),
        }
    }

    pub fn arc(length: f64, n_frames: usize, turn_deg: f64) -> Self {
        Self {
            kind: TrajectoryKind::Arc,
            turn_deg,
            ..Self::straight(length, n_frames)
        }
    }

    pub fn zigzag(length: f64, n_frames: usize, half_angle_deg: f64, period: usize) -> Self {
        Self {
            kind: TrajectoryKind::Zigzag,
            turn_deg: half_angle_deg,
            zigzag_period: period,
            ..Self::straight(length, n_frames)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::config("trajectory.n_frames", "need at least 2 frames"));
        }
        if !(self.length.is_finite() && self.length >= 0.0) {
            return Err(Error::config("trajectory.length", "must be finite and non-negative"));
        }
        if !(self.frame_interval > 0.0) {
            return Err(Error::config("trajectory.frame_interval", "must be positive"));
        }
        if self.kind == TrajectoryKind::Zigzag && self.zigzag_period == 0 {
            return Err(Error::config("trajectory.zigzag_period", "must be positive"));
        }
        Ok(())
    }

    /// Ground-truth `world_from_camera` poses.
    pub fn poses(&self) -> Vec<Pose> {
        let n = self.n_frames;
        let step = self.length / (n - 1) as f64;
        let h0 = self.heading_deg.to_radians();
        let turn = self.turn_deg.to_radians();
        let dir = |yaw: f64| Vector3::new(yaw.sin(), 0.0, yaw.cos());
        let yaw_rot = |yaw: f64| UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
        let wobble = |k: usize| {
            self.yaw_wobble_deg.to_radians()
                * (2.0 * std::f64::consts::PI * k as f64 / self.wobble_period.max(1) as f64).sin()
        };
        let start = Vector3::from(self.start);
        let mut out = Vec::with_capacity(n);
        match self.kind {
            TrajectoryKind::Straight => {
                for k in 0..n {
                    let p = start + dir(h0) * (step * k as f64);
                    out.push(Pose::new(yaw_rot(h0 + wobble(k)), p));
                }
            }
            TrajectoryKind::Arc => {
                let mut p = start;
                for k in 0..n {
                    let heading = h0 + turn * k as f64;
                    out.push(Pose::new(yaw_rot(heading), p));
                    p += dir(heading + turn / 2.0) * step;
                }
            }
            TrajectoryKind::Zigzag => {
                let mut p = start;
                for k in 0..n {
                    out.push(Pose::new(yaw_rot(h0 + wobble(k)), p));
                    let leg = if (k / self.zigzag_period).is_multiple_of(2) { 1.0 } else { -1.0 };
                    p += dir(h0 + leg * turn) * step;
                }
            }
            TrajectoryKind::Orbit => {
                let center = Vector3::from(self.orbit_center);
                let offset = start - center;
                let radius = Vector2::new(offset.x, offset.z).norm().max(1e-9);
                let phi0 = offset.x.atan2(offset.z);
                let dphi = step / radius;
                for k in 0..n {
                    let phi = phi0 + dphi * k as f64;
                    let p = Vector3::new(center.x + radius * phi.sin(), start.y, center.z + radius * phi.cos());
                    // look toward the center
                    let yaw = (center.x - p.x).atan2(center.z - p.z);
                    out.push(Pose::new(yaw_rot(yaw + wobble(k)), p));
                }
            }
        }
        out
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.n_frames).map(|k| k as f64 * self.frame_interval).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageNoise {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    #[serde(default)]
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraIntrinsics,
    /// Additive Gaussian sensor noise on the observed images.
    #[serde(default)]
    pub image_noise: Option<ImageNoise>,
}

pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 200.0,
        fy: 200.0,
        cx: 127.5,
        cy: 95.5,
        width: 256,
        height: 192,
    }
}

/// Ground truth plus observations for one camera run.
#[derive(Debug, Clone)]
pub struct Sequence {
    /// Present for generated sequences; loaded sequences answer depth queries from `depths`.
    pub scene: Option<Scene>,
    pub intrinsics: CameraIntrinsics,
    pub timestamps: Vec<f64>,
    /// Ground-truth `world_from_camera`.
    pub poses: Vec<Pose>,
    /// Noise-free renders.
    pub images: Vec<RgbImage>,
    /// What the odometry sees: renders plus sensor noise.
    pub observed: Vec<RgbImage>,
    pub depths: Vec<Grid<f64>>,
}

pub fn generate_sequence(spec: &SequenceSpec) -> Result<Sequence> {
    spec.trajectory.validate()?;
    spec.camera.validate()?;
    let scene = Scene::new(spec.scene.clone());
    let k = spec.camera;
    let poses = spec.trajectory.poses();
    let mut images = Vec::with_capacity(poses.len());
    let mut depths = Vec::with_capacity(poses.len());
    for (frame, pose) in poses.iter().enumerate() {
        let (img, depth) = scene.render(&k, pose).ok_or_else(|| Error::FrustumViolation {
            frame,
            x: 0,
            y: 0,
            reason: "camera outside the room or ray missed geometry".into(),
        })?;
        if let Some(i) = depth
            .iter()
            .position(|d| !(*d >= MIN_SCENE_DEPTH && *d <= MAX_SCENE_DEPTH))
        {
            let (x, y) = depth.coords(i);
            return Err(Error::FrustumViolation {
                frame,
                x,
                y,
                reason: format!("depth {:.3} m outside [{MIN_SCENE_DEPTH}, {MAX_SCENE_DEPTH}]", depth[i]),
            });
        }
        images.push(img);
        depths.push(depth);
    }
    let observed = match spec.image_noise {
        Some(noise) if noise.sigma > 0.0 => images
            .iter()
            .enumerate()
            .map(|(t, img)| add_sensor_noise(img, noise, t as u64))
            .collect(),
        _ => images.clone(),
    };
    Ok(Sequence {
        scene: Some(scene),
        intrinsics: k,
        timestamps: spec.trajectory.timestamps(),
        poses,
        images,
        observed,
        depths,
    })
}

fn add_sensor_noise(img: &RgbImage, noise: ImageNoise, frame: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ frame.wrapping_mul(0x2545_F491_4F6C_DD1D));
    let normal = Normal::new(0.0, noise.sigma).expect("sigma is finite");
    img.map(|c| {
        let mut out = *c;
        for v in &mut out {
            *v += normal.sample(&mut rng) as f32;
        }
        out
    })
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Ground-truth z-depth through a full-resolution pixel position of `frame`.
    pub fn depth_through(&self, frame: usize, pixel: &Vector2<f64>) -> Option<f64> {
        match &self.scene {
            Some(scene) => scene.depth_at(&self.intrinsics, &self.poses[frame], pixel),
            None => sample_depth(&self.depths[frame], pixel),
        }
    }

    /// Ground-truth depth on the optimization grid of a given downsample factor.
    pub fn depth_on_grid(&self, frame: usize, factor: usize) -> Grid<f64> {
        let g = self.intrinsics.downsampled(factor);
        Grid::from_fn(g.width, g.height, |x, y| {
            let full = CameraIntrinsics::grid_to_full(Vector2::new(x as f64, y as f64), factor);
            self.depth_through(frame, &full).unwrap_or(0.0)
        })
    }
}

fn sample_depth(depth: &Grid<f64>, p: &Vector2<f64>) -> Option<f64> {
    if !(p.x >= 0.0 && p.y >= 0.0) || p.x > (depth.width() - 1) as f64 || p.y > (depth.height() - 1) as f64 {
        return None;
    }
    let x0 = (p.x.floor() as usize).min(depth.width().saturating_sub(2));
    let y0 = (p.y.floor() as usize).min(depth.height().saturating_sub(2));
    let (fx, fy) = (p.x - x0 as f64, p.y - y0 as f64);
    let x1 = (x0 + 1).min(depth.width() - 1);
    let y1 = (y0 + 1).min(depth.height() - 1);
    let v = [*depth.get(x0, y0), *depth.get(x1, y0), *depth.get(x0, y1), *depth.get(x1, y1)];
    if v.iter().any(|d| !(*d > 0.0)) {
        return None;
    }
    Some(v[0] * (1.0 - fx) * (1.0 - fy) + v[1] * fx * (1.0 - fy) + v[2] * (1.0 - fx) * fy + v[3] * fx * fy)
}

/// Exact correspondences of frame i's grid pixels in frame j.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub coords: Grid<Vector2<f64>>,
    pub visible: Grid<bool>,
}

/// Ground-truth pixel mapping from frame `i` to frame `j` on the grid of `factor`.
///
/// A pixel is visible when its point lands in front of camera j, inside the image,
/// and agrees within 1% with the depth camera j sees along that ray.
pub fn gt_correspondence(seq: &Sequence, i: usize, j: usize, factor: usize) -> Correspondence {
    let k = seq.intrinsics;
    let g = k.downsampled(factor);
    let j_from_i = crate::geometry::relative_pose(&seq.poses[i], &seq.poses[j]);
    let mut visible = Grid::filled(g.width, g.height, false);
    let coords = Grid::from_fn(g.width, g.height, |x, y| {
        let px = Vector2::new(x as f64, y as f64);
        let full = CameraIntrinsics::grid_to_full(px, factor);
        let Some(d) = seq.depth_through(i, &full) else {
            return px;
        };
        let pj = j_from_i.transform_point(&(k.ray(&full) * d));
        if pj.z <= Z_MIN {
            return px;
        }
        let q = g.project(&pj);
        if !g.contains(&q) {
            return q;
        }
        let q_full = k.project(&pj);
        if let Some(dj) = seq.depth_through(j, &q_full) {
            if (dj - pj.z).abs() <= OCCLUSION_REL_THRESHOLD * pj.z {
                *visible.get_mut(x, y) = true;
            }
        }
        q
    });
    Correspondence { coords, visible }
}

/// Angle in degrees between consecutive world-frame displacements `p1 - p0` and `p2 - p1`.
pub fn displacement_angle_deg(p0: &Pose, p1: &Pose, p2: &Pose) -> f64 {
    let a = p1.translation - p0.translation;
    let b = p2.translation - p1.translation;
    (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{reproject, relative_pose};

    fn small_spec(traj: TrajectorySpec) -> SequenceSpec {
        SequenceSpec {
            scene: SceneSpec::default(),
            trajectory: traj,
            camera: CameraIntrinsics::new(50.0, 50.0, 31.5, 23.5, 64, 48).unwrap(),
            image_noise: None,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(TrajectorySpec::arc(1.0, 5, 5.0));
        let a = generate_sequence(&spec).unwrap();
        let b = generate_sequence(&spec).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.depths, b.depths);
        assert_eq!(a.poses, b.poses);
    }

    #[test]
    fn straight_trajectory_steps() {
        let poses = TrajectorySpec::straight(1.0, 11).poses();
        for w in poses.windows(2) {
            assert!(((w[1].translation - w[0].translation).norm() - 0.1).abs() < 1e-12);
        }
        for w in poses.windows(3) {
            assert!(displacement_angle_deg(&w[0], &w[1], &w[2]) < 1e-6);
        }
    }

    #[test]
    fn arc_turn_rate_satisfies_angle_window() {
        let poses = TrajectorySpec::arc(3.0, 16, 15.0).poses();
        for w in poses.windows(3) {
            let a = displacement_angle_deg(&w[0], &w[1], &w[2]);
            assert!((a - 15.0).abs() < 1e-9, "angle {a}");
            assert!((10.0..=30.0).contains(&a));
        }
    }

    #[test]
    fn zigzag_exercises_both_angle_branches() {
        let poses = TrajectorySpec::zigzag(3.0, 13, 10.0, 3).poses();
        let angles: Vec<f64> = poses
            .windows(3)
            .map(|w| displacement_angle_deg(&w[0], &w[1], &w[2]))
            .collect();
        assert!(angles.iter().any(|a| (10.0..=30.0).contains(a)));
        assert!(angles.iter().any(|a| *a < 10.0));
    }

    #[test]
    fn render_is_pure_and_depth_in_range() {
        let spec = small_spec(TrajectorySpec::straight(1.0, 3));
        let seq = generate_sequence(&spec).unwrap();
        let scene = seq.scene.as_ref().unwrap();
        for (t, pose) in seq.poses.iter().enumerate() {
            let (img, depth) = scene.render(&seq.intrinsics, pose).unwrap();
            assert_eq!(img, seq.images[t]);
            assert_eq!(depth, seq.depths[t]);
            assert!(depth.iter().all(|d| (MIN_SCENE_DEPTH..=MAX_SCENE_DEPTH).contains(d)));
        }
    }

    #[test]
    fn color_is_sampled_at_depth_surface() {
        let spec = small_spec(TrajectorySpec::straight(1.0, 2));
        let seq = generate_sequence(&spec).unwrap();
        let scene = seq.scene.as_ref().unwrap();
        let k = seq.intrinsics;
        for &(x, y) in &[(3usize, 4usize), (40, 20), (63, 47)] {
            let px = Vector2::new(x as f64, y as f64);
            let p = seq.poses[1].transform_point(&(k.ray(&px) * *seq.depths[1].get(x, y)));
            assert!(scene.surface_distance(&p) < 1e-9);
            assert_eq!(scene.color_at(&p), *seq.images[1].get(x, y));
        }
    }

    #[test]
    fn camera_outside_room_is_a_frustum_violation() {
        let mut traj = TrajectorySpec::straight(30.0, 3);
        traj.start = [0.0, 0.0, 0.0];
        let err = generate_sequence(&small_spec(traj)).unwrap_err();
        assert!(matches!(err, Error::FrustumViolation { .. }));
    }

    #[test]
    fn texture_has_gradient() {
        let scene = Scene::new(SceneSpec::default());
        let mut changed = 0;
        for k in 0..100 {
            let p = Vector3::new(0.37 * k as f64, 1.3, 10.0);
            let q = p + Vector3::new(0.02, 0.0, 0.0);
            if scene.color_at(&p) != scene.color_at(&q) {
                changed += 1;
            }
        }
        assert_eq!(changed, 100);
    }

    #[test]
    fn correspondence_identity_for_same_frame() {
        let seq = generate_sequence(&small_spec(TrajectorySpec::arc(1.0, 3, 5.0))).unwrap();
        let c = gt_correspondence(&seq, 1, 1, 4);
        for y in 0..c.coords.height() {
            for x in 0..c.coords.width() {
                assert!(*c.visible.get(x, y));
                assert!((c.coords.get(x, y) - Vector2::new(x as f64, y as f64)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn correspondence_matches_geometry_reprojection() {
        let seq = generate_sequence(&small_spec(TrajectorySpec::arc(1.0, 4, 6.0))).unwrap();
        let factor = 4;
        let g = seq.intrinsics.downsampled(factor);
        let depth = seq.depth_on_grid(0, factor);
        let rel = relative_pose(&seq.poses[0], &seq.poses[3]);
        let r = reproject(&g, &rel, &depth);
        let c = gt_correspondence(&seq, 0, 3, factor);
        let mut compared = 0;
        for i in 0..depth.len() {
            if c.visible[i] {
                assert!(r.valid[i]);
                assert!((r.coords[i] - c.coords[i]).norm() < 1e-6);
                compared += 1;
            }
        }
        assert!(compared > depth.len() / 3, "{compared} of {}", depth.len());
    }

    #[test]
    fn correspondence_forward_backward_cycle() {
        let seq = generate_sequence(&small_spec(TrajectorySpec::arc(1.0, 4, 6.0))).unwrap();
        let k = seq.intrinsics;
        let j_from_i = relative_pose(&seq.poses[0], &seq.poses[2]);
        let fwd = gt_correspondence(&seq, 0, 2, 1);
        let mut checked = 0;
        for i in 0..fwd.coords.len() {
            if !fwd.visible[i] {
                continue;
            }
            // map back through frame j's own depth at the continuous location
            let q = fwd.coords[i];
            let dj = seq.depth_through(2, &q).unwrap();
            let back = k.project(&j_from_i.inverse().transform_point(&(k.ray(&q) * dj)));
            let (x, y) = fwd.coords.coords(i);
            assert!((back - Vector2::new(x as f64, y as f64)).norm() < 1e-3);
            checked += 1;
        }
        assert!(checked > 100);
    }
}
