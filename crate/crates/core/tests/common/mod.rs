#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use priorba::frame_graph::{Edge, Keyframe};
use priorba::geometry::{CameraIntrinsics, Pose};
use priorba::pipeline::PipelineConfig;
use priorba::priors::{oracle_flow, synth_mono_prior, NoiseModel};
use priorba::raster::Grid;
use priorba::synth_world::{default_camera, generate_sequence, ImageNoise, SceneSpec, Sequence, SequenceSpec, TrajectorySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub mod ba;

pub const FACTOR: usize = 8;

pub fn sequence(trajectory: TrajectorySpec, camera: CameraIntrinsics) -> Sequence {
    generate_sequence(&SequenceSpec {
        scene: SceneSpec::default(),
        trajectory,
        camera,
        image_noise: None,
    })
    .unwrap()
}

/// Keyframe at ground truth with a ground-truth monocular prior.
pub fn gt_keyframe(seq: &Sequence, frame: usize, id: u64) -> Keyframe {
    let gt = seq.depth_on_grid(frame, FACTOR);
    let (w, h) = (gt.width(), gt.height());
    Keyframe {
        id,
        frame_index: frame,
        timestamp: seq.timestamps[frame],
        image: Arc::new(seq.observed[frame].clone()),
        camera: seq.intrinsics,
        downsample: FACTOR,
        pose: seq.poses[frame],
        inv_depth: gt.map(|d| 1.0 / d),
        mono_prior: Some(synth_mono_prior(&gt, &NoiseModel::noiseless(), 1.0, frame as u64)),
        mvs_prior: None,
        gate_c: false,
        pixel_mask: Grid::filled(w, h, true),
    }
}

/// Bidirectional edges within `radius` carrying oracle flow.
pub fn edges(seq: &Sequence, frames: &[Keyframe], radius: usize, noise: &NoiseModel) -> Vec<Edge> {
    let mut out = Vec::new();
    for (a, ka) in frames.iter().enumerate() {
        for (b, kb) in frames.iter().enumerate() {
            if a != b && a.abs_diff(b) <= radius {
                out.push(Edge {
                    src: ka.id,
                    dst: kb.id,
                    flow: Some(oracle_flow(seq, ka.frame_index, kb.frame_index, FACTOR, noise, 0)),
                });
            }
        }
    }
    out
}

pub fn perturb(pose: &Pose, rng: &mut ChaCha8Rng, sigma_t: f64, sigma_r: f64) -> Pose {
    let nt = Normal::new(0.0, sigma_t).unwrap();
    let nr = Normal::new(0.0, sigma_r).unwrap();
    let dt = Vector3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
    let dr = Vector3::new(nr.sample(rng), nr.sample(rng), nr.sample(rng));
    Pose::new(UnitQuaternion::from_scaled_axis(dr) * pose.rotation, pose.translation + dt)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pose(rng: &mut ChaCha8Rng, t: f64, r: f64) -> Pose {
    let mut v = || rng.random_range(-1.0..1.0);
    let rot = Vector3::new(v(), v(), v()) * r;
    let tr = Vector3::new(v(), v(), v()) * t;
    Pose::new(UnitQuaternion::from_scaled_axis(rot), tr)
}

/// Frames 0.15 m and 6 degrees apart: every frame becomes a keyframe.
pub fn noiseless_arc(n_frames: usize) -> Sequence {
    sequence(TrajectorySpec::arc(0.15 * (n_frames - 1) as f64, n_frames, 6.0), default_camera())
}

/// 50 frames at 0.075 m and 3 degrees with sensor noise; roughly every other
/// frame is a keyframe.
pub fn noisy_sequence(seed: u64) -> Sequence {
    generate_sequence(&SequenceSpec {
        scene: SceneSpec::default(),
        trajectory: TrajectorySpec::arc(0.075 * 49.0, 50, 3.0),
        camera: default_camera(),
        image_noise: Some(ImageNoise {
            sigma: 0.02,
            seed: 11 + seed,
        }),
    })
    .unwrap()
}

/// Noisy flow with outliers and a finite capture radius, 5% monocular noise.
pub fn noisy_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        flow_noise: NoiseModel {
            flow_sigma: 0.05,
            outlier_fraction: 0.05,
            outlier_scale: 0.1,
            capture_radius: Some(3.0),
            ..NoiseModel::noiseless()
        },
        mono_noise: NoiseModel {
            depth_rel_sigma: 0.05,
            ..NoiseModel::noiseless()
        },
        seed,
        ..PipelineConfig::default()
    }
}

pub fn gt_trajectory(seq: &Sequence) -> priorba::eval_io::Trajectory {
    priorba::eval_io::Trajectory::from_parts(&seq.timestamps, &seq.poses).unwrap()
}
