mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DVector, Vector2, Vector3};
use priorba::ba::{
    evaluate_objective, linearize, run_ba, solve_step, BaConfig, BaMode, BaProblem, BaState,
};
use priorba::frame_graph::{Edge, Keyframe};
use priorba::geometry::{CameraIntrinsics, Pose};
use priorba::priors::{DepthPrior, FlowObservation, NoiseModel, PriorKind};
use priorba::raster::{Grid, RgbImage};
use priorba::synth_world::{default_camera, TrajectorySpec};

use common::ba::*;
use common::*;

#[test]
fn jacobians_match_central_differences() {
    let err = reprojection_jacobian_error(100, 11);
    assert!(err < 1e-4, "reprojection {err}");
    let err = regularizer_jacobian_error(100, 12);
    assert!(err < 1e-4, "regularizer {err}");
}

/// Two frames on a 2x1 grid with hand-chosen state.
fn toy() -> (Vec<Keyframe>, Vec<Edge>) {
    let camera = CameraIntrinsics::new(16.0, 16.0, 7.5, 3.5, 16, 8).unwrap();
    let grid = camera.downsampled(8);
    let mk = |id: u64, pose: Pose, u: [f64; 2]| Keyframe {
        id,
        frame_index: id as usize,
        timestamp: 0.0,
        image: Arc::new(RgbImage::filled(16, 8, [0.0; 3])),
        camera,
        downsample: 8,
        pose,
        inv_depth: Grid::from_vec(2, 1, u.to_vec()),
        mono_prior: Some(DepthPrior::new(Grid::from_vec(2, 1, vec![2.0, 4.0]), None, PriorKind::Monocular).unwrap()),
        mvs_prior: None,
        gate_c: true,
        pixel_mask: Grid::filled(2, 1, true),
    };
    assert_eq!((grid.width, grid.height), (2, 1));
    let frames = vec![
        mk(0, Pose::identity(), [0.4, 0.3]),
        mk(1, Pose::from_translation(Vector3::new(0.2, -0.1, 0.5)), [0.5, 0.5]),
    ];
    let edges = vec![Edge {
        src: 0,
        dst: 1,
        flow: Some(FlowObservation {
            target: Grid::from_vec(2, 1, vec![Vector2::new(0.1, 0.2), Vector2::new(1.3, -0.4)]),
            confidence: Grid::from_vec(2, 1, vec![0.5, 0.8]),
            valid: Grid::filled(2, 1, true),
        }),
    }];
    (frames, edges)
}

#[test]
fn toy_objective_matches_hand_computation() {
    let (frames, edges) = toy();
    let p = problem(&frames, &edges, &[0], BaMode::Full);
    let cost = evaluate_objective(&p).unwrap();

    // grid intrinsics: f = 2, c = (7.5 - 3.5) / 8 = 0.5 and (3.5 - 3.5) / 8 = 0
    let (f, cx, cy) = (2.0, 0.5, 0.0);
    let (tx, ty, tz) = (0.2, -0.1, 0.5);
    let pixels = [(0.0, 0.0, 0.4, 0.1, 0.2, 0.5, 2.0), (1.0, 0.0, 0.3, 1.3, -0.4, 0.8, 4.0)];
    let mut reproj = 0.0;
    let mut reg = 0.0;
    for (x, y, u, tgx, tgy, w, prior) in pixels {
        let (px, py, pz) = ((x - cx) / f / u, (y - cy) / f / u, 1.0 / u);
        let (qx, qy, qz) = (px - tx, py - ty, pz - tz);
        let ex = f * qx / qz + cx - tgx;
        let ey = f * qy / qz + cy - tgy;
        reproj += w * (ex * ex + ey * ey);
        reg += 0.05 * w * (u - 1.0 / prior) * (u - 1.0 / prior);
    }
    assert!((cost.reprojection - reproj).abs() < 1e-12, "{} vs {reproj}", cost.reprojection);
    assert!((cost.regularization - reg).abs() < 1e-12, "{} vs {reg}", cost.regularization);
}

#[test]
fn gate_off_removes_regularization_and_missing_prior_is_reported() {
    let (mut frames, edges) = toy();
    for f in &mut frames {
        f.gate_c = false;
    }
    let cost = evaluate_objective(&problem(&frames, &edges, &[0], BaMode::Full)).unwrap();
    assert_eq!(cost.regularization, 0.0);
    frames[0].gate_c = true;
    frames[0].mono_prior = None;
    assert!(matches!(
        evaluate_objective(&problem(&frames, &edges, &[0], BaMode::Full)),
        Err(priorba::Error::MissingPrior(0))
    ));
}

#[test]
fn regularizer_jacobian_is_constant() {
    let (mut frames, mut edges) = toy();
    // push the reprojection far outside so only the prior term is linearized
    frames[1].pose = Pose::from_translation(Vector3::new(0.0, 0.0, 100.0));
    edges[0].flow.as_mut().unwrap().valid = Grid::filled(2, 1, true);
    let p = problem(&frames, &edges, &[0, 1], BaMode::Full);
    let eq = linearize(&p, &BaState::from_frames(&frames)).unwrap();
    let blk = eq.depth[0].as_ref().unwrap();
    for (m, w) in [(0usize, 0.5), (1, 0.8)] {
        assert!((blk.huu[m] - 0.05 * w).abs() < 1e-15);
        let u = frames[0].inv_depth[m];
        let prior = frames[0].mono_prior.as_ref().unwrap().inverse_depth(m).unwrap();
        assert!((blk.gu[m] - 0.05 * w * (u - prior)).abs() < 1e-15);
    }
}

#[test]
fn schur_solve_matches_dense_solve() {
    let noise = NoiseModel {
        flow_sigma: 0.5,
        seed: 3,
        ..NoiseModel::noiseless()
    };
    for camera in [small_camera(), tiny_camera()] {
        let (mut frames, edges) = small_problem(5, camera, &noise, 5);
        let np = frames[0].inv_depth.len();
        // masked pixels must not move
        for m in (0..np).step_by(7) {
            frames[2].pixel_mask[m] = false;
        }
        for fixed in [vec![], vec![0u64]] {
            for damping in [1e-4, 1e-1] {
                let diff = schur_vs_dense(&frames, &edges, &fixed, damping);
                assert!(diff < 1e-8, "max diff {diff}");
            }
            let p = problem(&frames, &edges, &fixed, BaMode::Full);
            let state = BaState::from_frames(&frames);
            let eq = linearize(&p, &state).unwrap();
            let (h, _, slot, _) = dense_system(&p, &state);
            let free = slot.iter().flatten().count();
            let hpp = h.view((0, 0), (6 * free, 6 * free));
            assert!((hpp - &eq.hpp).amax() < 1e-8 * eq.hpp.amax().max(1.0));
            let inc = solve_step(&eq, 1e-4).unwrap();
            for m in (0..np).step_by(7) {
                assert_eq!(inc.depth[2].as_ref().unwrap()[m], 0.0);
                assert_eq!(eq.depth[2].as_ref().unwrap().gu[m], 0.0);
            }
        }
    }
}

#[test]
fn fixed_pose_has_zero_gradient_and_never_moves() {
    let (frames, edges) = small_problem(4, small_camera(), &NoiseModel::noiseless(), 8);
    let p = problem(&frames, &edges, &[0], BaMode::Full);
    let eq = linearize(&p, &BaState::from_frames(&frames)).unwrap();
    assert_eq!(eq.pose_gradient(0), nalgebra::Vector6::zeros());
    assert!(eq.pose_gradient(1).norm() > 0.0);
    let res = run_ba(&p, 3, None).unwrap();
    assert_eq!(res.state.poses[0], frames[0].pose);
}

#[test]
fn damping_shrinks_the_step_monotonically() {
    let (frames, edges) = small_problem(4, small_camera(), &NoiseModel::noiseless(), 9);
    let p = problem(&frames, &edges, &[0], BaMode::Full);
    let eq = linearize(&p, &BaState::from_frames(&frames)).unwrap();
    let mut last = f64::INFINITY;
    let mut first = f64::INFINITY;
    for damping in [1e-4, 1e-2, 1.0, 1e2, 1e4, 1e6, 1e8, 1e10, 1e12] {
        let inc = solve_step(&eq, damping).unwrap();
        let norm = inc.poses.iter().map(|t| t.norm_squared()).sum::<f64>()
            + inc.depth.iter().flatten().flatten().map(|d| d * d).sum::<f64>();
        assert!(norm.sqrt() <= last, "damping {damping}");
        if first.is_infinite() {
            first = norm.sqrt();
        }
        last = norm.sqrt();
    }
    assert!(last < 1e-3 * first, "{last} vs {first}");
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let seq = sequence(TrajectorySpec::arc(1.0, 5, 3.0), default_camera());
    let mut frames: Vec<Keyframe> = (0..5).map(|i| gt_keyframe(&seq, i, i as u64)).collect();
    for f in &mut frames {
        f.gate_c = true;
    }
    let edges = edges(&seq, &frames, 3, &NoiseModel::noiseless());
    let p = problem(&frames, &edges, &[0], BaMode::Full);
    let cost = evaluate_objective(&p).unwrap();
    assert!(cost.reprojection < 1e-10, "{}", cost.reprojection);
    assert!(cost.regularization < 1e-20);

    let eq = linearize(&p, &BaState::from_frames(&frames)).unwrap();
    let inc = solve_step(&eq, 1e-4).unwrap();
    assert!(inc.max_abs() < 1e-8, "{}", inc.max_abs());
    let zero_g = priorba::ba::NormalEquations {
        gp: DVector::zeros(eq.gp.len()),
        depth: eq
            .depth
            .iter()
            .map(|b| {
                b.clone().map(|mut b| {
                    b.gu.iter_mut().for_each(|g| *g = 0.0);
                    b
                })
            })
            .collect(),
        ..eq.clone()
    };
    assert_eq!(solve_step(&zero_g, 1e-4).unwrap().max_abs(), 0.0);

    let res = run_ba(&p, 3, None).unwrap();
    assert!(res.cost_after <= res.cost_before);
}

#[test]
fn perturbed_poses_are_recovered() {
    let seq = sequence(TrajectorySpec::arc(1.2, 5, 3.0), default_camera());
    let mut frames: Vec<Keyframe> = (0..5).map(|i| gt_keyframe(&seq, i, i as u64)).collect();
    let edges = edges(&seq, &frames, 3, &NoiseModel::noiseless());
    let mut r = rng(21);
    for f in frames.iter_mut() {
        f.gate_c = true;
        if f.id > 0 {
            f.pose = perturb(&f.pose, &mut r, 0.05, 0.02);
        }
    }
    let p = problem(&frames, &edges, &[0], BaMode::Full);
    let res = run_ba(&p, 12, None).unwrap();
    assert!(res.cost_after <= res.cost_before);
    for (est, gt) in res.state.poses.iter().zip(&seq.poses) {
        let d = est.inverse().compose(gt);
        assert!(d.translation.norm() < 1e-4, "translation error {}", d.translation.norm());
        assert!(d.rotation_angle() < 1e-5, "rotation error {}", d.rotation_angle());
    }
}

#[test]
fn pose_only_mode_keeps_depth_bitwise() {
    let noise = NoiseModel {
        flow_sigma: 0.3,
        seed: 1,
        ..NoiseModel::noiseless()
    };
    let (frames, edges) = small_problem(4, small_camera(), &noise, 13);
    let p = problem(&frames, &edges, &[0], BaMode::PoseOnly);
    let res = run_ba(&p, 4, None).unwrap();
    for (a, b) in res.state.inv_depth.iter().zip(&frames) {
        assert_eq!(a, &b.inv_depth);
    }
    assert!(res.cost_after <= res.cost_before);
}

#[test]
fn full_mode_requires_a_gauge() {
    let (frames, edges) = small_problem(3, small_camera(), &NoiseModel::noiseless(), 2);
    let p = problem(&frames, &edges, &[], BaMode::Full);
    assert!(run_ba(&p, 1, None).is_err());
}

#[test]
fn observer_sees_every_iteration() {
    let (frames, edges) = small_problem(3, small_camera(), &NoiseModel::noiseless(), 4);
    let p = problem(&frames, &edges, &[0], BaMode::Full);
    let mut seen = Vec::new();
    let mut obs = |it: usize, _: &BaState| seen.push(it);
    run_ba(&p, 3, Some(&mut obs)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
}

#[test]
fn cost_never_increases_under_noise_and_outliers() {
    for seed in 0..6 {
        let noise = NoiseModel {
            flow_sigma: 1.0,
            outlier_fraction: 0.15,
            outlier_scale: 0.3,
            seed,
            ..NoiseModel::noiseless()
        };
        let (frames, edges) = small_problem(5, small_camera(), &noise, 100 + seed);
        let fixed: BTreeSet<u64> = [0].into_iter().collect();
        let p = BaProblem {
            frames: &frames,
            edges: &edges,
            fixed,
            fixed_depth: BTreeSet::new(),
            mode: BaMode::Full,
            config: BaConfig::default(),
        };
        let res = run_ba(&p, 4, None).unwrap();
        assert!(res.cost_after <= res.cost_before, "seed {seed}");
        for u in res.state.inv_depth.iter().flat_map(|g| g.iter()) {
            assert!((priorba::ba::INV_DEPTH_MIN..=priorba::ba::INV_DEPTH_MAX).contains(u));
        }
    }
}

fn keyframe_ate(frames: &[Keyframe], seq: &priorba::synth_world::Sequence) -> f64 {
    let est = priorba::eval_io::Trajectory::new(frames.iter().map(|k| (k.timestamp, k.pose)).collect()).unwrap();
    let gt = priorba::eval_io::Trajectory::new(frames.iter().map(|k| (k.timestamp, seq.poses[k.frame_index])).collect()).unwrap();
    priorba::eval_io::ate(&est, &gt).unwrap()
}

#[test]
fn global_ba_does_not_degrade_a_noiseless_run() {
    let seq = noiseless_arc(30);
    let cfg = priorba::pipeline::PipelineConfig::default();
    let out = priorba::pipeline::run_sequence(&cfg, &seq).unwrap();
    assert_eq!(out.keyframes.len(), 30);
    let mut frames = out.keyframes.clone();
    let before = keyframe_ate(&frames, &seq);
    let mut flow = priorba::priors::OracleFlowProvider::new(&seq, FACTOR, NoiseModel::noiseless());
    let result = priorba::ba::global_ba(&mut frames, 4, &mut flow, 4, cfg.ba_config()).unwrap();
    assert!(result.cost_after <= result.cost_before);
    let after = keyframe_ate(&frames, &seq);
    assert!(after <= before + 1e-12, "{before} -> {after}");
}

#[test]
fn global_ba_pulls_perturbed_keyframes_back() {
    let seq = noiseless_arc(10);
    let mut frames: Vec<Keyframe> = (0..10).map(|f| gt_keyframe(&seq, f, f as u64)).collect();
    let mut r = rng(21);
    for k in frames.iter_mut().skip(1) {
        k.pose = perturb(&k.pose, &mut r, 0.01, 0.002);
    }
    let before = keyframe_ate(&frames, &seq);
    let mut flow = priorba::priors::OracleFlowProvider::new(&seq, FACTOR, NoiseModel::noiseless());
    priorba::ba::global_ba(&mut frames, 3, &mut flow, 6, BaConfig::default()).unwrap();
    let after = keyframe_ate(&frames, &seq);
    assert!(after < before * 1e-2, "{before} -> {after}");
}
