use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use priorba::ba::{
    evaluate_state, huber_weight, linearize, reprojection_block, reprojection_residual, solve_step, BaConfig, BaMode,
    BaProblem, BaState, EdgeTransform,
};
use priorba::frame_graph::{Edge, Keyframe};
use priorba::geometry::{CameraIntrinsics, Pose, Twist};
use priorba::priors::{DepthPrior, FlowObservation, NoiseModel, PriorKind};
use priorba::raster::{Grid, RgbImage};
use priorba::synth_world::TrajectorySpec;
use rand::Rng;

use super::{edges, gt_keyframe, perturb, random_pose, rng, sequence};

/// 20 x 10 optimization grid.
pub fn small_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(100.0, 100.0, 79.5, 39.5, 160, 80).unwrap()
}

/// 8 x 5 optimization grid.
pub fn tiny_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(40.0, 40.0, 31.5, 19.5, 64, 40).unwrap()
}

pub fn problem<'a>(frames: &'a [Keyframe], edges: &'a [Edge], fixed: &[u64], mode: BaMode) -> BaProblem<'a> {
    BaProblem {
        frames,
        edges,
        fixed: fixed.iter().copied().collect(),
        fixed_depth: BTreeSet::new(),
        mode,
        config: BaConfig::default(),
    }
}

/// Ground-truth keyframes on a short arc with perturbed poses and depths.
pub fn small_problem(n: usize, camera: CameraIntrinsics, noise: &NoiseModel, seed: u64) -> (Vec<Keyframe>, Vec<Edge>) {
    let seq = sequence(TrajectorySpec::arc(0.8, n, 3.0), camera);
    let mut r = rng(seed);
    let mut frames: Vec<Keyframe> = (0..n).map(|i| gt_keyframe(&seq, i, i as u64)).collect();
    let edges = edges(&seq, &frames, 3, noise);
    for (i, f) in frames.iter_mut().enumerate() {
        f.gate_c = i % 2 == 0;
        if i > 0 {
            f.pose = perturb(&f.pose, &mut r, 0.02, 0.01);
        }
        for u in f.inv_depth.as_mut_slice() {
            *u *= 1.0 + r.random_range(-0.1..0.1);
        }
    }
    (frames, edges)
}

/// Largest relative deviation between analytic reprojection Jacobians and
/// central differences over `blocks` random configurations.
pub fn reprojection_jacobian_error(blocks: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let k = CameraIntrinsics::new(25.0, 24.0, 15.5, 11.5, 32, 24).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < blocks {
        let wi = random_pose(&mut rng, 0.3, 0.2);
        let wj = random_pose(&mut rng, 0.3, 0.2);
        let ray = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
        let u = rng.random_range(0.1..1.0);
        let target = Vector2::new(rng.random_range(0.0..31.0), rng.random_range(0.0..23.0));
        let Some(block) = reprojection_block(&k, &EdgeTransform::new(&wi, &wj), &ray, u, &target) else {
            continue;
        };
        let res = |pi: &Pose, pj: &Pose, uu: f64| {
            reprojection_residual(&k, &EdgeTransform::new(pi, pj), &ray, uu, &target).unwrap()
        };
        let mut check = |analytic: Vector2<f64>, fd: Vector2<f64>| {
            worst = worst.max((analytic - fd).norm() / fd.norm().max(1e-3));
        };
        for c in 0..6 {
            let mut d = Twist::zeros();
            d[c] = h;
            let fd_i = (res(&wi.retract(&d), &wj, u) - res(&wi.retract(&-d), &wj, u)) / (2.0 * h);
            let fd_j = (res(&wi, &wj.retract(&d), u) - res(&wi, &wj.retract(&-d), u)) / (2.0 * h);
            check(block.d_pose_i.column(c).into_owned(), fd_i);
            check(block.d_pose_j.column(c).into_owned(), fd_j);
        }
        let fd_u = (res(&wi, &wj, u + h) - res(&wi, &wj, u - h)) / (2.0 * h);
        check(block.d_inv_depth, fd_u);
        done += 1;
    }
    worst
}

/// Two-frame problem on a 2x1 grid whose reprojections all fall behind the
/// second camera, so only the prior term contributes.
fn prior_only(u: [f64; 2], prior: [f64; 2], w: [f64; 2]) -> (Vec<Keyframe>, Vec<Edge>) {
    let camera = CameraIntrinsics::new(16.0, 16.0, 7.5, 3.5, 16, 8).unwrap();
    let mk = |id: u64, pose: Pose| Keyframe {
        id,
        frame_index: id as usize,
        timestamp: 0.0,
        image: Arc::new(RgbImage::filled(16, 8, [0.0; 3])),
        camera,
        downsample: 8,
        pose,
        inv_depth: Grid::from_vec(2, 1, u.to_vec()),
        mono_prior: Some(DepthPrior::new(Grid::from_vec(2, 1, prior.to_vec()), None, PriorKind::Monocular).unwrap()),
        mvs_prior: None,
        gate_c: true,
        pixel_mask: Grid::filled(2, 1, true),
    };
    let frames = vec![mk(0, Pose::identity()), mk(1, Pose::from_translation(Vector3::new(0.0, 0.0, 1e3)))];
    let edges = vec![Edge {
        src: 0,
        dst: 1,
        flow: Some(FlowObservation {
            target: Grid::from_vec(2, 1, vec![Vector2::zeros(); 2]),
            confidence: Grid::from_vec(2, 1, w.to_vec()),
            valid: Grid::filled(2, 1, true),
        }),
    }];
    (frames, edges)
}

/// Same comparison for the depth-prior residual: the assembled gradient against
/// central differences of the regularization cost, per pixel.
pub fn regularizer_jacobian_error(blocks: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..blocks.div_ceil(2) {
        let mut draw = |lo: f64, hi: f64| [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        let (u, prior, w) = (draw(0.1, 2.0), draw(0.5, 10.0), draw(0.05, 1.0));
        let (frames, edges) = prior_only(u, prior, w);
        let p = problem(&frames, &edges, &[0, 1], BaMode::Full);
        let state = BaState::from_frames(&frames);
        let eq = linearize(&p, &state).unwrap();
        let blk = eq.depth[0].as_ref().unwrap();
        for m in 0..2 {
            let cost = |du: f64| {
                let mut s = state.clone();
                s.inv_depth[0][m] += du;
                evaluate_state(&p, &s).unwrap().regularization
            };
            // cost is a sum of squared residuals: gu = J^T r, huu = J^T J
            let fd_grad = (cost(h) - cost(-h)) / (2.0 * h) / 2.0;
            let fd_hess = (cost(1e-3) - 2.0 * cost(0.0) + cost(-1e-3)) / 1e-6 / 2.0;
            worst = worst.max((blk.gu[m] - fd_grad).abs() / fd_grad.abs().max(1e-6));
            worst = worst.max((blk.huu[m] - fd_hess).abs() / fd_hess.abs());
        }
    }
    worst
}

/// Dense system assembled directly from the residual blocks.
pub fn dense_system(p: &BaProblem<'_>, state: &BaState) -> (DMatrix<f64>, DVector<f64>, Vec<Option<usize>>, usize) {
    let n = p.frames.len();
    let np = p.frames[0].inv_depth.len();
    let mut slot = vec![None; n];
    let mut free = 0;
    for (i, f) in p.frames.iter().enumerate() {
        if !p.fixed.contains(&f.id) {
            slot[i] = Some(free);
            free += 1;
        }
    }
    let dim = 6 * free + n * np;
    let depth_col = |f: usize, m: usize| 6 * free + f * np + m;
    let mut h = DMatrix::zeros(dim, dim);
    let mut g = DVector::zeros(dim);
    let pos = |id: u64| p.frames.iter().position(|f| f.id == id).unwrap();
    for e in p.edges {
        let (a, b) = (pos(e.src), pos(e.dst));
        let flow = e.flow.as_ref().unwrap();
        let k = p.frames[b].intrinsics();
        let ka = p.frames[a].intrinsics();
        let t = EdgeTransform::new(&state.poses[a], &state.poses[b]);
        let prior = p.frames[a].active_prior().unwrap();
        for m in 0..np {
            let w = flow.confidence[m];
            if !(flow.valid[m] && p.frames[a].pixel_mask[m] && w > 0.0) {
                continue;
            }
            let u = state.inv_depth[a][m];
            if p.frames[a].gate_c {
                if let Some(us) = prior.inverse_depth(m) {
                    let c = depth_col(a, m);
                    h[(c, c)] += p.config.lambda * w;
                    g[c] += p.config.lambda * w * (u - us);
                }
            }
            let (x, y) = p.frames[a].inv_depth.coords(m);
            let ray = ka.ray(&Vector2::new(x as f64, y as f64));
            let Some(blk) = reprojection_block(&k, &t, &ray, u, &flow.target[m]) else {
                continue;
            };
            // sparse row pair: (column, d residual / d column)
            let mut cols: Vec<(usize, Vector2<f64>)> = Vec::new();
            if let Some(s) = slot[a] {
                cols.extend((0..6).map(|c| (6 * s + c, blk.d_pose_i.column(c).into_owned())));
            }
            if let Some(s) = slot[b] {
                cols.extend((0..6).map(|c| (6 * s + c, blk.d_pose_j.column(c).into_owned())));
            }
            cols.push((depth_col(a, m), blk.d_inv_depth));
            let wt = w * huber_weight(blk.residual.norm_squared(), p.config.huber_delta);
            for (ca, ja) in &cols {
                g[*ca] += wt * ja.dot(&blk.residual);
                for (cb, jb) in &cols {
                    h[(*ca, *cb)] += wt * ja.dot(jb);
                }
            }
        }
    }
    (h, g, slot, np)
}

/// Largest absolute difference between the Schur-complement step and a dense
/// Cholesky solve of the same damped system.
pub fn schur_vs_dense(frames: &[Keyframe], edges: &[Edge], fixed: &[u64], damping: f64) -> f64 {
    let state = BaState::from_frames(frames);
    let p = problem(frames, edges, fixed, BaMode::Full);
    let eq = linearize(&p, &state).unwrap();
    let (h, g, slot, np) = dense_system(&p, &state);
    let free = slot.iter().flatten().count();
    let inc = solve_step(&eq, damping).unwrap();
    let mut hd = h;
    for d in 0..hd.nrows() {
        hd[(d, d)] += damping;
    }
    let x = -hd.cholesky().expect("damped dense system is positive definite").solve(&g);
    let mut max_diff: f64 = 0.0;
    for (i, s) in slot.iter().enumerate() {
        match s {
            Some(s) => {
                for c in 0..6 {
                    max_diff = max_diff.max((inc.poses[i][c] - x[6 * s + c]).abs());
                }
            }
            None => max_diff = max_diff.max(inc.poses[i].amax()),
        }
        let du = inc.depth[i].as_ref().unwrap();
        for m in 0..np {
            max_diff = max_diff.max((du[m] - x[6 * free + i * np + m]).abs());
        }
    }
    max_diff
}
