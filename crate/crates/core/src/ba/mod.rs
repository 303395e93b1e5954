//! Dense bundle adjustment over poses and per-pixel inverse depth, driven by
//! flow-derived reprojection targets and a gated inverse-depth prior.

pub mod normal;
pub mod residual;

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::frame_graph::{Edge, Keyframe};
use crate::geometry::{relative_pose, reproject, CameraIntrinsics, Pose};
use crate::priors::{FlowProvider, FlowRequest};
use crate::raster::Grid;

pub use normal::{solve_step, DepthBlock, Increment, NormalEquations};
pub use residual::{huber_cost, huber_weight, reprojection_block, reprojection_residual, EdgeTransform, ReprojectionBlock};

pub const INV_DEPTH_MIN: f64 = 1e-4;
pub const INV_DEPTH_MAX: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaConfig {
    /// Weight of the inverse-depth prior term.
    pub lambda: f64,
    /// Huber threshold on the reprojection residual norm (grid pixels).
    pub huber_delta: f64,
    pub initial_damping: f64,
    /// Damping increases allowed per iteration before giving up on a step.
    pub max_retries: usize,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            huber_delta: 1.0,
            initial_damping: 1e-4,
            max_retries: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaMode {
    /// Poses and inverse depth.
    Full,
    /// Poses only; depth stays at its input value.
    PoseOnly,
}

#[derive(Debug, Clone)]
pub struct BaProblem<'a> {
    pub frames: &'a [Keyframe],
    pub edges: &'a [Edge],
    /// Ids of frames whose pose is held constant.
    pub fixed: BTreeSet<u64>,
    /// Ids of frames whose inverse depth is held constant in full mode.
    pub fixed_depth: BTreeSet<u64>,
    pub mode: BaMode,
    pub config: BaConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaState {
    pub poses: Vec<Pose>,
    pub inv_depth: Vec<Grid<f64>>,
}

impl BaState {
    pub fn from_frames(frames: &[Keyframe]) -> Self {
        Self {
            poses: frames.iter().map(|k| k.pose).collect(),
            inv_depth: frames.iter().map(|k| k.inv_depth.clone()).collect(),
        }
    }

    /// Applies an increment with right retraction and clamps inverse depth.
    pub fn apply(&self, inc: &Increment) -> Self {
        let poses = self
            .poses
            .iter()
            .zip(&inc.poses)
            .map(|(p, xi)| if xi.iter().all(|v| *v == 0.0) { *p } else { p.retract(xi) })
            .collect();
        let inv_depth = self
            .inv_depth
            .iter()
            .zip(&inc.depth)
            .map(|(u, du)| match du {
                Some(du) => {
                    let mut out = u.clone();
                    for (v, d) in out.as_mut_slice().iter_mut().zip(du) {
                        if *d != 0.0 {
                            *v = (*v + d).clamp(INV_DEPTH_MIN, INV_DEPTH_MAX);
                        }
                    }
                    out
                }
                None => u.clone(),
            })
            .collect();
        Self { poses, inv_depth }
    }

    /// Writes poses and depths back into the frames they were built from.
    pub fn write_back(&self, frames: &mut [Keyframe]) {
        for ((k, p), u) in frames.iter_mut().zip(&self.poses).zip(&self.inv_depth) {
            k.pose = *p;
            k.inv_depth = u.clone();
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
    /// Weighted squared reprojection error without robustification.
    pub reprojection: f64,
    /// Weighted prior term.
    pub regularization: f64,
    /// Objective minimized by the solver: Huber reprojection plus prior term.
    pub total: f64,
    /// Residuals that passed the cheirality check.
    pub residuals: usize,
}

#[derive(Debug, Clone)]
pub struct BaResult {
    pub state: BaState,
    pub cost_before: f64,
    pub cost_after: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Last iteration found a non-increasing step.
    pub converged: bool,
}

/// Geometry shared by every evaluation of one problem.
struct Prepared {
    intrinsics: Vec<CameraIntrinsics>,
    rays: Vec<Vec<Vector3<f64>>>,
    /// `(edge index, src position, dst position)` for edges carrying flow.
    edges: Vec<(usize, usize, usize)>,
    /// Per source frame: prior target inverse depth where the regularizer applies.
    prior_target: Vec<Option<Vec<Option<f64>>>>,
    fixed: Vec<bool>,
}

impl Prepared {
    fn new(problem: &BaProblem<'_>) -> Result<Self> {
        let frames = problem.frames;
        let pos: HashMap<u64, usize> = frames.iter().enumerate().map(|(i, k)| (k.id, i)).collect();
        if pos.len() != frames.len() {
            return Err(Error::DegenerateGeometry("duplicate frame id in problem".into()));
        }
        let mut edges = Vec::new();
        for (e_idx, e) in problem.edges.iter().enumerate() {
            let (Some(&a), Some(&b)) = (pos.get(&e.src), pos.get(&e.dst)) else {
                return Err(Error::DegenerateGeometry(format!(
                    "edge {}->{} references a frame outside the problem",
                    e.src, e.dst
                )));
            };
            if let Some(flow) = &e.flow {
                let k = &frames[a];
                if flow.target.width() != k.inv_depth.width() || flow.target.height() != k.inv_depth.height() {
                    return Err(Error::DimensionMismatch {
                        expected_w: k.inv_depth.width(),
                        expected_h: k.inv_depth.height(),
                        found_w: flow.target.width(),
                        found_h: flow.target.height(),
                    });
                }
                edges.push((e_idx, a, b));
            }
        }
        let intrinsics: Vec<CameraIntrinsics> = frames.iter().map(|k| k.intrinsics()).collect();
        let rays = frames
            .iter()
            .zip(&intrinsics)
            .map(|(k, kk)| {
                (0..k.inv_depth.len())
                    .map(|m| {
                        let (x, y) = k.inv_depth.coords(m);
                        kk.ray(&Vector2::new(x as f64, y as f64))
                    })
                    .collect()
            })
            .collect();
        let mut prior_target = Vec::with_capacity(frames.len());
        for k in frames {
            if !k.gate_c {
                prior_target.push(None);
                continue;
            }
            let prior = k.active_prior().ok_or(Error::MissingPrior(k.id))?;
            if prior.width() != k.inv_depth.width() || prior.height() != k.inv_depth.height() {
                return Err(Error::DimensionMismatch {
                    expected_w: k.inv_depth.width(),
                    expected_h: k.inv_depth.height(),
                    found_w: prior.width(),
                    found_h: prior.height(),
                });
            }
            prior_target.push(Some(
                (0..k.inv_depth.len())
                    .map(|m| {
                        prior
                            .inverse_depth(m)
                            .map(|u| u.clamp(INV_DEPTH_MIN, INV_DEPTH_MAX))
                    })
                    .collect(),
            ));
        }
        let fixed = frames.iter().map(|k| problem.fixed.contains(&k.id)).collect();
        Ok(Self {
            intrinsics,
            rays,
            edges,
            prior_target,
            fixed,
        })
    }
}

/// Per-pixel weight of an edge, zero where the pixel does not contribute.
#[inline]
fn pixel_weight(problem: &BaProblem<'_>, edge: usize, src: usize, m: usize) -> f64 {
    let flow = problem.edges[edge].flow.as_ref().expect("prepared edges carry flow");
    if !problem.frames[src].pixel_mask[m] || !flow.valid[m] {
        0.0
    } else {
        flow.confidence[m].max(0.0)
    }
}

fn evaluate_prepared(problem: &BaProblem<'_>, prep: &Prepared, state: &BaState) -> CostBreakdown {
    let delta = problem.config.huber_delta;
    let lambda = problem.config.lambda;
    let mut out = CostBreakdown::default();
    for &(e, a, b) in &prep.edges {
        let flow = problem.edges[e].flow.as_ref().expect("prepared edges carry flow");
        let t = EdgeTransform::new(&state.poses[a], &state.poses[b]);
        let kj = &prep.intrinsics[b];
        let u = state.inv_depth[a].as_slice();
        for m in 0..u.len() {
            let w = pixel_weight(problem, e, a, m);
            if w <= 0.0 {
                continue;
            }
            if let Some(target) = prep.prior_target[a].as_ref().and_then(|p| p[m]) {
                let d = u[m] - target;
                out.regularization += lambda * w * d * d;
            }
            if let Some(r) = reprojection_residual(kj, &t, &prep.rays[a][m], u[m], &flow.target[m]) {
                let sq = r.norm_squared();
                out.reprojection += w * sq;
                out.total += w * huber_cost(sq, delta);
                out.residuals += 1;
            }
        }
    }
    out.total += out.regularization;
    out
}

/// Objective value at the problem's current frame estimates.
pub fn evaluate_objective(problem: &BaProblem<'_>) -> Result<CostBreakdown> {
    let prep = Prepared::new(problem)?;
    Ok(evaluate_prepared(problem, &prep, &BaState::from_frames(problem.frames)))
}

/// Objective value for an explicit state of the problem's frames.
pub fn evaluate_state(problem: &BaProblem<'_>, state: &BaState) -> Result<CostBreakdown> {
    let prep = Prepared::new(problem)?;
    Ok(evaluate_prepared(problem, &prep, state))
}

fn linearize_prepared(problem: &BaProblem<'_>, prep: &Prepared, state: &BaState) -> NormalEquations {
    let n = problem.frames.len();
    let delta = problem.config.huber_delta;
    let lambda = problem.config.lambda;
    let mut pose_slot = vec![None; n];
    let mut free = 0usize;
    for (i, slot) in pose_slot.iter_mut().enumerate() {
        if !prep.fixed[i] {
            *slot = Some(free);
            free += 1;
        }
    }
    let mut hpp = nalgebra::DMatrix::<f64>::zeros(6 * free, 6 * free);
    let mut gp = nalgebra::DVector::<f64>::zeros(6 * free);

    let full = problem.mode == BaMode::Full;
    let mut depth: Vec<Option<DepthBlock>> = Vec::with_capacity(n);
    for (i, k) in problem.frames.iter().enumerate() {
        if !full || problem.fixed_depth.contains(&k.id) {
            depth.push(None);
            continue;
        }
        let mut coupled = BTreeSet::new();
        if let Some(s) = pose_slot[i] {
            coupled.insert(s);
        }
        for &(_, a, b) in &prep.edges {
            if a == i {
                if let Some(s) = pose_slot[b] {
                    coupled.insert(s);
                }
            }
        }
        depth.push(Some(DepthBlock::new(
            coupled.into_iter().collect(),
            k.pixel_mask.as_slice().to_vec(),
        )));
    }

    for &(e, a, b) in &prep.edges {
        let flow = problem.edges[e].flow.as_ref().expect("prepared edges carry flow");
        let t = EdgeTransform::new(&state.poses[a], &state.poses[b]);
        let kj = &prep.intrinsics[b];
        let (si, sj) = (pose_slot[a], pose_slot[b]);
        let u = state.inv_depth[a].as_slice();
        let mut h_ii = nalgebra::Matrix6::<f64>::zeros();
        let mut h_ij = nalgebra::Matrix6::<f64>::zeros();
        let mut h_jj = nalgebra::Matrix6::<f64>::zeros();
        let mut g_i = nalgebra::Vector6::<f64>::zeros();
        let mut g_j = nalgebra::Vector6::<f64>::zeros();
        let (ci, cj) = match depth[a].as_ref() {
            Some(blk) => (
                si.and_then(|s| blk.coupled.iter().position(|c| *c == s)),
                sj.and_then(|s| blk.coupled.iter().position(|c| *c == s)),
            ),
            None => (None, None),
        };
        for m in 0..u.len() {
            let w = pixel_weight(problem, e, a, m);
            if w <= 0.0 {
                continue;
            }
            if let Some(blk) = depth[a].as_mut() {
                if let Some(target) = prep.prior_target[a].as_ref().and_then(|p| p[m]) {
                    blk.huu[m] += lambda * w;
                    blk.gu[m] += lambda * w * (u[m] - target);
                }
            }
            let Some(r) = reprojection_block(kj, &t, &prep.rays[a][m], u[m], &flow.target[m]) else {
                continue;
            };
            let weight = w * huber_weight(r.residual.norm_squared(), delta);
            let jt_i = r.d_pose_i.transpose() * weight;
            let jt_j = r.d_pose_j.transpose() * weight;
            if si.is_some() {
                h_ii += jt_i * r.d_pose_i;
                g_i += jt_i * r.residual;
            }
            if sj.is_some() {
                h_jj += jt_j * r.d_pose_j;
                g_j += jt_j * r.residual;
            }
            if si.is_some() && sj.is_some() {
                h_ij += jt_i * r.d_pose_j;
            }
            if let Some(blk) = depth[a].as_mut() {
                let ju = r.d_inv_depth;
                blk.huu[m] += weight * ju.norm_squared();
                blk.gu[m] += weight * ju.dot(&r.residual);
                let nc = blk.coupled.len();
                if let Some(c) = ci {
                    blk.hpu[m * nc + c] += jt_i * ju;
                }
                if let Some(c) = cj {
                    blk.hpu[m * nc + c] += jt_j * ju;
                }
            }
        }
        if let Some(s) = si {
            let mut v = hpp.view_mut((6 * s, 6 * s), (6, 6));
            v += h_ii;
            let mut g = gp.rows_mut(6 * s, 6);
            g += g_i;
        }
        if let Some(s) = sj {
            let mut v = hpp.view_mut((6 * s, 6 * s), (6, 6));
            v += h_jj;
            let mut g = gp.rows_mut(6 * s, 6);
            g += g_j;
        }
        if let (Some(x), Some(y)) = (si, sj) {
            let mut v = hpp.view_mut((6 * x, 6 * y), (6, 6));
            v += h_ij;
            let mut v = hpp.view_mut((6 * y, 6 * x), (6, 6));
            v += h_ij.transpose();
        }
    }

    NormalEquations {
        pose_slot,
        hpp,
        gp,
        depth,
    }
}

/// Gauss-Newton system at the given state.
pub fn linearize(problem: &BaProblem<'_>, state: &BaState) -> Result<NormalEquations> {
    let prep = Prepared::new(problem)?;
    Ok(linearize_prepared(problem, &prep, state))
}

fn check_gauge(problem: &BaProblem<'_>) -> Result<()> {
    if problem.mode == BaMode::Full && !problem.frames.iter().any(|k| problem.fixed.contains(&k.id)) {
        return Err(Error::DegenerateGeometry(
            "full bundle adjustment needs at least one fixed pose".into(),
        ));
    }
    Ok(())
}

/// Callback receiving the iteration number and state.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &BaState);

/// Levenberg-Marquardt iterations; `observer` sees the state after each one.
pub fn run_ba(
    problem: &BaProblem<'_>,
    iterations: usize,
    mut observer: Option<Observer<'_>>,
) -> Result<BaResult> {
    check_gauge(problem)?;
    let prep = Prepared::new(problem)?;
    let mut state = BaState::from_frames(problem.frames);
    let cost_before = evaluate_prepared(problem, &prep, &state).total;
    let mut cost = cost_before;
    let mut damping = problem.config.initial_damping;
    let mut accepted_steps = 0;
    let mut converged = true;
    for it in 0..iterations {
        let eq = linearize_prepared(problem, &prep, &state);
        converged = false;
        for _ in 0..=problem.config.max_retries {
            let inc = solve_step(&eq, damping)?;
            let candidate = state.apply(&inc);
            let c = evaluate_prepared(problem, &prep, &candidate).total;
            if c <= cost {
                state = candidate;
                cost = c;
                damping = (damping / 10.0).max(problem.config.initial_damping);
                accepted_steps += 1;
                converged = true;
                break;
            }
            damping *= 10.0;
        }
        if let Some(obs) = observer.as_mut() {
            obs(it, &state);
        }
    }
    Ok(BaResult {
        state,
        cost_before,
        cost_after: cost,
        iterations,
        accepted_steps,
        converged,
    })
}

/// Mean `|reprojection - flow target|` over contributing pixels of edges touching
/// `frame_id`, or `None` if there are none.
pub fn mean_residual_flow(problem: &BaProblem<'_>, state: &BaState, frame_id: u64) -> Result<Option<f64>> {
    let prep = Prepared::new(problem)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(e, a, b) in &prep.edges {
        if problem.frames[a].id != frame_id && problem.frames[b].id != frame_id {
            continue;
        }
        let flow = problem.edges[e].flow.as_ref().expect("prepared edges carry flow");
        let t = EdgeTransform::new(&state.poses[a], &state.poses[b]);
        let u = state.inv_depth[a].as_slice();
        for (m, &um) in u.iter().enumerate() {
            if pixel_weight(problem, e, a, m) <= 0.0 {
                continue;
            }
            if let Some(r) = reprojection_residual(&prep.intrinsics[b], &t, &prep.rays[a][m], um, &flow.target[m]) {
                sum += r.norm();
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Current reprojection of `src`'s grid into `dst`, used to seed flow.
pub fn current_reprojection(src: &Keyframe, dst: &Keyframe) -> Grid<Vector2<f64>> {
    let j_from_i = relative_pose(&src.pose, &dst.pose);
    reproject(&src.intrinsics(), &j_from_i, &src.depth_map()).coords
}

/// Full-history refinement: edges between every pair of keyframes within
/// `radius` in admission order; the oldest keyframe's pose and depth are fixed.
pub fn global_ba(
    frames: &mut [Keyframe],
    radius: usize,
    provider: &mut dyn FlowProvider,
    iterations: usize,
    config: BaConfig,
) -> Result<BaResult> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::NoEdges(frames.first().map_or(0, |k| k.id)));
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && a.abs_diff(b) <= radius {
                let init = current_reprojection(&frames[a], &frames[b]);
                let flow = provider.flow(&FlowRequest {
                    src: frames[a].frame_index,
                    dst: frames[b].frame_index,
                    stream: u64::MAX,
                    initial: Some(&init),
                });
                edges.push(Edge {
                    src: frames[a].id,
                    dst: frames[b].id,
                    flow: Some(flow),
                });
            }
        }
    }
    let result = {
        let problem = BaProblem {
            frames,
            edges: &edges,
            fixed: [frames[0].id].into_iter().collect(),
            fixed_depth: [frames[0].id].into_iter().collect(),
            mode: BaMode::Full,
            config,
        };
        run_ba(&problem, iterations, None)?
    };
    result.state.write_back(frames);
    Ok(result)
}
