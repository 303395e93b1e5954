//! Gating of the depth prior: photometric consistency gate, MVS geometry gate,
//! confidence masking, relative-to-metric conversion and prior realignment.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_graph::{Edge, FrameGraph, Keyframe};
use crate::geometry::{CameraIntrinsics, Pose, Z_MIN};
use crate::raster::{Grid, RgbImage};

/// Scene domain; selects the gate threshold and the relative-depth constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Indoor,
    Outdoor,
}

impl Domain {
    pub fn alpha(self) -> f64 {
        match self {
            Domain::Indoor => 1.5,
            Domain::Outdoor => 1.75,
        }
    }

    /// `(scale, shift)` mapping relative predictions to inverse metric depth.
    pub fn relative_depth_params(self) -> (f64, f64) {
        match self {
            Domain::Indoor => (0.000305, 0.1378),
            Domain::Outdoor => (0.00006016, 0.00579),
        }
    }
}

/// One camera as seen by the photometric error.
#[derive(Debug, Clone, Copy)]
pub struct PhotometricView<'a> {
    pub image: &'a RgbImage,
    /// Full-resolution intrinsics matching `image`.
    pub camera: CameraIntrinsics,
    pub world_from_camera: Pose,
}

/// Mean weighted squared color difference between grid pixels of `src` and their
/// reprojections into each target.
///
/// `depth` (meters) and every weight map live on the grid obtained by downsampling
/// `src.camera` by `downsample`. Target weights of `None` mean unit weight.
/// Pixels with non-positive depth or zero weight, and pixels whose reprojection
/// leaves the target image, do not contribute.
pub fn photometric_error(
    src: &PhotometricView<'_>,
    depth: &Grid<f64>,
    downsample: usize,
    targets: &[(PhotometricView<'_>, Option<&Grid<f64>>)],
) -> f64 {
    let grid = src.camera.downsampled(downsample);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (dst, weights) in targets {
        let j_from_i = crate::geometry::relative_pose(&src.world_from_camera, &dst.world_from_camera);
        for m in 0..depth.len() {
            let w = weights.map_or(1.0, |g| g[m]);
            let d = depth[m];
            if !(w > 0.0 && d > 0.0 && d.is_finite()) {
                continue;
            }
            let (x, y) = depth.coords(m);
            let p = Vector2::new(x as f64, y as f64);
            let full = CameraIntrinsics::grid_to_full(p, downsample);
            let point = j_from_i.transform_point(&(grid.ray(&p) * d));
            if point.z <= Z_MIN {
                continue;
            }
            let q = dst.camera.project(&point);
            let (Some(ci), Some(cj)) = (
                src.image.sample_bilinear(full.x, full.y),
                dst.image.sample_bilinear(q.x, q.y),
            ) else {
                continue;
            };
            sum += w * (ci - cj).norm_squared();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn view(k: &Keyframe) -> PhotometricView<'_> {
    PhotometricView {
        image: &k.image,
        camera: k.camera,
        world_from_camera: k.pose,
    }
}

/// Photometric error of keyframe `src_id` over its outgoing edges, weighted by flow
/// confidence. `depth` and `pose` override the keyframe's own estimates.
pub fn keyframe_photometric_error(
    frames: &[Keyframe],
    edges: &[Edge],
    src_id: u64,
    depth: Option<&Grid<f64>>,
    pose: Option<Pose>,
) -> Result<f64> {
    let src = frames
        .iter()
        .find(|k| k.id == src_id)
        .ok_or(Error::NoEdges(src_id))?;
    let mut targets = Vec::new();
    for e in edges.iter().filter(|e| e.src == src_id) {
        let dst = frames
            .iter()
            .find(|k| k.id == e.dst)
            .ok_or(Error::NoEdges(src_id))?;
        targets.push((view(dst), e.flow.as_ref().map(|f| &f.confidence)));
    }
    if targets.is_empty() {
        return Err(Error::NoEdges(src_id));
    }
    let own_depth;
    let depth = match depth {
        Some(d) => d,
        None => {
            own_depth = src.depth_map();
            &own_depth
        }
    };
    let mut v = view(src);
    if let Some(p) = pose {
        v.world_from_camera = p;
    }
    Ok(photometric_error(&v, depth, src.downsample, &targets))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateDecision {
    pub keyframe: u64,
    /// `None` for warmup keyframes, which are never gated on.
    pub eta: Option<f64>,
    pub c: bool,
}

/// Reference photometric error and the log of per-keyframe gate decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    eta_init: Option<f64>,
    alpha: f64,
    decisions: Vec<GateDecision>,
}

impl GateState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and > 1"));
        }
        Ok(Self {
            eta_init: None,
            alpha,
            decisions: Vec::new(),
        })
    }

    pub fn eta_init(&self) -> Option<f64> {
        self.eta_init
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn decisions(&self) -> &[GateDecision] {
        &self.decisions
    }

    /// Records the reference error from the latest keyframe of a warmed-up graph.
    pub fn set_reference(&mut self, graph: &FrameGraph) -> Result<f64> {
        if !graph.initialized() {
            return Err(Error::NotInitialized);
        }
        if self.eta_init.is_some() {
            return Err(Error::GateAlreadySet);
        }
        let latest = graph.latest().ok_or(Error::NotInitialized)?;
        let eta = keyframe_photometric_error(graph.keyframes(), graph.edges(), latest.id, None, None)?;
        self.set_reference_value(eta)?;
        Ok(eta)
    }

    pub fn set_reference_value(&mut self, eta: f64) -> Result<()> {
        if self.eta_init.is_some() {
            return Err(Error::GateAlreadySet);
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::DegenerateGeometry(format!("reference photometric error {eta} is not usable")));
        }
        self.eta_init = Some(eta);
        Ok(())
    }

    pub fn record_warmup(&mut self, keyframe: u64) {
        self.decisions.push(GateDecision {
            keyframe,
            eta: None,
            c: false,
        });
    }

    /// Logs a forced decision that bypasses the photometric test.
    pub fn record_forced(&mut self, keyframe: u64, eta: Option<f64>, c: bool) {
        self.decisions.push(GateDecision { keyframe, eta, c });
    }

    /// Gate decision for a post-warmup keyframe.
    pub fn decide(&mut self, keyframe: u64, eta_new: f64) -> Result<bool> {
        let eta_init = self.eta_init.ok_or(Error::NotInitialized)?;
        let c = depth_gate(eta_new, eta_init, self.alpha);
        self.decisions.push(GateDecision {
            keyframe,
            eta: Some(eta_new),
            c,
        });
        Ok(c)
    }
}

/// `true` iff `eta_new < alpha * eta_init`.
pub fn depth_gate(eta_new: f64, eta_init: f64, alpha: f64) -> bool {
    eta_new < alpha * eta_init
}

pub const MVS_MIN_BASELINE: f64 = 0.1;
pub const MVS_MIN_ANGLE_DEG: f64 = 10.0;
pub const MVS_MAX_ANGLE_DEG: f64 = 30.0;
/// Slack on the angle interval for rounding in the angle computation.
const ANGLE_TOL_DEG: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvsGateInput {
    /// Camera displacement from keyframe k-2 to k-1 (meters).
    pub t_prev: Vector3<f64>,
    /// Camera displacement from keyframe k-1 to k (meters).
    pub t_curr: Vector3<f64>,
}

impl MvsGateInput {
    /// Displacements between three consecutive camera centers.
    pub fn from_poses(k2: &Pose, k1: &Pose, k0: &Pose) -> Self {
        Self {
            t_prev: k1.translation - k2.translation,
            t_curr: k0.translation - k1.translation,
        }
    }
}

/// Angle between two vectors in degrees, or `None` if either is near zero.
pub fn angle_between_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> Option<f64> {
    if a.norm() < 1e-9 || b.norm() < 1e-9 {
        return None;
    }
    Some(a.cross(b).norm().atan2(a.dot(b)).to_degrees())
}

/// Enough baseline and a well-conditioned direction change between the last
/// two displacements.
pub fn mvs_gate(input: &MvsGateInput) -> bool {
    let Some(angle) = angle_between_deg(&input.t_prev, &input.t_curr) else {
        return false;
    };
    input.t_prev.norm() + input.t_curr.norm() > MVS_MIN_BASELINE
        && (MVS_MIN_ANGLE_DEG - ANGLE_TOL_DEG..=MVS_MAX_ANGLE_DEG + ANGLE_TOL_DEG).contains(&angle)
}

pub const DEFAULT_DROP_FRACTION: f64 = 0.2;

/// Keeps all but the `floor(drop_fraction * N)` lowest-confidence pixels; ties are
/// dropped in index order.
///
/// # Panics
/// If `drop_fraction` is outside `[0, 1)` or a confidence is NaN.
pub fn confidence_mask(confidence: &Grid<f64>, drop_fraction: f64) -> Grid<bool> {
    assert!((0.0..1.0).contains(&drop_fraction), "drop_fraction must lie in [0, 1)");
    let n = confidence.len();
    let drop = (drop_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        confidence[a]
            .partial_cmp(&confidence[b])
            .expect("confidence must not be NaN")
            .then(a.cmp(&b))
    });
    let mut keep = Grid::filled(confidence.width(), confidence.height(), true);
    for &i in &order[..drop] {
        keep[i] = false;
    }
    keep
}

/// `depth = 1 / (scale * raw + shift)`; pixels where the denominator is not
/// positive are flagged invalid and get depth 0.
pub fn metric_from_relative(raw: &Grid<f64>, scale: f64, shift: f64) -> (Grid<f64>, Grid<bool>) {
    let valid = raw.map(|r| {
        let den = scale * r + shift;
        den > 0.0 && den.is_finite()
    });
    let depth = Grid::from_fn(raw.width(), raw.height(), |x, y| {
        if *valid.get(x, y) {
            1.0 / (scale * raw.get(x, y) + shift)
        } else {
            0.0
        }
    });
    (depth, valid)
}

pub const DEFAULT_REALIGN_THRESHOLD: f64 = 0.2;

/// Mean of `|prior - reference| / reference` over pixels where both are usable.
pub fn mean_relative_error(prior: &Grid<f64>, reference: &Grid<f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, r) in prior.iter().zip(reference.iter()) {
        if *r > 0.0 && r.is_finite() && p.is_finite() {
            sum += (p - r).abs() / r;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Replaces the prior with its least-squares affine fit to `reference` when the
/// mean relative error exceeds `rel_threshold`.
pub fn align_prior(prior: &Grid<f64>, reference: &Grid<f64>, rel_threshold: f64) -> Result<Grid<f64>> {
    if !prior.same_shape(reference) {
        return Err(Error::DimensionMismatch {
            expected_w: reference.width(),
            expected_h: reference.height(),
            found_w: prior.width(),
            found_h: prior.height(),
        });
    }
    let Some(err) = mean_relative_error(prior, reference) else {
        return Err(Error::DegenerateFit);
    };
    if err <= rel_threshold {
        return Ok(prior.clone());
    }
    let pairs: Vec<(f64, f64)> = prior
        .iter()
        .zip(reference.iter())
        .filter(|(p, r)| **r > 0.0 && r.is_finite() && p.is_finite())
        .map(|(p, r)| (*p, *r))
        .collect();
    let n = pairs.len() as f64;
    let mp = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mr = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|(p, _)| (p - mp) * (p - mp)).sum();
    let sxy: f64 = pairs.iter().map(|(p, r)| (p - mp) * (r - mr)).sum();
    if sxx <= 1e-12 * (mp * mp).max(1.0) * n {
        return Err(Error::DegenerateFit);
    }
    let a = sxy / sxx;
    let b = mr - a * mp;
    Ok(prior.map(|p| a * p + b))
}
