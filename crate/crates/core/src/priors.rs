//! Depth priors and flow observations, and the providers that produce them.
//!
//! The synthetic providers are experimental stand-ins for learned models: they
//! start from ground truth and inject controlled, seeded noise. Their confidence
//! maps are constructions of this crate; callers should rely only on their
//! ordering (higher confidence means smaller injected error).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::raster::Grid;
use crate::synth_world::{gt_correspondence, Correspondence, Sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Monocular,
    Mvs,
    File,
}

/// A per-pixel depth estimate with validity and optional confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrior {
    depth: Grid<f64>,
    confidence: Option<Grid<f64>>,
    kind: PriorKind,
    valid: Grid<bool>,
}

impl DepthPrior {
    /// Pixels with non-positive or non-finite depth become invalid.
    pub fn new(depth: Grid<f64>, confidence: Option<Grid<f64>>, kind: PriorKind) -> Result<Self> {
        if let Some(c) = &confidence {
            if !c.same_shape(&depth) {
                return Err(Error::DimensionMismatch {
                    expected_w: depth.width(),
                    expected_h: depth.height(),
                    found_w: c.width(),
                    found_h: c.height(),
                });
            }
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("confidence", "values must lie in [0, 1]"));
            }
        } else if kind == PriorKind::Mvs {
            return Err(Error::config("confidence", "MVS priors carry a confidence map"));
        }
        let valid = depth.map(|d| d.is_finite() && *d > 0.0);
        Ok(Self {
            depth,
            confidence,
            kind,
            valid,
        })
    }

    pub fn depth(&self) -> &Grid<f64> {
        &self.depth
    }

    pub fn confidence(&self) -> Option<&Grid<f64>> {
        self.confidence.as_ref()
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    #[inline]
    pub fn inverse_depth(&self, i: usize) -> Option<f64> {
        self.valid[i].then(|| 1.0 / self.depth[i])
    }
}

/// Flow from frame i to frame j on the optimization grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowObservation {
    /// Target coordinates in frame j (grid pixels).
    pub target: Grid<Vector2<f64>>,
    /// Per-pixel confidence in `[0, 1]`; zero wherever `valid` is false.
    pub confidence: Grid<f64>,
    pub valid: Grid<bool>,
}

impl FlowObservation {
    /// Mean displacement `|target - source pixel|` over valid pixels.
    pub fn mean_magnitude(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.target.len() {
            if self.valid[i] {
                let (x, y) = self.target.coords(i);
                sum += (self.target[i] - Vector2::new(x as f64, y as f64)).norm();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

fn default_capture() -> Option<f64> {
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Isotropic Gaussian flow noise, grid pixels.
    #[serde(default)]
    pub flow_sigma: f64,
    /// Relative depth noise (standard deviation of the multiplicative error).
    #[serde(default)]
    pub depth_rel_sigma: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
    /// Outlier displacement bound as a fraction of the grid width.
    #[serde(default)]
    pub outlier_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Largest correction (grid pixels) the flow estimator can make relative to the
    /// initial flow it is given. `None` means unlimited.
    #[serde(default = "default_capture")]
    pub capture_radius: Option<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            flow_sigma: 0.0,
            depth_rel_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_scale: 0.0,
            seed: 0,
            capture_radius: None,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        for (name, v) in [
            ("outlier_fraction", self.outlier_fraction),
            ("outlier_scale", self.outlier_scale),
            ("depth_rel_sigma", self.depth_rel_sigma),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{field}.{name}"), "must lie in [0, 1)"));
            }
        }
        if !(self.flow_sigma >= 0.0 && self.flow_sigma.is_finite()) {
            return Err(Error::config(format!("{field}.flow_sigma"), "must be finite and >= 0"));
        }
        if let Some(r) = self.capture_radius {
            if !(r > 0.0) {
                return Err(Error::config(format!("{field}.capture_radius"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Deterministic RNG for one (seed, a, b, stream) tuple.
pub(crate) fn stream_rng(seed: u64, a: u64, b: u64, stream: u64) -> ChaCha8Rng {
    let mut h = seed ^ 0x51_7C_C1_B7_27_22_0A_95;
    for v in [a, b, stream] {
        h = (h ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn normal2(rng: &mut ChaCha8Rng) -> Vector2<f64> {
    Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Ground-truth flow from frame i to frame j plus seeded noise and outliers.
///
/// Confidence is `exp(-|n|^2 / (2 sigma^2))` for injected noise `n`, zero for
/// outliers and for occluded or out-of-frame pixels.
pub fn oracle_flow(seq: &Sequence, i: usize, j: usize, factor: usize, noise: &NoiseModel, stream: u64) -> FlowObservation {
    noisy_flow(gt_correspondence(seq, i, j, factor), i, j, noise, stream)
}

/// Applies the oracle noise model to a precomputed correspondence of frames i and j.
pub fn noisy_flow(gt: Correspondence, i: usize, j: usize, noise: &NoiseModel, stream: u64) -> FlowObservation {
    let w = gt.coords.width();
    let h = gt.coords.height();
    let mut rng = stream_rng(noise.seed, i as u64, j as u64, stream);
    let mut target = gt.coords;
    let mut confidence = Grid::filled(w, h, 0.0);
    let valid = gt.visible;
    let outlier_radius = noise.outlier_scale * w as f64;
    for idx in 0..target.len() {
        // draw the same amount of randomness for every pixel
        let n = normal2(&mut rng) * noise.flow_sigma;
        let u: f64 = rng.random();
        let ang: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let mag: f64 = rng.random::<f64>() * outlier_radius;
        if !valid[idx] {
            continue;
        }
        if u < noise.outlier_fraction {
            target[idx] += Vector2::new(ang.cos(), ang.sin()) * mag;
            confidence[idx] = 0.0;
        } else {
            target[idx] += n;
            confidence[idx] = if noise.flow_sigma > 0.0 {
                (-n.norm_squared() / (2.0 * noise.flow_sigma * noise.flow_sigma)).exp().clamp(0.0, 1.0)
            } else {
                1.0
            };
        }
    }
    FlowObservation {
        target,
        confidence,
        valid,
    }
}

/// Request for flow on one directed edge.
#[derive(Debug, Clone, Copy)]
pub struct FlowRequest<'a> {
    pub src: usize,
    pub dst: usize,
    /// Distinguishes repeated requests for the same edge.
    pub stream: u64,
    /// Current pose/depth-induced reprojection of the source grid into the target.
    pub initial: Option<&'a Grid<Vector2<f64>>>,
}

pub trait FlowProvider {
    fn flow(&mut self, request: &FlowRequest<'_>) -> FlowObservation;
}

/// Oracle flow with a finite capture radius around the initial flow.
///
/// Ground-truth correspondences are cached per frame pair.
#[derive(Debug, Clone)]
pub struct OracleFlowProvider<'a> {
    pub sequence: &'a Sequence,
    pub factor: usize,
    pub noise: NoiseModel,
    cache: HashMap<(usize, usize), Correspondence>,
}

impl<'a> OracleFlowProvider<'a> {
    pub fn new(sequence: &'a Sequence, factor: usize, noise: NoiseModel) -> Self {
        Self {
            sequence,
            factor,
            noise,
            cache: HashMap::new(),
        }
    }
}

impl FlowProvider for OracleFlowProvider<'_> {
    fn flow(&mut self, req: &FlowRequest<'_>) -> FlowObservation {
        let (seq, factor) = (self.sequence, self.factor);
        let gt = self
            .cache
            .entry((req.src, req.dst))
            .or_insert_with(|| gt_correspondence(seq, req.src, req.dst, factor))
            .clone();
        let mut obs = noisy_flow(gt, req.src, req.dst, &self.noise, req.stream);
        if let (Some(r), Some(init)) = (self.noise.capture_radius, req.initial) {
            for idx in 0..obs.target.len() {
                if !obs.valid[idx] {
                    continue;
                }
                let d = obs.target[idx] - init[idx];
                let n = d.norm();
                if n > r {
                    obs.target[idx] = init[idx] + d * (r / n);
                    obs.confidence[idx] *= r / n;
                }
            }
        }
        obs
    }
}

/// Multiplicative-noise monocular prior: `gt * (1 + e) * corruption`, `e ~ N(0, sigma)`.
pub fn synth_mono_prior(gt_depth: &Grid<f64>, noise: &NoiseModel, corruption: f64, stream: u64) -> DepthPrior {
    let mut rng = stream_rng(noise.seed, 0x6d6f_6e6f, 0, stream);
    let depth = gt_depth.map(|d| {
        let e: f64 = StandardNormal.sample(&mut rng);
        let e = (e * noise.depth_rel_sigma).max(-0.9);
        if *d > 0.0 {
            d * (1.0 + e) * corruption
        } else {
            0.0
        }
    });
    DepthPrior::new(depth, None, PriorKind::Monocular).expect("synthetic prior is well formed")
}

/// Reference pose error at which MVS noise doubles.
pub const MVS_POSE_ERROR_SCALE: f64 = 0.01;

/// MVS-like prior whose noise grows with the pose error of the views it was built from.
pub fn synth_mvs_prior(gt_depth: &Grid<f64>, pose_error: f64, noise: &NoiseModel, stream: u64) -> DepthPrior {
    let sigma = noise.depth_rel_sigma * (1.0 + pose_error.max(0.0) / MVS_POSE_ERROR_SCALE);
    let mut rng = stream_rng(noise.seed, 0x006d_7673, 0, stream);
    let mut confidence = Grid::filled(gt_depth.width(), gt_depth.height(), 0.0);
    let mut depth = Grid::filled(gt_depth.width(), gt_depth.height(), 0.0);
    for i in 0..gt_depth.len() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let e = (z * sigma).max(-0.9);
        if gt_depth[i] > 0.0 {
            depth[i] = gt_depth[i] * (1.0 + e);
            confidence[i] = if sigma > 0.0 { 1.0 / (1.0 + e.abs() / sigma) } else { 1.0 };
        }
    }
    DepthPrior::new(depth, Some(confidence), PriorKind::Mvs).expect("synthetic prior is well formed")
}

/// Reads an `RDEPTH` file. `expected` is the `(width, height)` the caller requires.
pub fn load_depth_file(path: &Path, expected: Option<(usize, usize)>) -> Result<DepthPrior> {
    let bytes = formats::read_file(path)?;
    let raw = formats::decode_depth(&bytes)?;
    if let Some((w, h)) = expected {
        if raw.width() != w || raw.height() != h {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                found_w: raw.width(),
                found_h: raw.height(),
            });
        }
    }
    DepthPrior::new(raw.map(|v| *v as f64), None, PriorKind::File)
}

pub fn write_depth_file(path: &Path, depth: &Grid<f64>) -> Result<()> {
    formats::write_file(path, &formats::encode_depth(&depth.map(|v| *v as f32)))
}

/// Supplies the monocular prior of a frame at the optimization resolution.
pub trait MonoProvider {
    fn prior(&mut self, frame: usize) -> Result<DepthPrior>;
}

/// Supplies an MVS prior for a keyframe given the pose error of its source views.
pub trait MvsProvider {
    fn prior(&mut self, frame: usize, pose_error: f64) -> Result<DepthPrior>;
}

#[derive(Debug, Clone)]
pub struct SyntheticMono<'a> {
    pub sequence: &'a Sequence,
    pub factor: usize,
    pub noise: NoiseModel,
    /// Per-frame global scale corruption (1.0 = none).
    pub corruption: Vec<f64>,
}

impl MonoProvider for SyntheticMono<'_> {
    fn prior(&mut self, frame: usize) -> Result<DepthPrior> {
        let gt = self.sequence.depth_on_grid(frame, self.factor);
        let c = self.corruption.get(frame).copied().unwrap_or(1.0);
        Ok(synth_mono_prior(&gt, &self.noise, c, frame as u64))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticMvs<'a> {
    pub sequence: &'a Sequence,
    pub factor: usize,
    pub noise: NoiseModel,
}

impl MvsProvider for SyntheticMvs<'_> {
    fn prior(&mut self, frame: usize, pose_error: f64) -> Result<DepthPrior> {
        let gt = self.sequence.depth_on_grid(frame, self.factor);
        Ok(synth_mvs_prior(&gt, pose_error, &self.noise, frame as u64))
    }
}

/// How values in prior files are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FileDepthEncoding {
    Metric,
    /// Inverse-depth-like relative output, converted with a scale and shift.
    Relative { scale: f64, shift: f64 },
}

/// Monocular priors from `frame_{index:05}.rdepth` files at grid resolution.
#[derive(Debug, Clone)]
pub struct FileMono {
    pub dir: PathBuf,
    pub width: usize,
    pub height: usize,
    pub encoding: FileDepthEncoding,
}

impl FileMono {
    pub fn path_for(&self, frame: usize) -> PathBuf {
        self.dir.join(format!("frame_{frame:05}.rdepth"))
    }
}

impl MonoProvider for FileMono {
    fn prior(&mut self, frame: usize) -> Result<DepthPrior> {
        let loaded = load_depth_file(&self.path_for(frame), Some((self.width, self.height)))?;
        match self.encoding {
            FileDepthEncoding::Metric => Ok(loaded),
            FileDepthEncoding::Relative { scale, shift } => {
                // raw values are read back unfiltered; invalid raw pixels stay invalid
                let raw = loaded.depth().clone();
                let (metric, _) = crate::depth_guidance::metric_from_relative(&raw, scale, shift);
                DepthPrior::new(metric, None, PriorKind::File)
            }
        }
    }
}
