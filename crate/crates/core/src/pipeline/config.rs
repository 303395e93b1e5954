use serde::{Deserialize, Serialize};

use crate::ba::{BaConfig, DEFAULT_LAMBDA};
use crate::depth_guidance::{Domain, DEFAULT_DROP_FRACTION};
use crate::error::{Error, Result};
use crate::frame_graph::{DEFAULT_EDGE_RADIUS, DEFAULT_KEYFRAME_THRESHOLD, DEFAULT_WINDOW_SIZE, WARMUP_KEYFRAMES};
use crate::priors::NoiseModel;

/// How the per-keyframe regularization switch is set after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Photometric test against the warmup reference.
    Adaptive,
    AlwaysOn,
    Never,
}

/// Global scale corruption injected into a subset of monocular priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    /// Share of eligible frames whose prior is scaled.
    pub fraction: f64,
    pub factor: f64,
    /// Frames before this index are never corrupted.
    pub start_frame: usize,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            fraction: 0.0,
            factor: 3.0,
            start_frame: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalBaConfig {
    pub radius: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub domain: Domain,
    /// Overrides the domain's gate threshold.
    pub alpha: Option<f64>,
    pub lambda: f64,
    pub huber_delta: f64,
    pub window_size: usize,
    pub edge_radius: usize,
    /// Oldest window poses held fixed during keyframe BA (always leaving the newest free).
    pub fixed_poses: usize,
    /// Hold the oldest window keyframe's depth constant as well as its pose.
    pub anchor_depth: bool,
    pub keyframe_threshold: f64,
    pub flow_steps: usize,
    pub ba_per_step: usize,
    /// BA iteration (1-based) after which the MVS gate is evaluated.
    pub mvs_trigger_iteration: usize,
    pub warmup: usize,
    /// Grid downsampling factor of the optimization.
    pub downsample: usize,
    /// Non-keyframes reuse the depth of the nearest keyframe.
    pub fast_mode: bool,
    pub gate: GateMode,
    /// Without priors every frame starts at `constant_depth` and nothing is regularized.
    pub use_priors: bool,
    pub constant_depth: f64,
    pub mvs: bool,
    pub mvs_drop_fraction: f64,
    /// Keyframes a non-keyframe is tracked against.
    pub tracking_refs: usize,
    pub tracking_flow_steps: usize,
    pub tracking_ba_per_step: usize,
    pub global_ba: Option<GlobalBaConfig>,
    /// Realign monocular priors to ground truth when their mean relative error exceeds this.
    pub realign_threshold: Option<f64>,
    pub flow_noise: NoiseModel,
    pub mono_noise: NoiseModel,
    pub mvs_noise: NoiseModel,
    pub corruption: CorruptionSpec,
    /// Mixed into every noise model seed.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            domain: Domain::Indoor,
            alpha: None,
            lambda: DEFAULT_LAMBDA,
            huber_delta: 1.0,
            window_size: DEFAULT_WINDOW_SIZE,
            edge_radius: DEFAULT_EDGE_RADIUS,
            fixed_poses: 2,
            anchor_depth: true,
            keyframe_threshold: DEFAULT_KEYFRAME_THRESHOLD,
            flow_steps: 6,
            ba_per_step: 2,
            mvs_trigger_iteration: 8,
            warmup: WARMUP_KEYFRAMES,
            downsample: 8,
            fast_mode: false,
            gate: GateMode::Adaptive,
            use_priors: true,
            constant_depth: 1.0,
            mvs: false,
            mvs_drop_fraction: DEFAULT_DROP_FRACTION,
            tracking_refs: 2,
            tracking_flow_steps: 2,
            tracking_ba_per_step: 2,
            global_ba: None,
            realign_threshold: None,
            flow_noise: NoiseModel::noiseless(),
            mono_noise: NoiseModel::noiseless(),
            mvs_noise: NoiseModel::noiseless(),
            corruption: CorruptionSpec::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| self.domain.alpha())
    }

    pub fn ba_iterations(&self) -> usize {
        self.flow_steps * self.ba_per_step
    }

    pub fn ba_config(&self) -> BaConfig {
        BaConfig {
            lambda: self.lambda,
            huber_delta: self.huber_delta,
            ..BaConfig::default()
        }
    }

    /// Noise model with its seed mixed with the run seed and a per-use salt.
    pub fn seeded(&self, noise: &NoiseModel, salt: u64) -> NoiseModel {
        let mut h = self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= noise.seed.wrapping_mul(0x94D0_49BB_1331_11EB) ^ salt;
        NoiseModel {
            seed: h ^ (h >> 31),
            ..*noise
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha();
        if !(alpha > 1.0 && alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and > 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("huber_delta", "must be positive"));
        }
        if self.window_size < 2 {
            return Err(Error::config("window_size", "must be at least 2"));
        }
        if self.edge_radius == 0 {
            return Err(Error::config("edge_radius", "must be at least 1"));
        }
        if self.fixed_poses == 0 {
            return Err(Error::config("fixed_poses", "at least one pose must be fixed"));
        }
        if !(self.keyframe_threshold >= 0.0 && self.keyframe_threshold.is_finite()) {
            return Err(Error::config("keyframe_threshold", "must be finite and >= 0"));
        }
        if self.flow_steps == 0 {
            return Err(Error::config("flow_steps", "must be at least 1"));
        }
        if self.ba_per_step == 0 {
            return Err(Error::config("ba_per_step", "must be at least 1"));
        }
        if self.ba_iterations() >= 0x4000 || self.tracking_flow_steps >= 0x4000 {
            return Err(Error::config("flow_steps", "schedule is too long"));
        }
        if self.mvs_trigger_iteration == 0 || self.mvs_trigger_iteration > self.ba_iterations() {
            return Err(Error::config(
                "mvs_trigger_iteration",
                format!("must lie in [1, {}]", self.ba_iterations()),
            ));
        }
        if self.warmup < 2 {
            return Err(Error::config("warmup", "must be at least 2"));
        }
        if self.downsample == 0 {
            return Err(Error::config("downsample", "must be at least 1"));
        }
        if !(self.constant_depth > 0.0 && self.constant_depth.is_finite()) {
            return Err(Error::config("constant_depth", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.mvs_drop_fraction) {
            return Err(Error::config("mvs_drop_fraction", "must lie in [0, 1)"));
        }
        if self.tracking_refs == 0 {
            return Err(Error::config("tracking_refs", "must be at least 1"));
        }
        if self.tracking_flow_steps == 0 || self.tracking_ba_per_step == 0 {
            return Err(Error::config("tracking_flow_steps", "tracking schedule must be non-empty"));
        }
        if let Some(g) = self.global_ba {
            if g.radius == 0 || g.iterations == 0 {
                return Err(Error::config("global_ba", "radius and iterations must be positive"));
            }
        }
        if let Some(t) = self.realign_threshold {
            if !(t >= 0.0) {
                return Err(Error::config("realign_threshold", "must be >= 0"));
            }
        }
        self.flow_noise.validate("flow_noise")?;
        self.mono_noise.validate("mono_noise")?;
        self.mvs_noise.validate("mvs_noise")?;
        let c = &self.corruption;
        if !(0.0..=1.0).contains(&c.fraction) {
            return Err(Error::config("corruption.fraction", "must lie in [0, 1]"));
        }
        if !(c.factor > 0.0 && c.factor.is_finite()) {
            return Err(Error::config("corruption.factor", "must be positive"));
        }
        Ok(())
    }
}
