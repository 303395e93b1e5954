//! Frame-by-frame odometry loop: keyframe selection, the flow/BA schedule with
//! prior gating and MVS injection, non-keyframe tracking and window sliding.

mod config;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use config::{CorruptionSpec, GateMode, GlobalBaConfig, PipelineConfig};

use crate::ba::{self, current_reprojection, run_ba, BaMode, BaProblem, BaState};
use crate::depth_guidance::{
    align_prior, confidence_mask, keyframe_photometric_error, mvs_gate, GateState, MvsGateInput,
};
use crate::error::{Error, Result};
use crate::eval_io::Trajectory;
use crate::frame_graph::{Edge, FrameGraph, Keyframe, KeyframeDecision};
use crate::geometry::{relative_pose, Pose};
use crate::priors::{
    DepthPrior, FlowProvider, FlowRequest, MonoProvider, MvsProvider, OracleFlowProvider, PriorKind, SyntheticMono,
    SyntheticMvs,
};
use crate::raster::Grid;
use crate::synth_world::Sequence;

/// Per-keyframe record of the optimization schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyframeDiagnostics {
    pub id: u64,
    pub frame_index: usize,
    pub warmup: bool,
    pub flow_updates: usize,
    pub ba_iterations: usize,
    /// Residual flow over edges touching the keyframe after each BA iteration.
    pub residual_flow: Vec<f64>,
    /// Photometric error used for the gate decision.
    pub eta: Option<f64>,
    pub gate_c: bool,
    /// BA iteration after which the MVS gate was evaluated.
    pub mvs_checked_at: Option<usize>,
    pub mvs_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameDiagnostics {
    pub frame_index: usize,
    /// Mean flow magnitude from the latest keyframe (grid pixels).
    pub flow_magnitude: f64,
    pub keyframe: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub frames: Vec<FrameDiagnostics>,
    pub keyframes: Vec<KeyframeDiagnostics>,
    pub eta_init: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    /// Every keyframe ever admitted, in admission order, with final estimates.
    pub keyframes: Vec<Keyframe>,
    pub diagnostics: Diagnostics,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Copy)]
struct FrameRecord {
    timestamp: f64,
    /// Keyframe the pose is expressed against.
    anchor: u64,
    anchor_from_frame: Pose,
}

/// Id given to the temporary frame of non-keyframe tracking.
const TRACKED_ID: u64 = u64::MAX;

const STREAM_DECISION: u64 = 0xFFFF;
const STREAM_TRACKING: u64 = 0x8000;
const STREAM_RESIDUAL: u64 = 0x4000;

/// Indices of frames whose monocular prior is scale-corrupted.
pub fn corrupted_frames(config: &PipelineConfig, n_frames: usize) -> Vec<usize> {
    let c = &config.corruption;
    let mut eligible: Vec<usize> = (c.start_frame..n_frames).collect();
    let count = (c.fraction * eligible.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC022_0F7E);
    eligible.shuffle(&mut rng);
    let mut out: Vec<usize> = eligible.into_iter().take(count).collect();
    out.sort_unstable();
    out
}

/// Confidence-weighted mean correction a fresh flow query would add on top of
/// the reprojection at `state`, over edges touching keyframe `id`.
fn residual_flow(
    provider: &mut dyn FlowProvider,
    frames: &[Keyframe],
    state: &BaState,
    edges: &[Edge],
    id: u64,
    stream: u64,
) -> f64 {
    let mut snapshot = frames.to_vec();
    state.write_back(&mut snapshot);
    let (mut sum, mut weight) = (0.0, 0.0);
    for e in edges.iter().filter(|e| e.src == id || e.dst == id) {
        let src = snapshot.iter().find(|k| k.id == e.src).expect("edge endpoints are live");
        let dst = snapshot.iter().find(|k| k.id == e.dst).expect("edge endpoints are live");
        let init = current_reprojection(src, dst);
        let obs = provider.flow(&FlowRequest {
            src: src.frame_index,
            dst: dst.frame_index,
            stream,
            initial: Some(&init),
        });
        for i in 0..init.len() {
            let w = obs.confidence[i];
            if obs.valid[i] && src.pixel_mask[i] && w > 0.0 {
                sum += w * (obs.target[i] - init[i]).norm();
                weight += w;
            }
        }
    }
    if weight > 0.0 {
        sum / weight
    } else {
        f64::NAN
    }
}

/// Frames held fixed in keyframe BA. Without any regularized keyframe in the
/// window metric scale is unobservable, so the oldest poses and the oldest depth
/// map pin it; otherwise only the oldest pose is held.
fn gauge(frames: &[Keyframe], cfg: &PipelineConfig) -> (BTreeSet<u64>, BTreeSet<u64>) {
    let oldest = frames[0].id;
    if frames.iter().any(|k| k.gate_c) {
        return ([oldest].into_iter().collect(), BTreeSet::new());
    }
    let fixed = frames[..cfg.fixed_poses.min(frames.len() - 1)].iter().map(|k| k.id).collect();
    let depth = if cfg.anchor_depth {
        [oldest].into_iter().collect()
    } else {
        BTreeSet::new()
    };
    (fixed, depth)
}

/// Providers backed by a sequence's ground truth.
pub struct Providers<'a> {
    pub flow: Box<dyn FlowProvider + 'a>,
    pub mono: Box<dyn MonoProvider + 'a>,
    pub mvs: Option<Box<dyn MvsProvider + 'a>>,
}

impl<'a> Providers<'a> {
    pub fn synthetic(config: &PipelineConfig, seq: &'a Sequence) -> Self {
        let mut corruption = vec![1.0; seq.len()];
        for f in corrupted_frames(config, seq.len()) {
            corruption[f] = config.corruption.factor;
        }
        Self {
            flow: Box::new(OracleFlowProvider::new(
                seq,
                config.downsample,
                config.seeded(&config.flow_noise, 1),
            )),
            mono: Box::new(SyntheticMono {
                sequence: seq,
                factor: config.downsample,
                noise: config.seeded(&config.mono_noise, 2),
                corruption,
            }),
            mvs: Some(Box::new(SyntheticMvs {
                sequence: seq,
                factor: config.downsample,
                noise: config.seeded(&config.mvs_noise, 3),
            })),
        }
    }
}

pub struct Pipeline<'a> {
    config: PipelineConfig,
    sequence: &'a Sequence,
    providers: Providers<'a>,
    graph: FrameGraph,
    gate: GateState,
    records: Vec<FrameRecord>,
    last_pose: Pose,
    diagnostics: Diagnostics,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: PipelineConfig, sequence: &'a Sequence, providers: Providers<'a>) -> Result<Self> {
        config.validate()?;
        let grid = sequence.intrinsics.downsampled(config.downsample);
        if grid.width < 2 || grid.height < 2 {
            return Err(Error::config("downsample", "leaves fewer than 2x2 grid pixels"));
        }
        Ok(Self {
            graph: FrameGraph::new(config.window_size, config.keyframe_threshold, config.warmup),
            gate: GateState::new(config.alpha())?,
            config,
            sequence,
            providers,
            records: Vec::new(),
            last_pose: Pose::identity(),
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn graph(&self) -> &FrameGraph {
        &self.graph
    }

    pub fn gate(&self) -> &GateState {
        &self.gate
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Monocular prior of a frame, realigned to ground truth if configured.
    fn mono_prior(&mut self, frame: usize) -> Result<Option<DepthPrior>> {
        if !self.config.use_priors {
            return Ok(None);
        }
        let prior = self.providers.mono.prior(frame)?;
        let grid = self.sequence.intrinsics.downsampled(self.config.downsample);
        if prior.width() != grid.width || prior.height() != grid.height {
            return Err(Error::DimensionMismatch {
                expected_w: grid.width,
                expected_h: grid.height,
                found_w: prior.width(),
                found_h: prior.height(),
            });
        }
        if let Some(threshold) = self.config.realign_threshold {
            let gt = self.sequence.depth_on_grid(frame, self.config.downsample);
            let mut depth = prior.depth().clone();
            for (d, v) in depth.as_mut_slice().iter_mut().zip(prior.valid().iter()) {
                if !v {
                    *d = f64::NAN;
                }
            }
            let aligned = align_prior(&depth, &gt, threshold)?;
            return Ok(Some(DepthPrior::new(aligned, prior.confidence().cloned(), prior.kind())?));
        }
        Ok(Some(prior))
    }

    /// Initial inverse depth: the prior where valid (its median elsewhere), or a
    /// constant without priors.
    fn initial_inv_depth(&self, prior: Option<&DepthPrior>) -> Grid<f64> {
        let grid = self.sequence.intrinsics.downsampled(self.config.downsample);
        let fallback = 1.0 / self.config.constant_depth;
        let Some(prior) = prior else {
            return Grid::filled(grid.width, grid.height, fallback);
        };
        let mut valid: Vec<f64> = (0..prior.depth().len()).filter_map(|i| prior.inverse_depth(i)).collect();
        let median = if valid.is_empty() {
            fallback
        } else {
            let mid = valid.len() / 2;
            *valid.select_nth_unstable_by(mid, f64::total_cmp).1
        };
        Grid::from_vec(
            grid.width,
            grid.height,
            (0..prior.depth().len())
                .map(|i| prior.inverse_depth(i).unwrap_or(median).clamp(ba::INV_DEPTH_MIN, ba::INV_DEPTH_MAX))
                .collect(),
        )
    }

    fn new_frame(&self, frame: usize, pose: Pose, mono: Option<DepthPrior>, inv_depth: Grid<f64>) -> Keyframe {
        let (w, h) = (inv_depth.width(), inv_depth.height());
        Keyframe {
            id: TRACKED_ID,
            frame_index: frame,
            timestamp: self.sequence.timestamps[frame],
            image: Arc::new(self.sequence.observed[frame].clone()),
            camera: self.sequence.intrinsics,
            downsample: self.config.downsample,
            pose,
            inv_depth,
            mono_prior: mono,
            mvs_prior: None,
            gate_c: false,
            pixel_mask: Grid::filled(w, h, true),
        }
    }

    /// Candidate for `frame`, posed at the latest estimate. Keyframes and regular
    /// non-keyframes start from their monocular prior; in fast mode a
    /// non-keyframe copies the depth and mask of the newest keyframe instead.
    pub fn init_frame(&mut self, frame: usize, keyframe: bool) -> Result<Keyframe> {
        if self.config.fast_mode && !keyframe {
            if let Some(nearest) = self.graph.latest() {
                let (inv, mask) = (nearest.inv_depth.clone(), nearest.pixel_mask.clone());
                let mut f = self.new_frame(frame, self.last_pose, None, inv);
                f.pixel_mask = mask;
                return Ok(f);
            }
        }
        let mono = self.mono_prior(frame)?;
        let inv = self.initial_inv_depth(mono.as_ref());
        Ok(self.new_frame(frame, self.last_pose, mono, inv))
    }

    fn stream(frame: usize, tag: u64) -> u64 {
        ((frame as u64) << 16) | tag
    }

    /// Flow for every edge, seeded with the current reprojection.
    fn refresh_flow(provider: &mut dyn FlowProvider, frames: &[Keyframe], edges: &mut [Edge], stream: u64) {
        for e in edges.iter_mut() {
            let src = frames.iter().find(|k| k.id == e.src).expect("edge endpoints are live");
            let dst = frames.iter().find(|k| k.id == e.dst).expect("edge endpoints are live");
            let init = current_reprojection(src, dst);
            e.flow = Some(provider.flow(&FlowRequest {
                src: src.frame_index,
                dst: dst.frame_index,
                stream,
                initial: Some(&init),
            }));
        }
    }

    pub fn process_frame(&mut self, frame: usize) -> Result<()> {
        self.process_frame_inner(frame).map_err(|e| Error::Pipeline {
            frame,
            source: Box::new(e),
        })
    }

    fn process_frame_inner(&mut self, frame: usize) -> Result<()> {
        let Some(latest) = self.graph.latest() else {
            let kf = self.init_frame(frame, true)?;
            let id = self.graph.insert(kf);
            self.gate.record_warmup(id);
            self.diagnostics.keyframes.push(KeyframeDiagnostics {
                id,
                frame_index: frame,
                warmup: true,
                flow_updates: 0,
                ba_iterations: 0,
                residual_flow: Vec::new(),
                eta: None,
                gate_c: false,
                mvs_checked_at: None,
                mvs_applied: false,
            });
            self.diagnostics.frames.push(FrameDiagnostics {
                frame_index: frame,
                flow_magnitude: 0.0,
                keyframe: Some(id),
            });
            self.push_record(frame, id, Pose::identity());
            self.last_pose = Pose::identity();
            return Ok(());
        };

        let decision_flow = self.providers.flow.flow(&FlowRequest {
            src: latest.frame_index,
            dst: frame,
            stream: Self::stream(frame, STREAM_DECISION),
            initial: None,
        });
        let magnitude = decision_flow.mean_magnitude();
        match self.graph.admit_frame(magnitude) {
            KeyframeDecision::Keyframe => {
                let id = self.add_keyframe(frame)?;
                self.diagnostics.frames.push(FrameDiagnostics {
                    frame_index: frame,
                    flow_magnitude: magnitude,
                    keyframe: Some(id),
                });
            }
            KeyframeDecision::NonKeyframe => {
                self.track(frame)?;
                self.diagnostics.frames.push(FrameDiagnostics {
                    frame_index: frame,
                    flow_magnitude: magnitude,
                    keyframe: None,
                });
            }
        }
        Ok(())
    }

    fn push_record(&mut self, frame: usize, anchor: u64, anchor_from_frame: Pose) {
        self.records.push(FrameRecord {
            timestamp: self.sequence.timestamps[frame],
            anchor,
            anchor_from_frame,
        });
    }

    fn add_keyframe(&mut self, frame: usize) -> Result<u64> {
        let kf = self.init_frame(frame, true)?;
        let id = self.graph.insert(kf);
        self.graph.slide_window();
        let edges = self.graph.build_edges(self.config.edge_radius);
        self.graph.set_edges(edges);
        self.keyframe_update(id)?;
        let pose = self.graph.find(id).expect("just inserted").pose;
        self.push_record(frame, id, Pose::identity());
        self.last_pose = pose;
        Ok(id)
    }

    /// The flow/BA schedule for a newly admitted keyframe.
    fn keyframe_update(&mut self, id: u64) -> Result<()> {
        let cfg = self.config.clone();
        let warmup = self.graph.admitted() <= cfg.warmup;
        let pos = self.graph.position(id).expect("keyframe is in the window");
        let frame_index = self.graph.keyframes()[pos].frame_index;
        let initial_depth = self.graph.keyframes()[pos].depth_map();
        let has_prior = self.graph.keyframes()[pos].mono_prior.is_some();
        let forced_on = !warmup && has_prior && cfg.gate == GateMode::AlwaysOn;
        self.graph.keyframes_mut()[pos].gate_c = forced_on;

        let mut diag = KeyframeDiagnostics {
            id,
            frame_index,
            warmup,
            flow_updates: 0,
            ba_iterations: 0,
            residual_flow: Vec::new(),
            eta: None,
            gate_c: forced_on,
            mvs_checked_at: None,
            mvs_applied: false,
        };
        if warmup {
            self.gate.record_warmup(id);
        } else if cfg.gate != GateMode::Adaptive || !has_prior {
            self.gate.record_forced(id, None, forced_on);
        }

        let mut iteration = 0usize;
        for round in 0..cfg.flow_steps {
            {
                let (frames, edges) = (self.graph.keyframes().to_vec(), self.graph.edges_mut());
                Self::refresh_flow(self.providers.flow.as_mut(), &frames, edges, Self::stream(frame_index, round as u64));
            }
            diag.flow_updates += 1;

            let frames = self.graph.keyframes();
            let (fixed, fixed_depth) = gauge(frames, &cfg);
            let problem = BaProblem {
                frames,
                edges: self.graph.edges(),
                fixed,
                fixed_depth,
                mode: BaMode::Full,
                config: cfg.ba_config(),
            };
            let mut states: Vec<BaState> = Vec::with_capacity(cfg.ba_per_step);
            let mut observer = |_: usize, state: &BaState| states.push(state.clone());
            let result = run_ba(&problem, cfg.ba_per_step, Some(&mut observer))?;
            let snapshot = frames.to_vec();
            for state in &states {
                iteration += 1;
                let r = residual_flow(
                    self.providers.flow.as_mut(),
                    &snapshot,
                    state,
                    self.graph.edges(),
                    id,
                    Self::stream(frame_index, STREAM_RESIDUAL | iteration as u64),
                );
                diag.residual_flow.push(r);
            }
            result.state.write_back(self.graph.keyframes_mut());
            diag.ba_iterations += cfg.ba_per_step;
            let after_first = (round == 0).then(|| states[0].poses.clone());

            if let Some(poses) = after_first {
                if !warmup && has_prior && cfg.gate == GateMode::Adaptive {
                    let mut snapshot = self.graph.keyframes().to_vec();
                    for (k, p) in snapshot.iter_mut().zip(poses) {
                        k.pose = p;
                    }
                    let eta = keyframe_photometric_error(&snapshot, self.graph.edges(), id, Some(&initial_depth), None)?;
                    let c = self.gate.decide(id, eta)?;
                    self.graph.keyframes_mut()[pos].gate_c = c;
                    diag.eta = Some(eta);
                    diag.gate_c = c;
                }
            }

            let trigger = cfg.mvs_trigger_iteration;
            if cfg.mvs && diag.mvs_checked_at.is_none() && iteration >= trigger {
                diag.mvs_checked_at = Some(iteration);
                diag.mvs_applied = self.try_mvs(pos)?;
            }
        }

        if warmup && self.graph.admitted() == cfg.warmup {
            self.gate.set_reference(&self.graph)?;
            self.diagnostics.eta_init = self.gate.eta_init();
        }
        self.diagnostics.keyframes.push(diag);
        Ok(())
    }

    /// Evaluates the MVS gate on the three newest keyframes and, if it passes,
    /// swaps in the MVS depth on confident pixels.
    fn try_mvs(&mut self, pos: usize) -> Result<bool> {
        let kfs = self.graph.keyframes();
        if pos < 2 {
            return Ok(false);
        }
        let input = MvsGateInput::from_poses(&kfs[pos - 2].pose, &kfs[pos - 1].pose, &kfs[pos].pose);
        if !mvs_gate(&input) {
            return Ok(false);
        }
        let Some(mvs) = self.providers.mvs.as_mut() else {
            return Ok(false);
        };
        let (prev, cur) = (&kfs[pos - 1], &kfs[pos]);
        let est = relative_pose(&cur.pose, &prev.pose);
        let gt = relative_pose(&self.sequence.poses[cur.frame_index], &self.sequence.poses[prev.frame_index]);
        let pose_error = (est.translation - gt.translation).norm();
        let prior = mvs.prior(cur.frame_index, pose_error)?;
        let confidence = prior
            .confidence()
            .ok_or_else(|| Error::DegenerateGeometry("MVS prior without confidence".into()))?;
        let keep = confidence_mask(confidence, self.config.mvs_drop_fraction);
        let kf = &mut self.graph.keyframes_mut()[pos];
        for i in 0..keep.len() {
            let use_pixel = keep[i] && kf.pixel_mask[i];
            if use_pixel {
                if let Some(u) = prior.inverse_depth(i) {
                    kf.inv_depth[i] = u.clamp(ba::INV_DEPTH_MIN, ba::INV_DEPTH_MAX);
                }
            }
            kf.pixel_mask[i] = use_pixel;
        }
        kf.mvs_prior = Some(prior);
        Ok(true)
    }

    /// Pose-only tracking of a non-keyframe against the newest keyframes.
    fn track(&mut self, frame: usize) -> Result<()> {
        let cfg = self.config.clone();
        let kfs = self.graph.keyframes();
        let n_refs = cfg.tracking_refs.min(kfs.len());
        let mut frames: Vec<Keyframe> = kfs[kfs.len() - n_refs..].to_vec();
        let anchor = frames.last().expect("window is non-empty").clone();
        frames.push(self.init_frame(frame, false)?);
        let fixed: BTreeSet<u64> = frames[..n_refs].iter().map(|k| k.id).collect();
        let mut edges = Vec::new();
        for r in &frames[..n_refs] {
            edges.push(Edge {
                src: r.id,
                dst: TRACKED_ID,
                flow: None,
            });
            edges.push(Edge {
                src: TRACKED_ID,
                dst: r.id,
                flow: None,
            });
        }
        for round in 0..cfg.tracking_flow_steps {
            Self::refresh_flow(
                self.providers.flow.as_mut(),
                &frames,
                &mut edges,
                Self::stream(frame, STREAM_TRACKING | round as u64),
            );
            let problem = BaProblem {
                frames: &frames,
                edges: &edges,
                fixed: fixed.clone(),
                fixed_depth: BTreeSet::new(),
                mode: BaMode::PoseOnly,
                config: cfg.ba_config(),
            };
            let result = run_ba(&problem, cfg.tracking_ba_per_step, None)?;
            result.state.write_back(&mut frames);
        }
        let pose = frames.last().expect("tracked frame present").pose;
        self.push_record(frame, anchor.id, relative_pose(&pose, &anchor.pose));
        self.last_pose = pose;
        Ok(())
    }

    /// Runs optional global refinement and assembles the output trajectory.
    pub fn finish(mut self, started: Instant) -> Result<RunOutput> {
        self.graph.retire_all();
        let mut keyframes: Vec<Keyframe> = self.graph.history().into_iter().cloned().collect();
        if let Some(g) = self.config.global_ba {
            if keyframes.len() >= 2 {
                ba::global_ba(
                    &mut keyframes,
                    g.radius,
                    self.providers.flow.as_mut(),
                    g.iterations,
                    self.config.ba_config(),
                )
                .map_err(|e| Error::Pipeline {
                    frame: self.sequence.len().saturating_sub(1),
                    source: Box::new(e),
                })?;
            }
        }
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let anchor = keyframes
                .iter()
                .find(|k| k.id == r.anchor)
                .expect("anchors are logged keyframes");
            entries.push((r.timestamp, anchor.pose.compose(&r.anchor_from_frame)));
        }
        Ok(RunOutput {
            trajectory: Trajectory::new(entries)?,
            keyframes,
            diagnostics: self.diagnostics,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Runs the whole sequence with synthetic providers.
pub fn run_sequence(config: &PipelineConfig, sequence: &Sequence) -> Result<RunOutput> {
    run_with_providers(config, sequence, Providers::synthetic(config, sequence))
}

pub fn run_with_providers<'a>(
    config: &PipelineConfig,
    sequence: &'a Sequence,
    providers: Providers<'a>,
) -> Result<RunOutput> {
    let started = Instant::now();
    if sequence.len() < config.warmup + 1 {
        return Err(Error::config(
            "sequence",
            format!("needs at least {} frames, has {}", config.warmup + 1, sequence.len()),
        ));
    }
    let mut pipeline = Pipeline::new(config.clone(), sequence, providers)?;
    for frame in 0..sequence.len() {
        pipeline.process_frame(frame)?;
    }
    pipeline.finish(started)
}

/// Prior used to initialize frames that are built outside the pipeline.
pub fn constant_prior(width: usize, height: usize, depth: f64) -> Result<DepthPrior> {
    DepthPrior::new(Grid::filled(width, height, depth), None, PriorKind::Monocular)
}
