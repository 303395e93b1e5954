//! Sliding window of keyframes and the directed co-visibility edges between them.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::priors::{DepthPrior, FlowObservation};
use crate::raster::{Grid, RgbImage};

/// A frame under optimization. Non-keyframes being tracked use the same type.
#[derive(Debug, Clone)]
pub struct Keyframe {
    /// Assigned on admission; strictly increasing.
    pub id: u64,
    /// Index of the frame in the input sequence.
    pub frame_index: usize,
    pub timestamp: f64,
    /// Observed full-resolution image.
    pub image: Arc<RgbImage>,
    /// Full-resolution intrinsics; `intrinsics()` gives the optimization grid.
    pub camera: CameraIntrinsics,
    pub downsample: usize,
    /// Current `world_from_camera` estimate.
    pub pose: Pose,
    /// Optimized inverse depth (1/m) on the grid.
    pub inv_depth: Grid<f64>,
    /// Absent for runs without a depth prior.
    pub mono_prior: Option<DepthPrior>,
    pub mvs_prior: Option<DepthPrior>,
    /// Depth-regularization gate.
    pub gate_c: bool,
    /// Pixels taking part in residuals and updates.
    pub pixel_mask: Grid<bool>,
}

impl Keyframe {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.camera.downsampled(self.downsample)
    }

    /// Prior the regularizer pulls toward: MVS when present, monocular otherwise.
    pub fn active_prior(&self) -> Option<&DepthPrior> {
        self.mvs_prior.as_ref().or(self.mono_prior.as_ref())
    }

    pub fn depth_map(&self) -> Grid<f64> {
        self.inv_depth.map(|u| 1.0 / u)
    }
}

#[derive(Debug, Clone)]
pub struct Edge {
    pub src: u64,
    pub dst: u64,
    pub flow: Option<FlowObservation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeDecision {
    Keyframe,
    NonKeyframe,
}

pub const DEFAULT_WINDOW_SIZE: usize = 12;
pub const DEFAULT_EDGE_RADIUS: usize = 3;
pub const DEFAULT_KEYFRAME_THRESHOLD: f64 = 2.4;
pub const WARMUP_KEYFRAMES: usize = 12;

#[derive(Debug, Clone)]
pub struct FrameGraph {
    keyframes: Vec<Keyframe>,
    edges: Vec<Edge>,
    window_size: usize,
    keyframe_threshold: f64,
    warmup: usize,
    admitted: usize,
    next_id: u64,
    retired: Vec<Keyframe>,
}

impl FrameGraph {
    pub fn new(window_size: usize, keyframe_threshold: f64, warmup: usize) -> Self {
        assert!(window_size >= 1);
        Self {
            keyframes: Vec::new(),
            edges: Vec::new(),
            window_size,
            keyframe_threshold,
            warmup,
            admitted: 0,
            next_id: 0,
            retired: Vec::new(),
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframes_mut(&mut self) -> &mut [Keyframe] {
        &mut self.keyframes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn admitted(&self) -> usize {
        self.admitted
    }

    /// True once the warmup number of keyframes has ever been admitted.
    pub fn initialized(&self) -> bool {
        self.admitted >= self.warmup
    }

    /// Keyframes removed from the window, in removal order.
    pub fn retired(&self) -> &[Keyframe] {
        &self.retired
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn find(&self, id: u64) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.keyframes.iter().position(|k| k.id == id)
    }

    /// Keyframe iff the mean flow magnitude to the last keyframe exceeds the threshold.
    pub fn admit_frame(&self, magnitude: f64) -> KeyframeDecision {
        if magnitude > self.keyframe_threshold {
            KeyframeDecision::Keyframe
        } else {
            KeyframeDecision::NonKeyframe
        }
    }

    /// Inserts a keyframe, assigning it the next id.
    pub fn insert(&mut self, mut kf: Keyframe) -> u64 {
        kf.id = self.next_id;
        self.next_id += 1;
        self.admitted += 1;
        self.keyframes.push(kf);
        self.next_id - 1
    }

    /// Bidirectional edges between every keyframe and its `radius` nearest
    /// neighbors in admission order.
    pub fn build_edges(&self, radius: usize) -> Vec<Edge> {
        let n = self.keyframes.len();
        let mut out = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a != b && a.abs_diff(b) <= radius {
                    out.push(Edge {
                        src: self.keyframes[a].id,
                        dst: self.keyframes[b].id,
                        flow: None,
                    });
                }
            }
        }
        out
    }

    /// Replaces the edge set, keeping flow already attached to surviving edges.
    pub fn set_edges(&mut self, edges: Vec<Edge>) {
        let live: BTreeSet<u64> = self.keyframes.iter().map(|k| k.id).collect();
        let mut old = std::mem::take(&mut self.edges);
        self.edges = edges
            .into_iter()
            .filter(|e| e.src != e.dst && live.contains(&e.src) && live.contains(&e.dst))
            .map(|mut e| {
                if e.flow.is_none() {
                    if let Some(pos) = old.iter().position(|o| o.src == e.src && o.dst == e.dst) {
                        e.flow = old.swap_remove(pos).flow;
                    }
                }
                e
            })
            .collect();
    }

    /// Drops the oldest keyframes beyond the window size, logging them as retired.
    pub fn slide_window(&mut self) -> Vec<u64> {
        let mut removed = Vec::new();
        while self.keyframes.len() > self.window_size {
            let kf = self.keyframes.remove(0);
            self.edges.retain(|e| e.src != kf.id && e.dst != kf.id);
            removed.push(kf.id);
            self.retired.push(kf);
        }
        removed
    }

    /// Moves the remaining window into the retired log; used at end of sequence.
    pub fn retire_all(&mut self) {
        self.edges.clear();
        self.retired.append(&mut self.keyframes);
    }

    /// Every keyframe ever admitted, retired first, ordered by id.
    pub fn history(&self) -> Vec<&Keyframe> {
        let mut all: Vec<&Keyframe> = self.retired.iter().chain(self.keyframes.iter()).collect();
        all.sort_by_key(|k| k.id);
        all
    }
}
