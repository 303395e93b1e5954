//! Trajectory metrics, trajectory and point-cloud files, and the experiment runner.

mod experiment;
mod metrics;
mod ply;
mod tum;

pub use experiment::{
    cli_run, export_sequence, frame_csv, keyframe_csv, load_sequence, load_sequence_dir, run_experiment,
    ExperimentConfig, ExperimentError, ExperimentOutcome, MonoFiles, SequenceSource,
};
pub use metrics::{
    associate, ate, evaluate, rte, umeyama_align, umeyama_points, FrameError, MetricsReport, Sim3Alignment,
    Trajectory, ASSOCIATION_WINDOW,
};
pub use ply::{export_pointcloud, format_ply, keyframe_points, pointcloud, ColoredPoint};
pub use tum::{format_tum, parse_tum, read_tum, write_tum, TumRead, TumWarning, QUATERNION_NORM_TOLERANCE};
