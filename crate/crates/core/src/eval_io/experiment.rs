//! Experiment configuration, sequence directories and the end-to-end runner
//! behind the command-line tool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport, Trajectory};
use super::ply::export_pointcloud;
use super::tum::{read_tum, write_tum};
use crate::error::{Error, Result};
use crate::formats;
use crate::geometry::CameraIntrinsics;
use crate::pipeline::{run_with_providers, Diagnostics, PipelineConfig, Providers, RunOutput};
use crate::priors::{FileDepthEncoding, FileMono};
use crate::synth_world::{generate_sequence, Sequence, SequenceSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceSource {
    Synthetic(Box<SequenceSpec>),
    /// A directory written by [`export_sequence`].
    Directory { path: PathBuf },
}

/// Monocular priors read from `frame_NNNNN.rdepth` files instead of synthesized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoFiles {
    pub dir: PathBuf,
    pub encoding: FileDepthEncoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub sequence: SequenceSource,
    #[serde(default)]
    pub mono_files: Option<MonoFiles>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub export_pointcloud: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::config("<json>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        self.pipeline.validate()?;
        if let SequenceSource::Synthetic(spec) = &self.sequence {
            spec.trajectory.validate()?;
            spec.camera.validate()?;
            let need = self.pipeline.warmup + 1;
            if spec.trajectory.n_frames < need {
                return Err(Error::config(
                    "sequence.trajectory.n_frames",
                    format!("must be at least warmup + 1 = {need}"),
                ));
            }
        }
        Ok(())
    }
}

fn frame_file(dir: &Path, sub: &str, frame: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("frame_{frame:05}.{ext}"))
}

/// Writes observed images, ground-truth depth, camera and trajectory.
pub fn export_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    for sub in ["rgb", "depth"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let camera = serde_json::to_string_pretty(&seq.intrinsics).expect("intrinsics serialize");
    let cam_path = dir.join("camera.json");
    std::fs::write(&cam_path, camera).map_err(|e| Error::io(&cam_path, e))?;
    write_tum(
        &dir.join("groundtruth.txt"),
        &Trajectory::from_parts(&seq.timestamps, &seq.poses)?,
    )?;
    for f in 0..seq.len() {
        formats::write_file(&frame_file(dir, "rgb", f, "rimg"), &formats::encode_image(&seq.observed[f]))?;
        let depth = seq.depths[f].map(|d| *d as f32);
        formats::write_file(&frame_file(dir, "depth", f, "rdepth"), &formats::encode_depth(&depth))?;
    }
    Ok(())
}

pub fn load_sequence_dir(dir: &Path) -> Result<Sequence> {
    let cam_path = dir.join("camera.json");
    let text = std::fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let intrinsics: CameraIntrinsics =
        serde_json::from_str(&text).map_err(|e| Error::config("camera.json", e.to_string()))?;
    intrinsics.validate()?;
    let gt = read_tum(&dir.join("groundtruth.txt"))?.trajectory;
    let mut images = Vec::with_capacity(gt.len());
    let mut depths = Vec::with_capacity(gt.len());
    for f in 0..gt.len() {
        let img = formats::decode_image(&formats::read_file(&frame_file(dir, "rgb", f, "rimg"))?)?;
        let depth = formats::decode_depth(&formats::read_file(&frame_file(dir, "depth", f, "rdepth"))?)?;
        for (w, h) in [(img.width(), img.height()), (depth.width(), depth.height())] {
            if (w, h) != (intrinsics.width, intrinsics.height) {
                return Err(Error::DimensionMismatch {
                    expected_w: intrinsics.width,
                    expected_h: intrinsics.height,
                    found_w: w,
                    found_h: h,
                });
            }
        }
        images.push(img);
        depths.push(depth.map(|d| if d.is_finite() && *d > 0.0 { *d as f64 } else { 0.0 }));
    }
    Ok(Sequence {
        scene: None,
        intrinsics,
        timestamps: gt.timestamps(),
        poses: gt.poses(),
        observed: images.clone(),
        images,
        depths,
    })
}

pub fn load_sequence(source: &SequenceSource) -> Result<Sequence> {
    match source {
        SequenceSource::Synthetic(spec) => generate_sequence(spec),
        SequenceSource::Directory { path } => load_sequence_dir(path),
    }
}

/// One CSV row per keyframe BA iteration.
pub fn keyframe_csv(diag: &Diagnostics) -> String {
    let mut out = String::from("keyframe_id,frame_index,warmup,iteration,residual_flow,eta,gate_c,mvs_checked_at,mvs_applied\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for k in &diag.keyframes {
        let rows: Vec<(usize, Option<f64>)> = if k.residual_flow.is_empty() {
            vec![(0, None)]
        } else {
            k.residual_flow.iter().enumerate().map(|(i, r)| (i + 1, Some(*r))).collect()
        };
        for (it, r) in rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                k.id,
                k.frame_index,
                k.warmup,
                it,
                opt(r.map(|v| v.to_string())),
                opt(k.eta.map(|v| v.to_string())),
                k.gate_c,
                opt(k.mvs_checked_at.map(|v| v.to_string())),
                k.mvs_applied
            )
            .expect("string write");
        }
    }
    out
}

pub fn frame_csv(diag: &Diagnostics) -> String {
    let mut out = String::from("frame_index,flow_magnitude,keyframe_id\n");
    for f in &diag.frames {
        let kf = f.keyframe.map(|k| k.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", f.frame_index, f.flow_magnitude, kf).expect("string write");
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(Error),
    #[error("pipeline failure: {0}")]
    Run(Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Run(_) => 3,
        }
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub metrics: MetricsReport,
    pub run: RunOutput,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates or loads the sequence, runs the pipeline and writes all artifacts
/// into `output_dir`.
pub fn run_experiment(config: &ExperimentConfig, output_dir: &Path) -> std::result::Result<ExperimentOutcome, ExperimentError> {
    config.validate().map_err(ExperimentError::Config)?;
    let seq = load_sequence(&config.sequence).map_err(ExperimentError::Config)?;
    if seq.len() < config.pipeline.warmup + 1 {
        return Err(ExperimentError::Config(Error::config(
            "sequence",
            format!("needs at least {} frames, has {}", config.pipeline.warmup + 1, seq.len()),
        )));
    }
    let mut providers = Providers::synthetic(&config.pipeline, &seq);
    if let Some(files) = &config.mono_files {
        let grid = seq.intrinsics.downsampled(config.pipeline.downsample);
        providers.mono = Box::new(FileMono {
            dir: files.dir.clone(),
            width: grid.width,
            height: grid.height,
            encoding: files.encoding,
        });
    }
    let run = run_with_providers(&config.pipeline, &seq, providers).map_err(ExperimentError::Run)?;
    let gt = Trajectory::from_parts(&seq.timestamps, &seq.poses).map_err(ExperimentError::Run)?;
    let metrics = evaluate(&run.trajectory, &gt).map_err(ExperimentError::Run)?;

    let write = || -> Result<()> {
        std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
        write_tum(&output_dir.join("trajectory.txt"), &run.trajectory)?;
        write_tum(&output_dir.join("groundtruth.txt"), &gt)?;
        write_text(
            &output_dir.join("metrics.txt"),
            &format!("# experiment: {}\n{}", config.name, metrics.to_text()),
        )?;
        write_text(&output_dir.join("keyframes.csv"), &keyframe_csv(&run.diagnostics))?;
        write_text(&output_dir.join("frames.csv"), &frame_csv(&run.diagnostics))?;
        let resolved = serde_json::to_string_pretty(config).expect("config serializes");
        write_text(&output_dir.join("config.json"), &resolved)?;
        if config.export_pointcloud {
            export_pointcloud(&run.keyframes, &output_dir.join("pointcloud.ply"))?;
        }
        Ok(())
    };
    write().map_err(ExperimentError::Run)?;
    Ok(ExperimentOutcome {
        output_dir: output_dir.to_path_buf(),
        metrics,
        run,
    })
}

/// Loads a config, applies overrides, runs it and returns the process exit code.
pub fn cli_run(config_path: &Path, seed: Option<u64>, output: Option<&Path>) -> i32 {
    let result = ExperimentConfig::load(config_path)
        .map_err(ExperimentError::Config)
        .and_then(|mut config| {
            if let Some(s) = seed {
                config.pipeline.seed = s;
            }
            let dir = output.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
            run_experiment(&config, &dir)
        });
    match result {
        Ok(outcome) => {
            log::info!(
                "{}: ate {:.3e} m, rte {:.3e} m, scale {:.6} ({:.2} s)",
                outcome.output_dir.display(),
                outcome.metrics.ate,
                outcome.metrics.rte,
                outcome.metrics.scale,
                outcome.run.elapsed_seconds
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
