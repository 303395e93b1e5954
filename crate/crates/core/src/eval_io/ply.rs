use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::frame_graph::Keyframe;
use crate::geometry::CameraIntrinsics;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// World points of every masked-in grid pixel, colored from the keyframe image.
pub fn keyframe_points(kf: &Keyframe) -> Vec<ColoredPoint> {
    let k = kf.intrinsics();
    let mut out = Vec::new();
    for i in 0..kf.inv_depth.len() {
        let u = kf.inv_depth[i];
        if !kf.pixel_mask[i] || !(u > 0.0) {
            continue;
        }
        let (x, y) = kf.inv_depth.coords(i);
        let g = Vector2::new(x as f64, y as f64);
        let local = k.ray(&g) / u;
        let full = CameraIntrinsics::grid_to_full(g, kf.downsample);
        let c = kf.image.sample_bilinear(full.x, full.y).unwrap_or_else(Vector3::zeros);
        out.push(ColoredPoint {
            position: kf.pose.transform_point(&local),
            color: [to_byte(c.x), to_byte(c.y), to_byte(c.z)],
        });
    }
    out
}

pub fn pointcloud(keyframes: &[Keyframe]) -> Vec<ColoredPoint> {
    keyframes.iter().flat_map(keyframe_points).collect()
}

pub fn format_ply(points: &[ColoredPoint]) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    );
    for p in points {
        let (v, c) = (p.position, p.color);
        writeln!(out, "{} {} {} {} {} {}", v.x as f32, v.y as f32, v.z as f32, c[0], c[1], c[2]).expect("string write");
    }
    out
}

/// Writes the cloud of all keyframes and returns the number of points.
pub fn export_pointcloud(keyframes: &[Keyframe], path: &Path) -> Result<usize> {
    let points = pointcloud(keyframes);
    std::fs::write(path, format_ply(&points)).map_err(|e| Error::io(path, e))?;
    Ok(points.len())
}
