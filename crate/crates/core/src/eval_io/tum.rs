//! TUM trajectory text: `timestamp tx ty tz qx qy qz qw` per line, `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::metrics::Trajectory;
use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Quaternions whose norm deviates more than this from 1 are reported.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TumWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TumRead {
    pub trajectory: Trajectory,
    pub warnings: Vec<TumWarning>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_tum(text: &str) -> Result<TumRead> {
    let mut entries: Vec<(f64, Pose)> = Vec::new();
    let mut warnings = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = content.split_ascii_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(line, format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0f64; 8];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f
                .parse()
                .map_err(|_| parse_err(line, format!("field {} is not a number: {f:?}", k + 1)))?;
            if !v[k].is_finite() {
                return Err(parse_err(line, format!("field {} is not finite", k + 1)));
            }
        }
        let t = v[0];
        if let Some((prev, _)) = entries.last() {
            if !(t > *prev) {
                return Err(parse_err(line, format!("timestamp {t} does not increase (previous {prev})")));
            }
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if !(norm > 1e-12) {
            return Err(parse_err(line, "quaternion has zero norm"));
        }
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            log::warn!("line {line}: quaternion norm {norm} renormalized");
            warnings.push(TumWarning {
                line,
                message: format!("quaternion norm {norm} renormalized"),
            });
        }
        let pose = Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3]));
        entries.push((t, pose));
    }
    Ok(TumRead {
        trajectory: Trajectory::new(entries)?,
        warnings,
    })
}

/// Shortest round-trip float formatting, so reading back is exact.
pub fn format_tum(trajectory: &Trajectory) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in trajectory.entries() {
        let q = p.rotation.quaternion();
        let tr = p.translation;
        writeln!(out, "{t} {} {} {} {} {} {} {}", tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w).expect("string write");
    }
    out
}

pub fn read_tum(path: &Path) -> Result<TumRead> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text)
}

pub fn write_tum(path: &Path, trajectory: &Trajectory) -> Result<()> {
    std::fs::write(path, format_tum(trajectory)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let r = parse_tum("# header\n\n0.5 1 2 3 0 0 0 1\n  # more\n1.0 0 0 0 0 0 1 0\n").unwrap();
        assert_eq!(r.trajectory.len(), 2);
        assert!(r.warnings.is_empty());
        assert_eq!(r.trajectory.entries()[0].1.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let err = parse_tum("0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn bad_number_reports_line() {
        let err = parse_tum("# c\n0 0 0 x 0 0 0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn non_monotone_reports_line() {
        let err = parse_tum("1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn short_quaternion_is_normalized_with_warning() {
        let r = parse_tum("0 0 0 0 0 0 0 0.9\n").unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.warnings[0].line, 1);
        let q = r.trajectory.entries()[0].1.rotation;
        assert!((q.quaternion().norm() - 1.0).abs() < 1e-15);
        assert!(q.angle() < 1e-15);
    }

    #[test]
    fn zero_quaternion_is_an_error() {
        assert!(matches!(parse_tum("0 0 0 0 0 0 0 0\n"), Err(Error::Parse { line: 1, .. })));
    }
}
