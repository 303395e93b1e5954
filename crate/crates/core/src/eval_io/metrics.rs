use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Maximum timestamp gap for two poses to be associated (seconds).
pub const ASSOCIATION_WINDOW: f64 = 0.02;

/// Singular-value ratio below which associated positions count as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;

/// Timestamped `world_from_camera` poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        for (index, (t, _)) in entries.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::DegenerateGeometry(format!("timestamp {index} is not finite")));
            }
            if index > 0 && !(*t > entries[index - 1].0) {
                return Err(Error::NonMonotoneTimestamps {
                    index,
                    previous: entries[index - 1].0,
                    current: *t,
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn from_parts(timestamps: &[f64], poses: &[Pose]) -> Result<Self> {
        assert_eq!(timestamps.len(), poses.len(), "one timestamp per pose");
        Self::new(timestamps.iter().copied().zip(poses.iter().copied()).collect())
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(|(_, p)| *p).collect()
    }

    /// The same trajectory with every pose mapped through `f`.
    pub fn map_poses(&self, mut f: impl FnMut(&Pose) -> Pose) -> Self {
        Self {
            entries: self.entries.iter().map(|(t, p)| (*t, f(p))).collect(),
        }
    }
}

/// `p_gt ≈ scale · rotation · p_est + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Alignment {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3Alignment {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Maps an estimated camera pose into the ground-truth frame.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose::new(self.rotation * pose.rotation, self.apply(&pose.translation))
    }
}

/// Index pairs `(est, gt)` matched by nearest timestamp; each ground-truth
/// entry is used at most once.
pub fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(usize, usize)> {
    let gt_t = gt.timestamps();
    let mut used = vec![false; gt_t.len()];
    let mut pairs = Vec::new();
    for (i, (t, _)) in est.entries().iter().enumerate() {
        let at = gt_t.partition_point(|g| g < t);
        let mut best: Option<(f64, usize)> = None;
        // nearest unused on either side
        let mut lo = at;
        while lo > 0 {
            lo -= 1;
            if !used[lo] {
                best = Some(((t - gt_t[lo]).abs(), lo));
                break;
            }
        }
        if let Some(hi) = (at..gt_t.len()).find(|&k| !used[k]) {
            let d = (gt_t[hi] - t).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, hi));
            }
        }
        if let Some((d, k)) = best {
            if d <= ASSOCIATION_WINDOW {
                used[k] = true;
                pairs.push((i, k));
            }
        }
    }
    pairs
}

type Associated = (Vec<(usize, usize)>, Vec<Vector3<f64>>, Vec<Vector3<f64>>);

fn associated_positions(est: &Trajectory, gt: &Trajectory) -> Result<Associated> {
    let pairs = associate(est, gt);
    if pairs.len() < 3 {
        return Err(Error::AssociationFailure(pairs.len()));
    }
    let x = pairs.iter().map(|&(i, _)| est.entries()[i].1.translation).collect();
    let y = pairs.iter().map(|&(_, k)| gt.entries()[k].1.translation).collect();
    Ok((pairs, x, y))
}

/// Closed-form least-squares fit of `y ≈ s R x + t`.
pub fn umeyama_points(x: &[Vector3<f64>], y: &[Vector3<f64>], with_scale: bool) -> Result<Sim3Alignment> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        cov += db * da.transpose();
        var_x += da.norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (s0, s1) = (svd.singular_values[order[0]], svd.singular_values[order[1]]);
    if !(s0 > 0.0) || s1 <= COLLINEAR_RATIO * s0 {
        return Err(Error::DegenerateGeometry("associated positions are collinear".into()));
    }
    if x == y {
        return Ok(Sim3Alignment::identity());
    }
    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the weakest direction
        sign[(order[2], order[2])] = -1.0;
    }
    let r = u * sign * v_t;
    let scale = if with_scale {
        (0..3).map(|k| svd.singular_values[k] * sign[(k, k)]).sum::<f64>() / var_x
    } else {
        1.0
    };
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Sim3Alignment {
        scale,
        rotation,
        translation: my - rotation * mx * scale,
    })
}

pub fn umeyama_align(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Sim3Alignment> {
    let (_, x, y) = associated_positions(est, gt)?;
    umeyama_points(&x, &y, with_scale)
}

fn rmse(x: &[Vector3<f64>], y: &[Vector3<f64>], a: &Sim3Alignment) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(p, g)| (a.apply(p) - g).norm_squared()).sum();
    (sq / x.len() as f64).sqrt()
}

/// RMSE of positions after rigid alignment.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let (_, x, y) = associated_positions(est, gt)?;
    Ok(rmse(&x, &y, &umeyama_points(&x, &y, false)?))
}

/// RMSE of positions after similarity alignment.
pub fn rte(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let (_, x, y) = associated_positions(est, gt)?;
    Ok(rmse(&x, &y, &umeyama_points(&x, &y, true)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameError {
    pub timestamp: f64,
    /// Position error after rigid alignment (m).
    pub ate: f64,
    /// Position error after similarity alignment (m).
    pub rte: f64,
    /// Orientation error after rigid alignment (rad).
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ate: f64,
    pub rte: f64,
    /// Scale of the similarity alignment.
    pub scale: f64,
    pub max_rotation_error: f64,
    pub matched: usize,
    pub frames: Vec<FrameError>,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory) -> Result<MetricsReport> {
    let (pairs, x, y) = associated_positions(est, gt)?;
    let rigid = umeyama_points(&x, &y, false)?;
    let sim = umeyama_points(&x, &y, true)?;
    let frames: Vec<FrameError> = pairs
        .iter()
        .enumerate()
        .map(|(n, &(i, k))| {
            let (t, pose) = est.entries()[i];
            let gt_rot = gt.entries()[k].1.rotation;
            FrameError {
                timestamp: t,
                ate: (rigid.apply(&x[n]) - y[n]).norm(),
                rte: (sim.apply(&x[n]) - y[n]).norm(),
                rotation: gt_rot.angle_to(&(rigid.rotation * pose.rotation)),
            }
        })
        .collect();
    Ok(MetricsReport {
        ate: rmse(&x, &y, &rigid),
        rte: rmse(&x, &y, &sim),
        scale: sim.scale,
        max_rotation_error: frames.iter().map(|f| f.rotation).fold(0.0, f64::max),
        matched: pairs.len(),
        frames,
    })
}

impl MetricsReport {
    /// Key-value summary followed by a JSON block with the full report.
    pub fn to_text(&self) -> String {
        let json = serde_json::to_string_pretty(self).expect("report is serializable");
        format!(
            "# aggregator: rmse\n\
             # association: nearest timestamp within {ASSOCIATION_WINDOW} s, one-to-one\n\
             # ate: rigid alignment; rte: similarity alignment\n\
             ate_m: {:e}\n\
             rte_m: {:e}\n\
             scale: {}\n\
             max_rotation_error_rad: {:e}\n\
             matched: {}\n\
             --- json\n{json}\n",
            self.ate, self.rte, self.scale, self.max_rotation_error, self.matched
        )
    }

    /// Reads `key: value` from the text form.
    pub fn field(text: &str, key: &str) -> Option<f64> {
        text.lines()
            .find_map(|l| l.strip_prefix(key)?.strip_prefix(':'))
            .and_then(|v| v.trim().parse().ok())
    }
}
