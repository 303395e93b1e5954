//! Pinhole camera, SE(3) poses and the backproject / transform / project chain.
//!
//! Poses are stored as `world_from_camera`. The relative transform used by every
//! residual is `j_from_i = inverse(world_from_j) * world_from_i`, mapping camera-i
//! coordinates into camera-j coordinates. Tangent increments are applied on the
//! right: `world_from_camera <- world_from_camera * exp(xi)`.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Grid;

/// Points closer than this to the camera plane are rejected by reprojection.
pub const Z_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return Err(Error::config("fx", "must be positive"));
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(Error::config("fy", "must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width/height", "must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::config("cx", "must lie in [0, width)"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::config("cy", "must lie in [0, height)"));
        }
        Ok(())
    }

    /// Intrinsics of the grid obtained by averaging `factor x factor` pixel blocks.
    ///
    /// Grid pixel `g` covers full-resolution pixels `g*factor .. g*factor + factor - 1`
    /// and sits at their center, see [`CameraIntrinsics::grid_to_full`].
    pub fn downsampled(&self, factor: usize) -> Self {
        let s = factor as f64;
        let off = (s - 1.0) / 2.0;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - off) / s,
            cy: (self.cy - off) / s,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    /// Maps a grid coordinate of `downsampled(factor)` back to full resolution.
    pub fn grid_to_full(coord: Vector2<f64>, factor: usize) -> Vector2<f64> {
        let s = factor as f64;
        coord * s + Vector2::repeat((s - 1.0) / 2.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Normalized ray `((u-cx)/fx, (v-cy)/fy, 1)`.
    #[inline]
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// Inside `[0, w-1] x [0, h-1]`, with a rounding allowance of `1e-9` px.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        const TOL: f64 = 1e-9;
        p.x >= -TOL
            && p.y >= -TOL
            && p.x <= (self.width - 1) as f64 + TOL
            && p.y <= (self.height - 1) as f64 + TOL
    }
}

pub fn backproject(k: &CameraIntrinsics, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(k.ray(pixel) * depth)
}

/// Tangent-space increment: rotation (radians) in the first three components,
/// translation (meters) in the last three.
pub type Twist = Vector6<f64>;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform, rotation first then translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            rotation: r,
            translation: -(r * self.translation),
        }
    }

    pub fn matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Exponential map of SE(3).
    pub fn exp(xi: &Twist) -> Pose {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        Pose {
            rotation,
            translation: left_jacobian_so3(&omega) * v,
        }
    }

    /// Logarithm of SE(3), valid for rotation angles below pi.
    pub fn log(&self) -> Twist {
        let omega = self.rotation.scaled_axis();
        let v = inverse_left_jacobian_so3(&omega) * self.translation;
        Twist::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    /// Right retraction `self * exp(xi)` with quaternion renormalization.
    pub fn retract(&self, xi: &Twist) -> Pose {
        let mut p = self.compose(&Pose::exp(xi));
        p.rotation = UnitQuaternion::new_normalize(p.rotation.into_inner());
        p
    }

    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }
}

fn left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let theta = theta2.sqrt();
    let a = if theta2 < 1e-12 {
        0.5 - theta2 / 24.0
    } else {
        let h = (0.5 * theta).sin();
        2.0 * h * h / theta2
    };
    let b = if theta2 < 1e-4 {
        1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta2 * theta)
    };
    Matrix3::identity() + w * a + w * w * b
}

fn inverse_left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let c = if theta2 < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta2.sqrt();
        (1.0 - half / half.tan()) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// `j_from_i = inverse(world_from_j) * world_from_i`.
pub fn relative_pose(world_from_i: &Pose, world_from_j: &Pose) -> Pose {
    world_from_j.inverse().compose(world_from_i)
}

/// Result of warping a whole depth map into another camera.
#[derive(Debug, Clone)]
pub struct Reprojection {
    pub coords: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

/// Warps every pixel of frame i, with depth `depth_i` (meters), into frame j.
///
/// Pixels with non-positive depth, points at `z <= Z_MIN` after the transform and
/// points landing outside frame j are marked invalid.
pub fn reproject(k: &CameraIntrinsics, j_from_i: &Pose, depth_i: &Grid<f64>) -> Reprojection {
    let mut valid = Grid::filled(depth_i.width(), depth_i.height(), false);
    let coords = Grid::from_fn(depth_i.width(), depth_i.height(), |x, y| {
        let px = Vector2::new(x as f64, y as f64);
        let d = *depth_i.get(x, y);
        if !(d > 0.0) {
            return px;
        }
        let pj = j_from_i.transform_point(&(k.ray(&px) * d));
        if pj.z <= Z_MIN {
            return px;
        }
        let q = k.project(&pj);
        if k.contains(&q) {
            *valid.get_mut(x, y) = true;
        }
        q
    });
    Reprojection { coords, valid }
}
