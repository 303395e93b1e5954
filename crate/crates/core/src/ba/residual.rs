//! Per-pixel residual blocks and their analytic Jacobians.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};

use crate::geometry::{skew, CameraIntrinsics, Pose, Z_MIN};

/// Linearized reprojection residual `e = project(j_from_i * X_i(u)) - target`.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionBlock {
    pub residual: Vector2<f64>,
    /// With respect to the right-perturbation twist of `world_from_i`.
    pub d_pose_i: Matrix2x6<f64>,
    /// With respect to the right-perturbation twist of `world_from_j`.
    pub d_pose_j: Matrix2x6<f64>,
    pub d_inv_depth: Vector2<f64>,
}

/// Relative transform quantities shared by every pixel of an edge.
#[derive(Debug, Clone, Copy)]
pub struct EdgeTransform {
    pub j_from_i: Pose,
    pub r_ji: Matrix3<f64>,
}

impl EdgeTransform {
    pub fn new(world_from_i: &Pose, world_from_j: &Pose) -> Self {
        let j_from_i = crate::geometry::relative_pose(world_from_i, world_from_j);
        Self {
            r_ji: *j_from_i.rotation.to_rotation_matrix().matrix(),
            j_from_i,
        }
    }
}

/// Point in camera j for a source ray `(x, y, 1)` at inverse depth `u`, or `None`
/// if it fails the cheirality cutoff.
#[inline]
pub fn transfer(t: &EdgeTransform, ray: &Vector3<f64>, u: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let p_i = ray / u;
    let p_j = t.r_ji * p_i + t.j_from_i.translation;
    (p_j.z > Z_MIN).then_some((p_i, p_j))
}

#[inline]
pub fn projection_jacobian(k: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2, 0.0, k.fy * iz, -k.fy * p.y * iz2)
}

/// Reprojected coordinate only.
#[inline]
pub fn reprojection_residual(
    k_j: &CameraIntrinsics,
    t: &EdgeTransform,
    ray: &Vector3<f64>,
    u: f64,
    target: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let (_, p_j) = transfer(t, ray, u)?;
    Some(k_j.project(&p_j) - target)
}

/// Residual and Jacobians for one pixel of edge (i, j).
pub fn reprojection_block(
    k_j: &CameraIntrinsics,
    t: &EdgeTransform,
    ray: &Vector3<f64>,
    u: f64,
    target: &Vector2<f64>,
) -> Option<ReprojectionBlock> {
    let (p_i, p_j) = transfer(t, ray, u)?;
    let residual = k_j.project(&p_j) - target;
    let dpi = projection_jacobian(k_j, &p_j);

    // d p_j / d xi_i = R_ji [ -[p_i]x | I ]
    let mut dp_dxi_i = nalgebra::Matrix3x6::zeros();
    dp_dxi_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-t.r_ji * skew(&p_i)));
    dp_dxi_i.fixed_view_mut::<3, 3>(0, 3).copy_from(&t.r_ji);
    // d p_j / d xi_j = [ [p_j]x | -I ]
    let mut dp_dxi_j = nalgebra::Matrix3x6::zeros();
    dp_dxi_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&p_j));
    dp_dxi_j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    let dp_du = -(t.r_ji * p_i) / u;

    Some(ReprojectionBlock {
        residual,
        d_pose_i: dpi * dp_dxi_i,
        d_pose_j: dpi * dp_dxi_j,
        d_inv_depth: dpi * dp_du,
    })
}

/// Huber cost on a squared residual norm.
#[inline]
pub fn huber_cost(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        sq
    } else {
        2.0 * delta * sq.sqrt() - delta * delta
    }
}

/// IRLS weight of the Huber cost on a squared residual norm.
#[inline]
pub fn huber_weight(sq: f64, delta: f64) -> f64 {
    if sq <= delta * delta {
        1.0
    } else {
        delta / sq.sqrt()
    }
}
