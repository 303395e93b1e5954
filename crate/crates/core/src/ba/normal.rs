//! Gauss-Newton normal equations with a per-pixel inverse-depth block and the
//! Schur-complement solve over poses.

use nalgebra::{Cholesky, DMatrix, DVector, Vector6};

use crate::error::{Error, Result};
use crate::geometry::Twist;

/// Inverse-depth rows of the system for one frame.
///
/// Every pixel of the frame couples to the same set of free pose slots: its own
/// pose (if free) and the poses of the targets of its outgoing edges.
#[derive(Debug, Clone)]
pub struct DepthBlock {
    /// Free pose slots coupled to this frame's depths.
    pub coupled: Vec<usize>,
    pub huu: Vec<f64>,
    pub gu: Vec<f64>,
    /// `hpu[m * coupled.len() + c]` couples pixel `m` to pose slot `coupled[c]`.
    pub hpu: Vec<Vector6<f64>>,
    /// Pixel is an optimization variable.
    pub active: Vec<bool>,
}

impl DepthBlock {
    pub fn new(coupled: Vec<usize>, active: Vec<bool>) -> Self {
        let n = active.len();
        Self {
            hpu: vec![Vector6::zeros(); n * coupled.len()],
            huu: vec![0.0; n],
            gu: vec![0.0; n],
            coupled,
            active,
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn coupling(&self, pixel: usize, c: usize) -> &Vector6<f64> {
        &self.hpu[pixel * self.coupled.len() + c]
    }
}

#[derive(Debug, Clone)]
pub struct NormalEquations {
    /// Free pose slot per frame, `None` for fixed poses.
    pub pose_slot: Vec<Option<usize>>,
    pub hpp: DMatrix<f64>,
    pub gp: DVector<f64>,
    /// Per frame, `None` when its depths are not optimized.
    pub depth: Vec<Option<DepthBlock>>,
}

impl NormalEquations {
    pub fn free_poses(&self) -> usize {
        self.hpp.nrows() / 6
    }

    /// Gradient of the pose block; zero for fixed poses.
    pub fn pose_gradient(&self, frame: usize) -> Vector6<f64> {
        match self.pose_slot[frame] {
            Some(s) => self.gp.fixed_rows::<6>(6 * s).into_owned(),
            None => Vector6::zeros(),
        }
    }
}

/// Update for every frame; fixed poses and frozen depths get zero.
#[derive(Debug, Clone)]
pub struct Increment {
    pub poses: Vec<Twist>,
    pub depth: Vec<Option<Vec<f64>>>,
}

impl Increment {
    pub fn max_abs(&self) -> f64 {
        let p = self.poses.iter().map(|t| t.amax()).fold(0.0, f64::max);
        let d = self
            .depth
            .iter()
            .flatten()
            .flat_map(|v| v.iter())
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        p.max(d)
    }
}

/// Solves `(H + damping I) dx = -g` by eliminating the diagonal depth block.
pub fn solve_step(eq: &NormalEquations, damping: f64) -> Result<Increment> {
    let np = eq.hpp.nrows();
    let mut s = eq.hpp.clone();
    for d in 0..np {
        s[(d, d)] += damping;
    }
    let mut rhs = eq.gp.clone();

    for block in eq.depth.iter().flatten() {
        let nc = block.coupled.len();
        if nc == 0 {
            continue;
        }
        let rows: Vec<usize> = (0..block.len())
            .filter(|&m| block.active[m] && block.huu[m] + damping > 0.0)
            .collect();
        if rows.is_empty() {
            continue;
        }
        // Scaled coupling rows: S_sub = B^T D^-1 B computed as W^T W.
        let mut w = DMatrix::<f64>::zeros(rows.len(), 6 * nc);
        let mut r_sub = DVector::<f64>::zeros(6 * nc);
        for (r, &m) in rows.iter().enumerate() {
            let h = block.huu[m] + damping;
            let inv_sqrt = 1.0 / h.sqrt();
            for c in 0..nc {
                let b = block.coupling(m, c);
                for k in 0..6 {
                    w[(r, 6 * c + k)] = b[k] * inv_sqrt;
                }
                let scale = block.gu[m] / h;
                for k in 0..6 {
                    r_sub[6 * c + k] += b[k] * scale;
                }
            }
        }
        let s_sub = w.tr_mul(&w);
        for (ca, &sa) in block.coupled.iter().enumerate() {
            for k in 0..6 {
                rhs[6 * sa + k] -= r_sub[6 * ca + k];
            }
            for (cb, &sb) in block.coupled.iter().enumerate() {
                let mut dst = s.view_mut((6 * sa, 6 * sb), (6, 6));
                dst -= s_sub.view((6 * ca, 6 * cb), (6, 6));
            }
        }
    }

    let dp = if np > 0 {
        let chol = Cholesky::new(s).ok_or(Error::SingularSystem)?;
        let x = -chol.solve(&rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem);
        }
        x
    } else {
        DVector::zeros(0)
    };

    let poses = eq
        .pose_slot
        .iter()
        .map(|slot| match slot {
            Some(s) => dp.fixed_rows::<6>(6 * s).into_owned(),
            None => Twist::zeros(),
        })
        .collect();

    let depth = eq
        .depth
        .iter()
        .map(|block| {
            block.as_ref().map(|b| {
                let nc = b.coupled.len();
                (0..b.len())
                    .map(|m| {
                        let h = b.huu[m] + damping;
                        if !b.active[m] || h <= 0.0 {
                            return 0.0;
                        }
                        let mut acc = b.gu[m];
                        for c in 0..nc {
                            acc += b.coupling(m, c).dot(&dp.fixed_rows::<6>(6 * b.coupled[c]));
                        }
                        -acc / h
                    })
                    .collect()
            })
        })
        .collect();

    Ok(Increment { poses, depth })
}
