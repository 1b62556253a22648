//! Spatial transforms mapping fixed-frame points into the moving frame,
//! together with their parameter and spatial Jacobians.

mod affine;
mod bspline;
mod composite;

pub use affine::AffineTransform;
pub use bspline::BSplineTransform;
pub use composite::CompositeTransform;

use crate::volume::{Grid, Point3};

pub type Mat3 = [[f64; 3]; 3];

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Local Jacobian of `T(x)` with respect to the parameter vector.
#[derive(Debug, Clone)]
pub enum ParamJacobian {
    /// B-spline style: every displacement component shares the same basis
    /// weights; the parameter of component `d` for node `indices[n]` sits at
    /// `d * stride + indices[n]`.
    Separable {
        indices: [usize; 64],
        weights: [f64; 64],
        len: usize,
        stride: usize,
    },
    /// One dense row per output component.
    Dense { rows: [Vec<f64>; 3] },
}

impl ParamJacobian {
    /// `grad += J^T v`.
    #[inline]
    pub fn accumulate(&self, v: [f64; 3], grad: &mut [f64]) {
        match self {
            ParamJacobian::Separable {
                indices,
                weights,
                len,
                stride,
            } => {
                for n in 0..*len {
                    let w = weights[n];
                    let idx = indices[n];
                    grad[idx] += w * v[0];
                    grad[stride + idx] += w * v[1];
                    grad[2 * stride + idx] += w * v[2];
                }
            }
            ParamJacobian::Dense { rows } => {
                for (d, row) in rows.iter().enumerate() {
                    for (g, r) in grad.iter_mut().zip(row) {
                        *g += r * v[d];
                    }
                }
            }
        }
    }

    /// `J dtheta`.
    pub fn apply(&self, dtheta: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        match self {
            ParamJacobian::Separable {
                indices,
                weights,
                len,
                stride,
            } => {
                for n in 0..*len {
                    for (d, o) in out.iter_mut().enumerate() {
                        *o += weights[n] * dtheta[d * stride + indices[n]];
                    }
                }
            }
            ParamJacobian::Dense { rows } => {
                for (d, row) in rows.iter().enumerate() {
                    out[d] = row.iter().zip(dtheta).map(|(r, t)| r * t).sum();
                }
            }
        }
        out
    }

    /// Number of parameters with a nonzero entry in some row.
    pub fn nonzero_params(&self) -> usize {
        match self {
            ParamJacobian::Separable { weights, len, .. } => {
                3 * weights[..*len].iter().filter(|w| **w != 0.0).count()
            }
            ParamJacobian::Dense { rows } => {
                let n = rows[0].len();
                (0..n).filter(|&i| rows.iter().any(|r| r[i] != 0.0)).count()
            }
        }
    }
}

/// A parametric spatial transform `T_theta`.
pub trait Transform: Send + Sync + std::fmt::Debug {
    fn apply(&self, x: Point3) -> Point3;

    fn num_params(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]);

    fn param_jacobian(&self, x: Point3) -> ParamJacobian;

    /// `dT/dx` as `m[output][input]`.
    fn spatial_jacobian(&self, x: Point3) -> Mat3;

    /// Upper bound on the displacement change over `domain` caused by
    /// adding `step` to the parameters.
    fn max_step_displacement(&self, step: &[f64], domain: &Grid) -> f64;

    /// Bending energy at `points` and its parameter gradient, for transforms
    /// that carry a smoothness penalty.
    fn bending_energy(&self, _points: &[Point3]) -> Option<(f64, Vec<f64>)> {
        None
    }

    fn clone_box(&self) -> Box<dyn Transform>;
}

impl Clone for Box<dyn Transform> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}
