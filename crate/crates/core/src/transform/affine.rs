use serde::{Deserialize, Serialize};

use super::{det3, Mat3, ParamJacobian, Transform};
use crate::error::{Error, Result};
use crate::volume::{Grid, Point3};

/// `T(x) = M (x - c) + c + t`.
///
/// The twelve optimizer parameters are `(M - I) * scale` (row-major) followed
/// by `t`, so that matrix and translation parameters are both in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub matrix: Mat3,
    pub translation: [f64; 3],
    pub center: Point3,
    pub scale: f64,
}

impl AffineTransform {
    pub fn identity(center: Point3, scale: f64) -> Self {
        AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            center,
            scale: if scale > 0.0 { scale } else { 1.0 },
        }
    }

    pub fn new(matrix: Mat3, translation: [f64; 3], center: Point3, scale: f64) -> Result<Self> {
        let d = det3(&matrix);
        if !(d.abs() > 1e-12) || !d.is_finite() {
            return Err(Error::InvalidData(format!("affine matrix is singular (det = {d})")));
        }
        let mut t = AffineTransform::identity(center, scale);
        t.matrix = matrix;
        t.translation = translation;
        Ok(t)
    }

    /// Identity centered on a fixed-image grid, scaled by its half extent.
    pub fn for_domain(grid: &Grid) -> Self {
        let e = grid.extent();
        let scale = 0.5 * e.iter().cloned().fold(0.0, f64::max);
        AffineTransform::identity(grid.center(), scale)
    }

    pub fn is_invertible(&self) -> bool {
        det3(&self.matrix).abs() > 1e-12
    }
}

impl Transform for AffineTransform {
    fn apply(&self, x: Point3) -> Point3 {
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        std::array::from_fn(|i| {
            self.matrix[i][0] * d[0] + self.matrix[i][1] * d[1] + self.matrix[i][2] * d[2]
                + self.center[i]
                + self.translation[i]
        })
    }

    fn num_params(&self) -> usize {
        12
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(12);
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                p.push((self.matrix[i][j] - id) * self.scale);
            }
        }
        p.extend_from_slice(&self.translation);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), 12, "affine transform takes 12 parameters");
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                self.matrix[i][j] = id + params[i * 3 + j] / self.scale;
            }
        }
        self.translation = [params[9], params[10], params[11]];
    }

    fn param_jacobian(&self, x: Point3) -> ParamJacobian {
        let rows = std::array::from_fn(|d| {
            let mut row = vec![0.0; 12];
            for j in 0..3 {
                row[d * 3 + j] = (x[j] - self.center[j]) / self.scale;
            }
            row[9 + d] = 1.0;
            row
        });
        ParamJacobian::Dense { rows }
    }

    fn spatial_jacobian(&self, _x: Point3) -> Mat3 {
        self.matrix
    }

    fn max_step_displacement(&self, step: &[f64], domain: &Grid) -> f64 {
        domain
            .corners()
            .iter()
            .map(|&c| {
                let d = self.param_jacobian(c).apply(step);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    fn clone_box(&self) -> Box<dyn Transform> {
        Box::new(self.clone())
    }
}
