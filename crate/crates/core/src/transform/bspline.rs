use serde::{Deserialize, Serialize};

use super::{Mat3, ParamJacobian, Transform};
use crate::error::{Error, Result};
use crate::spline::{cubic_weights, cubic_weights_d1, cubic_weights_d2};
use crate::volume::{Grid, Point3};

/// Cubic B-spline free-form deformation, `T(x) = x + sum_k B(u - k) theta_k`.
///
/// Coefficients are displacements in mm, stored component-major: all x
/// components first, then y, then z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineTransform {
    pub grid_origin: Point3,
    pub grid_spacing: [f64; 3],
    pub grid_dims: [usize; 3],
    pub coeffs: Vec<f64>,
}

/// Local cubic support of a point: first node index and fractional offsets.
#[derive(Debug, Clone, Copy)]
struct Support {
    base: [isize; 3],
    t: [f64; 3],
}

/// Subdivision mask of the cubic B-spline, taps -2..=2.
const SUBDIVISION: [f64; 5] = [0.125, 0.5, 0.75, 0.5, 0.125];

impl BSplineTransform {
    pub fn new(grid_origin: Point3, grid_spacing: [f64; 3], grid_dims: [usize; 3]) -> Result<Self> {
        if grid_dims.iter().any(|&n| n < 4) {
            return Err(Error::Config(format!(
                "B-spline grid needs at least 4 control points per axis, found {grid_dims:?}"
            )));
        }
        if grid_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "B-spline grid spacing must be positive, found {grid_spacing:?}"
            )));
        }
        let n = grid_dims[0] * grid_dims[1] * grid_dims[2];
        Ok(BSplineTransform {
            grid_origin,
            grid_spacing,
            grid_dims,
            coeffs: vec![0.0; 3 * n],
        })
    }

    /// Identity transform whose control grid covers the box `[lo, hi]`,
    /// centered on it, with one control point before and two after the
    /// covered span along each axis.
    pub fn covering(lo: Point3, hi: Point3, spacing: [f64; 3]) -> Result<Self> {
        let mut origin = [0.0; 3];
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = (hi[a] - lo[a]).max(0.0);
            let cells = ((extent / spacing[a]) - 1e-9).ceil().max(1.0) as usize;
            let start = 0.5 * (lo[a] + hi[a]) - 0.5 * cells as f64 * spacing[a];
            origin[a] = start - spacing[a];
            dims[a] = cells + 3;
        }
        BSplineTransform::new(origin, spacing, dims)
    }

    /// Identity transform covering a fixed-image grid.
    pub fn for_domain(grid: &Grid, spacing: [f64; 3]) -> Result<Self> {
        let (lo, hi) = grid.bounds();
        BSplineTransform::covering(lo, hi, spacing)
    }

    pub fn num_nodes(&self) -> usize {
        self.grid_dims[0] * self.grid_dims[1] * self.grid_dims[2]
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.grid_dims[1] + j) * self.grid_dims[0] + i
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.grid_origin[0] + i as f64 * self.grid_spacing[0],
            self.grid_origin[1] + j as f64 * self.grid_spacing[1],
            self.grid_origin[2] + k as f64 * self.grid_spacing[2],
        ]
    }

    /// Coefficient (displacement) of one node.
    pub fn node_coefficient(&self, node: usize) -> [f64; 3] {
        let n = self.num_nodes();
        [self.coeffs[node], self.coeffs[n + node], self.coeffs[2 * n + node]]
    }

    pub fn set_node_coefficient(&mut self, node: usize, value: [f64; 3]) {
        let n = self.num_nodes();
        self.coeffs[node] = value[0];
        self.coeffs[n + node] = value[1];
        self.coeffs[2 * n + node] = value[2];
    }

    /// Sets coefficients from a displacement function sampled at the nodes.
    pub fn set_from_fn(&mut self, mut f: impl FnMut(Point3) -> [f64; 3]) {
        for k in 0..self.grid_dims[2] {
            for j in 0..self.grid_dims[1] {
                for i in 0..self.grid_dims[0] {
                    let v = f(self.node_position(i, j, k));
                    let node = self.node_index(i, j, k);
                    self.set_node_coefficient(node, v);
                }
            }
        }
    }

    #[inline]
    fn support(&self, x: Point3) -> Support {
        let mut base = [0isize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = (x[a] - self.grid_origin[a]) / self.grid_spacing[a];
            let f = u.floor();
            base[a] = f as isize - 1;
            t[a] = u - f;
        }
        Support { base, t }
    }

    /// Visits every in-grid node of the support with its tensor weight
    /// factors along each axis.
    #[inline]
    fn for_each_node(&self, s: &Support, mut f: impl FnMut(usize, [usize; 3])) {
        for c in 0..4 {
            let k = s.base[2] + c as isize;
            if k < 0 || k >= self.grid_dims[2] as isize {
                continue;
            }
            for b in 0..4 {
                let j = s.base[1] + b as isize;
                if j < 0 || j >= self.grid_dims[1] as isize {
                    continue;
                }
                for a in 0..4 {
                    let i = s.base[0] + a as isize;
                    if i < 0 || i >= self.grid_dims[0] as isize {
                        continue;
                    }
                    f(self.node_index(i as usize, j as usize, k as usize), [a, b, c]);
                }
            }
        }
    }

    /// Displacement `T(x) - x`.
    pub fn displacement(&self, x: Point3) -> [f64; 3] {
        let s = self.support(x);
        let w: [[f64; 4]; 3] = std::array::from_fn(|a| cubic_weights(s.t[a]));
        let n = self.num_nodes();
        let mut out = [0.0; 3];
        self.for_each_node(&s, |node, [a, b, c]| {
            let wt = w[0][a] * w[1][b] * w[2][c];
            out[0] += wt * self.coeffs[node];
            out[1] += wt * self.coeffs[n + node];
            out[2] += wt * self.coeffs[2 * n + node];
        });
        out
    }

    /// Second derivatives of the displacement, `h[d][i][j] = d2 u_d / dx_i dx_j`.
    pub fn hessian(&self, x: Point3) -> [Mat3; 3] {
        let s = self.support(x);
        let basis = self.second_derivative_basis(&s);
        let n = self.num_nodes();
        let mut h = [[[0.0; 3]; 3]; 3];
        let mut idx = 0;
        self.for_each_node(&s, |node, _| {
            let bk = &basis[idx];
            idx += 1;
            for d in 0..3 {
                let c = self.coeffs[d * n + node];
                for (p, &(i, j)) in HESSIAN_PAIRS.iter().enumerate() {
                    h[d][i][j] += bk[p] * c;
                }
            }
        });
        for hd in &mut h {
            hd[1][0] = hd[0][1];
            hd[2][0] = hd[0][2];
            hd[2][1] = hd[1][2];
        }
        h
    }

    /// Per in-grid support node, the six distinct second-derivative basis
    /// values in [`HESSIAN_PAIRS`] order.
    fn second_derivative_basis(&self, s: &Support) -> Vec<[f64; 6]> {
        let w: [[f64; 4]; 3] = std::array::from_fn(|a| cubic_weights(s.t[a]));
        let d1: [[f64; 4]; 3] =
            std::array::from_fn(|a| cubic_weights_d1(s.t[a]).map(|v| v / self.grid_spacing[a]));
        let d2: [[f64; 4]; 3] = std::array::from_fn(|a| {
            let sp = self.grid_spacing[a];
            cubic_weights_d2(s.t[a]).map(|v| v / (sp * sp))
        });
        let mut out = Vec::with_capacity(64);
        self.for_each_node(s, |_, [a, b, c]| {
            out.push([
                d2[0][a] * w[1][b] * w[2][c],
                w[0][a] * d2[1][b] * w[2][c],
                w[0][a] * w[1][b] * d2[2][c],
                d1[0][a] * d1[1][b] * w[2][c],
                d1[0][a] * w[1][b] * d1[2][c],
                w[0][a] * d1[1][b] * d1[2][c],
            ]);
        });
        out
    }

    /// Bending energy estimated on sample points: the mean over points of
    /// `sum_{d,i,j} (d2 T_d / dx_i dx_j)^2`, with its analytic gradient.
    pub fn bending_energy(&self, points: &[Point3]) -> (f64, Vec<f64>) {
        let n = self.num_nodes();
        let mut grad = vec![0.0; 3 * n];
        if points.is_empty() {
            return (0.0, grad);
        }
        let mut value = 0.0;
        let inv = 1.0 / points.len() as f64;
        for &x in points {
            let s = self.support(x);
            let basis = self.second_derivative_basis(&s);
            let mut nodes = Vec::with_capacity(64);
            self.for_each_node(&s, |node, _| nodes.push(node));
            let mut h = [[0.0; 6]; 3];
            for (bk, &node) in basis.iter().zip(&nodes) {
                for d in 0..3 {
                    let c = self.coeffs[d * n + node];
                    for p in 0..6 {
                        h[d][p] += bk[p] * c;
                    }
                }
            }
            for hd in &h {
                for p in 0..6 {
                    value += HESSIAN_MULTIPLICITY[p] * hd[p] * hd[p];
                }
            }
            for (bk, &node) in basis.iter().zip(&nodes) {
                for d in 0..3 {
                    let mut g = 0.0;
                    for p in 0..6 {
                        g += 2.0 * HESSIAN_MULTIPLICITY[p] * h[d][p] * bk[p];
                    }
                    grad[d * n + node] += g * inv;
                }
            }
        }
        (value * inv, grad)
    }

    /// Halves the control-point spacing while reproducing the same
    /// deformation on the region covered by the current grid.
    pub fn refine_grid(&self) -> BSplineTransform {
        let coarse = self.grid_dims;
        let fine: [usize; 3] = std::array::from_fn(|a| 2 * coarse[a] - 2);
        let spacing: [f64; 3] = std::array::from_fn(|a| 0.5 * self.grid_spacing[a]);
        let origin: Point3 = std::array::from_fn(|a| self.grid_origin[a] + spacing[a]);
        let mut out = BSplineTransform {
            grid_origin: origin,
            grid_spacing: spacing,
            grid_dims: fine,
            coeffs: vec![0.0; 3 * fine[0] * fine[1] * fine[2]],
        };
        let n_coarse = self.num_nodes();
        let n_fine = out.num_nodes();
        // Fine node m along an axis sits at coarse position (m + 1) / 2 and
        // collects coarse nodes k with |m + 1 - 2k| <= 2.
        let taps = |m: usize, n: usize| -> Vec<(usize, f64)> {
            let pos = m as isize + 1;
            let lo = ((pos - 2) as f64 / 2.0).ceil() as isize;
            let hi = ((pos + 2) as f64 / 2.0).floor() as isize;
            (lo.max(0)..=hi.min(n as isize - 1))
                .map(|k| (k as usize, SUBDIVISION[(pos - 2 * k + 2) as usize]))
                .collect()
        };
        let tx: Vec<_> = (0..fine[0]).map(|m| taps(m, coarse[0])).collect();
        let ty: Vec<_> = (0..fine[1]).map(|m| taps(m, coarse[1])).collect();
        let tz: Vec<_> = (0..fine[2]).map(|m| taps(m, coarse[2])).collect();
        for k in 0..fine[2] {
            for j in 0..fine[1] {
                for i in 0..fine[0] {
                    let mut acc = [0.0; 3];
                    for &(kc, wz) in &tz[k] {
                        for &(jc, wy) in &ty[j] {
                            for &(ic, wx) in &tx[i] {
                                let w = wx * wy * wz;
                                let node = self.node_index(ic, jc, kc);
                                for (d, a) in acc.iter_mut().enumerate() {
                                    *a += w * self.coeffs[d * n_coarse + node];
                                }
                            }
                        }
                    }
                    let node = out.node_index(i, j, k);
                    for (d, a) in acc.iter().enumerate() {
                        out.coeffs[d * n_fine + node] = *a;
                    }
                }
            }
        }
        out
    }
}

/// (i, j) pairs of the distinct Hessian entries: xx, yy, zz, xy, xz, yz.
const HESSIAN_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
const HESSIAN_MULTIPLICITY: [f64; 6] = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];

impl Transform for BSplineTransform {
    fn apply(&self, x: Point3) -> Point3 {
        let u = self.displacement(x);
        [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
    }

    fn num_params(&self) -> usize {
        self.coeffs.len()
    }

    fn params(&self) -> Vec<f64> {
        self.coeffs.clone()
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.coeffs.len(), "B-spline parameter count mismatch");
        self.coeffs.copy_from_slice(params);
    }

    fn param_jacobian(&self, x: Point3) -> ParamJacobian {
        let s = self.support(x);
        let w: [[f64; 4]; 3] = std::array::from_fn(|a| cubic_weights(s.t[a]));
        let mut indices = [0usize; 64];
        let mut weights = [0.0; 64];
        let mut len = 0;
        self.for_each_node(&s, |node, [a, b, c]| {
            indices[len] = node;
            weights[len] = w[0][a] * w[1][b] * w[2][c];
            len += 1;
        });
        ParamJacobian::Separable {
            indices,
            weights,
            len,
            stride: self.num_nodes(),
        }
    }

    fn spatial_jacobian(&self, x: Point3) -> Mat3 {
        let s = self.support(x);
        let w: [[f64; 4]; 3] = std::array::from_fn(|a| cubic_weights(s.t[a]));
        let d1: [[f64; 4]; 3] =
            std::array::from_fn(|a| cubic_weights_d1(s.t[a]).map(|v| v / self.grid_spacing[a]));
        let n = self.num_nodes();
        let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        self.for_each_node(&s, |node, [a, b, c]| {
            let g = [
                d1[0][a] * w[1][b] * w[2][c],
                w[0][a] * d1[1][b] * w[2][c],
                w[0][a] * w[1][b] * d1[2][c],
            ];
            for (d, row) in m.iter_mut().enumerate() {
                let coef = self.coeffs[d * n + node];
                for (e, r) in row.iter_mut().enumerate() {
                    *r += g[e] * coef;
                }
            }
        });
        m
    }

    fn max_step_displacement(&self, step: &[f64], _domain: &Grid) -> f64 {
        // Basis weights are nonnegative and sum to one, so the largest node
        // step bounds the displacement change everywhere.
        let n = self.num_nodes();
        (0..n)
            .map(|k| (step[k] * step[k] + step[n + k] * step[n + k] + step[2 * n + k] * step[2 * n + k]).sqrt())
            .fold(0.0, f64::max)
    }

    fn bending_energy(&self, points: &[Point3]) -> Option<(f64, Vec<f64>)> {
        Some(BSplineTransform::bending_energy(self, points))
    }

    fn clone_box(&self) -> Box<dyn Transform> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::cubic_bspline;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> BSplineTransform {
        BSplineTransform::covering([0.0; 3], [30.0, 24.0, 20.0], [8.0; 3]).unwrap()
    }

    fn randomize(t: &mut BSplineTransform, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut t.coeffs {
            *c = rng.gen_range(-amp..amp);
        }
    }

    fn random_point(rng: &mut ChaCha8Rng) -> Point3 {
        [rng.gen_range(0.0..30.0), rng.gen_range(0.0..24.0), rng.gen_range(0.0..20.0)]
    }

    #[test]
    fn zero_coefficients_are_identity() {
        let t = small();
        let x = [3.3, 17.0, 9.1];
        assert_eq!(t.apply(x), x);
        assert!(t.param_jacobian(x).nonzero_params() <= 3 * 64);
    }

    #[test]
    fn uniform_coefficients_translate() {
        let mut t = small();
        t.set_from_fn(|_| [3.0, 0.0, 0.0]);
        let y = t.apply([5.0, 5.0, 5.0]);
        assert!((y[0] - 8.0).abs() < 1e-12 && (y[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_node_matches_dense_basis_expansion() {
        let mut t = small();
        let node = t.node_index(2, 2, 1);
        t.set_node_coefficient(node, [1.5, -2.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = vec![t.node_position(2, 2, 1)];
        points.extend((0..50).map(|_| random_point(&mut rng)));
        for x in points {
            let p = t.node_position(2, 2, 1);
            let w: f64 = (0..3)
                .map(|a| cubic_bspline((x[a] - p[a]) / t.grid_spacing[a]))
                .product();
            let u = t.displacement(x);
            assert!((u[0] - 1.5 * w).abs() < 1e-12);
            assert!((u[1] + 2.0 * w).abs() < 1e-12);
        }
        let u = t.displacement(t.node_position(2, 2, 1));
        let w0 = (4.0f64 / 6.0).powi(3);
        assert!((u[0] - 1.5 * w0).abs() < 1e-12);
    }

    #[test]
    fn node_weights_on_control_point() {
        let t = small();
        let x = t.node_position(3, 2, 2);
        if let ParamJacobian::Separable { indices, weights, len, .. } = t.param_jacobian(x) {
            let mut by_node = std::collections::HashMap::new();
            for n in 0..len {
                by_node.insert(indices[n], weights[n]);
            }
            let expect = |di: isize, dj: isize, dk: isize| {
                let f = |d: isize| match d {
                    0 => 4.0 / 6.0,
                    -1 | 1 => 1.0 / 6.0,
                    _ => 0.0,
                };
                f(di) * f(dj) * f(dk)
            };
            for dk in -1..=2isize {
                for dj in -1..=2isize {
                    for di in -1..=2isize {
                        let node = t.node_index((3 + di) as usize, (2 + dj) as usize, (2 + dk) as usize);
                        let w = by_node.get(&node).copied().unwrap_or(0.0);
                        assert!((w - expect(di, dj, dk)).abs() < 1e-15);
                    }
                }
            }
        } else {
            panic!("expected separable jacobian");
        }
    }

    #[test]
    fn partition_of_unity() {
        let t = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            if let ParamJacobian::Separable { weights, len, .. } = t.param_jacobian(random_point(&mut rng)) {
                assert!((weights[..len].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_jacobian_matches_perturbation() {
        let mut t = small();
        randomize(&mut t, 3, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x = random_point(&mut rng);
            let jac = t.param_jacobian(x);
            let k = rng.gen_range(0..t.num_params());
            let mut e = vec![0.0; t.num_params()];
            e[k] = 1.0;
            let analytic = jac.apply(&e);
            let eps = 1e-3;
            let mut tp = t.clone();
            tp.coeffs[k] += eps;
            let a = t.apply(x);
            let b = tp.apply(x);
            for d in 0..3 {
                let fd = (b[d] - a[d]) / eps;
                assert!((fd - analytic[d]).abs() <= 1e-6 * analytic[d].abs().max(1e-6) + 1e-9);
            }
        }
    }

    #[test]
    fn refinement_preserves_field() {
        let mut t = small();
        randomize(&mut t, 5, 4.0);
        let fine = t.refine_grid();
        assert_eq!(fine.grid_spacing, [4.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let x = random_point(&mut rng);
            let a = t.apply(x);
            let b = fine.apply(x);
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-6, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn affine_field_has_zero_bending_energy() {
        let mut t = small();
        let c = [15.0, 12.0, 10.0];
        t.set_from_fn(|p| [0.1 * (p[0] - c[0]) + 0.05 * (p[1] - c[1]), 2.0, -0.03 * (p[2] - c[2])]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3> = (0..50).map(|_| random_point(&mut rng)).collect();
        let (e, _) = t.bending_energy(&pts);
        assert!(e.abs() < 1e-20, "{e}");
        let (e0, g0) = small().bending_energy(&pts);
        assert_eq!(e0, 0.0);
        assert!(g0.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn bending_energy_gradient_matches_directional_derivative() {
        let mut t = small();
        randomize(&mut t, 8, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3> = (0..40).map(|_| random_point(&mut rng)).collect();
        let (_, g) = t.bending_energy(&pts);
        let dir: Vec<f64> = (0..t.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = 1e-4;
        let shifted = |s: f64| {
            let mut tp = t.clone();
            for (c, d) in tp.coeffs.iter_mut().zip(&dir) {
                *c += s * d;
            }
            tp.bending_energy(&pts).0
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - analytic).abs() / analytic.abs() < 1e-4, "{fd} vs {analytic}");
    }

    #[test]
    fn hessian_matches_bending_energy() {
        let mut t = small();
        randomize(&mut t, 10, 2.0);
        let x = [11.0, 7.5, 9.0];
        let h = t.hessian(x);
        let direct: f64 = h.iter().flat_map(|m| m.iter().flatten()).map(|v| v * v).sum();
        let (e, _) = t.bending_energy(&[x]);
        assert!((direct - e).abs() < 1e-12 * e.max(1.0));
    }

    #[test]
    fn spatial_jacobian_of_scaling() {
        let mut t = small();
        let c = [15.0, 12.0, 10.0];
        t.set_from_fn(|p| std::array::from_fn(|a| 0.1 * (p[a] - c[a])));
        let m = t.spatial_jacobian([14.0, 10.0, 9.0]);
        assert!((super::super::det3(&m) - 1.331).abs() < 1e-9);
    }
}
