//! Synthetic ground-truthed test data: a torso-like phantom with landmarks
//! and labels, known smooth deformations and simulated appearance changes.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::jacobian_determinant_map;
use crate::io::ParameterMap;
use crate::spline::{prefilter_cubic, SampleScratch};
use crate::transform::{BSplineTransform, Transform};
use crate::volume::{BinaryMask, Grid, Point3, Volume};

/// Largest `|T(T^-1(y)) - y|` accepted from the inversion, in mm.
pub const INVERSION_TOLERANCE: f64 = 0.05;
/// Ground-truth fields must stay at least this far from folding.
pub const MIN_JACOBIAN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipsoid { center: Point3, radii: [f64; 3] },
    /// Capsule around the segment `from`-`to`.
    Tube { from: Point3, to: Point3, radius: f64 },
    /// Axis-aligned box.
    Slab { center: Point3, half: [f64; 3] },
}

impl Shape {
    pub fn contains(&self, p: Point3) -> bool {
        match *self {
            Shape::Ellipsoid { center, radii } => {
                (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
            Shape::Tube { from, to, radius } => segment_distance(p, from, to) <= radius,
            Shape::Slab { center, half } => (0..3).all(|a| (p[a] - center[a]).abs() <= half[a]),
        }
    }
}

fn segment_distance(p: Point3, a: Point3, b: Point3) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        ((0..3).map(|i| ab[i] * ap[i]).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub name: String,
    pub label: u8,
    pub shape: Shape,
    pub intensity: f64,
}

/// Low-contrast smooth texture: a sum of random plane waves added inside
/// every structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub amplitude: f64,
    /// (wave vector in rad/mm, phase)
    pub waves: Vec<([f64; 3], f64)>,
}

impl Texture {
    pub fn none() -> Self {
        Texture { amplitude: 0.0, waves: Vec::new() }
    }

    pub fn random(rng: &mut impl Rng, amplitude: f64, wavelengths: (f64, f64), count: usize) -> Self {
        let waves = (0..count)
            .map(|_| {
                let dir = random_unit(rng);
                let k = std::f64::consts::TAU / rng.gen_range(wavelengths.0..wavelengths.1);
                (dir.map(|d| d * k), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Texture { amplitude, waves }
    }

    /// In `[-amplitude, amplitude]`.
    pub fn value(&self, p: Point3) -> f64 {
        if self.waves.is_empty() {
            return 0.0;
        }
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phi)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phi).cos())
            .sum();
        self.amplitude * s / self.waves.len() as f64
    }
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub extent: [f64; 3],
    pub spacing: [f64; 3],
    pub background: f64,
    /// Painted in order; later structures overwrite earlier ones.
    pub structures: Vec<Structure>,
    pub texture: Texture,
    pub landmarks: Vec<Point3>,
    pub seed: u64,
}

pub const LABELS: [(u8, &str); 8] = [
    (1, "body"),
    (2, "lung_right"),
    (3, "lung_left"),
    (4, "heart"),
    (5, "spine"),
    (6, "ribs"),
    (7, "tumor"),
    (8, "vessels"),
];

impl PhantomSpec {
    /// Torso-like layout scaled to `extent`: body, two lungs with branching
    /// vessel trees, heart, vertebrae, ribs and a small lesion. Positions and
    /// sizes are jittered by `seed`.
    pub fn standard(extent: [f64; 3], spacing: [f64; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = extent;
        let c = [e[0] / 2.0, e[1] / 2.0, e[2] / 2.0];
        let mut jit = |scale: f64| rng.gen_range(-scale..scale);
        let at = |u: [f64; 3]| [c[0] + u[0] * e[0], c[1] + u[1] * e[1], c[2] + u[2] * e[2]];
        let mut structures = Vec::new();
        let mut landmarks = Vec::new();
        let mut push = |name: &str, shape: Shape, intensity: f64| {
            let label = LABELS.iter().find(|l| l.1 == name).expect("known label").0;
            structures.push(Structure { name: name.into(), label, shape, intensity });
        };

        push(
            "body",
            Shape::Ellipsoid { center: c, radii: [0.42 * e[0], 0.36 * e[1], 0.45 * e[2]] },
            0.55,
        );

        let mut lungs = Vec::new();
        for (name, side) in [("lung_right", 1.0), ("lung_left", -1.0)] {
            let center = at([side * (0.17 + jit(0.01)), jit(0.01), 0.03 + jit(0.01)]);
            let radii = [
                (0.13 + jit(0.008)) * e[0],
                (0.2 + jit(0.01)) * e[1],
                (0.3 + jit(0.015)) * e[2],
            ];
            push(name, Shape::Ellipsoid { center, radii }, 0.12);
            landmarks.push(center);
            lungs.push((side, center, radii));
        }

        let heart = at([0.03 + jit(0.01), -0.08 + jit(0.01), -0.05 + jit(0.01)]);
        push("heart", Shape::Ellipsoid { center: heart, radii: [0.11 * e[0], 0.1 * e[1], 0.12 * e[2]] }, 0.7);
        landmarks.push(heart);

        for i in 0..7 {
            let center = at([jit(0.005), 0.25 + jit(0.005), -0.36 + 0.12 * i as f64]);
            push(
                "spine",
                Shape::Ellipsoid { center, radii: [0.05 * e[0], 0.045 * e[1], 0.04 * e[2]] },
                0.95,
            );
            landmarks.push(center);
        }

        for z in [-0.3, -0.1, 0.1, 0.3] {
            for side in [1.0, -1.0] {
                let center = at([side * 0.355, jit(0.02), z + jit(0.01)]);
                push(
                    "ribs",
                    Shape::Slab { center, half: [0.012 * e[0], 0.14 * e[1], 0.012 * e[2]] },
                    0.9,
                );
                landmarks.push(center);
            }
        }

        let (_, lc, lr) = lungs[1];
        let tumor = [
            lc[0] + (0.2 + jit(0.05)) * lr[0],
            lc[1] + (-0.3 + jit(0.05)) * lr[1],
            lc[2] + (-0.3 + jit(0.05)) * lr[2],
        ];
        push("tumor", Shape::Ellipsoid { center: tumor, radii: [0.035 * e[0], 0.035 * e[1], 0.035 * e[2]] }, 0.62);
        landmarks.push(tumor);

        for &(side, lc, lr) in &lungs {
            let mut rel = |u: [f64; 3], j: f64| {
                [
                    lc[0] + (u[0] + jit(j)) * lr[0],
                    lc[1] + (u[1] + jit(j)) * lr[1],
                    lc[2] + (u[2] + jit(j)) * lr[2],
                ]
            };
            let root = rel([-side * 0.55, 0.0, 0.25], 0.03);
            let fork = rel([0.0, 0.0, 0.15], 0.06);
            let upper = rel([side * 0.3, -0.2, 0.5], 0.06);
            let lower = rel([side * 0.25, 0.2, -0.45], 0.06);
            let tips = [
                rel([side * 0.6, -0.45, 0.7], 0.06),
                rel([side * 0.65, 0.1, 0.35], 0.06),
                rel([side * 0.6, -0.1, -0.65], 0.06),
                rel([side * 0.5, 0.5, -0.3], 0.06),
            ];
            let r = (e[0] + e[1] + e[2]) / 3.0;
            let segments = [
                (root, fork, 0.022 * r),
                (fork, upper, 0.016 * r),
                (fork, lower, 0.016 * r),
                (upper, tips[0], 0.012 * r),
                (upper, tips[1], 0.012 * r),
                (lower, tips[2], 0.012 * r),
                (lower, tips[3], 0.012 * r),
            ];
            for (from, to, radius) in segments {
                push("vessels", Shape::Tube { from, to, radius }, 0.6);
            }
            landmarks.extend([root, fork, upper, lower]);
            landmarks.extend(tips);
        }

        let texture = Texture::random(&mut rng, 0.04, (6.0, 20.0), 12);
        PhantomSpec {
            extent,
            spacing,
            background: 0.0,
            structures,
            texture,
            landmarks,
            seed,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        let dims = [0, 1, 2].map(|a| ((self.extent[a] / self.spacing[a]).round() as usize).max(1));
        Grid::new(dims, self.spacing, [0.0; 3])
    }
}

/// Image, label map and landmarks of one phantom instance.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    /// Painted label value per voxel (see [`LABELS`]), 0 for background.
    pub labels: Volume,
    pub landmarks: Vec<Point3>,
}

impl Phantom {
    pub fn label_mask(&self, label: u8) -> BinaryMask {
        BinaryMask::from_label(&self.labels, i64::from(label))
    }

    /// Every labelled voxel.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask::from_volume(&self.labels)
    }
}

fn paint(spec: &PhantomSpec, p: Point3) -> (f64, u8) {
    spec.structures
        .iter()
        .rev()
        .find(|s| s.shape.contains(p))
        .map_or((spec.background, 0), |s| (s.intensity, s.label))
}

/// Renders `spec` with 2x2x2 supersampling for partial-volume edges.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let grid = spec.grid()?;
    let h = spec.spacing.map(|s| s / 4.0);
    let voxels: Vec<(f32, f32)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.voxel_of_linear(idx);
            let p = grid.world(i, j, k);
            let mut acc = 0.0;
            for s in 0..8 {
                let q = [0, 1, 2].map(|a| p[a] + if s >> a & 1 == 1 { h[a] } else { -h[a] });
                acc += paint(spec, q).0;
            }
            let label = paint(spec, p).1;
            let mut v = acc / 8.0;
            if label != 0 {
                v += spec.texture.value(p);
            }
            (v as f32, f32::from(label))
        })
        .collect();
    let (image, labels): (Vec<f32>, Vec<f32>) = voxels.into_iter().unzip();
    Ok(Phantom {
        image: Volume::new(grid, 1, image)?,
        labels: Volume::new(grid, 1, labels)?,
        landmarks: spec.landmarks.clone(),
    })
}

fn solve3(m: &[[f64; 3]; 3], r: [f64; 3]) -> Option<[f64; 3]> {
    let a = Matrix3::from_fn(|i, j| m[i][j]);
    let x = a.lu().solve(&Vector3::new(r[0], r[1], r[2]))?;
    Some([x[0], x[1], x[2]])
}

/// Solves `T(x) = y` by Newton iteration started from the fixed-point guess
/// `y - u(y)`. Returns `x` and the final residual `|T(x) - y|`.
pub fn invert_point(t: &dyn Transform, y: Point3) -> (Point3, f64) {
    let ty = t.apply(y);
    let mut x = [0, 1, 2].map(|a| 2.0 * y[a] - ty[a]);
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let residual = |x: Point3| {
        let tx = t.apply(x);
        [tx[0] - y[0], tx[1] - y[1], tx[2] - y[2]]
    };
    let mut r = residual(x);
    for _ in 0..50 {
        if norm(r) < 1e-9 {
            break;
        }
        let Some(dx) = solve3(&t.spatial_jacobian(x), r) else { break };
        // Damped step: halve until the residual shrinks.
        let mut step = 1.0;
        loop {
            let cand = [0, 1, 2].map(|a| x[a] - step * dx[a]);
            let rc = residual(cand);
            if norm(rc) < norm(r) || step < 1e-4 {
                x = cand;
                r = rc;
                break;
            }
            step *= 0.5;
        }
    }
    (x, norm(r))
}

/// Deformed copy of a phantom with its ground truth.
#[derive(Debug, Clone)]
pub struct DeformedPhantom {
    pub phantom: Phantom,
    pub max_residual: f64,
}

/// Warps `phantom` by the inverse of `field` (pull-back, so that
/// registering the original as fixed image onto the result as moving image
/// recovers `field`) and maps its landmarks forward through `field`.
pub fn apply_known_deformation(phantom: &Phantom, field: &dyn Transform, background: f32) -> Result<DeformedPhantom> {
    let grid = phantom.image.grid;
    let coeffs = prefilter_cubic(&phantom.image)?;
    let results: Vec<(f32, f32, f64)> = (0..grid.len())
        .into_par_iter()
        .map_init(
            || (SampleScratch::default(), Vec::new()),
            |(scratch, vals), idx| {
                let [i, j, k] = grid.voxel_of_linear(idx);
                let (x, res) = invert_point(field, grid.world(i, j, k));
                let v = match coeffs.sample_value_with(scratch, x, vals) {
                    Ok(()) => vals[0] as f32,
                    Err(_) => background,
                };
                let l = grid
                    .nearest_voxel(x)
                    .map_or(0.0, |[a, b, c]| phantom.labels.get(a, b, c, 0));
                (v, l, res)
            },
        )
        .collect();
    let max_residual = results.iter().map(|r| r.2).fold(0.0, f64::max);
    if !(max_residual < INVERSION_TOLERANCE) {
        return Err(Error::Numerical(format!(
            "deformation inversion did not converge: max residual {max_residual:.4} mm"
        )));
    }
    let image = results.iter().map(|r| r.0).collect();
    let labels = results.iter().map(|r| r.1).collect();
    Ok(DeformedPhantom {
        phantom: Phantom {
            image: Volume::new(grid, 1, image)?,
            labels: Volume::new(grid, 1, labels)?,
            landmarks: phantom.landmarks.iter().map(|&p| field.apply(p)).collect(),
        },
        max_residual,
    })
}

fn max_displacement(t: &dyn Transform, grid: &Grid) -> f64 {
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.voxel_of_linear(idx);
            let p = grid.world(i, j, k);
            let q = t.apply(p);
            ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt()
        })
        .reduce(|| 0.0, f64::max)
}

/// Random smooth B-spline field on `domain` with control spacing `spacing`
/// whose largest displacement over the domain voxels is `max_disp`. The
/// coefficients are drawn on a grid twice as coarse and refined, which keeps
/// the field smooth; draws whose Jacobian determinant falls to
/// [`MIN_JACOBIAN`] or below are rejected.
pub fn random_field(domain: &Grid, spacing: [f64; 3], max_disp: f64, rng: &mut impl Rng) -> Result<BSplineTransform> {
    if !(max_disp >= 0.0) {
        return Err(Error::Config(format!("maximum displacement must be >= 0, got {max_disp}")));
    }
    let check = crate::pyramid::grid_with_spacing(domain, domain.spacing.map(|s| s.max(2.0)));
    for _ in 0..32 {
        let mut coarse = BSplineTransform::for_domain(domain, spacing.map(|s| 2.0 * s))?;
        let p: Vec<f64> = (0..coarse.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        coarse.set_params(&p);
        let mut field = coarse.refine_grid();
        let m = max_displacement(&field, domain);
        if m > 0.0 {
            let scaled: Vec<f64> = field.params().iter().map(|v| v * max_disp / m).collect();
            field.set_params(&scaled);
        }
        let (_, jac) = jacobian_determinant_map(&field, &check);
        if jac.min > MIN_JACOBIAN {
            return Ok(field);
        }
    }
    Err(Error::Numerical(format!(
        "no random field with max displacement {max_disp} mm kept det J above {MIN_JACOBIAN}"
    )))
}

/// Simulated change of imaging appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySim {
    /// Sign-preserving power `sign(v)|v|^gamma`.
    pub gamma: f64,
    /// Strictly increasing piecewise-linear map applied after the gamma;
    /// linear extrapolation with the end slopes. Empty means identity.
    pub knots: Vec<[f64; 2]>,
    /// Multiplicative field `1 + a s(x)` with a smooth `|s| <= 1`.
    pub bias_amplitude: f64,
    pub bias_wavelength: f64,
    pub noise_sigma: f64,
    /// Voxels closer than this to the grid border are cut from the field of
    /// view.
    pub truncation: Option<f64>,
    pub fill: f32,
}

impl ModalitySim {
    pub fn identity() -> Self {
        ModalitySim {
            gamma: 1.0,
            knots: Vec::new(),
            bias_amplitude: 0.0,
            bias_wavelength: 200.0,
            noise_sigma: 0.0,
            truncation: None,
            fill: 0.0,
        }
    }

    /// Cone-beam-like appearance for intensities in `[0, 1]`: gamma and
    /// contrast remap, 20% bias, noise at 5% of the range and a 10 mm
    /// truncated field of view.
    pub fn cross_modality() -> Self {
        ModalitySim {
            gamma: 0.7,
            knots: vec![[0.0, 0.0], [0.3, 0.4], [0.6, 0.5], [1.0, 1.0]],
            bias_amplitude: 0.2,
            bias_wavelength: 200.0,
            noise_sigma: 0.05,
            truncation: Some(10.0),
            fill: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.knots.len() == 1 {
            return Err(Error::Config("intensity remap needs at least two knots".into()));
        }
        if self.knots.windows(2).any(|w| !(w[1][0] > w[0][0] && w[1][1] > w[0][1])) {
            return Err(Error::Config("intensity remap knots must be strictly increasing".into()));
        }
        if !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return Err(Error::Config(format!("bias amplitude must be in [0, 1), got {}", self.bias_amplitude)));
        }
        if !(self.noise_sigma >= 0.0) || self.truncation.is_some_and(|t| !(t >= 0.0)) {
            return Err(Error::Config("noise sigma and truncation must be >= 0".into()));
        }
        Ok(())
    }

    /// The monotone intensity remap.
    pub fn remap(&self, v: f64) -> f64 {
        let g = v.signum() * v.abs().powf(self.gamma);
        let k = &self.knots;
        if k.is_empty() {
            return g;
        }
        let seg = k.windows(2).position(|w| g <= w[1][0]).unwrap_or(k.len() - 2);
        let (a, b) = (k[seg], k[seg + 1]);
        a[1] + (g - a[0]) * (b[1] - a[1]) / (b[0] - a[0])
    }
}

/// Smooth multiplicative field `1 + a s(x)`.
#[derive(Debug, Clone)]
pub struct BiasField {
    amplitude: f64,
    waves: Texture,
}

impl BiasField {
    pub fn random(sim: &ModalitySim, rng: &mut impl Rng) -> Self {
        let w = sim.bias_wavelength;
        BiasField { amplitude: sim.bias_amplitude, waves: Texture::random(rng, 1.0, (w, 2.0 * w), 3) }
    }

    pub fn value(&self, p: Point3) -> f64 {
        1.0 + self.amplitude * self.waves.value(p)
    }
}

/// Applies remap, bias, noise and truncation in that order. Returns the
/// simulated image and its field-of-view validity mask.
pub fn simulate_modality(vol: &Volume, sim: &ModalitySim, rng: &mut impl Rng) -> Result<(Volume, BinaryMask)> {
    sim.validate()?;
    if vol.channels != 1 {
        return Err(Error::InvalidData(format!("modality simulation needs one channel, got {}", vol.channels)));
    }
    let grid = vol.grid;
    let bias = BiasField::random(sim, rng);
    let noise = Normal::new(0.0, sim.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = grid.bounds();
    let mut data = Vec::with_capacity(grid.len());
    let mut valid = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let [i, j, k] = grid.voxel_of_linear(idx);
        let p = grid.world(i, j, k);
        let mut v = sim.remap(f64::from(vol.data[idx])) * bias.value(p);
        if sim.noise_sigma > 0.0 {
            v += noise.sample(rng);
        }
        let inside = sim
            .truncation
            .map_or(true, |m| (0..3).all(|a| p[a] - lo[a] >= m && hi[a] - p[a] >= m));
        data.push(if inside { v as f32 } else { sim.fill });
        valid.push(u8::from(inside));
    }
    Ok((Volume::new(grid, 1, data)?, BinaryMask::new(grid, valid)?))
}

/// Settings for a complete fixed/moving phantom pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCaseConfig {
    pub extent: [f64; 3],
    pub spacing: [f64; 3],
    pub max_displacement: f64,
    pub control_spacing: [f64; 3],
    /// Appearance change applied to the moving image.
    pub modality: Option<ModalitySim>,
    pub seed: u64,
}

impl Default for PhantomCaseConfig {
    fn default() -> Self {
        PhantomCaseConfig {
            extent: [128.0; 3],
            spacing: [1.0; 3],
            max_displacement: 8.0,
            control_spacing: [16.0; 3],
            modality: None,
            seed: 1,
        }
    }
}

pub const PHANTOM_KEYS: [&str; 12] = [
    "PhantomExtent",
    "PhantomSpacing",
    "MaximumDisplacement",
    "DeformationGridSpacing",
    "Modality",
    "Gamma",
    "RemapKnots",
    "BiasAmplitude",
    "BiasWavelength",
    "NoiseSigma",
    "TruncationMargin",
    "RandomSeed",
];

fn floats(map: &ParameterMap, key: &str) -> Result<Option<Vec<f64>>> {
    map.get(key)
        .map(|vals| {
            vals.iter()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("{key}: '{v}' is not a number"))))
                .collect()
        })
        .transpose()
}

fn vec3(map: &ParameterMap, key: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    match floats(map, key)?.as_deref() {
        None => Ok(default),
        Some(&[v]) => Ok([v; 3]),
        Some(&[a, b, c]) => Ok([a, b, c]),
        Some(v) => Err(Error::Config(format!("{key} needs 1 or 3 values, got {}", v.len()))),
    }
}

fn scalar(map: &ParameterMap, key: &str, default: f64) -> Result<f64> {
    match floats(map, key)?.as_deref() {
        None => Ok(default),
        Some(&[v]) => Ok(v),
        Some(v) => Err(Error::Config(format!("{key} needs one value, got {}", v.len()))),
    }
}

impl PhantomCaseConfig {
    pub fn from_parameters(map: &ParameterMap) -> Result<Self> {
        let d = PhantomCaseConfig::default();
        let mut cfg = PhantomCaseConfig {
            extent: vec3(map, "PhantomExtent", d.extent)?,
            spacing: vec3(map, "PhantomSpacing", d.spacing)?,
            max_displacement: scalar(map, "MaximumDisplacement", d.max_displacement)?,
            control_spacing: vec3(map, "DeformationGridSpacing", d.control_spacing)?,
            modality: None,
            seed: scalar(map, "RandomSeed", d.seed as f64)? as u64,
        };
        let base = match map.get("Modality").and_then(|v| v.first()).map(String::as_str) {
            None | Some("none") => None,
            Some("cross") => Some(ModalitySim::cross_modality()),
            Some("custom") => Some(ModalitySim::identity()),
            Some(other) => {
                return Err(Error::Choice {
                    key: "Modality".into(),
                    choices: "none, cross, custom".into(),
                    found: other.into(),
                })
            }
        };
        if let Some(mut sim) = base {
            sim.gamma = scalar(map, "Gamma", sim.gamma)?;
            if let Some(k) = floats(map, "RemapKnots")? {
                if k.len() % 2 != 0 {
                    return Err(Error::Config("RemapKnots needs (input, output) pairs".into()));
                }
                sim.knots = k.chunks(2).map(|c| [c[0], c[1]]).collect();
            }
            sim.bias_amplitude = scalar(map, "BiasAmplitude", sim.bias_amplitude)?;
            sim.bias_wavelength = scalar(map, "BiasWavelength", sim.bias_wavelength)?;
            sim.noise_sigma = scalar(map, "NoiseSigma", sim.noise_sigma)?;
            let t = scalar(map, "TruncationMargin", sim.truncation.unwrap_or(0.0))?;
            sim.truncation = (t > 0.0).then_some(t);
            sim.validate()?;
            cfg.modality = Some(sim);
        }
        Ok(cfg)
    }
}

/// A generated registration problem with known answer.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub fixed: Phantom,
    pub moving: Phantom,
    /// Field-of-view mask of the moving image.
    pub moving_mask: BinaryMask,
    /// Ground-truth fixed-to-moving transform.
    pub field: BSplineTransform,
    pub max_residual: f64,
}

/// Fixed image = phantom, moving image = phantom pulled back through the
/// inverse of a random field, then passed through the modality simulation.
pub fn build_case(cfg: &PhantomCaseConfig) -> Result<PhantomCase> {
    let spec = PhantomSpec::standard(cfg.extent, cfg.spacing, cfg.seed);
    let fixed = generate_phantom(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let field = random_field(&fixed.image.grid, cfg.control_spacing, cfg.max_displacement, &mut rng)?;
    let deformed = apply_known_deformation(&fixed, &field, spec.background as f32)?;
    let mut moving = deformed.phantom;
    let moving_mask = match &cfg.modality {
        Some(sim) => {
            rng.set_stream(2);
            let (img, mask) = simulate_modality(&moving.image, sim, &mut rng)?;
            moving.image = img;
            mask
        }
        None => BinaryMask::full(moving.image.grid),
    };
    Ok(PhantomCase { fixed, moving, moving_mask, field, max_residual: deformed.max_residual })
}
