//! Similarity metrics: IMPACT in Jacobian and Static modes plus intensity
//! baselines (MSE, NCC, NMI).
//!
//! Every metric is a dissimilarity evaluated on a set of fixed-frame sample
//! points. Per-sample terms are computed in parallel and reduced serially in
//! sample order, so results do not depend on the worker count.

mod distance;
mod nmi;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{
    pad_channels, pad_channels_backward, select_subset, FeatureExtractor, Mode, PadPolicy, StaticFeatureMap,
};
use crate::spline::{OutOfDomain, PatchGeometry, SampleScratch, SplineCoefficientVolume};
use crate::transform::{ParamJacobian, Transform};
use crate::volume::{BinaryMask, Grid, Point3, Volume};

pub use distance::{distance_eval, distance_eval_into, DistanceKind};
pub use nmi::{nmi_value, quantile, NmiSetup};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Mse,
    Ncc,
    Nmi,
    Impact,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::Mse, MetricKind::Ncc, MetricKind::Nmi, MetricKind::Impact];
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Mse => "MSE",
            MetricKind::Ncc => "NCC",
            MetricKind::Nmi => "NMI",
            MetricKind::Impact => "IMPACT",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" | "advancedmeansquares" => Ok(MetricKind::Mse),
            "ncc" | "advancednormalizedcorrelation" => Ok(MetricKind::Ncc),
            "nmi" | "normalizedmutualinformation" | "advancedmattesmutualinformation" => Ok(MetricKind::Nmi),
            "impact" => Ok(MetricKind::Impact),
            _ => Err(Error::Choice {
                key: "Metric".into(),
                choices: "MSE, NCC, NMI, IMPACT".into(),
                found: s.into(),
            }),
        }
    }
}

/// Cost value and its gradient with respect to the transform parameters.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Samples whose NCC/cosine denominator was dominated by its guard.
    pub guarded: usize,
}

#[derive(Debug, Clone)]
enum Data {
    Intensity {
        fixed: SplineCoefficientVolume,
        moving: SplineCoefficientVolume,
    },
    Jacobian {
        fixed: SplineCoefficientVolume,
        moving: SplineCoefficientVolume,
        /// Same extractor, bound to the intensity range of each image.
        fixed_extractor: FeatureExtractor,
        extractor: FeatureExtractor,
        pad: PadPolicy,
    },
    Static {
        fixed: StaticFeatureMap,
        moving: StaticFeatureMap,
    },
}

/// A metric bound to the images (or feature maps) of one resolution level.
#[derive(Debug, Clone)]
pub struct LevelMetric {
    pub kind: MetricKind,
    pub distance: DistanceKind,
    /// Features compared per sample (`SubsetFeatures`), clamped to each layer's width.
    pub subset: usize,
    data: Data,
    nmi: Option<NmiSetup>,
}

fn single_channel(v: &Volume, what: &str) -> Result<()> {
    if v.channels != 1 {
        return Err(Error::InvalidData(format!(
            "{what} expects single-channel images, found {} channels",
            v.channels
        )));
    }
    Ok(())
}

/// Robust intensity range over the voxels inside `mask`.
pub fn intensity_range(v: &Volume, mask: Option<&BinaryMask>) -> (f64, f64) {
    let g = v.grid;
    let mut vals: Vec<f64> = (0..g.len())
        .filter(|&idx| {
            mask.map_or(true, |m| {
                let [i, j, k] = g.voxel_of_linear(idx);
                m.contains_world(g.world(i, j, k))
            })
        })
        .map(|idx| f64::from(v.data[idx * v.channels]))
        .collect();
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    let lo = quantile(&mut vals, 0.005);
    let hi = quantile(&mut vals, 0.995);
    (lo, hi)
}

impl LevelMetric {
    pub fn mse(fixed: &Volume, moving: &Volume) -> Result<Self> {
        Self::intensity(MetricKind::Mse, fixed, moving, None)
    }

    pub fn ncc(fixed: &Volume, moving: &Volume) -> Result<Self> {
        Self::intensity(MetricKind::Ncc, fixed, moving, None)
    }

    pub fn nmi(fixed: &Volume, moving: &Volume, bins: usize, masks: (Option<&BinaryMask>, Option<&BinaryMask>)) -> Result<Self> {
        let setup = NmiSetup::new(bins, intensity_range(fixed, masks.0), intensity_range(moving, masks.1))?;
        Self::intensity(MetricKind::Nmi, fixed, moving, Some(setup))
    }

    fn intensity(kind: MetricKind, fixed: &Volume, moving: &Volume, nmi: Option<NmiSetup>) -> Result<Self> {
        single_channel(fixed, &kind.to_string())?;
        single_channel(moving, &kind.to_string())?;
        Ok(LevelMetric {
            kind,
            distance: DistanceKind::L2,
            subset: 1,
            data: Data::Intensity {
                fixed: crate::spline::prefilter_cubic(fixed)?,
                moving: crate::spline::prefilter_cubic(moving)?,
            },
            nmi,
        })
    }

    pub fn impact_jacobian(
        fixed: &Volume,
        moving: &Volume,
        extractor: FeatureExtractor,
        distance: DistanceKind,
        subset: usize,
        pad: PadPolicy,
    ) -> Result<Self> {
        extractor.validate(Mode::Jacobian)?;
        if fixed.channels != moving.channels {
            return Err(Error::InvalidData(format!(
                "fixed has {} channels, moving has {}",
                fixed.channels, moving.channels
            )));
        }
        if fixed.channels > extractor.input_channels {
            return Err(Error::InvalidData(format!(
                "extractor {} takes {} channels, images have {}",
                extractor.name, extractor.input_channels, fixed.channels
            )));
        }
        Ok(LevelMetric {
            kind: MetricKind::Impact,
            distance,
            subset: subset.max(1),
            data: Data::Jacobian {
                fixed: crate::spline::prefilter_cubic(fixed)?,
                moving: crate::spline::prefilter_cubic(moving)?,
                fixed_extractor: extractor.for_image(fixed),
                extractor: extractor.for_image(moving),
                pad,
            },
            nmi: None,
        })
    }

    pub fn impact_static(
        fixed: StaticFeatureMap,
        moving: StaticFeatureMap,
        distance: DistanceKind,
        subset: usize,
    ) -> Result<Self> {
        if fixed.layers.is_empty() || fixed.layers.len() != moving.layers.len() {
            return Err(Error::InvalidData(format!(
                "static feature maps need matching nonempty layer lists ({} fixed, {} moving)",
                fixed.layers.len(),
                moving.layers.len()
            )));
        }
        for (f, m) in fixed.layers.iter().zip(&moving.layers) {
            if f.channels() != m.channels() {
                return Err(Error::InvalidData(format!(
                    "feature layer {}: fixed has {} channels, moving has {}",
                    f.id,
                    f.channels(),
                    m.channels()
                )));
            }
        }
        Ok(LevelMetric {
            kind: MetricKind::Impact,
            distance,
            subset: subset.max(1),
            data: Data::Static { fixed, moving },
            nmi: None,
        })
    }

    pub fn mode(&self) -> Option<Mode> {
        match self.data {
            Data::Jacobian { .. } => Some(Mode::Jacobian),
            Data::Static { .. } => Some(Mode::Static),
            Data::Intensity { .. } => None,
        }
    }

    /// Patch compared around each sample point.
    pub fn patch(&self) -> PatchGeometry {
        match &self.data {
            Data::Jacobian { extractor, .. } => extractor.patch,
            _ => PatchGeometry::single(),
        }
    }

    /// Grid whose bounds limit fixed-frame sample patches.
    pub fn fixed_domain(&self) -> Grid {
        match &self.data {
            Data::Intensity { fixed, .. } | Data::Jacobian { fixed, .. } => fixed.grid,
            Data::Static { fixed, .. } => fixed.layers[0].coeffs.grid,
        }
    }

    /// Grid whose bounds limit moving-frame sample patches.
    pub fn moving_domain(&self) -> Grid {
        match &self.data {
            Data::Intensity { moving, .. } | Data::Jacobian { moving, .. } => moving.grid,
            Data::Static { moving, .. } => moving.layers[0].coeffs.grid,
        }
    }

    /// Evaluates the cost at `points`. `seeds[i]` drives the feature subset of
    /// sample `i`. Points must be admissible for `transform`.
    pub fn evaluate(
        &self,
        transform: &dyn Transform,
        points: &[Point3],
        seeds: &[u64],
        gradient: bool,
    ) -> Result<Evaluation> {
        if points.is_empty() {
            return Err(Error::Sampling("no sample points".into()));
        }
        debug_assert_eq!(points.len(), seeds.len());
        match self.kind {
            MetricKind::Ncc | MetricKind::Nmi => self.evaluate_global(transform, points, gradient),
            _ => self.evaluate_separable(transform, points, seeds, gradient),
        }
    }

    fn evaluate_separable(
        &self,
        transform: &dyn Transform,
        points: &[Point3],
        seeds: &[u64],
        gradient: bool,
    ) -> Result<Evaluation> {
        let terms: Vec<Result<SampleTerm>> = points
            .par_iter()
            .zip(seeds.par_iter())
            .map_init(Workspace::default, |ws, (&x, &seed)| {
                let y = transform.apply(x);
                let mut term = match &self.data {
                    Data::Intensity { fixed, moving } => self.mse_term(ws, fixed, moving, x, y, gradient)?,
                    Data::Jacobian {
                        fixed,
                        moving,
                        fixed_extractor,
                        extractor,
                        pad,
                    } => self.jacobian_term(ws, fixed, moving, (fixed_extractor, extractor), *pad, x, y, seed, gradient)?,
                    Data::Static { fixed, moving } => self.static_term(ws, fixed, moving, x, y, seed, gradient)?,
                };
                if gradient {
                    term.jacobian = Some(transform.param_jacobian(x));
                }
                Ok(term)
            })
            .collect();
        let n = points.len() as f64;
        let mut eval = Evaluation {
            gradient: if gradient { vec![0.0; transform.num_params()] } else { Vec::new() },
            ..Default::default()
        };
        for term in terms {
            let term = term?;
            eval.value += term.value;
            eval.guarded += usize::from(term.guarded);
            if let Some(j) = &term.jacobian {
                j.accumulate(term.dcdy.map(|v| v / n), &mut eval.gradient);
            }
        }
        eval.value /= n;
        Ok(eval)
    }

    fn mse_term(
        &self,
        ws: &mut Workspace,
        fixed: &SplineCoefficientVolume,
        moving: &SplineCoefficientVolume,
        x: Point3,
        y: Point3,
        gradient: bool,
    ) -> Result<SampleTerm> {
        fixed.sample_value_with(&mut ws.scratch, x, &mut ws.fv).map_err(off_domain)?;
        let f = ws.fv[0];
        let mut term = SampleTerm::default();
        if gradient {
            moving
                .sample_value_gradient_with(&mut ws.scratch, y, &mut ws.mv, &mut ws.mg)
                .map_err(off_domain)?;
            let d = f - ws.mv[0];
            term.value = d * d;
            term.dcdy = [-2.0 * d * ws.mg[0], -2.0 * d * ws.mg[1], -2.0 * d * ws.mg[2]];
        } else {
            moving.sample_value_with(&mut ws.scratch, y, &mut ws.mv).map_err(off_domain)?;
            let d = f - ws.mv[0];
            term.value = d * d;
        }
        Ok(term)
    }

    #[allow(clippy::too_many_arguments)]
    fn jacobian_term(
        &self,
        ws: &mut Workspace,
        fixed: &SplineCoefficientVolume,
        moving: &SplineCoefficientVolume,
        (fixed_extractor, extractor): (&FeatureExtractor, &FeatureExtractor),
        pad: PadPolicy,
        x: Point3,
        y: Point3,
        seed: u64,
        gradient: bool,
    ) -> Result<SampleTerm> {
        let geom = &extractor.patch;
        let need = extractor.input_channels;
        let fp = fixed
            .resample_patch_with(&mut ws.scratch, x, geom, false, &mut ws.mg)
            .map_err(off_domain)?;
        let fp = pad_channels(&fp, need, pad);
        let f = fixed_extractor.extract(&fp);
        let mp = moving
            .resample_patch_with(&mut ws.scratch, y, geom, gradient, &mut ws.mg)
            .map_err(off_domain)?;
        let raw_channels = mp.channels;
        let mp = pad_channels(&mp, need, pad);
        let m = extractor.extract(&mp);
        let layer = extractor.enabled_layers().next().expect("validated extractor");
        let (value, idx, guarded) = self.compare(ws, &f, &m, seed)?;
        let mut term = SampleTerm {
            value: layer.weight * value,
            guarded,
            ..Default::default()
        };
        if gradient {
            let mut upstream = vec![0.0; m.len()];
            for (&i, &d) in idx.iter().zip(&ws.ds) {
                upstream[i] = layer.weight * d;
            }
            let (_, gpatch) = extractor.extract_with_gradient(&mp, &upstream);
            let gpatch = pad_channels_backward(&gpatch, raw_channels, need, pad);
            let mut dcdy = [0.0; 3];
            for (v, g) in gpatch.iter().enumerate() {
                if *g != 0.0 {
                    for a in 0..3 {
                        dcdy[a] += g * ws.mg[v * 3 + a];
                    }
                }
            }
            term.dcdy = dcdy;
        }
        Ok(term)
    }

    #[allow(clippy::too_many_arguments)]
    fn static_term(
        &self,
        ws: &mut Workspace,
        fixed: &StaticFeatureMap,
        moving: &StaticFeatureMap,
        x: Point3,
        y: Point3,
        seed: u64,
        gradient: bool,
    ) -> Result<SampleTerm> {
        let mut term = SampleTerm::default();
        for (fl, ml) in fixed.layers.iter().zip(&moving.layers) {
            fl.coeffs.sample_value_with(&mut ws.scratch, x, &mut ws.fv).map_err(off_domain)?;
            if gradient {
                ml.coeffs
                    .sample_value_gradient_with(&mut ws.scratch, y, &mut ws.mv, &mut ws.mg)
                    .map_err(off_domain)?;
            } else {
                ml.coeffs.sample_value_with(&mut ws.scratch, y, &mut ws.mv).map_err(off_domain)?;
            }
            let f = std::mem::take(&mut ws.fv);
            let m = std::mem::take(&mut ws.mv);
            let (value, idx, guarded) = self.compare(ws, &f, &m, seed ^ fl.id as u64)?;
            term.value += fl.weight * value;
            term.guarded |= guarded;
            if gradient {
                for (&i, &d) in idx.iter().zip(&ws.ds) {
                    for a in 0..3 {
                        term.dcdy[a] += fl.weight * d * ws.mg[i * 3 + a];
                    }
                }
            }
            ws.fv = f;
            ws.mv = m;
        }
        Ok(term)
    }

    /// Distance over a random feature subset; returns the value and the
    /// selected indices, leaving the derivative per selected feature in `ws.ds`.
    fn compare(&self, ws: &mut Workspace, f: &[f64], m: &[f64], seed: u64) -> Result<(f64, Vec<usize>, bool)> {
        let c = f.len();
        let k = self.subset.min(c);
        let idx = if k == c {
            (0..c).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            select_subset(c, k, &mut rng)?
        };
        ws.fs.clear();
        ws.ms.clear();
        ws.fs.extend(idx.iter().map(|&i| f[i]));
        ws.ms.extend(idx.iter().map(|&i| m[i]));
        ws.ds.clear();
        ws.ds.resize(k, 0.0);
        let (value, guarded) = distance_eval_into(self.distance, &ws.fs, &ws.ms, &mut ws.ds);
        Ok((value, idx, guarded))
    }

    /// Metrics coupling all samples (NCC, NMI): gather values, then combine.
    fn evaluate_global(&self, transform: &dyn Transform, points: &[Point3], gradient: bool) -> Result<Evaluation> {
        let Data::Intensity { fixed, moving } = &self.data else {
            unreachable!("global metrics use intensities")
        };
        let gathered: Vec<Result<(f64, f64, [f64; 3], Option<ParamJacobian>)>> = points
            .par_iter()
            .map_init(Workspace::default, |ws, &x| {
                let y = transform.apply(x);
                fixed.sample_value_with(&mut ws.scratch, x, &mut ws.fv).map_err(off_domain)?;
                if gradient {
                    moving
                        .sample_value_gradient_with(&mut ws.scratch, y, &mut ws.mv, &mut ws.mg)
                        .map_err(off_domain)?;
                    Ok((ws.fv[0], ws.mv[0], [ws.mg[0], ws.mg[1], ws.mg[2]], Some(transform.param_jacobian(x))))
                } else {
                    moving.sample_value_with(&mut ws.scratch, y, &mut ws.mv).map_err(off_domain)?;
                    Ok((ws.fv[0], ws.mv[0], [0.0; 3], None))
                }
            })
            .collect();
        let n = points.len();
        let mut f = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        let mut jacs = Vec::with_capacity(n);
        for g in gathered {
            let (a, b, gr, j) = g?;
            f.push(a);
            m.push(b);
            grads.push(gr);
            jacs.push(j);
        }
        let mut dm = vec![0.0; n];
        let mut eval = Evaluation::default();
        match self.kind {
            MetricKind::Ncc => {
                let (v, guarded) = distance_eval_into(DistanceKind::Ncc, &f, &m, &mut dm);
                if guarded {
                    return Err(Error::Numerical(format!(
                        "NCC undefined: constant intensities over {n} samples"
                    )));
                }
                eval.value = v;
            }
            MetricKind::Nmi => {
                let setup = self.nmi.as_ref().expect("NMI setup");
                eval.value = nmi_value(setup, &f, &m, gradient.then_some(&mut dm[..]))?;
            }
            _ => unreachable!(),
        }
        if gradient {
            eval.gradient = vec![0.0; transform.num_params()];
            for ((d, g), j) in dm.iter().zip(&grads).zip(&jacs) {
                if let Some(j) = j {
                    j.accumulate([d * g[0], d * g[1], d * g[2]], &mut eval.gradient);
                }
            }
        }
        Ok(eval)
    }
}

fn off_domain(e: OutOfDomain) -> Error {
    Error::Sampling(format!("sample left the image domain: {e}"))
}

#[derive(Debug, Default)]
struct SampleTerm {
    value: f64,
    dcdy: [f64; 3],
    guarded: bool,
    jacobian: Option<ParamJacobian>,
}

#[derive(Debug, Default)]
struct Workspace {
    scratch: SampleScratch,
    fv: Vec<f64>,
    mv: Vec<f64>,
    mg: Vec<f64>,
    fs: Vec<f64>,
    ms: Vec<f64>,
    ds: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MindConfig;
    use crate::transform::BSplineTransform;
    use rand::Rng;

    fn smooth_image(n: usize, shift: f64) -> Volume {
        let grid = Grid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap();
        Volume::from_fn(grid, |p| {
            let x = p[0] - shift;
            (50.0 + 20.0 * (0.4 * x).sin() * (0.3 * p[1]).cos() + 10.0 * (0.25 * p[2] + 0.1 * x).sin()) as f32
        })
    }

    fn setup(seed: u64) -> (Volume, Volume, BSplineTransform) {
        let fixed = smooth_image(16, 0.0);
        let moving = smooth_image(16, 0.7);
        let mut t = BSplineTransform::for_domain(&fixed.grid, [5.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..t.num_params()).map(|_| rng.gen_range(-0.4..0.4)).collect();
        t.set_params(&p);
        (fixed, moving, t)
    }

    fn points(metric: &LevelMetric, t: &dyn Transform, n: usize, seed: u64) -> (Vec<Point3>, Vec<u64>) {
        let plan = crate::sampling::SamplingPlan::new(
            n,
            None,
            None,
            metric.patch(),
            crate::sampling::SamplerKind::Continuous,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set =
            crate::sampling::sample_points(&plan, &metric.fixed_domain(), &metric.moving_domain(), t, &mut rng)
                .unwrap();
        let seeds = (0..n).map(|_| rng.gen()).collect();
        (set.points, seeds)
    }

    fn check_gradient(metric: &LevelMetric, t: &BSplineTransform, tol: f64, seed: u64) {
        let (pts, seeds) = points(metric, t, 300, seed);
        let eval = metric.evaluate(t, &pts, &seeds, true).unwrap();
        let base = t.params();
        let scale = eval.gradient.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let active: Vec<usize> = (0..base.len()).filter(|&i| eval.gradient[i].abs() > 1e-3 * scale).collect();
        for _ in 0..20 {
            let i = active[rng.gen_range(0..active.len())];
            let h = 1e-5;
            let mut tp = t.clone();
            let mut p = base.clone();
            p[i] += h;
            tp.set_params(&p);
            let vp = metric.evaluate(&tp, &pts, &seeds, false).unwrap().value;
            p[i] -= 2.0 * h;
            tp.set_params(&p);
            let vm = metric.evaluate(&tp, &pts, &seeds, false).unwrap().value;
            let fd = (vp - vm) / (2.0 * h);
            let rel = (fd - eval.gradient[i]).abs() / eval.gradient[i].abs().max(1e-2 * scale);
            assert!(rel < tol, "{} param {i}: fd {fd} analytic {} rel {rel}", metric.kind, eval.gradient[i]);
        }
    }

    #[test]
    fn intensity_metric_gradients() {
        let (f, m, t) = setup(1);
        check_gradient(&LevelMetric::mse(&f, &m).unwrap(), &t, 1e-4, 3);
        check_gradient(&LevelMetric::ncc(&f, &m).unwrap(), &t, 1e-4, 4);
        check_gradient(&LevelMetric::nmi(&f, &m, 32, (None, None)).unwrap(), &t, 1e-3, 5);
    }

    #[test]
    fn impact_gradients() {
        let (f, m, t) = setup(2);
        let geom = PatchGeometry {
            size: [5; 3],
            resolution: [1.0; 3],
        };
        let mind = FeatureExtractor::mind(MindConfig::default(), geom, 1).unwrap();
        for d in DistanceKind::ALL {
            let metric = LevelMetric::impact_jacobian(&f, &m, mind.clone(), d, 32, PadPolicy::Duplicate).unwrap();
            check_gradient(&metric, &t, 1e-3, 6);
        }
        let ident = FeatureExtractor::identity(
            PatchGeometry {
                size: [3; 3],
                resolution: [1.5; 3],
            },
            1,
        );
        let metric = LevelMetric::impact_jacobian(&f, &m, ident, DistanceKind::L2, 8, PadPolicy::Duplicate).unwrap();
        check_gradient(&metric, &t, 1e-4, 7);
    }

    #[test]
    fn mse_reduction_is_exact() {
        let (f, m, t) = setup(3);
        let mse = LevelMetric::mse(&f, &m).unwrap();
        let ident = FeatureExtractor::identity(PatchGeometry::single(), 1);
        let imp = LevelMetric::impact_jacobian(&f, &m, ident, DistanceKind::L2, 32, PadPolicy::Duplicate).unwrap();
        let (pts, seeds) = points(&mse, &t, 500, 9);
        let a = mse.evaluate(&t, &pts, &seeds, true).unwrap();
        let b = imp.evaluate(&t, &pts, &seeds, true).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.gradient, b.gradient);
    }

    #[test]
    fn identical_images_give_zero() {
        let (f, _, _) = setup(4);
        let t = BSplineTransform::for_domain(&f.grid, [5.0; 3]).unwrap();
        let mse = LevelMetric::mse(&f, &f).unwrap();
        let (pts, seeds) = points(&mse, &t, 200, 1);
        let e = mse.evaluate(&t, &pts, &seeds, true).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.gradient.iter().all(|&g| g == 0.0));
        let shifted = Volume {
            data: f.data.iter().map(|v| v + 3.0).collect(),
            ..f.clone()
        };
        let e = LevelMetric::mse(&f, &shifted).unwrap().evaluate(&t, &pts, &seeds, false).unwrap();
        assert!((e.value - 9.0).abs() < 1e-4);
        let ncc = LevelMetric::ncc(&f, &shifted).unwrap().evaluate(&t, &pts, &seeds, false).unwrap();
        assert!(ncc.value.abs() < 1e-9);
    }
}
