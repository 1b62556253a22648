//! Normalized mutual information from a joint histogram with cubic B-spline
//! Parzen windows on both intensity axes.

use crate::error::{Error, Result};
use crate::spline::{cubic_weights, cubic_weights_d1};

/// Bins kept empty on each side so every Parzen window fits.
const PAD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmiSetup {
    pub bins: usize,
    pub fixed_range: (f64, f64),
    pub moving_range: (f64, f64),
}

impl NmiSetup {
    pub fn new(bins: usize, fixed_range: (f64, f64), moving_range: (f64, f64)) -> Result<Self> {
        if bins < 8 {
            return Err(Error::Config(format!("NMI needs at least 8 histogram bins, got {bins}")));
        }
        for (name, (lo, hi)) in [("fixed", fixed_range), ("moving", moving_range)] {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Numerical(format!(
                    "NMI undefined: {name} intensity range [{lo}, {hi}] is degenerate (constant image)"
                )));
            }
        }
        Ok(NmiSetup {
            bins,
            fixed_range,
            moving_range,
        })
    }

    /// Continuous bin coordinate and its derivative with respect to intensity
    /// (zero where the value is clamped to the range).
    fn bin_coordinate(&self, v: f64, (lo, hi): (f64, f64)) -> (f64, f64) {
        let span = self.bins as f64 - 2.0 * PAD - 1.0;
        let scale = span / (hi - lo);
        let t = (v - lo) * scale;
        if t <= 0.0 {
            (PAD, 0.0)
        } else if t >= span {
            (PAD + span, 0.0)
        } else {
            (PAD + t, scale)
        }
    }
}

/// Window of one sample along one histogram axis.
struct Window {
    base: usize,
    w: [f64; 4],
    dw: [f64; 4],
    slope: f64,
}

fn window(setup: &NmiSetup, v: f64, range: (f64, f64)) -> Window {
    let (eta, slope) = setup.bin_coordinate(v, range);
    let f = eta.floor();
    let t = eta - f;
    Window {
        base: f as usize - 1,
        w: cubic_weights(t),
        dw: cubic_weights_d1(t),
        slope,
    }
}

/// Negated NMI `-(H(F) + H(M)) / H(F, M)` of paired samples, and when `grad`
/// is given its derivative with respect to every moving value.
pub fn nmi_value(setup: &NmiSetup, f: &[f64], m: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
    let b = setup.bins;
    let n = f.len();
    if n == 0 {
        return Err(Error::Numerical("NMI of an empty sample set".into()));
    }
    let inv_n = 1.0 / n as f64;
    let fw: Vec<Window> = f.iter().map(|&v| window(setup, v, setup.fixed_range)).collect();
    let mw: Vec<Window> = m.iter().map(|&v| window(setup, v, setup.moving_range)).collect();
    let mut joint = vec![0.0; b * b];
    for (wf, wm) in fw.iter().zip(&mw) {
        for (i, a) in wf.w.iter().enumerate() {
            let row = (wf.base + i) * b + wm.base;
            for (j, c) in wm.w.iter().enumerate() {
                joint[row + j] += a * c * inv_n;
            }
        }
    }
    let mut pf = vec![0.0; b];
    let mut pm = vec![0.0; b];
    for i in 0..b {
        for j in 0..b {
            pf[i] += joint[i * b + j];
            pm[j] += joint[i * b + j];
        }
    }
    let entropy = |p: &[f64]| -> f64 { -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>() };
    let hf = entropy(&pf);
    let hm = entropy(&pm);
    let hfm = entropy(&joint);
    if hf <= 0.0 || hm <= 0.0 || hfm <= 0.0 {
        return Err(Error::Numerical(format!(
            "NMI undefined: degenerate intensity distribution over {n} samples (H(F)={hf:.3e}, H(M)={hm:.3e})"
        )));
    }
    let value = -(hf + hm) / hfm;
    if let Some(grad) = grad {
        // dV/dp(a,b); the constant terms of d(p ln p) cancel because each
        // sample's window derivatives sum to zero.
        let log = |x: f64| if x > 0.0 { x.ln() } else { 0.0 };
        let ratio = (hf + hm) / (hfm * hfm);
        let mut dv = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                dv[i * b + j] = log(pm[j]) / hfm - ratio * log(joint[i * b + j]);
            }
        }
        for ((g, wf), wm) in grad.iter_mut().zip(&fw).zip(&mw) {
            if wm.slope == 0.0 {
                *g = 0.0;
                continue;
            }
            let mut s = 0.0;
            for (i, a) in wf.w.iter().enumerate() {
                let row = (wf.base + i) * b + wm.base;
                for (j, d) in wm.dw.iter().enumerate() {
                    s += a * d * dv[row + j];
                }
            }
            *g = s * inv_n * wm.slope;
        }
    }
    Ok(value)
}

/// Linear-interpolated quantile of a sample (sorted in place).
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = f.iter().map(|v| v * v + rng.gen_range(-0.1..0.1)).collect();
        (f, m)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (f, m) = samples(400, 1);
        let setup = NmiSetup::new(32, (0.0, 1.0), (-0.1, 1.1)).unwrap();
        let mut g = vec![0.0; m.len()];
        nmi_value(&setup, &f, &m, Some(&mut g)).unwrap();
        let scale = g.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for j in (0..m.len()).step_by(17) {
            let h = 1e-6;
            let mut mp = m.clone();
            mp[j] += h;
            let mut mm = m.clone();
            mm[j] -= h;
            let fd = (nmi_value(&setup, &f, &mp, None).unwrap() - nmi_value(&setup, &f, &mm, None).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-3 * scale, "{j}: fd {fd} analytic {}", g[j]);
        }
    }

    #[test]
    fn self_pairing_beats_shuffled() {
        let (f, _) = samples(2000, 2);
        let setup = NmiSetup::new(32, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let same = nmi_value(&setup, &f, &f, None).unwrap();
        let mut shuffled = f.clone();
        shuffled.rotate_left(7);
        assert!(same < nmi_value(&setup, &f, &shuffled, None).unwrap());
        assert!((-2.0 - 1e-12..=-1.0).contains(&same));
    }

    #[test]
    fn degenerate_range_rejected() {
        assert!(matches!(NmiSetup::new(32, (1.0, 1.0), (0.0, 1.0)), Err(Error::Numerical(_))));
    }

    #[test]
    fn quantile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&mut v, 0.5), 2.5);
        assert_eq!(quantile(&mut v, 0.0), 1.0);
        assert_eq!(quantile(&mut v, 1.0), 4.0);
    }
}
