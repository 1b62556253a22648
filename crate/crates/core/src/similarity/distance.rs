use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dissimilarity between two feature vectors of equal length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    L1,
    L2,
    Ncc,
    Cosine,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 4] = [DistanceKind::L1, DistanceKind::L2, DistanceKind::Ncc, DistanceKind::Cosine];
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::L1 => "L1",
            DistanceKind::L2 => "L2",
            DistanceKind::Ncc => "NCC",
            DistanceKind::Cosine => "Cosine",
        })
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistanceKind::L1),
            "l2" => Ok(DistanceKind::L2),
            "ncc" => Ok(DistanceKind::Ncc),
            "cosine" => Ok(DistanceKind::Cosine),
            _ => Err(Error::Choice {
                key: "Loss".into(),
                choices: "L1, L2, NCC, Cosine".into(),
                found: s.into(),
            }),
        }
    }
}

/// Relative size of the L1 smoothing band around zero. Inside the band the
/// absolute value is replaced by the matching quadratic (Huber), so the value
/// and its derivative agree.
const L1_SMOOTHING: f64 = 1e-6;
/// Relative guard added to NCC and cosine denominators.
const DENOMINATOR_GUARD: f64 = 1e-12;

fn feature_scale(f: &[f64], m: &[f64]) -> f64 {
    f.iter().chain(m).fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE)
}

/// Evaluates `D(f, m)` and writes `dD/dm` into `grad`. Returns the value and
/// whether a guarded denominator dominated (flat or zero `m`).
pub fn distance_eval_into(kind: DistanceKind, f: &[f64], m: &[f64], grad: &mut [f64]) -> (f64, bool) {
    debug_assert_eq!(f.len(), m.len());
    debug_assert_eq!(f.len(), grad.len());
    let n = f.len() as f64;
    match kind {
        DistanceKind::L1 => {
            let eps = L1_SMOOTHING * feature_scale(f, m);
            let mut sum = 0.0;
            for ((g, &a), &b) in grad.iter_mut().zip(f).zip(m) {
                let d = a - b;
                sum += if d.abs() < eps { 0.5 * d * d / eps } else { d.abs() - 0.5 * eps };
                *g = -(d / eps).clamp(-1.0, 1.0) / n;
            }
            (sum / n, false)
        }
        DistanceKind::L2 => {
            let mut sum = 0.0;
            for ((g, &a), &b) in grad.iter_mut().zip(f).zip(m) {
                let d = a - b;
                sum += d * d;
                *g = -2.0 * d / n;
            }
            (sum / n, false)
        }
        DistanceKind::Ncc => {
            let scale = feature_scale(f, m);
            let eps = DENOMINATOR_GUARD * n * scale * scale;
            let fm = f.iter().sum::<f64>() / n;
            let mm = m.iter().sum::<f64>() / n;
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (&a, &b) in f.iter().zip(m) {
                let (a, b) = (a - fm, b - mm);
                sab += a * b;
                saa += a * a;
                sbb += b * b;
            }
            let den = ((saa + eps) * (sbb + eps)).sqrt();
            let rho = sab / den;
            for ((g, &a), &b) in grad.iter_mut().zip(f).zip(m) {
                *g = -((a - fm) / den - rho * (b - mm) / (sbb + eps));
            }
            (1.0 - rho, sbb <= eps || saa <= eps)
        }
        DistanceKind::Cosine => {
            let scale = feature_scale(f, m);
            let eps = DENOMINATOR_GUARD * n * scale * scale;
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (&a, &b) in f.iter().zip(m) {
                ab += a * b;
                aa += a * a;
                bb += b * b;
            }
            let den = ((aa + eps) * (bb + eps)).sqrt();
            let c = ab / den;
            for ((g, &a), &b) in grad.iter_mut().zip(f).zip(m) {
                *g = -(a / den - c * b / (bb + eps));
            }
            (1.0 - c, bb <= eps || aa <= eps)
        }
    }
}

/// Value and `dD/dm` of a feature distance.
pub fn distance_eval(kind: DistanceKind, f: &[f64], m: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; f.len()];
    let (v, _) = distance_eval_into(kind, f, m, &mut grad);
    (v, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect()
    }

    #[test]
    fn zero_at_identity_and_invariances() {
        let f = random(16, 1);
        for kind in [DistanceKind::L1, DistanceKind::L2] {
            let (v, g) = distance_eval(kind, &f, &f);
            assert_eq!(v, 0.0);
            assert!(g.iter().all(|&x| x == 0.0));
        }
        let scaled: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
        assert!(distance_eval(DistanceKind::Cosine, &f, &scaled).0.abs() < 1e-9);
        let remapped: Vec<f64> = f.iter().map(|v| 3.0 * v - 7.0).collect();
        assert!(distance_eval(DistanceKind::Ncc, &f, &remapped).0.abs() < 1e-9);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        assert!((distance_eval(DistanceKind::Ncc, &f, &neg).0 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let f = random(12, seed);
            let m = random(12, seed + 50);
            for kind in DistanceKind::ALL {
                let (_, g) = distance_eval(kind, &f, &m);
                for j in 0..m.len() {
                    let h = 1e-6;
                    let mut mp = m.clone();
                    mp[j] += h;
                    let mut mm = m.clone();
                    mm[j] -= h;
                    let fd = (distance_eval(kind, &f, &mp).0 - distance_eval(kind, &f, &mm).0) / (2.0 * h);
                    let scale = g.iter().fold(0.0f64, |s, v| s.max(v.abs()));
                    assert!((fd - g[j]).abs() < 1e-5 * scale, "{kind} {j}: fd {fd} analytic {}", g[j]);
                }
            }
        }
    }

    #[test]
    fn flat_moving_vector_is_guarded() {
        let f = random(8, 3);
        let m = vec![1.5; 8];
        let mut g = vec![0.0; 8];
        let (v, flagged) = distance_eval_into(DistanceKind::Ncc, &f, &m, &mut g);
        assert!(v.is_finite() && flagged);
        assert!(g.iter().all(|x| x.is_finite()));
        let (v, flagged) = distance_eval_into(DistanceKind::Cosine, &f, &[0.0; 8], &mut g);
        assert!(v.is_finite() && flagged);
    }

    #[test]
    fn unknown_loss_lists_choices() {
        let err = "L3".parse::<DistanceKind>().unwrap_err().to_string();
        assert!(err.contains("L1, L2, NCC, Cosine"), "{err}");
    }

    proptest! {
        #[test]
        fn bounded_distances_stay_in_range(
            f in proptest::collection::vec(-10.0f64..10.0, 2..20),
            seed in 0u64..1000,
        ) {
            let m = random(f.len(), seed);
            for kind in [DistanceKind::Ncc, DistanceKind::Cosine] {
                let (v, _) = distance_eval(kind, &f, &m);
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn cosine_scale_invariance(
            f in proptest::collection::vec(1.0f64..10.0, 2..20),
            a in 0.5f64..2.0,
            b in 0.5f64..2.0,
        ) {
            let m: Vec<f64> = f.iter().map(|v| v * 1.3 + 0.2).collect();
            let fa: Vec<f64> = f.iter().map(|v| v * a).collect();
            let mb: Vec<f64> = m.iter().map(|v| v * b).collect();
            let d0 = distance_eval(DistanceKind::Cosine, &f, &m).0;
            let d1 = distance_eval(DistanceKind::Cosine, &fa, &mb).0;
            // The denominator guard scales with the joint magnitude, so invariance
            // holds up to roughly guard * scale^2 / |f|^2.
            prop_assert!((d0 - d1).abs() < 1e-7);
        }
    }
}
