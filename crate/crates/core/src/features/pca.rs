use nalgebra::{DMatrix, SymmetricEigen};

use super::{FeatureLayer, StaticFeatureMap};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume};

/// Principal directions of a feature population, largest variance first.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// One row of length `C` per retained component.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl PcaBasis {
    /// Fits `q` components on the voxels of `map` inside `mask` (all voxels
    /// without a mask). Rank-deficient populations keep fewer components.
    pub fn fit(map: &Volume, mask: Option<&BinaryMask>, q: usize) -> Result<Self> {
        let c = map.channels;
        if q == 0 || q > c {
            return Err(Error::Config(format!("PCA components {q} must be between 1 and {c}")));
        }
        let grid = map.grid;
        let selected: Vec<usize> = (0..grid.len())
            .filter(|&idx| {
                mask.map_or(true, |m| {
                    let [i, j, k] = grid.voxel_of_linear(idx);
                    m.contains_world(grid.world(i, j, k))
                })
            })
            .collect();
        if selected.len() < q + 1 {
            return Err(Error::InvalidData(format!(
                "PCA with {q} components needs at least {} masked voxels, found {}",
                q + 1,
                selected.len()
            )));
        }
        let n = selected.len() as f64;
        let mut mean = vec![0.0; c];
        for &idx in &selected {
            for (m, &v) in mean.iter_mut().zip(&map.data[idx * c..(idx + 1) * c]) {
                *m += f64::from(v);
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut cov = DMatrix::<f64>::zeros(c, c);
        let mut centered = vec![0.0; c];
        for &idx in &selected {
            for (a, &v) in map.data[idx * c..(idx + 1) * c].iter().enumerate() {
                centered[a] = f64::from(v) - mean[a];
            }
            for a in 0..c {
                for b in a..c {
                    cov[(a, b)] += centered[a] * centered[b];
                }
            }
        }
        for a in 0..c {
            for b in a..c {
                cov[(a, b)] /= n - 1.0;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let rank = order
            .iter()
            .filter(|&&i| eig.eigenvalues[i] > 1e-10 * top && eig.eigenvalues[i] > 0.0)
            .count();
        let keep = if rank < q {
            log::warn!("feature covariance has rank {rank} < {q}; keeping {} components", rank.max(1));
            rank.max(1)
        } else {
            q
        };
        let mut components = Vec::with_capacity(keep);
        let mut variances = Vec::with_capacity(keep);
        for &i in order.iter().take(keep) {
            let lambda = eig.eigenvalues[i];
            if components.len() >= rank {
                // Zero-variance direction: project everything to 0.
                components.push(vec![0.0; c]);
                variances.push(0.0);
                continue;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(lambda);
        }
        Ok(PcaBasis {
            mean,
            components,
            variances,
        })
    }

    pub fn project(&self, map: &Volume) -> Result<Volume> {
        let c = self.mean.len();
        if map.channels != c {
            return Err(Error::InvalidData(format!(
                "PCA basis expects {c} channels, map has {}",
                map.channels
            )));
        }
        let q = self.components.len();
        let mut data = Vec::with_capacity(map.grid.len() * q);
        let mut centered = vec![0.0; c];
        for v in map.data.chunks_exact(c) {
            for a in 0..c {
                centered[a] = f64::from(v[a]) - self.mean[a];
            }
            for comp in &self.components {
                let p: f64 = comp.iter().zip(&centered).map(|(u, x)| u * x).sum();
                data.push(p as f32);
            }
        }
        Volume::new(map.grid, q, data)
    }
}

/// Reduces every layer of both maps to `q` channels using a basis fitted on
/// the fixed map.
pub fn pca_reduce(
    fixed: &StaticFeatureMap,
    moving: &StaticFeatureMap,
    q: usize,
    mask: Option<&BinaryMask>,
) -> Result<(StaticFeatureMap, StaticFeatureMap)> {
    let mut f_layers = Vec::new();
    let mut m_layers = Vec::new();
    for (f, m) in fixed.layers.iter().zip(&moving.layers) {
        let basis = PcaBasis::fit(&f.map, mask, q.min(f.channels()))?;
        f_layers.push(FeatureLayer::new(f.id, f.weight, basis.project(&f.map)?)?);
        m_layers.push(FeatureLayer::new(m.id, m.weight, basis.project(&m.map)?)?);
    }
    Ok((StaticFeatureMap { layers: f_layers }, StaticFeatureMap { layers: m_layers }))
}
