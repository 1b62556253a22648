use std::path::Path;

use rayon::prelude::*;

use super::{ExtractorKind, FeatureExtractor, LocalView, MindKernel, MIND_CHANNELS};
use crate::error::{Error, Result};
use crate::spline::{mirror_index, prefilter_cubic, SplineCoefficientVolume};
use crate::volume::{Grid, Volume};

/// One dense feature layer with its interpolation coefficients.
#[derive(Debug, Clone)]
pub struct FeatureLayer {
    pub id: usize,
    pub weight: f64,
    pub map: Volume,
    pub coeffs: SplineCoefficientVolume,
}

impl FeatureLayer {
    pub fn new(id: usize, weight: f64, map: Volume) -> Result<Self> {
        let coeffs = prefilter_cubic(&map)?;
        Ok(FeatureLayer {
            id,
            weight,
            map,
            coeffs,
        })
    }

    pub fn channels(&self) -> usize {
        self.map.channels
    }
}

/// Dense multi-channel feature maps, one per enabled layer, in the frame of
/// their source image.
#[derive(Debug, Clone)]
pub struct StaticFeatureMap {
    pub layers: Vec<FeatureLayer>,
}

impl StaticFeatureMap {
    pub fn single(map: Volume) -> Result<Self> {
        Ok(StaticFeatureMap {
            layers: vec![FeatureLayer::new(0, 1.0, map)?],
        })
    }
}

/// Dense feature maps of a built-in extractor.
///
/// The image is processed in cubic tiles of `tile` voxels whose halo of
/// `overlap` voxels must cover the extractor's reach; results are then
/// independent of the tiling. The identity extractor yields the image itself.
pub fn compute_static_features(
    extractor: &FeatureExtractor,
    image: &Volume,
    tile: usize,
    overlap: usize,
) -> Result<StaticFeatureMap> {
    let weight = extractor.enabled_layers().next().map_or(1.0, |l| l.weight);
    let map = match &extractor.kind {
        ExtractorKind::Identity => image.clone(),
        ExtractorKind::Mind(_) => {
            let bound = extractor.for_image(image);
            let kernel = bound.mind_kernel().expect("MIND kernel");
            dense_mind(kernel, image, tile, overlap)?
        }
        ExtractorKind::External => {
            return Err(Error::Config(format!(
                "extractor {} is external; load its maps from files",
                extractor.name
            )))
        }
    };
    Ok(StaticFeatureMap {
        layers: vec![FeatureLayer::new(0, weight, map)?],
    })
}

fn dense_mind(kernel: &MindKernel, image: &Volume, tile: usize, overlap: usize) -> Result<Volume> {
    let cfg = kernel.config();
    if tile < cfg.field_of_view() {
        return Err(Error::Config(format!(
            "tile of {tile} voxels is smaller than the MIND field of view {}",
            cfg.field_of_view()
        )));
    }
    if overlap < cfg.reach() {
        return Err(Error::Config(format!(
            "tile overlap of {overlap} voxels is smaller than the MIND reach {}",
            cfg.reach()
        )));
    }
    let grid = image.grid;
    let nc = image.channels;
    let mut tiles = Vec::new();
    for z in (0..grid.dims[2]).step_by(tile) {
        for y in (0..grid.dims[1]).step_by(tile) {
            for x in (0..grid.dims[0]).step_by(tile) {
                let lo = [x, y, z];
                let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + tile).min(grid.dims[a]));
                tiles.push((lo, hi));
            }
        }
    }
    let halo = overlap as isize;
    let results: Vec<Vec<f32>> = tiles
        .par_iter()
        .map(|&(lo, hi)| {
            let bdims: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 2 * overlap);
            let mut buf = Vec::with_capacity(bdims[0] * bdims[1] * bdims[2] * nc);
            for k in 0..bdims[2] {
                let gk = mirror_index(lo[2] as isize + k as isize - halo, grid.dims[2]);
                for j in 0..bdims[1] {
                    let gj = mirror_index(lo[1] as isize + j as isize - halo, grid.dims[1]);
                    for i in 0..bdims[0] {
                        let gi = mirror_index(lo[0] as isize + i as isize - halo, grid.dims[0]);
                        let base = grid.linear_index(gi, gj, gk) * nc;
                        buf.extend(image.data[base..base + nc].iter().map(|&v| f64::from(v)));
                    }
                }
            }
            let view = LocalView {
                data: &buf,
                dims: bdims,
                channels: nc,
            };
            let mut out = Vec::with_capacity((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]) * MIND_CHANNELS);
            for k in 0..hi[2] - lo[2] {
                for j in 0..hi[1] - lo[1] {
                    for i in 0..hi[0] - lo[0] {
                        let c = [i as isize + halo, j as isize + halo, k as isize + halo];
                        out.extend(kernel.descriptor(&view, c).iter().map(|&v| v as f32));
                    }
                }
            }
            out
        })
        .collect();
    let mut data = vec![0.0f32; grid.len() * MIND_CHANNELS];
    for (&(lo, hi), values) in tiles.iter().zip(&results) {
        let mut it = values.chunks_exact(MIND_CHANNELS);
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    let o = grid.linear_index(i, j, k) * MIND_CHANNELS;
                    data[o..o + MIND_CHANNELS].copy_from_slice(it.next().expect("tile size"));
                }
            }
        }
    }
    Volume::new(grid, MIND_CHANNELS, data)
}

/// Reads externally computed feature maps, one file per layer.
///
/// `expected[l]` is the declared channel count of layer `l` (0 accepts any).
/// Each map must span the same physical region as `frame`, up to half a voxel.
pub fn load_static_features(
    paths: &[impl AsRef<Path>],
    frame: &Grid,
    expected: &[usize],
    weights: &[f64],
) -> Result<StaticFeatureMap> {
    if paths.is_empty() {
        return Err(Error::Config("no static feature files given".into()));
    }
    let mut layers = Vec::with_capacity(paths.len());
    for (l, path) in paths.iter().enumerate() {
        let path = path.as_ref();
        let map = crate::io::read_volume(path).map_err(|e| {
            Error::InvalidData(format!("cannot load feature layer {l} from {}: {e}", path.display()))
        })?;
        let want = expected.get(l).copied().unwrap_or(0);
        if want != 0 && map.channels != want {
            return Err(Error::InvalidData(format!(
                "feature layer {l} ({}): expected {want} channels, found {}",
                path.display(),
                map.channels
            )));
        }
        check_frame(l, path, &map.grid, frame)?;
        let weight = weights.get(l).or(weights.last()).copied().unwrap_or(1.0);
        layers.push(FeatureLayer::new(l, weight, map)?);
    }
    Ok(StaticFeatureMap { layers })
}

fn check_frame(layer: usize, path: &Path, grid: &Grid, frame: &Grid) -> Result<()> {
    let (lo, hi) = grid.bounds();
    let (flo, fhi) = frame.bounds();
    for a in 0..3 {
        let tol = 0.5 * grid.spacing[a].max(frame.spacing[a]) + 1e-6;
        if (lo[a] - flo[a]).abs() > tol || (hi[a] - fhi[a]).abs() > tol {
            return Err(Error::InvalidData(format!(
                "feature layer {layer} ({}): expected physical bounds {flo:?}..{fhi:?}, found {lo:?}..{hi:?}",
                path.display()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{mind_extract, MindConfig};
    use crate::spline::{Patch, PatchGeometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Volume {
        let grid = Grid::new([n; 3], [1.0; 3], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid.len()).map(|_| rng.gen_range(0.0f32..100.0)).collect();
        Volume::new(grid, 1, data).unwrap()
    }

    fn mind_extractor() -> FeatureExtractor {
        let geom = PatchGeometry {
            size: [5; 3],
            resolution: [1.0; 3],
        };
        FeatureExtractor::mind(MindConfig::default(), geom, 1).unwrap()
    }

    #[test]
    fn constant_image_gives_all_ones() {
        let grid = Grid::new([12; 3], [1.0; 3], [0.0; 3]).unwrap();
        let img = Volume::filled(grid, 1, 42.0);
        let map = compute_static_features(&mind_extractor(), &img, 8, 2).unwrap();
        assert!(map.layers[0].map.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_map_is_the_image() {
        let img = random_image(6, 1);
        let ext = FeatureExtractor::identity(PatchGeometry::single(), 1);
        let map = compute_static_features(&ext, &img, 4, 0).unwrap();
        assert_eq!(map.layers[0].map, img);
    }

    #[test]
    fn tiling_does_not_change_values() {
        let img = random_image(32, 2);
        let ext = mind_extractor();
        let whole = compute_static_features(&ext, &img, 32, 2).unwrap();
        let tiled = compute_static_features(&ext, &img, 7, 3).unwrap();
        assert_eq!(whole.layers[0].map.data, tiled.layers[0].map.data);
    }

    #[test]
    fn small_tiles_or_halo_rejected() {
        let img = random_image(8, 3);
        let ext = mind_extractor();
        assert!(compute_static_features(&ext, &img, 2, 2).is_err());
        assert!(compute_static_features(&ext, &img, 8, 1).is_err());
    }

    #[test]
    fn dense_map_matches_patch_descriptor() {
        let img = random_image(10, 4);
        let map = compute_static_features(&mind_extractor(), &img, 10, 2).unwrap();
        for (i, j, k) in [(2, 2, 2), (5, 4, 7), (7, 7, 2)] {
            let mut data = Vec::new();
            for z in 0..5 {
                for y in 0..5 {
                    for x in 0..5 {
                        data.push(f64::from(img.get(i + x - 2, j + y - 2, k + z - 2, 0)));
                    }
                }
            }
            let d = mind_extract(&Patch::new([5; 3], 1, data), MindConfig::default()).unwrap();
            for c in 0..6 {
                assert_eq!(map.layers[0].map.get(i, j, k, c), d[c] as f32);
            }
        }
    }
}
