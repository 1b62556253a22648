//! Feature extractors and feature-map utilities.

mod mind;
mod pca;
mod static_map;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::spline::{Patch, PatchGeometry};
use crate::volume::Volume;

pub use mind::{LocalView, MindConfig, MindKernel, PatchWeighting, MIND_CHANNELS};
pub use pca::{pca_reduce, PcaBasis};
pub use static_map::{compute_static_features, load_static_features, FeatureLayer, StaticFeatureMap};

/// How the feature comparison obtains moving-image features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Features are extracted per sampled patch and differentiated through the extractor.
    Jacobian,
    /// Features come from dense precomputed maps sampled by spline interpolation.
    Static,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Jacobian => "Jacobian",
            Mode::Static => "Static",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jacobian" => Ok(Mode::Jacobian),
            "static" => Ok(Mode::Static),
            _ => Err(Error::Choice {
                key: "Mode".into(),
                choices: "Jacobian, Static".into(),
                found: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorKind {
    Identity,
    Mind(MindConfig),
    /// Precomputed maps read from disk; usable in Static mode only.
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: usize,
    pub channels: usize,
    pub weight: f64,
    pub supports_jacobian: bool,
    pub enabled: bool,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub name: String,
    pub kind: ExtractorKind,
    pub patch: PatchGeometry,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    mind: Option<MindKernel>,
}

impl FeatureExtractor {
    /// Intensity passthrough: the feature vector is the flattened patch.
    pub fn identity(patch: PatchGeometry, input_channels: usize) -> Self {
        FeatureExtractor {
            name: "identity".into(),
            kind: ExtractorKind::Identity,
            patch,
            input_channels,
            layers: vec![LayerSpec {
                id: 0,
                channels: patch.len() * input_channels,
                weight: 1.0,
                supports_jacobian: true,
                enabled: true,
            }],
            mind: None,
        }
    }

    pub fn mind(config: MindConfig, patch: PatchGeometry, input_channels: usize) -> Result<Self> {
        let kernel = MindKernel::new(config)?;
        kernel.check_patch_size(patch.size)?;
        Ok(FeatureExtractor {
            name: "mind".into(),
            kind: ExtractorKind::Mind(config),
            patch,
            input_channels,
            layers: vec![LayerSpec {
                id: 0,
                channels: MIND_CHANNELS,
                weight: 1.0,
                supports_jacobian: true,
                enabled: true,
            }],
            mind: Some(kernel),
        })
    }

    /// Externally computed maps; `channels[l]` is the declared width of layer `l`
    /// (0 when it is taken from the file).
    pub fn external(name: &str, channels: &[usize]) -> Self {
        FeatureExtractor {
            name: name.into(),
            kind: ExtractorKind::External,
            patch: PatchGeometry::single(),
            input_channels: 1,
            layers: channels
                .iter()
                .enumerate()
                .map(|(id, &c)| LayerSpec {
                    id,
                    channels: c,
                    weight: 1.0,
                    supports_jacobian: false,
                    enabled: true,
                })
                .collect(),
            mind: None,
        }
    }

    /// Applies a layer mask and weights; missing entries repeat the last value.
    pub fn with_layers(mut self, mask: &[bool], weights: &[f64]) -> Self {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if let Some(m) = mask.get(l).or(mask.last()) {
                layer.enabled = *m;
            }
            if let Some(w) = weights.get(l).or(weights.last()) {
                layer.weight = *w;
            }
        }
        self
    }

    pub fn enabled_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.enabled)
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.enabled_layers().next().is_none() {
            return Err(Error::Config(format!("extractor {} has no enabled layer", self.name)));
        }
        let mut total = 0.0;
        for l in self.enabled_layers() {
            if !(l.weight >= 0.0) || !l.weight.is_finite() {
                return Err(Error::Config(format!("layer {} weight {} must be >= 0", l.id, l.weight)));
            }
            total += l.weight;
            if mode == Mode::Jacobian && !l.supports_jacobian {
                return Err(Error::Config(format!(
                    "layer {} of extractor {} has no analytic input gradient; use Static mode",
                    l.id, self.name
                )));
            }
        }
        if total <= 0.0 {
            return Err(Error::Config("sum of enabled layer weights must be > 0".into()));
        }
        if self.patch.size.iter().any(|&s| s == 0) || self.patch.resolution.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(format!(
                "invalid patch geometry {:?} at {:?} mm",
                self.patch.size, self.patch.resolution
            )));
        }
        Ok(())
    }

    /// Copy whose MIND variance floor follows the dynamic range of `image`.
    pub fn for_image(&self, image: &Volume) -> Self {
        let mut out = self.clone();
        if let Some(k) = out.mind.take() {
            let (lo, hi) = image.min_max();
            out.mind = Some(k.with_intensity_range(f64::from(hi) - f64::from(lo)));
        }
        out
    }

    pub fn mind_kernel(&self) -> Option<&MindKernel> {
        self.mind.as_ref()
    }

    /// Feature vector of one layer for a patch.
    pub fn extract(&self, patch: &Patch) -> Vec<f64> {
        match &self.kind {
            ExtractorKind::Identity => identity_extract(patch),
            ExtractorKind::Mind(_) => self.mind_descriptor(patch).to_vec(),
            ExtractorKind::External => unreachable!("external features are never extracted from patches"),
        }
    }

    /// Forward pass plus the gradient of `upstream . features` with respect to
    /// every patch value (same layout as `patch.data`).
    pub fn extract_with_gradient(&self, patch: &Patch, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match &self.kind {
            ExtractorKind::Identity => (identity_extract(patch), upstream.to_vec()),
            ExtractorKind::Mind(_) => {
                let kernel = self.mind.as_ref().expect("MIND kernel");
                let view = patch_view(patch);
                let mut grad = vec![0.0; patch.data.len()];
                let d = kernel.backward(&view, patch_center(patch), upstream, &mut grad);
                (d.to_vec(), grad)
            }
            ExtractorKind::External => unreachable!("external features are never extracted from patches"),
        }
    }

    fn mind_descriptor(&self, patch: &Patch) -> [f64; MIND_CHANNELS] {
        let kernel = self.mind.as_ref().expect("MIND kernel");
        kernel.descriptor(&patch_view(patch), patch_center(patch))
    }
}

fn patch_view(patch: &Patch) -> LocalView<'_> {
    LocalView {
        data: &patch.data,
        dims: patch.size,
        channels: patch.channels,
    }
}

fn patch_center(patch: &Patch) -> [isize; 3] {
    std::array::from_fn(|a| ((patch.size[a] - 1) / 2) as isize)
}

/// Flattened copy of a patch (channel fastest).
pub fn identity_extract(patch: &Patch) -> Vec<f64> {
    patch.data.clone()
}

/// MIND descriptor at the center of a patch.
pub fn mind_extract(patch: &Patch, config: MindConfig) -> Result<[f64; MIND_CHANNELS]> {
    let kernel = MindKernel::new(config)?;
    kernel.check_patch_size(patch.size)?;
    Ok(kernel.descriptor(&patch_view(patch), patch_center(patch)))
}

/// Uniformly chosen `k` distinct indices out of `c`.
pub fn select_subset<R: Rng + ?Sized>(c: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > c {
        return Err(Error::Config(format!(
            "feature subset size {k} must be between 1 and the feature count {c}"
        )));
    }
    if k == c {
        return Ok((0..c).collect());
    }
    Ok(rand::seq::index::sample(rng, c, k).into_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    Duplicate,
    Mean,
}

impl FromStr for PadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "duplicate" => Ok(PadPolicy::Duplicate),
            "mean" => Ok(PadPolicy::Mean),
            _ => Err(Error::Choice {
                key: "ChannelPadding".into(),
                choices: "duplicate, mean".into(),
                found: s.into(),
            }),
        }
    }
}

impl fmt::Display for PadPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadPolicy::Duplicate => "duplicate",
            PadPolicy::Mean => "mean",
        })
    }
}

/// Widens a patch to `required` channels.
pub fn pad_channels(patch: &Patch, required: usize, policy: PadPolicy) -> Patch {
    let n = patch.channels;
    if required <= n {
        return patch.clone();
    }
    let mut data = Vec::with_capacity(patch.voxels() * required);
    for v in patch.data.chunks_exact(n) {
        data.extend_from_slice(v);
        let mean = v.iter().sum::<f64>() / n as f64;
        for c in n..required {
            data.push(match policy {
                PadPolicy::Duplicate => v[c % n],
                PadPolicy::Mean => mean,
            });
        }
    }
    Patch::new(patch.size, required, data)
}

/// Folds a gradient over padded channels back onto the original `channels`.
pub fn pad_channels_backward(grad: &[f64], channels: usize, padded: usize, policy: PadPolicy) -> Vec<f64> {
    if padded <= channels {
        return grad.to_vec();
    }
    let mut out = Vec::with_capacity(grad.len() / padded * channels);
    for g in grad.chunks_exact(padded) {
        let extra: f64 = g[channels..].iter().sum();
        for c in 0..channels {
            let mut v = g[c];
            match policy {
                PadPolicy::Duplicate => {
                    let mut j = c + channels;
                    while j < padded {
                        v += g[j];
                        j += channels;
                    }
                }
                PadPolicy::Mean => v += extra / channels as f64,
            }
            out.push(v);
        }
    }
    out
}
