//! Registration settings resolved from an Elastix-style parameter map.
//!
//! Absent keys take the defaults of the IMPACT hyperparameter table. The
//! `paper-experiments` profile switches to the four-level 6/3/1.5/1 mm
//! pyramid used in the evaluated setup; explicit keys still win.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{MindConfig, Mode, PadPolicy, PatchWeighting};
use crate::io::ParameterMap;
use crate::pyramid::PyramidStrategy;
use crate::sampling::SamplerKind;
use crate::similarity::{DistanceKind, MetricKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractorChoice {
    Identity,
    Mind,
    /// Precomputed feature maps produced elsewhere (Static mode only).
    External(String),
}

impl fmt::Display for ExtractorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorChoice::Identity => f.write_str("Identity"),
            ExtractorChoice::Mind => f.write_str("MIND"),
            ExtractorChoice::External(name) => f.write_str(name),
        }
    }
}

impl FromStr for ExtractorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "identity" => ExtractorChoice::Identity,
            "mind" => ExtractorChoice::Mind,
            "" => return Err(Error::Config("ModelsPath is empty".into())),
            _ => ExtractorChoice::External(s.to_string()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Default,
    PaperExperiments,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Default => "default",
            Profile::PaperExperiments => "paper-experiments",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(Profile::Default),
            "paper-experiments" | "paperexperiments" => Ok(Profile::PaperExperiments),
            _ => Err(Error::Choice {
                key: "Profile".into(),
                choices: "default, paper-experiments".into(),
                found: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub profile: Profile,
    pub metric: MetricKind,
    /// One entry, or one per resolution.
    pub iterations: Vec<usize>,
    pub samples: usize,
    pub resolutions: usize,
    pub final_grid_spacing: [f64; 3],
    /// Isotropic image spacing per level in mm; `None` halves from
    /// `2^(L-1)` times the native spacing.
    pub pyramid_schedule: Option<Vec<f64>>,
    pub pyramid_strategy: PyramidStrategy,
    pub mode: Mode,
    pub extractor: ExtractorChoice,
    pub mind: MindConfig,
    pub input_channels: usize,
    pub patch_size: [usize; 3],
    /// Patch resolution R: one entry, or one per resolution.
    pub voxel_size: Vec<[f64; 3]>,
    pub layers_mask: Vec<bool>,
    pub subset_features: usize,
    pub layers_weight: Vec<f64>,
    pub loss: DistanceKind,
    /// Static maps are rebuilt every this many iterations when positive.
    pub feature_update_interval: i64,
    pub pca: usize,
    pub bending_weight: f64,
    pub seed: u64,
    pub affine: bool,
    pub affine_iterations: usize,
    pub sampler: SamplerKind,
    pub base_gain: Option<f64>,
    pub sp_big_a: f64,
    pub sp_alpha: f64,
    pub gain_trials: usize,
    /// First-step displacement bound in mm; a quarter of the control-point
    /// spacing when `None`.
    pub max_step: Option<f64>,
    pub background: f32,
    pub histogram_bins: usize,
    pub pad: PadPolicy,
    pub tile: usize,
    pub tile_overlap: usize,
    pub fixed_feature_maps: Vec<PathBuf>,
    pub moving_feature_maps: Vec<PathBuf>,
    pub feature_channels: Vec<usize>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            profile: Profile::Default,
            metric: MetricKind::Impact,
            iterations: vec![500],
            samples: 2000,
            resolutions: 3,
            final_grid_spacing: [8.0; 3],
            pyramid_schedule: None,
            pyramid_strategy: PyramidStrategy::Full,
            mode: Mode::Jacobian,
            extractor: ExtractorChoice::Mind,
            mind: MindConfig::default(),
            input_channels: 1,
            patch_size: [5; 3],
            voxel_size: vec![[1.5; 3]],
            layers_mask: vec![true],
            subset_features: 32,
            layers_weight: vec![1.0],
            loss: DistanceKind::L2,
            feature_update_interval: -1,
            pca: 0,
            bending_weight: 0.0,
            seed: 1,
            affine: false,
            affine_iterations: 200,
            sampler: SamplerKind::Continuous,
            base_gain: None,
            sp_big_a: 20.0,
            sp_alpha: 0.602,
            gain_trials: 5,
            max_step: None,
            background: 0.0,
            histogram_bins: 32,
            pad: PadPolicy::Duplicate,
            tile: 48,
            tile_overlap: 8,
            fixed_feature_maps: Vec::new(),
            moving_feature_maps: Vec::new(),
            feature_channels: Vec::new(),
        }
    }
}

/// Every key the resolver understands.
pub const KNOWN_KEYS: &[&str] = &[
    "Profile",
    "Metric",
    "MaximumNumberOfIterations",
    "NumberOfSpatialSamples",
    "NumberOfResolutions",
    "FinalGridSpacingInPhysicalUnits",
    "ImagePyramidSchedule",
    "PyramidStrategy",
    "Mode",
    "ModelsPath",
    "Dimension",
    "NumberOfChannels",
    "PatchSize",
    "VoxelSize",
    "LayersMask",
    "SubsetFeatures",
    "LayersWeight",
    "Loss",
    "FeaturesMapUpdateInterval",
    "PCA",
    "GPU",
    "MindRadius",
    "MindDilation",
    "MindWeighting",
    "BendingEnergyWeight",
    "RandomSeed",
    "AffineInitialization",
    "AffineIterations",
    "ImageSampler",
    "SP_a",
    "SP_A",
    "SP_alpha",
    "NumberOfGradientMeasurements",
    "MaximumStepLength",
    "DefaultPixelValue",
    "NumberOfHistogramBins",
    "ChannelPadding",
    "FeatureTileSize",
    "FeatureTileOverlap",
    "FixedFeatureMaps",
    "MovingFeatureMaps",
    "FeatureChannels",
];

/// Keys read by the command-line front end and the phantom generator rather
/// than by the engine; they are accepted silently in a registration file.
pub const FRONT_END_KEYS: &[&str] = &[
    "NumberOfThreads",
    "OutputDirectory",
    "ResultImageFormat",
    "FixedImageMask",
    "MovingImageMask",
    "FixedLandmarks",
    "MovingLandmarks",
    "FixedLabels",
    "MovingLabels",
    "ReferenceImage",
];

struct Reader<'a> {
    map: &'a ParameterMap,
}

impl Reader<'_> {
    fn values(&self, key: &str) -> Option<Vec<String>> {
        self.map.get(key).map(|v| {
            // "5*5*5" is accepted as shorthand for "5 5 5".
            v.iter()
                .flat_map(|s| s.split('*').map(str::to_string).collect::<Vec<_>>())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }

    fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(vals) = self.values(key) else { return Ok(None) };
        if vals.is_empty() {
            return Err(Error::Config(format!("{key} has no value")));
        }
        vals.iter()
            .map(|s| {
                s.parse::<T>()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn one<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.parse_list::<T>(key)? {
            None => Ok(None),
            Some(mut v) if v.len() == 1 => Ok(v.pop()),
            Some(v) => Err(Error::Config(format!("{key} expects one value, found {}", v.len()))),
        }
    }

    fn choice<T: FromStr<Err = Error>>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some([v]) => v.parse().map(Some),
            Some(v) => Err(Error::Config(format!("{key} expects one value, found {}", v.len()))),
        }
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>> {
        match self.map.get(key) {
            None => Ok(None),
            Some([v]) => match v.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => Ok(Some(true)),
                "false" | "0" | "no" => Ok(Some(false)),
                _ => Err(Error::Choice {
                    key: key.into(),
                    choices: "true, false".into(),
                    found: v.clone(),
                }),
            },
            Some(v) => Err(Error::Config(format!("{key} expects one value, found {}", v.len()))),
        }
    }

    fn triple(&self, key: &str) -> Result<Option<Vec<[f64; 3]>>> {
        let Some(v) = self.parse_list::<f64>(key)? else { return Ok(None) };
        match v.len() {
            1 => Ok(Some(vec![[v[0]; 3]])),
            n if n % 3 == 0 => Ok(Some(v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())),
            n => Err(Error::Config(format!("{key} expects 1 or a multiple of 3 values, found {n}"))),
        }
    }
}

impl RegistrationConfig {
    /// Resolves a parameter map, returning the config and warnings about
    /// keys that were ignored.
    pub fn from_parameters(map: &ParameterMap) -> Result<(Self, Vec<String>)> {
        let r = Reader { map };
        let mut c = RegistrationConfig::default();
        let mut warnings = Vec::new();
        if let Some(p) = r.choice::<Profile>("Profile")? {
            c.profile = p;
            if p == Profile::PaperExperiments {
                c.resolutions = 4;
                c.pyramid_schedule = Some(vec![6.0, 3.0, 1.5, 1.0]);
                c.final_grid_spacing = [8.0; 3];
            }
        }
        if let Some(v) = r.choice("Metric")? {
            c.metric = v;
        }
        if let Some(v) = r.parse_list("MaximumNumberOfIterations")? {
            c.iterations = v;
        }
        if let Some(v) = r.one("NumberOfSpatialSamples")? {
            c.samples = v;
        }
        if let Some(v) = r.one("NumberOfResolutions")? {
            c.resolutions = v;
            if !map.contains("ImagePyramidSchedule") {
                c.pyramid_schedule = None;
            }
        }
        if let Some(v) = r.triple("FinalGridSpacingInPhysicalUnits")? {
            if v.len() != 1 {
                return Err(Error::Config("FinalGridSpacingInPhysicalUnits expects 1 or 3 values".into()));
            }
            c.final_grid_spacing = v[0];
        }
        if let Some(v) = r.parse_list("ImagePyramidSchedule")? {
            c.pyramid_schedule = Some(v);
        }
        if let Some(v) = r.choice("PyramidStrategy")? {
            c.pyramid_strategy = v;
        }
        if let Some(v) = r.choice("Mode")? {
            c.mode = v;
        }
        if let Some(v) = r.choice("ModelsPath")? {
            c.extractor = v;
        }
        if let Some(d) = r.one::<usize>("Dimension")? {
            if d != 3 {
                return Err(Error::Config(format!(
                    "Dimension {d} is not supported; only 3D extractors are available"
                )));
            }
        }
        if let Some(v) = r.one("NumberOfChannels")? {
            c.input_channels = v;
        }
        if let Some(v) = r.parse_list::<usize>("PatchSize")? {
            c.patch_size = match v.len() {
                1 => [v[0]; 3],
                3 => [v[0], v[1], v[2]],
                n => return Err(Error::Config(format!("PatchSize expects 1 or 3 values, found {n}"))),
            };
        }
        if let Some(v) = r.triple("VoxelSize")? {
            c.voxel_size = v;
        }
        if let Some(v) = r.parse_list::<u8>("LayersMask")? {
            c.layers_mask = v.into_iter().map(|b| b != 0).collect();
        }
        if let Some(v) = r.one("SubsetFeatures")? {
            c.subset_features = v;
        }
        if let Some(v) = r.parse_list("LayersWeight")? {
            c.layers_weight = v;
        }
        if let Some(v) = r.choice("Loss")? {
            c.loss = v;
        }
        if let Some(v) = r.one("FeaturesMapUpdateInterval")? {
            c.feature_update_interval = v;
        }
        if let Some(v) = r.one("PCA")? {
            c.pca = v;
        }
        if let Some(g) = r.one::<i64>("GPU")? {
            if g != -1 {
                warnings.push(format!("GPU {g} requested; this build runs on the CPU only"));
            }
        }
        if let Some(v) = r.one("MindRadius")? {
            c.mind.radius = v;
        }
        if let Some(v) = r.one("MindDilation")? {
            c.mind.dilation = v;
        }
        if let Some(v) = r.choice::<PatchWeighting>("MindWeighting")? {
            c.mind.weighting = v;
        }
        if let Some(v) = r.one("BendingEnergyWeight")? {
            c.bending_weight = v;
        }
        if let Some(v) = r.one("RandomSeed")? {
            c.seed = v;
        }
        if let Some(v) = r.boolean("AffineInitialization")? {
            c.affine = v;
        }
        if let Some(v) = r.one("AffineIterations")? {
            c.affine_iterations = v;
        }
        if let Some(v) = r.choice("ImageSampler")? {
            c.sampler = v;
        }
        if let Some(v) = r.one("SP_a")? {
            c.base_gain = Some(v);
        }
        if let Some(v) = r.one("SP_A")? {
            c.sp_big_a = v;
        }
        if let Some(v) = r.one("SP_alpha")? {
            c.sp_alpha = v;
        }
        if let Some(v) = r.one("NumberOfGradientMeasurements")? {
            c.gain_trials = v;
        }
        if let Some(v) = r.one("MaximumStepLength")? {
            c.max_step = Some(v);
        }
        if let Some(v) = r.one("DefaultPixelValue")? {
            c.background = v;
        }
        if let Some(v) = r.one("NumberOfHistogramBins")? {
            c.histogram_bins = v;
        }
        if let Some(v) = r.choice("ChannelPadding")? {
            c.pad = v;
        }
        if let Some(v) = r.one("FeatureTileSize")? {
            c.tile = v;
        }
        if let Some(v) = r.one("FeatureTileOverlap")? {
            c.tile_overlap = v;
        }
        if let Some(v) = map.get("FixedFeatureMaps") {
            c.fixed_feature_maps = v.iter().map(PathBuf::from).collect();
        }
        if let Some(v) = map.get("MovingFeatureMaps") {
            c.moving_feature_maps = v.iter().map(PathBuf::from).collect();
        }
        if let Some(v) = r.parse_list("FeatureChannels")? {
            c.feature_channels = v;
        }
        for key in map.keys() {
            let known = KNOWN_KEYS.contains(&key)
                || FRONT_END_KEYS.contains(&key)
                || crate::phantom::PHANTOM_KEYS.contains(&key);
            if !known {
                warnings.push(format!("unknown parameter {key} is kept in the report but has no effect"));
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        c.validate()?;
        Ok((c, warnings))
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.resolutions;
        if l == 0 {
            return Err(Error::Config("NumberOfResolutions must be >= 1".into()));
        }
        if self.iterations.len() != 1 && self.iterations.len() != l {
            return Err(Error::Config(format!(
                "MaximumNumberOfIterations has {} values for {l} resolutions",
                self.iterations.len()
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("NumberOfSpatialSamples must be >= 1".into()));
        }
        if self.final_grid_spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("FinalGridSpacingInPhysicalUnits must be positive".into()));
        }
        if let Some(s) = &self.pyramid_schedule {
            if s.len() != l {
                return Err(Error::Config(format!(
                    "ImagePyramidSchedule has {} levels, NumberOfResolutions is {l}",
                    s.len()
                )));
            }
        }
        if self.voxel_size.len() != 1 && self.voxel_size.len() != l {
            return Err(Error::Config(format!(
                "VoxelSize has {} triples for {l} resolutions",
                self.voxel_size.len()
            )));
        }
        if self.voxel_size.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("VoxelSize must be positive".into()));
        }
        if self.patch_size.iter().any(|&p| p == 0 || p % 2 == 0) {
            return Err(Error::Config(format!("PatchSize must be odd, found {:?}", self.patch_size)));
        }
        if self.subset_features == 0 {
            return Err(Error::Config("SubsetFeatures must be >= 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("NumberOfChannels must be >= 1".into()));
        }
        if self.layers_weight.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("LayersWeight must be nonnegative".into()));
        }
        if !(self.bending_weight >= 0.0) {
            return Err(Error::Config("BendingEnergyWeight must be nonnegative".into()));
        }
        if let Some(m) = self.max_step {
            if !(m > 0.0) {
                return Err(Error::Config(format!("MaximumStepLength must be positive, got {m}")));
            }
        }
        if self.tile == 0 {
            return Err(Error::Config("FeatureTileSize must be >= 1".into()));
        }
        if self.metric == MetricKind::Impact {
            if let ExtractorChoice::External(name) = &self.extractor {
                if self.mode == Mode::Jacobian {
                    return Err(Error::Config(format!(
                        "extractor {name} has no analytic input gradient; use Mode Static with precomputed maps"
                    )));
                }
                let n = self.feature_channels.len();
                if n == 0 || self.fixed_feature_maps.len() != n || self.moving_feature_maps.len() != n {
                    return Err(Error::Config(format!(
                        "external features need matching FeatureChannels ({n}), FixedFeatureMaps ({}) and MovingFeatureMaps ({}) lists",
                        self.fixed_feature_maps.len(),
                        self.moving_feature_maps.len()
                    )));
                }
            }
        }
        self.mind.validate()
    }

    pub fn iterations_at(&self, level: usize) -> usize {
        self.iterations[level.min(self.iterations.len() - 1)]
    }

    pub fn voxel_size_at(&self, level: usize) -> [f64; 3] {
        self.voxel_size[level.min(self.voxel_size.len() - 1)]
    }

    /// Control-point spacing of level `level` (0 = coarsest): the final
    /// spacing doubled once per remaining level.
    pub fn grid_spacing_at(&self, level: usize) -> [f64; 3] {
        let f = 2f64.powi((self.resolutions - 1 - level) as i32);
        self.final_grid_spacing.map(|s| s * f)
    }

    /// Image spacing of each level given the native spacing.
    pub fn image_spacings(&self, native: [f64; 3]) -> Vec<[f64; 3]> {
        match &self.pyramid_schedule {
            Some(s) => s.iter().map(|&v| [v; 3]).collect(),
            None => (0..self.resolutions)
                .map(|l| {
                    let f = 2f64.powi((self.resolutions - 1 - l) as i32);
                    native.map(|s| s * f)
                })
                .collect(),
        }
    }

    /// Per-layer weights of the enabled layers, padded with the last weight.
    pub fn layer_weights(&self, layers: usize) -> Vec<f64> {
        (0..layers)
            .map(|i| *self.layers_weight.get(i).or(self.layers_weight.last()).unwrap_or(&1.0))
            .collect()
    }

    pub fn layer_enabled(&self, layers: usize) -> Vec<bool> {
        (0..layers)
            .map(|i| *self.layers_mask.get(i).unwrap_or(&(self.layers_mask.len() == 1 && self.layers_mask[0])))
            .collect()
    }

    /// The fully resolved settings as a parameter map, so a run can be
    /// repeated from its report alone.
    pub fn to_parameters(&self) -> ParameterMap {
        let mut m = ParameterMap::new();
        let list = |v: &mut ParameterMap, k: &str, xs: Vec<String>| v.set(k, xs);
        m.set_one("Profile", self.profile);
        m.set_one("Metric", self.metric);
        list(&mut m, "MaximumNumberOfIterations", self.iterations.iter().map(|v| v.to_string()).collect());
        m.set_one("NumberOfSpatialSamples", self.samples);
        m.set_one("NumberOfResolutions", self.resolutions);
        list(
            &mut m,
            "FinalGridSpacingInPhysicalUnits",
            self.final_grid_spacing.iter().map(|v| v.to_string()).collect(),
        );
        if let Some(s) = &self.pyramid_schedule {
            list(&mut m, "ImagePyramidSchedule", s.iter().map(|v| v.to_string()).collect());
        }
        m.set_one("PyramidStrategy", self.pyramid_strategy);
        m.set_one("Mode", self.mode);
        m.set_one("ModelsPath", &self.extractor);
        m.set_one("Dimension", 3);
        m.set_one("NumberOfChannels", self.input_channels);
        list(&mut m, "PatchSize", self.patch_size.iter().map(|v| v.to_string()).collect());
        list(
            &mut m,
            "VoxelSize",
            self.voxel_size.iter().flatten().map(|v| v.to_string()).collect(),
        );
        list(
            &mut m,
            "LayersMask",
            self.layers_mask.iter().map(|&b| u8::from(b).to_string()).collect(),
        );
        m.set_one("SubsetFeatures", self.subset_features);
        list(&mut m, "LayersWeight", self.layers_weight.iter().map(|v| v.to_string()).collect());
        m.set_one("Loss", self.loss);
        m.set_one("FeaturesMapUpdateInterval", self.feature_update_interval);
        m.set_one("PCA", self.pca);
        m.set_one("MindRadius", self.mind.radius);
        m.set_one("MindDilation", self.mind.dilation);
        m.set_one("MindWeighting", self.mind.weighting);
        m.set_one("BendingEnergyWeight", self.bending_weight);
        m.set_one("RandomSeed", self.seed);
        m.set_one("AffineInitialization", self.affine);
        m.set_one("AffineIterations", self.affine_iterations);
        m.set_one("ImageSampler", self.sampler);
        if let Some(a) = self.base_gain {
            m.set_one("SP_a", a);
        }
        m.set_one("SP_A", self.sp_big_a);
        m.set_one("SP_alpha", self.sp_alpha);
        m.set_one("NumberOfGradientMeasurements", self.gain_trials);
        if let Some(s) = self.max_step {
            m.set_one("MaximumStepLength", s);
        }
        m.set_one("DefaultPixelValue", self.background);
        m.set_one("NumberOfHistogramBins", self.histogram_bins);
        m.set_one("ChannelPadding", self.pad);
        m.set_one("FeatureTileSize", self.tile);
        m.set_one("FeatureTileOverlap", self.tile_overlap);
        if !self.feature_channels.is_empty() {
            list(&mut m, "FeatureChannels", self.feature_channels.iter().map(|v| v.to_string()).collect());
            list(
                &mut m,
                "FixedFeatureMaps",
                self.fixed_feature_maps.iter().map(|p| p.display().to_string()).collect(),
            );
            list(
                &mut m,
                "MovingFeatureMaps",
                self.moving_feature_maps.iter().map(|p| p.display().to_string()).collect(),
            );
        }
        m
    }
}
