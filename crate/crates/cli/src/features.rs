use std::path::PathBuf;

use clap::Args;
use featreg_core::config::{ExtractorChoice, RegistrationConfig};
use featreg_core::features::StaticFeatureMap;
use featreg_core::io::{read_volume, write_feature_manifest, write_volume, FeatureManifestEntry};
use featreg_core::pipeline::{static_maps, Masks};
use featreg_core::{BinaryMask, Error, Result};

use crate::output::Staging;
use crate::settings::{Common, Settings};

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// Fixed image; PCA bases are fitted on its maps.
    pub fixed: PathBuf,
    /// Moving image.
    pub moving: Option<PathBuf>,
    /// Check the external maps listed under FixedFeatureMaps and
    /// MovingFeatureMaps against the images instead of computing maps.
    #[arg(long)]
    pub validate: bool,
    /// Pyramid level whose patch voxel size is used; defaults to the finest.
    #[arg(long)]
    pub level: Option<usize>,
    /// Restricts the PCA fit to this region of the fixed image [FixedImageMask].
    #[arg(long)]
    pub fixed_mask: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    /// Format of written maps: mha, mhd or nii [ResultImageFormat].
    #[arg(long)]
    pub format: Option<String>,
}

fn describe(which: &str, map: &StaticFeatureMap) {
    for layer in &map.layers {
        println!(
            "{which} layer {}: {} channels on {:?} voxels at {:?} mm, weight {}",
            layer.id,
            layer.channels(),
            layer.map.grid.dims,
            layer.map.grid.spacing,
            layer.weight
        );
    }
}

fn stage_maps(stage: &Staging, which: &str, map: &StaticFeatureMap, ext: &str) -> Result<()> {
    let mut entries = Vec::new();
    for layer in &map.layers {
        let name = format!("{which}_features_{}.{ext}", layer.id);
        write_volume(&layer.map, stage.path(&name))?;
        entries.push(FeatureManifestEntry {
            layer: layer.id,
            channels: layer.channels(),
            file: name.into(),
        });
    }
    write_feature_manifest(&entries, stage.path(&format!("{which}_features.txt")))
}

/// Computes dense MIND or identity maps (PCA-reduced when PCA > 0) or, with
/// `--validate`, loads external maps and checks channels and extent.
pub fn run(args: &FeaturesArgs) -> Result<()> {
    let settings = Settings::load(&args.common)?;
    settings.install_threads()?;
    let (config, _) = RegistrationConfig::from_parameters(&settings.engine)?;
    let external = matches!(config.extractor, ExtractorChoice::External(_));
    if args.validate != external {
        return Err(Error::Config(if external {
            format!("extractor {} reads external maps; use --validate", config.extractor)
        } else {
            format!("--validate needs an external extractor (ModelsPath), found {}", config.extractor)
        }));
    }
    let level = args.level.unwrap_or(config.resolutions - 1);
    if level >= config.resolutions {
        return Err(Error::Config(format!(
            "level {level} does not exist with {} resolutions",
            config.resolutions
        )));
    }
    let out_dir = if args.validate { None } else { Some(settings.out_dir()?) };
    let ext = settings.image_format(args.format.as_deref())?;
    let fixed = read_volume(&args.fixed)?;
    let moving = args.moving.as_ref().map(read_volume).transpose()?;
    let mask = settings
        .path(args.fixed_mask.as_deref(), "FixedImageMask")
        .map(|p| read_volume(p).map(|v| BinaryMask::from_volume(&v)))
        .transpose()?;
    if args.validate && moving.is_none() && !config.moving_feature_maps.is_empty() {
        return Err(Error::Config("MovingFeatureMaps are listed; give the moving image too".into()));
    }
    let masks = Masks {
        fixed: mask.as_ref(),
        moving: None,
    };
    let (f, m) = static_maps(&config, level, &fixed, moving.as_ref().unwrap_or(&fixed), masks, &fixed.grid)?;

    describe("fixed", &f);
    if moving.is_some() {
        describe("moving", &m);
    }
    let Some(out_dir) = out_dir else {
        println!("external feature maps are consistent with the configuration");
        return Ok(());
    };
    let stage = Staging::new(&out_dir)?;
    stage_maps(&stage, "fixed", &f, ext)?;
    if moving.is_some() {
        stage_maps(&stage, "moving", &m, ext)?;
    }
    stage.commit()?;
    Ok(())
}
