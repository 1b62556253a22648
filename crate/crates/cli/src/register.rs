use std::path::PathBuf;

use clap::Args;
use featreg_core::config::RegistrationConfig;
use featreg_core::io::{read_volume, write_transform, write_volume};
use featreg_core::pipeline::{displacement_field, register, warp_image, Masks};
use featreg_core::{BinaryMask, Result};

use crate::output::Staging;
use crate::settings::{Common, Settings};

#[derive(Args, Debug)]
pub struct RegisterArgs {
    /// Fixed image (.mha, .mhd or .nii).
    pub fixed: PathBuf,
    /// Moving image.
    pub moving: PathBuf,
    /// Region of the fixed image to sample from [FixedImageMask].
    pub fixed_mask: Option<PathBuf>,
    /// Valid region of the moving image [MovingImageMask].
    pub moving_mask: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
    /// Format of written images: mha, mhd or nii [ResultImageFormat].
    #[arg(long)]
    pub format: Option<String>,
}

fn read_mask(path: Option<PathBuf>) -> Result<Option<BinaryMask>> {
    path.map(|p| read_volume(p).map(|v| BinaryMask::from_volume(&v))).transpose()
}

/// Writes `warped`, `displacement`, `transform.json`, `report.jsonl` and
/// `timings.json`. A failed registration only leaves its report behind.
pub fn run(args: &RegisterArgs) -> Result<()> {
    let settings = Settings::load(&args.common)?;
    settings.install_threads()?;
    let out_dir = settings.out_dir()?;
    let ext = settings.image_format(args.format.as_deref())?;
    let (config, _) = RegistrationConfig::from_parameters(&settings.engine)?;
    let fixed = read_volume(&args.fixed)?;
    let moving = read_volume(&args.moving)?;
    let fixed_mask = read_mask(settings.path(args.fixed_mask.as_deref(), "FixedImageMask"))?;
    let moving_mask = read_mask(settings.path(args.moving_mask.as_deref(), "MovingImageMask"))?;

    let result = register(
        &fixed,
        &moving,
        Masks {
            fixed: fixed_mask.as_ref(),
            moving: moving_mask.as_ref(),
        },
        &config,
    );
    let stage = Staging::new(&out_dir)?;
    if result.error.is_none() {
        let (warped, _) = warp_image(&moving, &result.transform, &fixed.grid, config.background)?;
        write_volume(&warped, stage.path(&format!("warped.{ext}")))?;
        let field = displacement_field(&result.transform, &fixed.grid);
        write_volume(&field, stage.path(&format!("displacement.{ext}")))?;
        write_transform(&result.transform, stage.path("transform.json"))?;
    }
    result
        .report
        .write(stage.path("report.jsonl"), Some(&stage.path("timings.json")))?;
    stage.commit()?;
    if let Some(m) = result.report.metric("mean_displacement_mm") {
        println!("mean displacement {m:.4} mm");
    }
    result.error.map_or(Ok(()), Err)
}
