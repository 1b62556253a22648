use std::fs;

use clap::Args;
use featreg_core::io::{write_landmarks, write_transform, write_volume};
use featreg_core::phantom::{build_case, PhantomCaseConfig};
use featreg_core::{CompositeTransform, Error, Result};

use crate::output::Staging;
use crate::settings::{Common, Settings};

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    /// Format of written images: mha, mhd or nii [ResultImageFormat].
    #[arg(long)]
    pub format: Option<String>,
}

/// Writes a fixed/moving phantom pair with labels, landmarks and the
/// ground-truth fixed-to-moving transform. The moving validity mask is
/// written only when an appearance change is simulated.
pub fn run(args: &PhantomArgs) -> Result<()> {
    let settings = Settings::load(&args.common)?;
    settings.install_threads()?;
    let out_dir = settings.out_dir()?;
    let ext = settings.image_format(args.format.as_deref())?;
    let cfg = PhantomCaseConfig::from_parameters(&settings.engine)?;
    let case = build_case(&cfg)?;

    let stage = Staging::new(&out_dir)?;
    write_volume(&case.fixed.image, stage.path(&format!("fixed.{ext}")))?;
    write_volume(&case.moving.image, stage.path(&format!("moving.{ext}")))?;
    write_volume(&case.fixed.labels, stage.path(&format!("fixed_labels.{ext}")))?;
    write_volume(&case.moving.labels, stage.path(&format!("moving_labels.{ext}")))?;
    if cfg.modality.is_some() {
        write_volume(&case.moving_mask.to_volume(), stage.path(&format!("moving_mask.{ext}")))?;
    }
    write_landmarks(&case.fixed.landmarks, stage.path("fixed_landmarks.txt"))?;
    write_landmarks(&case.moving.landmarks, stage.path("moving_landmarks.txt"))?;
    write_transform(&CompositeTransform::new(None, case.field), stage.path("ground_truth.json"))?;
    let params = stage.path("phantom.txt");
    fs::write(&params, settings.engine.to_string()).map_err(|source| Error::Io { path: params, source })?;
    stage.commit()?;
    println!(
        "phantom seed {}: {} landmarks, inversion residual {:.2e} mm",
        cfg.seed,
        case.fixed.landmarks.len(),
        case.max_residual
    );
    Ok(())
}
