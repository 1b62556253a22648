use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use featreg_core::evaluation::{dice, hd95, jacobian_determinant_map, tre};
use featreg_core::io::{read_landmarks, read_transform, read_volume, write_volume};
use featreg_core::pipeline::warp_labels;
use featreg_core::{BinaryMask, Error, Result, Volume};
use serde_json::{json, Value};

use crate::output::Staging;
use crate::settings::{Common, Settings};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Fixed-to-moving transform written by `register` or `phantom`.
    pub transform: PathBuf,
    /// Landmarks in the fixed image, one `x y z` per line [FixedLandmarks].
    #[arg(long)]
    pub landmarks_fixed: Option<PathBuf>,
    /// Corresponding landmarks in the moving image [MovingLandmarks].
    #[arg(long)]
    pub landmarks_moving: Option<PathBuf>,
    /// Fixed label volume [FixedLabels].
    #[arg(long)]
    pub labels_fixed: Option<PathBuf>,
    /// Moving label volume, warped onto the fixed labels [MovingLabels].
    #[arg(long)]
    pub labels_moving: Option<PathBuf>,
    /// Grid for the Jacobian determinant map; defaults to the fixed labels
    /// [ReferenceImage].
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn both(a: Option<PathBuf>, b: Option<PathBuf>, what: &str) -> Result<Option<(PathBuf, PathBuf)>> {
    match (a, b) {
        (Some(a), Some(b)) => Ok(Some((a, b))),
        (None, None) => Ok(None),
        _ => Err(Error::Config(format!("{what} need both a fixed and a moving file"))),
    }
}

fn label_values(v: &Volume) -> BTreeSet<i64> {
    v.data.iter().map(|&x| x.round() as i64).filter(|&l| l != 0).collect()
}

fn opt(v: Result<f64>) -> Value {
    v.ok().filter(|x| x.is_finite()).map_or(Value::Null, |x| json!(x))
}

/// Writes `evaluation.json` (and `jacobian.mha` when a grid is known) and
/// prints the same JSON.
pub fn run(args: &EvaluateArgs) -> Result<()> {
    let settings = Settings::load(&args.common)?;
    settings.install_threads()?;
    let out_dir = settings.out_dir()?;
    let transform = read_transform(&args.transform)?;
    let landmarks = both(
        settings.path(args.landmarks_fixed.as_deref(), "FixedLandmarks"),
        settings.path(args.landmarks_moving.as_deref(), "MovingLandmarks"),
        "landmarks",
    )?;
    let labels = both(
        settings.path(args.labels_fixed.as_deref(), "FixedLabels"),
        settings.path(args.labels_moving.as_deref(), "MovingLabels"),
        "labels",
    )?;
    if landmarks.is_none() && labels.is_none() {
        return Err(Error::Config("nothing to evaluate: give landmarks and/or labels".into()));
    }

    let mut out = serde_json::Map::new();
    if let Some((f, m)) = landmarks {
        let s = tre(&read_landmarks(f)?, &read_landmarks(m)?, &transform)?;
        out.insert(
            "tre".into(),
            json!({
                "count": s.distances.len(),
                "mean": s.mean, "sd": s.sd,
                "q25": s.q25, "median": s.median, "q75": s.q75, "max": s.max,
            }),
        );
    }
    let mut grid = None;
    if let Some((f, m)) = labels {
        let fixed = read_volume(f)?;
        let moving = read_volume(m)?;
        let warped = warp_labels(&moving, &transform, &fixed.grid)?;
        let mut rows = Vec::new();
        let all: BTreeSet<i64> = label_values(&fixed).union(&label_values(&warped)).copied().collect();
        for l in all {
            let a = BinaryMask::from_label(&fixed, l);
            let b = BinaryMask::from_label(&warped, l);
            rows.push(json!({ "label": l, "dice": opt(dice(&a, &b)), "hd95": opt(hd95(&a, &b)) }));
        }
        out.insert("labels".into(), Value::Array(rows));
        grid = Some(fixed.grid);
    }
    if let Some(r) = settings.path(args.reference.as_deref(), "ReferenceImage") {
        grid = Some(read_volume(r)?.grid);
    }
    let stage = Staging::new(&out_dir)?;
    if let Some(g) = grid {
        let (map, s) = jacobian_determinant_map(&transform, &g);
        out.insert(
            "jacobian".into(),
            json!({ "min": s.min, "max": s.max, "mean": s.mean, "fraction_nonpositive": s.fraction_nonpositive }),
        );
        write_volume(&map, stage.path("jacobian.mha"))?;
    }
    let text = serde_json::to_string_pretty(&Value::Object(out)).expect("plain JSON values") + "\n";
    let path = stage.path("evaluation.json");
    fs::write(&path, &text).map_err(|source| Error::Io { path, source })?;
    stage.commit()?;
    print!("{text}");
    Ok(())
}
