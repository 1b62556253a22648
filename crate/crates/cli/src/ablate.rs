use std::fs;
use std::path::PathBuf;

use clap::Args;
use featreg_core::config::RegistrationConfig;
use featreg_core::evaluation::{tre, TreStats};
use featreg_core::io::{read_landmarks, read_parameters, read_volume, ParameterMap};
use featreg_core::phantom::{build_case, PhantomCaseConfig};
use featreg_core::pipeline::{register, Masks};
use featreg_core::{BinaryMask, Error, Point3, Result, Volume};
use serde_json::json;

use crate::output::Staging;
use crate::settings::{Common, Settings};

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Axis to vary as NAME=v1,v2,... where NAME is extractor, distance,
    /// mode, pyramid-strategy or any parameter key. Repeat for more axes.
    #[arg(long = "grid", value_name = "NAME=VALUES")]
    pub grid: Vec<String>,
    /// Phantom parameter file; the phantom keys of --params are used otherwise.
    #[arg(long, value_name = "FILE")]
    pub phantom: Option<PathBuf>,
    /// Seeds of the generated phantom cases.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub case_seeds: Vec<u64>,
    /// Explicit case FIXED,MOVING,FIXED_LANDMARKS,MOVING_LANDMARKS; replaces
    /// the phantom cases. Repeatable.
    #[arg(long = "case", value_name = "FILES")]
    pub cases: Vec<String>,
    #[command(flatten)]
    pub common: Common,
}

/// Parameter key behind an axis alias.
fn axis_key(name: &str) -> &str {
    match name {
        "extractor" => "ModelsPath",
        "distance" | "loss" => "Loss",
        "mode" => "Mode",
        "pyramid-strategy" | "pyramid" => "PyramidStrategy",
        "metric" => "Metric",
        other => other,
    }
}

fn parse_axes(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    specs
        .iter()
        .map(|s| {
            let (name, values) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis {s:?} is not NAME=v1,v2,...")))?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::Config(format!("grid axis {name} has no values")));
            }
            Ok((axis_key(name.trim()).to_string(), values))
        })
        .collect()
}

/// Cartesian product, first axis slowest.
fn cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, (_, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect()
    })
}

struct Case {
    name: String,
    fixed: Volume,
    moving: Volume,
    moving_mask: Option<BinaryMask>,
    fixed_landmarks: Vec<Point3>,
    moving_landmarks: Vec<Point3>,
}

fn load_cases(args: &AblateArgs, settings: &Settings) -> Result<Vec<Case>> {
    if !args.cases.is_empty() {
        return args
            .cases
            .iter()
            .map(|spec| {
                let parts: Vec<&str> = spec.split(',').collect();
                let [f, m, fl, ml] = parts[..] else {
                    return Err(Error::Config(format!(
                        "case {spec:?} must be FIXED,MOVING,FIXED_LANDMARKS,MOVING_LANDMARKS"
                    )));
                };
                Ok(Case {
                    name: f.to_string(),
                    fixed: read_volume(f)?,
                    moving: read_volume(m)?,
                    moving_mask: None,
                    fixed_landmarks: read_landmarks(fl)?,
                    moving_landmarks: read_landmarks(ml)?,
                })
            })
            .collect();
    }
    let mut map = match &args.phantom {
        Some(p) => read_parameters(p)?,
        None => settings.engine.clone(),
    };
    args.case_seeds
        .iter()
        .map(|&seed| {
            map.set_one("RandomSeed", seed);
            let cfg = PhantomCaseConfig::from_parameters(&map)?;
            let case = build_case(&cfg)?;
            Ok(Case {
                name: format!("phantom-{seed}"),
                moving_mask: cfg.modality.is_some().then_some(case.moving_mask),
                fixed: case.fixed.image,
                moving: case.moving.image,
                fixed_landmarks: case.fixed.landmarks,
                moving_landmarks: case.moving.landmarks,
            })
        })
        .collect()
}

/// Registers every case under every cell of the grid with the same seed and
/// writes `ablation.tsv` (pooled TRE per cell) and `ablation_runs.jsonl`.
pub fn run(args: &AblateArgs) -> Result<()> {
    let settings = Settings::load(&args.common)?;
    settings.install_threads()?;
    let out_dir = settings.out_dir()?;
    let axes = parse_axes(&args.grid)?;
    let grid = cells(&axes);
    // Resolve every cell before the first long run so typos fail fast.
    let configs: Vec<(ParameterMap, RegistrationConfig)> = grid
        .iter()
        .map(|cell| {
            let mut map = settings.engine.clone();
            for ((key, _), value) in axes.iter().zip(cell) {
                map.set_one(key, value);
            }
            RegistrationConfig::from_parameters(&map).map(|(c, _)| (map, c))
        })
        .collect::<Result<_>>()?;
    let cases = load_cases(args, &settings)?;

    let mut table = String::new();
    for (key, _) in &axes {
        table.push_str(key);
        table.push('\t');
    }
    table.push_str("cases\tlandmarks\ttre_mean\ttre_sd\ttre_median\tfailed\n");
    let mut runs = String::new();
    for (cell, (_, config)) in grid.iter().zip(&configs) {
        let mut pooled = Vec::new();
        let mut failed = 0;
        for case in &cases {
            let masks = Masks {
                fixed: None,
                moving: case.moving_mask.as_ref(),
            };
            let r = register(&case.fixed, &case.moving, masks, config);
            let stats = match &r.error {
                None => Some(tre(&case.fixed_landmarks, &case.moving_landmarks, &r.transform)?),
                Some(e) => {
                    log::warn!("case {} failed: {e}", case.name);
                    failed += 1;
                    None
                }
            };
            let settings_json: serde_json::Map<_, _> =
                axes.iter().zip(cell).map(|((k, _), v)| (k.clone(), json!(v))).collect();
            let record = json!({
                "cell": settings_json,
                "case": case.name,
                "status": r.report.status,
                "error": r.report.error,
                "tre_median": stats.as_ref().map(|s| s.median),
                "tre_mean": stats.as_ref().map(|s| s.mean),
            });
            runs.push_str(&record.to_string());
            runs.push('\n');
            if let Some(s) = stats {
                pooled.extend(s.distances);
            }
        }
        for v in cell {
            table.push_str(v);
            table.push('\t');
        }
        match TreStats::from_distances(pooled.clone()) {
            Ok(s) => table.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{failed}\n",
                cases.len(),
                pooled.len(),
                s.mean,
                s.sd,
                s.median
            )),
            Err(_) => table.push_str(&format!("{}\t0\tNA\tNA\tNA\t{failed}\n", cases.len())),
        }
    }
    let stage = Staging::new(&out_dir)?;
    for (name, text) in [("ablation.tsv", &table), ("ablation_runs.jsonl", &runs)] {
        let path = stage.path(name);
        fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
    }
    stage.commit()?;
    print!("{table}");
    Ok(())
}
