//! Parameter file plus command-line overrides.
//!
//! Flags overwrite the matching parameter keys. Keys that only steer the
//! front end (output directory, threads, input paths) are split off so the
//! engine's config echo, and with it the run report, does not depend on them.

use std::path::{Path, PathBuf};

use clap::Args;
use featreg_core::config::FRONT_END_KEYS;
use featreg_core::io::{read_parameters, ParameterMap};
use featreg_core::{Error, Result};

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Parameter file, `(Key value ...)` per line.
    #[arg(long, short = 'p', value_name = "FILE")]
    pub params: Option<PathBuf>,
    /// Directory receiving every output [OutputDirectory].
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Random seed [RandomSeed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 guarantees bitwise reproducible runs [NumberOfThreads].
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    /// Engine parameters, echoed into reports.
    pub engine: ParameterMap,
    front: ParameterMap,
}

impl Settings {
    pub fn load(common: &Common) -> Result<Self> {
        let mut engine = match &common.params {
            Some(p) => read_parameters(p)?,
            None => ParameterMap::new(),
        };
        let mut front = ParameterMap::new();
        for key in FRONT_END_KEYS {
            if let Some(v) = engine.remove(key) {
                front.set(key, v);
            }
        }
        if let Some(s) = common.seed {
            engine.set_one("RandomSeed", s);
        }
        if let Some(t) = common.threads {
            front.set_one("NumberOfThreads", t);
        }
        if let Some(d) = &common.out_dir {
            front.set_one("OutputDirectory", d.display());
        }
        Ok(Settings { engine, front })
    }

    fn front_one(&self, key: &str) -> Option<&str> {
        self.front.get(key).and_then(|v| v.first()).map(String::as_str)
    }

    /// A path given by flag, else by parameter key.
    pub fn path(&self, flag: Option<&Path>, key: &str) -> Option<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.front_one(key).map(PathBuf::from))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.front_one("OutputDirectory")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("an output directory is required (--out-dir or OutputDirectory)".into()))
    }

    /// Sizes the global worker pool. Must run before any parallel work.
    pub fn install_threads(&self) -> Result<()> {
        let Some(t) = self.front_one("NumberOfThreads") else {
            return Ok(());
        };
        let n: usize = t
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("NumberOfThreads must be a positive integer, found {t:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))
    }

    /// Extension for written volumes [ResultImageFormat].
    pub fn image_format(&self, flag: Option<&str>) -> Result<&'static str> {
        match flag.or(self.front_one("ResultImageFormat")).unwrap_or("mha") {
            "mha" => Ok("mha"),
            "mhd" => Ok("mhd"),
            "nii" => Ok("nii"),
            other => Err(Error::Choice {
                key: "ResultImageFormat".into(),
                choices: "mha, mhd, nii".into(),
                found: other.into(),
            }),
        }
    }
}
