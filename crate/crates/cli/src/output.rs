use std::fs;
use std::path::{Path, PathBuf};

use featreg_core::{Error, Result};

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Outputs are written to a hidden directory inside the output directory
/// and moved into place by [`Staging::commit`]. Dropping an uncommitted
/// staging area removes everything written so far.
pub struct Staging {
    out_dir: PathBuf,
    tmp: tempfile::TempDir,
}

impl Staging {
    pub fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
        let tmp = tempfile::Builder::new()
            .prefix(".featreg-")
            .tempdir_in(out_dir)
            .map_err(io_error(out_dir))?;
        Ok(Staging {
            out_dir: out_dir.to_path_buf(),
            tmp,
        })
    }

    /// Where to write the output `name`.
    pub fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    /// Moves the staged files (and MetaImage data companions, if any) into
    /// the output directory.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut moved = Vec::new();
        for entry in fs::read_dir(self.tmp.path()).map_err(io_error(self.tmp.path()))? {
            let entry = entry.map_err(io_error(self.tmp.path()))?;
            let dest = self.out_dir.join(entry.file_name());
            fs::rename(entry.path(), &dest).map_err(io_error(&dest))?;
            moved.push(dest);
        }
        moved.sort();
        Ok(moved)
    }
}
