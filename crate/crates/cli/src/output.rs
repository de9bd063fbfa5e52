use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::error::CliError;

/// Collects files for an output directory and prints to stdout when there is none.
pub struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    pub fn new(dir: Option<&Path>) -> Result<Sink, CliError> {
        if let Some(d) = dir {
            std::fs::create_dir_all(d)
                .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Sink {
            dir: dir.map(Path::to_path_buf),
        })
    }

    pub fn has_dir(&self) -> bool {
        self.dir.is_some()
    }

    /// Writes `name` into the output directory, if any, by temp file and rename.
    pub fn file(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        write_atomic(&dir.join(name), bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(parent).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.flush().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}
