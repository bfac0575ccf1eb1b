//! Experiment runner behind the `tsnode` binary: dataset generation,
//! training runs, sigma sweeps, evaluation, figures and the oracle suite.

pub mod data;
pub mod manifest;
pub mod plot;
pub mod runs;
pub mod svg;
pub mod verify;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

/// Writes `contents` to `path` through a temporary sibling and a rename, so
/// readers never see a half-written file.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
