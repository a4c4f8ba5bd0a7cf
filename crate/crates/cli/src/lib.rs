//! Library side of the `contam` command: config parsing, the four
//! subcommands as string producers, and atomic output.

pub mod app;
pub mod commands;
pub mod config;

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

pub use app::run;
pub use config::ExperimentConfig;

/// Writes `contents` to a temporary file next to `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write to {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Reads `CONTAM_THREADS` and sizes the global thread pool. Unset or empty
/// leaves the default.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CONTAM_THREADS") else {
        return Ok(());
    };
    if raw.trim().is_empty() {
        return Ok(());
    }
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).with_context(|| {
        format!("CONTAM_THREADS must be a positive integer, got {raw:?}")
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    Ok(())
}
