//! Atomic file output and run-scoped file names.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.error))?;
    Ok(())
}

/// Renders into memory with `f`, then writes atomically.
pub fn write_with<F, E>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), E>,
    E: std::fmt::Display,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(path, &buf)
}

/// `<out_dir>/<stem>_<config hash>_s<seed>.<ext>`.
pub fn run_file(out_dir: &Path, cfg: &ExperimentConfig, stem: &str, ext: &str) -> PathBuf {
    out_dir.join(format!("{stem}_{}_s{}.{ext}", cfg.hash(), cfg.seed))
}

/// Sizes the global rayon pool from `BMD_THREADS`, if set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BMD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("BMD_THREADS must be a positive integer, got {v:?}")))?;
    // a second initialisation (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
