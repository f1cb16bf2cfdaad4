//! Atomic file plumbing: everything lands under its final name only after
//! a complete write, so a killed run never leaves a truncated artifact and
//! resumed sweeps can trust whatever files exist.

use std::fs;
use std::path::{Path, PathBuf};

use gated_mip_core::{Error, Result};

fn partial_path(path: &Path) -> Result<PathBuf> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::config(format!("bad output path '{}'", path.display())))?;
    Ok(path.with_file_name(format!("{name}.partial")))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path)?;
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs a writer that produces a file itself (dataset, checkpoint) against
/// a temporary sibling, then renames into place.
pub fn save_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = partial_path(path)?;
    write(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_partial() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert!(!path.with_file_name("results.csv.partial").exists());

        let other = dir.path().join("results.json");
        write_atomic(&other, b"{}").unwrap();
        assert_eq!(fs::read(&other).unwrap(), b"{}");
    }

    #[test]
    fn failed_saves_leave_no_final_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.bin");
        let result = save_atomic(&path, |_| Err(Error::config("boom")));
        assert!(result.is_err());
        assert!(!path.exists());
    }
}
