//! Output files and the JSON sidecar written next to every result.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{LabError, LabResult};

/// Version plus `git describe` of the tree the binary was built from.
pub const BUILD_ID: &str = env!("MOSHPIT_BUILD_ID");

#[derive(Debug, Serialize)]
pub struct Sidecar<'a, C: Serialize, S: Serialize> {
    pub build: &'a str,
    pub command: &'a str,
    pub config: &'a C,
    pub summary: S,
}

/// Creates `path` and any missing parent directories.
pub fn create_file(path: &Path) -> LabResult<BufWriter<File>> {
    let out_err = |source| LabError::Output {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(out_err)?;
    }
    File::create(path).map(BufWriter::new).map_err(out_err)
}

/// `results/table.csv` + `json` → `results/table.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> LabResult<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| LabError::Output {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    use std::io::Write;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|source| LabError::Output {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes the sidecar for the result at `path`.
pub fn write_sidecar<C: Serialize, S: Serialize>(
    path: &Path,
    command: &str,
    config: &C,
    summary: S,
) -> LabResult<PathBuf> {
    let json = sibling(path, "json");
    let sidecar = Sidecar {
        build: BUILD_ID,
        command,
        config,
        summary,
    };
    write_json(&sidecar, &json)?;
    Ok(json)
}
