//! Atomic file plumbing and the table formats every subcommand shares.
//!
//! All writes go through a sibling temp file plus rename, so a crash never
//! leaves a half-written artifact under a final name. Numbers are formatted
//! with the shortest round-trip representation (`Display`), which keeps
//! tables both exact and byte-deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use warplab_core::checkpoint;
use warplab_core::{ArchConfig, WeightSet};

use crate::error::CliError;

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Write `bytes` to `path` via temp-file-plus-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Shortest round-trip decimal form; what every table cell uses.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Assemble a CSV document: header row plus one line per row, no quoting
/// (cells never contain commas here).
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    write_atomic(path, &csv(header, rows))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = Vec::new();
    for item in items {
        out.extend_from_slice(&serde_json::to_vec(item).expect("log records serialize"));
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Save a checkpoint in the laboratory's canonical form: architecture
/// recorded, extra map empty. Keeping the manifest minimal means equal
/// weights always produce byte-identical files, which several definitional
/// identities (`merge slerpm` of two vs `merge slerp --lambda 0.5`,
/// `liti --eta 0` vs its init) rely on.
pub fn save_ckpt(path: &Path, ws: &WeightSet, arch: &ArchConfig) -> Result<(), CliError> {
    checkpoint::save(ws, Some(arch), &BTreeMap::new(), path).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Load a checkpoint and require it to carry its architecture.
pub fn load_ckpt(path: &Path) -> Result<(WeightSet, ArchConfig), CliError> {
    let ck = checkpoint::load(path).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        source: e,
    })?;
    let arch = ck.arch.ok_or_else(|| {
        CliError::Usage(format!(
            "checkpoint {} carries no architecture record",
            path.display()
        ))
    })?;
    Ok((ck.weights, arch))
}

/// File stem as a table label.
pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
