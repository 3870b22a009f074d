//! Checkpoint serialization.
//!
//! Wire format, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "WARPCKPT"
//! 8       1     format version (currently 1)
//! 9       8     manifest length in bytes (u64)
//! 17      n     manifest, UTF-8 JSON
//! 17+n    ...   blob: concatenated f32 little-endian group data
//! ```
//!
//! The manifest carries the group table (name, shape, dtype, byte offset
//! into the blob), an optional architecture record for policy checkpoints,
//! and a free-form string map for provenance tags. Offsets are blob-relative
//! so the blob can be memory-mapped or sliced without re-parsing the header.
//!
//! Loading is strict: magic, version, dtype, offset bounds, overlap, blob
//! length, and value finiteness are each rejected with a distinct error.

use crate::policy::ArchConfig;
use crate::tensor::{TensorError, TensorGroup, WeightSet};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"WARPCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"WARPCKPT\", got {got:?}")]
    BadMagic { got: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("file truncated inside header")]
    TruncatedHeader,
    #[error("declared manifest length {declared} exceeds remaining {available} bytes")]
    ManifestLength { declared: u64, available: usize },
    #[error("manifest parse: {0}")]
    ManifestParse(#[from] serde_json::Error),
    #[error("group `{group}`: unknown dtype `{dtype}`")]
    UnknownDtype { group: String, dtype: String },
    #[error("group `{group}`: bytes {offset}..{end} outside blob of {blob_len} bytes")]
    OffsetOutOfRange {
        group: String,
        offset: u64,
        end: u64,
        blob_len: usize,
    },
    #[error("groups `{a}` and `{b}` overlap in the blob")]
    Overlap { a: String, b: String },
    #[error("group `{group}`: offset {offset} not 4-byte aligned")]
    Misaligned { group: String, offset: u64 },
    #[error("blob has {got} bytes past the last group (expected end {expected})")]
    TrailingBytes { expected: u64, got: usize },
    #[error("group `{group}`: non-finite value at element {index}")]
    NonFinite { group: String, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset of this group's data, relative to the start of the blob.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arch: Option<ArchConfig>,
    groups: Vec<GroupRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, String>,
}

/// A loaded checkpoint: the weights plus whatever the manifest carried.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: WeightSet,
    pub arch: Option<ArchConfig>,
    pub extra: BTreeMap<String, String>,
}

/// Serialize `weights` to bytes. Groups land in the blob in schema order,
/// densely packed, so equal inputs produce byte-identical files.
pub fn to_bytes(
    weights: &WeightSet,
    arch: Option<&ArchConfig>,
    extra: &BTreeMap<String, String>,
) -> Vec<u8> {
    let mut records = Vec::with_capacity(weights.groups().len());
    let mut offset = 0u64;
    for g in weights.groups() {
        records.push(GroupRecord {
            name: g.name.clone(),
            shape: g.shape.clone(),
            dtype: "f32".to_string(),
            offset,
        });
        offset += 4 * g.data.len() as u64;
    }
    let manifest = Manifest {
        arch: arch.cloned(),
        groups: records,
        extra: extra.clone(),
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = Vec::with_capacity(17 + manifest_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for g in weights.groups() {
        for &v in &g.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write a checkpoint atomically: the bytes go to a sibling temp file which
/// is renamed over `path` only after a successful flush.
pub fn save(
    weights: &WeightSet,
    arch: Option<&ArchConfig>,
    extra: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(weights, arch, extra);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 17 {
        return Err(CheckpointError::TruncatedHeader);
    }
    if &bytes[0..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            got: bytes[0..8].to_vec(),
        });
    }
    let version = bytes[8];
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
    let available = bytes.len() - 17;
    if manifest_len > available as u64 {
        return Err(CheckpointError::ManifestLength {
            declared: manifest_len,
            available,
        });
    }
    let manifest_end = 17 + manifest_len as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[17..manifest_end])?;
    let blob = &bytes[manifest_end..];

    // Bounds, alignment, dtype.
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.groups.len());
    for rec in &manifest.groups {
        if rec.dtype != "f32" {
            return Err(CheckpointError::UnknownDtype {
                group: rec.name.clone(),
                dtype: rec.dtype.clone(),
            });
        }
        if rec.offset % 4 != 0 {
            return Err(CheckpointError::Misaligned {
                group: rec.name.clone(),
                offset: rec.offset,
            });
        }
        let elems: usize = rec.shape.iter().product();
        let end = rec.offset + 4 * elems as u64;
        if end > blob.len() as u64 {
            return Err(CheckpointError::OffsetOutOfRange {
                group: rec.name.clone(),
                offset: rec.offset,
                end,
                blob_len: blob.len(),
            });
        }
        spans.push((rec.offset, end, &rec.name));
    }

    // Pairwise overlap via a sorted sweep.
    let mut sorted = spans.clone();
    sorted.sort_by_key(|s| s.0);
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CheckpointError::Overlap {
                a: w[0].2.to_string(),
                b: w[1].2.to_string(),
            });
        }
    }
    let expected_end = sorted.last().map(|s| s.1).unwrap_or(0);
    if (blob.len() as u64) > expected_end {
        return Err(CheckpointError::TrailingBytes {
            expected: expected_end,
            got: blob.len() - expected_end as usize,
        });
    }

    let mut groups = Vec::with_capacity(manifest.groups.len());
    for rec in &manifest.groups {
        let elems: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let mut data = Vec::with_capacity(elems);
        for i in 0..elems {
            let b = &blob[start + 4 * i..start + 4 * i + 4];
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite {
                    group: rec.name.clone(),
                    index: i,
                });
            }
            data.push(v);
        }
        groups.push(TensorGroup::new(rec.name.clone(), rec.shape.clone(), data));
    }
    Ok(Checkpoint {
        weights: WeightSet::new(groups)?,
        arch: manifest.arch,
        extra: manifest.extra,
    })
}
