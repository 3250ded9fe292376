//! FVEC container: a JSON manifest next to a raw little-endian `f32` blob.
//!
//! ```text
//! features.fvec        manifest (JSON)
//! features.fvec.bin    count * dim little-endian f32, row-major
//! ```
//!
//! The manifest names its blob file relative to its own directory and carries
//! the CRC-32 (IEEE) of the blob bytes as `"crc32:xxxxxxxx"`.

use std::fs;
use std::path::{Path, PathBuf};

use diffmath::Matrix;
use serde::{Deserialize, Serialize};

use super::{Domain, FeatureSet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvecManifest {
    pub format_version: u32,
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    /// Free-form content tag, e.g. `"features"`, `"word-alternates"`, `"checkpoint"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// One label per row, or empty for unlabeled containers.
    #[serde(default)]
    pub labels: Vec<usize>,
    /// One tag per row, or empty for unlabeled containers.
    #[serde(default)]
    pub domain: Vec<Domain>,
    pub checksum: String,
    pub blob: String,
    /// Named sub-matrices laid out back to back (checkpoints only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tensors: Vec<TensorEntry>,
    /// Inputs the producer could not decode.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub skipped: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl FvecManifest {
    pub fn new(dim: usize, count: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dim,
            count,
            dtype: DTYPE.into(),
            kind: None,
            class_names: Vec::new(),
            labels: Vec::new(),
            domain: Vec::new(),
            checksum: String::new(),
            blob: String::new(),
            tensors: Vec::new(),
            skipped: 0,
        }
    }
}

fn blob_path_for(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".bin");
    manifest_path.with_file_name(name)
}

fn checksum_string(bytes: &[u8]) -> String {
    format!("crc32:{:08x}", crc32fast::hash(bytes))
}

/// Writes `values` (exactly `count * dim` floats) and the manifest. The
/// `checksum`, `blob`, `dtype` and `format_version` fields are filled in here.
pub fn write_container(path: &Path, mut manifest: FvecManifest, values: &[f32]) -> Result<()> {
    if values.len() != manifest.count * manifest.dim {
        return Err(Error::format(
            "count",
            format!(
                "{} values for count {} x dim {}",
                values.len(),
                manifest.count,
                manifest.dim
            ),
        ));
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let blob_path = blob_path_for(path);
    manifest.format_version = FORMAT_VERSION;
    manifest.dtype = DTYPE.into();
    manifest.checksum = checksum_string(&bytes);
    manifest.blob = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format("blob", "manifest path has no file name"))?
        .to_string();

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_path, &bytes).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads and validates a container. Returns the manifest and the raw values.
pub fn read_container(path: &Path) -> Result<(FvecManifest, Vec<f32>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: FvecManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::format(
            "dtype",
            format!("expected {DTYPE}, got {}", manifest.dtype),
        ));
    }
    if !manifest.labels.is_empty() && manifest.labels.len() != manifest.count {
        return Err(Error::format(
            "labels",
            format!("{} labels for count {}", manifest.labels.len(), manifest.count),
        ));
    }
    if !manifest.domain.is_empty() && manifest.domain.len() != manifest.count {
        return Err(Error::format(
            "domain",
            format!("{} tags for count {}", manifest.domain.len(), manifest.count),
        ));
    }
    if let Some(&bad) = manifest
        .labels
        .iter()
        .find(|&&l| l >= manifest.class_names.len())
    {
        return Err(Error::format(
            "labels",
            format!("label {bad} exceeds {} class names", manifest.class_names.len()),
        ));
    }
    if !manifest.tensors.is_empty() {
        let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
        if total != manifest.count * manifest.dim {
            return Err(Error::format(
                "tensors",
                format!(
                    "tensor table covers {total} values, blob holds {}",
                    manifest.count * manifest.dim
                ),
            ));
        }
    }

    let blob_path = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = 4 * manifest.count * manifest.dim;
    if bytes.len() < expected {
        return Err(Error::format(
            "blob",
            format!(
                "truncated: {} bytes, manifest count {} x dim {} needs {expected}",
                bytes.len(),
                manifest.count,
                manifest.dim
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            "dim",
            format!(
                "blob holds {} bytes, manifest count {} x dim {} needs {expected}",
                bytes.len(),
                manifest.count,
                manifest.dim
            ),
        ));
    }
    let actual = checksum_string(&bytes);
    if actual != manifest.checksum {
        return Err(Error::format(
            "checksum",
            format!("manifest says {}, blob hashes to {actual}", manifest.checksum),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((manifest, values))
}

/// Writes a feature set. Vectors are stored as `f32`.
pub fn write_fvec(set: &FeatureSet, path: &Path) -> Result<()> {
    write_fvec_kind(set, path, "features")
}

pub(crate) fn write_fvec_kind(set: &FeatureSet, path: &Path, kind: &str) -> Result<()> {
    let mut manifest = FvecManifest::new(set.dim(), set.len());
    manifest.kind = Some(kind.into());
    manifest.class_names = set.class_names().to_vec();
    manifest.labels = set.labels().to_vec();
    manifest.domain = set.domains().to_vec();
    let values: Vec<f32> = set.vectors().data().iter().map(|&x| x as f32).collect();
    write_container(path, manifest, &values)
}

/// Reads a labeled feature container.
pub fn read_fvec(path: &Path) -> Result<FeatureSet> {
    let (manifest, values) = read_container(path)?;
    if manifest.labels.len() != manifest.count {
        return Err(Error::format(
            "labels",
            format!(
                "feature containers need one label per row ({} for count {})",
                manifest.labels.len(),
                manifest.count
            ),
        ));
    }
    if manifest.domain.len() != manifest.count {
        return Err(Error::format(
            "domain",
            format!(
                "feature containers need one domain tag per row ({} for count {})",
                manifest.domain.len(),
                manifest.count
            ),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("blob", "non-finite value"));
    }
    let vectors = Matrix::new(
        manifest.count,
        manifest.dim,
        values.into_iter().map(f64::from).collect(),
    )?;
    FeatureSet::new(vectors, manifest.labels, manifest.domain, manifest.class_names)
}
