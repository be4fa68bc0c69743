//! On-disk models and datasets.
//!
//! A model directory holds `model.json` and one file per blob under
//! `blobs/<name>.blob`. Values are stored as 32-bit floats regardless of the
//! in-memory scalar.
//!
//! Manifest (JSON, keys in fixed order):
//!
//! | key              | content                                                     |
//! |------------------|-------------------------------------------------------------|
//! | `format_version` | `"MAJOR.MINOR"`; this build reads major `1`                 |
//! | `input`          | `{c, h, w}` of one input sample                             |
//! | `layers`         | ordered layers: `name`, `kind`, op fields, `block`, `stage` |
//! | `blobs`          | `{name, file, dtype, dims, sha256}` per blob, sorted by name |
//! | `plan`           | optional decomposition plan (`entries`, `flags`)           |
//! | `training`       | optional training configuration                            |
//!
//! Blob file, all integers little-endian:
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 0..8         | magic `FBBLOB01`                |
//! | 8            | dtype, `1` = f32                |
//! | 9..13        | rank `r` as u32                 |
//! | 13..13+4r    | dims as u32                     |
//! | rest         | `Π dims` f32 values, row-major   |
//!
//! A dataset file is two blob records back to back: inputs, then targets.
//! The leading dimension of each is the sample count; ranks below 4 are
//! padded with trailing unit dims.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Blob, InputSpec, Layer, ModelGraph};
use crate::planner::DecompositionPlan;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: &str = "1.0";
pub const FORMAT_MAJOR: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_DIR: &str = "blobs";
pub const BLOB_MAGIC: &[u8; 8] = b"FBBLOB01";
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    /// Path relative to the manifest directory.
    pub file: String,
    pub dtype: String,
    pub dims: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub input: InputSpec,
    pub layers: Vec<Layer>,
    pub blobs: Vec<BlobEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<DecompositionPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serialize one blob record.
pub fn encode_blob<T: Scalar>(dims: &[usize], data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Parse one blob record from the front of `bytes`; returns the blob and
/// the number of bytes consumed.
pub fn decode_blob<T: Scalar>(name: &str, bytes: &[u8]) -> Result<(Blob<T>, usize)> {
    let fmt = |detail: String| Error::BlobFormat {
        name: name.to_string(),
        detail,
    };
    let short = |expected: usize| Error::BlobLength {
        name: name.to_string(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 13 {
        return Err(short(13));
    }
    if &bytes[..8] != BLOB_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(fmt(format!("unsupported dtype {}", bytes[8])));
    }
    let rank = read_u32(bytes, 9).expect("length checked") as usize;
    if rank == 0 || rank > 8 {
        return Err(fmt(format!("unsupported rank {rank}")));
    }
    let header = 13 + 4 * rank;
    if bytes.len() < header {
        return Err(short(header));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| read_u32(bytes, 13 + 4 * k).expect("length checked") as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let total = count
        .and_then(|c| c.checked_mul(4))
        .and_then(|b| b.checked_add(header))
        .ok_or_else(|| fmt(format!("dims {dims:?} overflow")))?;
    if bytes.len() < total {
        return Err(short(total));
    }
    let data = bytes[header..total]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Ok((Blob { dims, data }, total))
}

fn check_blob_name(name: &str) -> Result<()> {
    if name.is_empty() || name.starts_with('.') || name.contains(['/', '\\']) {
        return Err(Error::InvalidArgument(format!(
            "blob name `{name}` is not a plain file name"
        )));
    }
    Ok(())
}

fn blob_file(name: &str) -> String {
    format!("{BLOB_DIR}/{name}.blob")
}

/// Write `model.json` and every blob into `dir`; stale `.blob` files are
/// removed. Returns the written paths, manifest first.
pub fn save_model<T: Scalar>(graph: &ModelGraph<T>, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    graph.shape_chain()?;
    let blob_dir = dir.join(BLOB_DIR);
    fs::create_dir_all(&blob_dir).map_err(io_err(&blob_dir))?;
    let mut entries = Vec::with_capacity(graph.blobs.len());
    let mut paths = vec![dir.join(MANIFEST_FILE)];
    for (name, blob) in &graph.blobs {
        check_blob_name(name)?;
        let bytes = encode_blob(&blob.dims, &blob.data);
        let file = blob_file(name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        entries.push(BlobEntry {
            name: name.clone(),
            file,
            dtype: "f32".into(),
            dims: blob.dims.clone(),
            sha256: sha256_hex(&bytes),
        });
        paths.push(path);
    }
    let listing = fs::read_dir(&blob_dir).map_err(io_err(&blob_dir))?;
    for item in listing {
        let path = item.map_err(io_err(&blob_dir))?.path();
        if path.extension().is_some_and(|e| e == "blob") && !paths.contains(&path) {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        input: graph.input,
        layers: graph.layers.clone(),
        blobs: entries,
        plan: graph.plan.clone(),
        training: graph.training.clone(),
    };
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&paths[0], text).map_err(io_err(&paths[0]))?;
    Ok(paths)
}

/// Manifest path for a model directory or the manifest file itself.
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let probe: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let version = probe
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Manifest("missing format_version".into()))?;
    let major = version
        .split('.')
        .next()
        .and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_MAJOR,
        });
    }
    serde_json::from_value(probe).map_err(|e| Error::Manifest(e.to_string()))
}

/// Load a model, verifying blob headers, lengths, checksums and the shape
/// chain.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut graph = ModelGraph::new(manifest.input);
    for entry in &manifest.blobs {
        check_blob_name(&entry.name)?;
        if graph.blobs.contains_key(&entry.name) {
            return Err(Error::Manifest(format!(
                "blob `{}` listed twice",
                entry.name
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::BlobFormat {
                name: entry.name.clone(),
                detail: format!("unsupported dtype `{}`", entry.dtype),
            });
        }
        let file = root.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DanglingBlob(entry.name.clone()),
            _ => Error::io(&file, e),
        })?;
        let (blob, used) = decode_blob::<T>(&entry.name, &bytes)?;
        if used != bytes.len() {
            return Err(Error::BlobLength {
                name: entry.name.clone(),
                expected: used,
                found: bytes.len(),
            });
        }
        if blob.dims != entry.dims {
            return Err(Error::BlobFormat {
                name: entry.name.clone(),
                detail: format!(
                    "header dims {:?} differ from manifest {:?}",
                    blob.dims, entry.dims
                ),
            });
        }
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum(entry.name.clone()));
        }
        graph.blobs.insert(entry.name.clone(), blob);
    }
    graph.layers = manifest.layers;
    graph.plan = manifest.plan;
    graph.training = manifest.training;
    graph.shape_chain()?;
    Ok(graph)
}

fn pad4<T: Scalar>(name: &str, blob: Blob<T>) -> Result<Tensor4<T>> {
    if blob.dims.len() > 4 {
        return Err(Error::BlobFormat {
            name: name.into(),
            detail: format!("rank {} above 4", blob.dims.len()),
        });
    }
    let mut dims = [1usize; 4];
    dims[..blob.dims.len()].copy_from_slice(&blob.dims);
    Tensor4::new(dims, blob.data)
}

pub fn save_dataset<T: Scalar>(data: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = encode_blob(&data.inputs().dims(), data.inputs().data());
    bytes.extend(encode_blob(&data.targets().dims(), data.targets().data()));
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (inputs, used) = decode_blob::<T>("inputs", &bytes)?;
    if used == bytes.len() {
        return Err(Error::BlobFormat {
            name: "targets".into(),
            detail: "dataset has no target record".into(),
        });
    }
    let (targets, used2) = decode_blob::<T>("targets", &bytes[used..])?;
    if used + used2 != bytes.len() {
        return Err(Error::BlobFormat {
            name: "targets".into(),
            detail: format!("{} trailing bytes", bytes.len() - used - used2),
        });
    }
    if inputs.dims[0] == 0 || targets.dims[0] == 0 {
        if inputs.dims[0] != targets.dims[0] {
            return Err(Error::Pairing {
                inputs: inputs.dims[0],
                targets: targets.dims[0],
            });
        }
        return Err(Error::EmptyDataset);
    }
    if inputs.dims[0] != targets.dims[0] {
        return Err(Error::Pairing {
            inputs: inputs.dims[0],
            targets: targets.dims[0],
        });
    }
    Dataset::new(pad4("inputs", inputs)?, pad4("targets", targets)?)
}
