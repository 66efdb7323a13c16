//! Plain-text parameter tables and the model manifest that describes them.
//!
//! The table is CSV with the header `tensor_name,flat_index,value`, one row
//! per scalar, tensors in registry order and indices in row-major order of
//! the declared shape. Values use [`crate::decimal::format_f32`], which
//! parses back to the identical float32 bit pattern. The manifest is JSON
//! holding the format version, the model config, every tensor's shape and
//! row count, and the SHA-256 of the table text.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decimal::{format_f32, parse_f32};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, TensorSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const TABLE_HEADER: [&str; 3] = ["tensor_name", "flat_index", "value"];
pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const TABLE_SUFFIX: &str = ".params.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTableRow {
    pub tensor_name: String,
    pub flat_index: usize,
    pub value: f32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestTensor>,
    /// `sha256:` followed by the lowercase hex digest of the table bytes.
    pub checksum: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum ImportError {
    #[error("unsupported manifest format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("malformed table at line {line}: {message}")]
    Table { line: usize, message: String },
    #[error("missing row: tensor {tensor} index {index}")]
    MissingRow { tensor: String, index: usize },
    #[error("duplicate row at line {line}: tensor {tensor} index {index}")]
    DuplicateRow { tensor: String, index: usize, line: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checksum mismatch: manifest says {expected}, table hashes to {actual}")]
    Checksum { expected: String, actual: String },
}

pub fn table_checksum(table: &str) -> String {
    let digest = Sha256::digest(table.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Renders rows as table text with the normative header.
pub fn write_table<'a>(rows: impl IntoIterator<Item = (&'a str, usize, f32)>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(TABLE_HEADER).expect("in-memory write");
    for (name, index, value) in rows {
        w.write_record([name, &index.to_string(), &format_f32(value)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii table")
}

/// Table text for the given tensors, rejecting non-finite values.
pub fn tensor_table(specs: &[TensorSpec], flat: &[Vec<f32>]) -> Result<String> {
    for (s, t) in specs.iter().zip(flat) {
        if let Some(index) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: s.name.clone(),
                index,
            });
        }
    }
    Ok(write_table(specs.iter().zip(flat).flat_map(|(s, t)| {
        t.iter().enumerate().map(move |(i, &v)| (s.name.as_str(), i, v))
    })))
}

/// Parses table text; line numbers in errors are 1-based and count the header.
pub fn parse_table(text: &str) -> Result<Vec<(usize, ParamTableRow)>, ImportError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| ImportError::Table {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(TABLE_HEADER) {
        return Err(ImportError::Table {
            line: 1,
            message: format!("header must be {}", TABLE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| ImportError::Table {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let fail = |message: String| ImportError::Table { line, message };
        let index = rec[1]
            .parse()
            .map_err(|_| fail(format!("bad flat index {:?}", &rec[1])))?;
        let value = parse_f32(&rec[2])
            .filter(|v| v.is_finite())
            .ok_or_else(|| fail(format!("bad value {:?}", &rec[2])))?;
        rows.push((
            line,
            ParamTableRow {
                tensor_name: rec[0].to_string(),
                flat_index: index,
                value,
            },
        ));
    }
    Ok(rows)
}

/// Assembles flat tensors for `specs` from parsed rows, in `specs` order.
pub fn tensors_from_rows(
    specs: &[TensorSpec],
    rows: &[(usize, ParamTableRow)],
) -> Result<Vec<Vec<f32>>, ImportError> {
    let slot: BTreeMap<&str, usize> = specs.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
    let mut values: Vec<Vec<Option<f32>>> = specs.iter().map(|s| vec![None; s.len()]).collect();
    for (line, row) in rows {
        let t = *slot.get(row.tensor_name.as_str()).ok_or_else(|| {
            ImportError::ShapeMismatch(format!(
                "line {line}: tensor {} is not part of the model",
                row.tensor_name
            ))
        })?;
        let cell = values[t].get_mut(row.flat_index).ok_or_else(|| {
            ImportError::ShapeMismatch(format!(
                "line {line}: index {} is outside tensor {} of shape {:?}",
                row.flat_index, row.tensor_name, specs[t].shape
            ))
        })?;
        if cell.is_some() {
            return Err(ImportError::DuplicateRow {
                tensor: row.tensor_name.clone(),
                index: row.flat_index,
                line: *line,
            });
        }
        *cell = Some(row.value);
    }
    specs
        .iter()
        .zip(values)
        .map(|(s, t)| {
            t.into_iter()
                .enumerate()
                .map(|(index, v)| {
                    v.ok_or_else(|| ImportError::MissingRow {
                        tensor: s.name.clone(),
                        index,
                    })
                })
                .collect()
        })
        .collect()
}

/// Serializes `p` into `(manifest text, table text)`.
pub fn export_params(p: &ParamSet, cfg: &ModelConfig) -> Result<(String, String)> {
    p.check(cfg)?;
    let specs = ParamSet::registry(cfg)?;
    let table = tensor_table(&specs, &p.to_flat())?;
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        config: *cfg,
        tensors: specs
            .iter()
            .map(|s| ManifestTensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                rows: s.len(),
            })
            .collect(),
        checksum: table_checksum(&table),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    Ok((text, table))
}

/// Rebuilds the config and parameters from manifest and table text.
///
/// Structure is checked before the checksum so a damaged table reports what
/// is wrong with it rather than only that its digest changed.
pub fn import_params(manifest: &str, table: &str) -> Result<(ModelConfig, ParamSet)> {
    let m: ModelManifest =
        serde_json::from_str(manifest).map_err(|e| ImportError::Manifest(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ImportError::UnsupportedVersion(m.format_version).into());
    }
    m.config
        .validate()
        .map_err(|e| ImportError::Manifest(e.to_string()))?;
    let specs = ParamSet::registry(&m.config)?;
    if m.tensors.len() != specs.len() {
        return Err(ImportError::ShapeMismatch(format!(
            "depth {} model has {} tensors, manifest lists {}",
            m.config.depth,
            specs.len(),
            m.tensors.len()
        ))
        .into());
    }
    for (s, t) in specs.iter().zip(&m.tensors) {
        if s.name != t.name || s.shape != t.shape || t.rows != s.len() {
            return Err(ImportError::ShapeMismatch(format!(
                "manifest entry {} {:?} ({} rows) does not match expected {} {:?}",
                t.name, t.shape, t.rows, s.name, s.shape
            ))
            .into());
        }
    }
    let rows = parse_table(table)?;
    let flat = tensors_from_rows(&specs, &rows)?;
    let actual = table_checksum(table);
    if actual != m.checksum {
        return Err(ImportError::Checksum {
            expected: m.checksum,
            actual,
        }
        .into());
    }
    let p = ParamSet::from_flat(&m.config, flat)?;
    Ok((m.config, p))
}

/// Paths of the manifest and table belonging to a model stem.
pub fn model_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{s}{MANIFEST_SUFFIX}")),
        PathBuf::from(format!("{s}{TABLE_SUFFIX}")),
    )
}

/// The manifest path itself or a bare stem both resolve to the model's two files.
pub fn resolve_model(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.as_os_str().to_string_lossy();
    match s.strip_suffix(MANIFEST_SUFFIX) {
        Some(stem) => model_paths(Path::new(stem)),
        None => model_paths(path),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.manifest.json` and `<stem>.params.csv`, returning their paths.
pub fn save_model(stem: &Path, cfg: &ModelConfig, p: &ParamSet) -> Result<(PathBuf, PathBuf)> {
    let (manifest, table) = export_params(p, cfg)?;
    let (mp, tp) = model_paths(stem);
    write(&tp, &table)?;
    write(&mp, &manifest)?;
    Ok((mp, tp))
}

/// Loads a model given its manifest path or stem.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let (mp, tp) = resolve_model(path);
    let manifest = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let table = fs::read_to_string(&tp).map_err(|e| Error::io(&tp, e))?;
    import_params(&manifest, &table)
}
