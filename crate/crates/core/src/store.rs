//! Embedding matrices and the sample manifests aligned with them.
//!
//! An embedding file holds a dense `N x D` matrix of `f32` values in a small
//! fixed binary layout:
//!
//! | bytes   | content                                      |
//! |---------|----------------------------------------------|
//! | 0..8    | ASCII magic `A3REMB01`                       |
//! | 8..12   | `N`, `u32` little-endian                     |
//! | 12..16  | `D`, `u32` little-endian                     |
//! | 16      | dtype code, `0x01` = IEEE-754 binary32 LE    |
//! | 17..20  | zero padding                                 |
//! | 20..    | `N * D * 4` payload bytes, row-major         |
//!
//! Ids are not stored in the binary file. Row `i` of a matrix aligns with
//! line `i` of its JSON-lines [`Manifest`].

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"A3REMB01";
pub const HEADER_LEN: usize = 20;
pub const DTYPE_F32_LE: u8 = 0x01;

const MIN_NORM: f64 = 1e-12;

/// Dense row-major matrix of embeddings, one embedding per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation(
                "embedding dimension must be at least 1".into(),
            ));
        }
        if data.len() != rows * dim {
            return Err(Error::Validation(format!(
                "data length {} does not equal {rows} x {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    /// Builds a matrix from a list of equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    /// An `0 x dim` matrix.
    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(0, dim, Vec::new())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Row `i`. Panics when `i >= rows()`.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Copies the listed rows, in the listed order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<EmbeddingMatrix> {
        Self::new(
            self.rows,
            self.dim,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Scales every row to unit Euclidean norm.
///
/// Norms are accumulated in `f64`. A row whose norm is below `1e-12` is
/// rejected rather than skipped.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, row) in m.iter_rows().enumerate() {
        let norm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm < MIN_NORM {
            return Err(Error::DegenerateRow { row: i });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    EmbeddingMatrix::new(m.rows, m.dim, data)
}

/// Reads an embedding file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix> {
    let format_err = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] == MAGIC {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        return Err(format_err("file too short for an A3REMB01 header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(format_err("bad magic, expected A3REMB01"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes[16] != DTYPE_F32_LE {
        return Err(format_err(&format!(
            "unsupported dtype code {:#04x}",
            bytes[16]
        )));
    }
    if bytes[17..20] != [0, 0, 0] {
        return Err(format_err("non-zero header padding"));
    }
    if dim == 0 {
        return Err(format_err("dimension must be at least 1"));
    }
    let expected = HEADER_LEN as u64 + 4 * rows as u64 * dim as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(rows, dim, data)
}

/// Serializes a matrix into the binary layout described at module level.
pub fn encode_embeddings(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    out.extend_from_slice(&[DTYPE_F32_LE, 0, 0, 0]);
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes an embedding file, replacing any existing file atomically.
pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    if m.rows > u32::MAX as usize || m.dim > u32::MAX as usize {
        return Err(Error::Validation(
            "matrix too large for a u32 header".into(),
        ));
    }
    write_atomic(path.as_ref(), &encode_embeddings(m))
}

/// Writes `bytes` to a temporary file next to `path` and renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// One sample: an id plus optional text, image path, attribute slots and a
/// class label.
///
/// An attribute slot mapped to `null` is present but unfilled, which makes
/// it eligible for augmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, Option<String>>,
    #[serde(default)]
    pub label: Option<String>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>) -> Self {
        SampleRecord {
            id: id.into(),
            text: None,
            image: None,
            attributes: BTreeMap::new(),
            label: None,
        }
    }

    /// The value of `slot`, if the slot is present and filled.
    pub fn attribute(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).and_then(|v| v.as_deref())
    }
}

/// Ordered list of records; record `i` describes embedding row `i`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    records: Vec<SampleRecord>,
}

impl Manifest {
    /// Wraps records after checking ids are non-empty and unique.
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.id.is_empty() {
                return Err(Error::Validation(format!("record {i} has an empty id")));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(Manifest { records })
    }

    /// A manifest whose ids are the given strings and nothing else.
    pub fn from_ids<S: Into<String>>(ids: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(ids.into_iter().map(SampleRecord::new).collect())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn id(&self, i: usize) -> &str {
        &self.records[i].id
    }

    pub fn into_records(self) -> Vec<SampleRecord> {
        self.records
    }

    /// Checks that this manifest can describe the rows of `m`.
    pub fn check_aligned(&self, m: &EmbeddingMatrix, what: &str) -> Result<()> {
        if self.len() != m.rows() {
            return Err(Error::Validation(format!(
                "{what}: manifest has {} records but the embedding matrix has {} rows",
                self.len(),
                m.rows()
            )));
        }
        Ok(())
    }
}

/// Reads a JSON-lines manifest. Blank lines are ignored.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_json_lines::<SampleRecord>(&text, path)?;
    Manifest::new(records).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes a manifest as JSON lines.
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in manifest.records() {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

/// Parses one JSON value per non-blank line, reporting 1-based line numbers.
pub(crate) fn parse_json_lines<T: serde::de::DeserializeOwned>(
    text: &str,
    path: &Path,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}
