//! Embedding matrices, their JSON manifests, the EMBX on-disk format and the
//! target × text similarity cache.
//!
//! EMBX v1 layout (all little-endian):
//!
//! ```text
//! offset  size         field
//! 0       4            magic "EMBX" (0x45 0x4D 0x42 0x58)
//! 4       4            version: u32 = 1
//! 8       8            rows: u64
//! 16      8            dims: u64
//! 24      rows*dims*4  f32 payload, row-major
//! ```
//!
//! Every `foo.embx` has a sidecar `foo.manifest.json` describing what the rows
//! are (see [`Manifest`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBX_MAGIC: [u8; 4] = *b"EMBX";
pub const EMBX_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Rows shorter than this cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Dense row-major matrix of 32-bit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dims {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{dims} matrix",
                data.len()
            )));
        }
        Ok(EmbeddingMatrix {
            rows,
            dims,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dims = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dims);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dims {
                return Err(Error::Shape(format!(
                    "row {i} has {} dims, expected {dims}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dims, data)
    }

    pub fn zeros(rows: usize, dims: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dims,
            data: vec![0.0; rows * dims],
            normalized: false,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        self.normalized = false;
        &mut self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact on a zero-width matrix would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    /// New matrix holding the given rows, in order. Keeps the normalized flag.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: indices.len(),
            dims: self.dims,
            data,
            normalized: self.normalized,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &EmbeddingMatrix) -> Result<Self> {
        if self.dims != other.dims && !self.is_empty() && !other.is_empty() {
            return Err(Error::Shape(format!(
                "cannot stack {}-dim rows onto {}-dim rows",
                other.dims, self.dims
            )));
        }
        let dims = if self.is_empty() {
            other.dims
        } else {
            self.dims
        };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(EmbeddingMatrix {
            rows: self.rows + other.rows,
            dims,
            data,
            normalized: self.normalized && other.normalized,
        })
    }

    /// Fails on the first NaN or infinite entry.
    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at row {}, col {}",
                self.data[pos],
                pos / self.dims.max(1),
                pos % self.dims.max(1)
            )));
        }
        Ok(())
    }

    /// Euclidean norm of each row, accumulated in f64.
    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(norm64).collect()
    }
}

pub(crate) fn norm64(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = m.clone();
    let dims = out.dims;
    for (row, chunk) in out.data.chunks_mut(dims.max(1)).enumerate() {
        let norm = norm64(chunk);
        if norm < MIN_ROW_NORM || !norm.is_finite() {
            return Err(Error::DegenerateRow { row, norm });
        }
        for v in chunk.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    out.normalized = true;
    Ok(out)
}

/// What the rows of an embedding file stand for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceImages,
    TargetImages,
    SourceClassnames,
    NounVocab,
    /// A d×d adapter checkpoint.
    Adapter,
}

impl Role {
    pub fn is_text(self) -> bool {
        matches!(self, Role::SourceClassnames | Role::NounVocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: Role,
    /// Class names or nouns; empty for image matrices.
    #[serde(default)]
    pub names: Vec<String>,
    /// Per-row class ids. Required for source images.
    #[serde(default)]
    pub labels: Option<Vec<u32>>,
    pub count: usize,
}

impl Manifest {
    pub fn images(role: Role, labels: Option<Vec<u32>>, count: usize) -> Self {
        Manifest {
            role,
            names: Vec::new(),
            labels,
            count,
        }
    }

    pub fn texts(role: Role, names: Vec<String>) -> Self {
        Manifest {
            role,
            count: names.len(),
            names,
            labels: None,
        }
    }

    /// Checks the manifest against the matrix it describes.
    pub fn check_against(&self, m: &EmbeddingMatrix) -> Result<()> {
        if self.count != m.rows() {
            return Err(Error::Consistency(format!(
                "{:?} manifest count {} but matrix has {} rows",
                self.role,
                self.count,
                m.rows()
            )));
        }
        if self.role.is_text() && self.names.len() != self.count {
            return Err(Error::Consistency(format!(
                "{:?} manifest lists {} names for {} rows",
                self.role,
                self.names.len(),
                self.count
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.count {
                return Err(Error::Consistency(format!(
                    "{:?} manifest has {} labels for {} rows",
                    self.role,
                    labels.len(),
                    self.count
                )));
            }
        }
        if self.role == Role::SourceImages && self.labels.is_none() {
            return Err(Error::Consistency(
                "source_images manifest must carry labels".into(),
            ));
        }
        Ok(())
    }
}

/// `dir/foo.embx` -> `dir/foo.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

/// Serializes a matrix in EMBX v1.
pub fn write_embx<W: Write>(mut w: W, m: &EmbeddingMatrix) -> std::io::Result<()> {
    w.write_all(&EMBX_MAGIC)?;
    w.write_all(&EMBX_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.dims as u64).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Parses an EMBX v1 byte stream. `origin` is only used in error messages.
pub fn read_embx<R: Read>(mut r: R, origin: &Path) -> Result<EmbeddingMatrix> {
    let format_err = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| format_err("file shorter than the 24-byte header".into()))?;
    if header[..4] != EMBX_MAGIC {
        return Err(format_err(format!("bad magic {:02x?}", &header[..4])));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != EMBX_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let dims = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let n = rows
        .checked_mul(dims)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| format_err(format!("{rows}x{dims} payload does not fit in memory")))?;

    let mut payload = Vec::with_capacity(n);
    r.read_to_end(&mut payload)
        .map_err(|e| format_err(format!("read failed: {e}")))?;
    if payload.len() != n {
        return Err(format_err(format!(
            "expected {n} payload bytes for {rows}x{dims}, found {}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingMatrix::new(rows as usize, dims as usize, data)
}

/// Writes `path` and its sidecar manifest.
pub fn save_embeddings(path: &Path, m: &EmbeddingMatrix, manifest: &Manifest) -> Result<()> {
    manifest.check_against(m)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embx(BufWriter::new(file), m).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&mpath, e))?;
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
}

/// Loads and validates an EMBX file plus its manifest. The matrix is returned
/// un-normalized.
pub fn load_embeddings(path: &Path) -> Result<(EmbeddingMatrix, Manifest)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let m = read_embx(BufReader::new(file), path)?;
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    manifest.check_against(&m)?;
    m.check_finite()?;
    if manifest.role.is_text() {
        for (row, norm) in m.row_norms().into_iter().enumerate() {
            if norm < MIN_ROW_NORM {
                return Err(Error::DegenerateRow { row, norm });
            }
        }
    }
    Ok((m, manifest))
}

/// Source class-name embeddings stacked above the noun vocabulary. Column `j`
/// of a [`SimilarityCache`] built from `matrix` is a source class for
/// `j < n_source` and noun `j - n_source` otherwise.
#[derive(Debug, Clone)]
pub struct TextBank {
    pub matrix: EmbeddingMatrix,
    pub n_source: usize,
}

impl TextBank {
    pub fn new(source_names: &EmbeddingMatrix, nouns: &EmbeddingMatrix) -> Result<Self> {
        if !source_names.is_normalized() || !nouns.is_normalized() {
            return Err(Error::Domain("text embeddings must be normalized".into()));
        }
        Ok(TextBank {
            matrix: source_names.vstack(nouns)?,
            n_source: source_names.rows(),
        })
    }

    pub fn n_nouns(&self) -> usize {
        self.matrix.rows() - self.n_source
    }

    pub fn source_centers(&self) -> EmbeddingMatrix {
        let idx: Vec<usize> = (0..self.n_source).collect();
        self.matrix.select_rows(&idx)
    }
}

/// Cosine similarities between every target row and every text row.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityCache {
    n_targets: usize,
    n_columns: usize,
    data: Vec<f32>,
}

impl SimilarityCache {
    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    pub fn get(&self, target: usize, column: usize) -> f32 {
        self.data[target * self.n_columns + column]
    }

    /// All similarities of one target sample.
    pub fn target_row(&self, target: usize) -> &[f32] {
        &self.data[target * self.n_columns..(target + 1) * self.n_columns]
    }
}

pub fn build_similarity_cache(
    targets: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
) -> Result<SimilarityCache> {
    if !targets.is_normalized() || !texts.is_normalized() {
        return Err(Error::Domain(
            "similarity cache needs normalized inputs".into(),
        ));
    }
    if targets.dims() != texts.dims() {
        return Err(Error::Shape(format!(
            "target dims {} != text dims {}",
            targets.dims(),
            texts.dims()
        )));
    }
    let n_columns = texts.rows();
    let mut data = vec![0f32; targets.rows() * n_columns];
    if n_columns > 0 {
        data.par_chunks_mut(n_columns)
            .enumerate()
            .for_each(|(i, out)| {
                let z = targets.row(i);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot64(z, texts.row(j)) as f32;
                }
            });
    }
    Ok(SimilarityCache {
        n_targets: targets.rows(),
        n_columns,
        data,
    })
}
