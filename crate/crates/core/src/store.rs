//! In-memory embedding tables and the `ESB1` store format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "ESB1" | u32 version=1 | u64 N | u32 dim | u32 K | u8 normalized
//! K x (u16 len, UTF-8 class name)
//! u16 len, UTF-8 prompt template
//! N x u32 label
//! N x (u16 len, UTF-8 sample id)
//! N*dim f32 image embeddings (row-major)
//! K*dim f32 text embeddings (row-major)
//! ```
//!
//! Embeddings are kept exactly as written by the producer. Nothing here
//! normalizes implicitly; callers use [`l2_normalize_rows`] where a cosine
//! is needed.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};

pub const STORE_MAGIC: [u8; 4] = *b"ESB1";
pub const STORE_VERSION: u32 = 1;

/// The dataset under selection: one embedding, label and id per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    embeddings: Array2<f32>,
    labels: Vec<u32>,
    sample_ids: Vec<String>,
    normalized: bool,
}

/// One text embedding per class, built from `prompt_template`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextBank {
    text_embeddings: Array2<f32>,
    class_names: Vec<String>,
    prompt_template: String,
}

impl EmbeddingTable {
    pub fn new(embeddings: Array2<f32>, labels: Vec<u32>, sample_ids: Vec<String>) -> Result<Self> {
        let table = Self {
            embeddings,
            labels,
            sample_ids,
            normalized: false,
        };
        table.validate()?;
        Ok(table)
    }

    /// Marks the rows as already unit-normalized. Only recorded in the header.
    pub fn with_normalized_flag(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.embeddings.nrows();
        if n == 0 {
            return Err(Error::SpecInvalid("embedding table needs at least one row".into()));
        }
        if self.dim() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                found: self.dim(),
            });
        }
        for len in [self.labels.len(), self.sample_ids.len()] {
            if len != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        check_finite(self.embeddings.view(), "image embeddings", 0)?;
        check_row_norms(self.embeddings.view())
    }

    pub fn n(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f32> {
        self.embeddings.view()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Rows `rows` as a new table, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let embeddings = self.embeddings.select(ndarray::Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let sample_ids = rows.iter().map(|&r| self.sample_ids[r].clone()).collect();
        Ok(Self::new(embeddings, labels, sample_ids)?.with_normalized_flag(self.normalized))
    }

    /// Sample count per class, indexed by label.
    pub fn class_sizes(&self, classes: usize) -> Vec<usize> {
        let mut sizes = vec![0; classes];
        for &label in &self.labels {
            if (label as usize) < classes {
                sizes[label as usize] += 1;
            }
        }
        sizes
    }
}

impl ClassTextBank {
    pub fn new(
        text_embeddings: Array2<f32>,
        class_names: Vec<String>,
        prompt_template: impl Into<String>,
    ) -> Result<Self> {
        let bank = Self {
            text_embeddings,
            class_names,
            prompt_template: prompt_template.into(),
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        let k = self.text_embeddings.nrows();
        if k == 0 {
            return Err(Error::SpecInvalid("class text bank needs at least one class".into()));
        }
        if self.class_names.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                found: self.class_names.len(),
            });
        }
        let mut seen = HashSet::with_capacity(k);
        for name in &self.class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateClassName(name.clone()));
            }
        }
        check_finite(self.text_embeddings.view(), "text embeddings", 0)?;
        check_row_norms(self.text_embeddings.view())
    }

    pub fn k(&self) -> usize {
        self.text_embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.text_embeddings.ncols()
    }

    pub fn text_embeddings(&self) -> ArrayView2<'_, f32> {
        self.text_embeddings.view()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prompt_template(&self) -> &str {
        &self.prompt_template
    }
}

/// Checks the invariants that tie a table to its text bank.
pub fn validate_pair(table: &EmbeddingTable, bank: &ClassTextBank) -> Result<()> {
    if table.dim() != bank.dim() {
        return Err(Error::DimensionMismatch {
            expected: table.dim(),
            found: bank.dim(),
        });
    }
    for (row, &label) in table.labels.iter().enumerate() {
        if label as usize >= bank.k() {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: bank.k(),
            });
        }
    }
    Ok(())
}

fn check_finite(m: ArrayView2<'_, f32>, matrix: &'static str, base_offset: usize) -> Result<()> {
    let dim = m.ncols();
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                matrix,
                row,
                col,
                offset: base_offset + 4 * (row * dim + col),
            });
        }
    }
    Ok(())
}

fn row_norm(row: ndarray::ArrayView1<'_, f32>) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

fn check_row_norms(m: ArrayView2<'_, f32>) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row_norm(row);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::ZeroNormRow(i));
        }
    }
    Ok(())
}

/// Scales every row to unit L2 norm. Norms are accumulated in f64.
pub fn l2_normalize_rows(matrix: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    let mut out = matrix.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row_norm(row.view());
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::ZeroNormRow(i));
        }
        row.mapv_inplace(|v| (f64::from(v) / norm) as f32);
    }
    Ok(out)
}

/// Widens to f64 and scales every row to unit L2 norm.
pub fn normalized_rows_f64(matrix: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    let mut out = matrix.mapv(f64::from);
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::ZeroNormRow(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Header fields of an `ESB1` file, as printed by `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoreHeader {
    pub version: u32,
    pub n: u64,
    pub dim: u32,
    pub k: u32,
    pub normalized: bool,
    pub class_names: Vec<String>,
    pub prompt_template: String,
    pub file_bytes: usize,
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, needed: usize) -> Result<&'a [u8]> {
        if needed > self.remaining() {
            return Err(Error::TruncatedFile {
                offset: self.pos,
                needed,
                available: self.remaining(),
            });
        }
        let bytes = &self.buf[self.pos..self.pos + needed];
        self.pos += needed;
        Ok(bytes)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = match self.take(4) {
            Ok(b) => b.try_into().expect("4 bytes"),
            Err(_) => {
                let mut partial = [0u8; 4];
                partial[..self.buf.len()].copy_from_slice(self.buf);
                return Err(Error::MagicMismatch {
                    expected,
                    found: partial,
                });
            }
        };
        if found != expected {
            return Err(Error::MagicMismatch { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let start = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::InvalidUtf8(start))
    }

    /// Reads `count` f32 values, checking the byte budget before allocating.
    pub(crate) fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let needed = count.checked_mul(4).ok_or(Error::TruncatedFile {
            offset: self.pos,
            needed: usize::MAX,
            available: self.remaining(),
        })?;
        let bytes = self.take(needed)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let needed = count.checked_mul(8).ok_or(Error::TruncatedFile {
            offset: self.pos,
            needed: usize::MAX,
            available: self.remaining(),
        })?;
        let bytes = self.take(needed)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Fails with `TruncatedFile` unless at least `count * width` bytes remain.
    pub(crate) fn require(&self, count: u64, width: u64) -> Result<()> {
        let needed = count.saturating_mul(width);
        if needed > self.remaining() as u64 {
            return Err(Error::TruncatedFile {
                offset: self.pos,
                needed: usize::try_from(needed).unwrap_or(usize::MAX),
                available: self.remaining(),
            });
        }
        Ok(())
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::SpecInvalid(format!("string of {} bytes exceeds u16 length prefix", s.len())))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_header(r: &mut ByteReader<'_>) -> Result<StoreHeader> {
    r.magic(STORE_MAGIC)?;
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let n = r.u64()?;
    let dim = r.u32()?;
    let k = r.u32()?;
    let normalized = r.u8()? != 0;
    // Each class name costs at least its 2-byte length prefix.
    r.require(u64::from(k), 2)?;
    let class_names = (0..k).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let prompt_template = r.string()?;
    Ok(StoreHeader {
        version,
        n,
        dim,
        k,
        normalized,
        class_names,
        prompt_template,
        file_bytes: r.buf.len(),
    })
}

/// Parses only the fixed header and the class/prompt strings.
pub fn inspect_bytes(bytes: &[u8]) -> Result<StoreHeader> {
    read_header(&mut ByteReader::new(bytes))
}

pub fn inspect_store(path: impl AsRef<Path>) -> Result<StoreHeader> {
    inspect_bytes(&fs::read(path)?)
}

/// Decodes and fully validates an `ESB1` byte buffer.
pub fn decode_store(bytes: &[u8]) -> Result<(EmbeddingTable, ClassTextBank)> {
    let mut r = ByteReader::new(bytes);
    let header = read_header(&mut r)?;
    let k = header.k as usize;
    let dim = header.dim as usize;

    r.require(header.n, 4)?;
    let n = usize::try_from(header.n).map_err(|_| Error::SpecInvalid("N does not fit in memory".into()))?;
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let label = r.u32()?;
        if label as usize >= k {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: k,
            });
        }
        labels.push(label);
    }

    r.require(header.n, 2)?;
    let sample_ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;

    let image_offset = r.offset();
    let image = r.f32s(n.saturating_mul(dim))?;
    let text_offset = r.offset();
    let text = r.f32s(k.saturating_mul(dim))?;
    if r.remaining() != 0 {
        return Err(Error::TrailingBytes(r.remaining()));
    }

    let image = Array2::from_shape_vec((n, dim), image).expect("length checked");
    let text = Array2::from_shape_vec((k, dim), text).expect("length checked");
    check_finite(image.view(), "image embeddings", image_offset)?;
    check_finite(text.view(), "text embeddings", text_offset)?;

    let table = EmbeddingTable::new(image, labels, sample_ids)?.with_normalized_flag(header.normalized);
    let bank = ClassTextBank::new(text, header.class_names, header.prompt_template)?;
    validate_pair(&table, &bank)?;
    Ok((table, bank))
}

pub fn encode_store(table: &EmbeddingTable, bank: &ClassTextBank) -> Result<Vec<u8>> {
    table.validate()?;
    bank.validate()?;
    validate_pair(table, bank)?;

    let (n, dim, k) = (table.n(), table.dim(), bank.k());
    let mut out = Vec::with_capacity(32 + 4 * n * (dim + 2) + 4 * k * dim);
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.push(u8::from(table.normalized));
    for name in &bank.class_names {
        put_string(&mut out, name)?;
    }
    put_string(&mut out, &bank.prompt_template)?;
    for label in &table.labels {
        out.extend_from_slice(&label.to_le_bytes());
    }
    for id in &table.sample_ids {
        put_string(&mut out, id)?;
    }
    for v in table.embeddings.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in bank.text_embeddings.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn load_store(path: impl AsRef<Path>) -> Result<(EmbeddingTable, ClassTextBank)> {
    decode_store(&fs::read(path)?)
}

/// Writes `table` and `bank` as `ESB1`. Fails before touching `path` if
/// either violates its invariants.
pub fn save_store(table: &EmbeddingTable, bank: &ClassTextBank, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_store(table, bank)?;
    fs::write(path, bytes)?;
    Ok(())
}
