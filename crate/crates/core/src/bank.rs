//! Feature banks, linear heads, and their on-disk formats.
//!
//! A [`FeatureBank`] is an `n x m` row-major matrix of `f32` features with
//! optional integer class labels. Reductions over a bank (means, covariances,
//! percentiles) are carried out in `f64`.
//!
//! Binary bank layout (little-endian):
//!
//! ```text
//! "FBNK" | version u32 = 1 | n u64 | m u32 | labels-flag u8 | 3 zero bytes
//! n*m f32 row-major | (flag = 1) n i32 labels
//! ```
//!
//! Linear head layout: `"FHED" | version u32 = 1 | c u32 | m u32 | c*m f32 | c f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"FBNK";
pub const HEAD_MAGIC: &[u8; 4] = b"FHED";
pub const FORMAT_VERSION: u32 = 1;

const BANK_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankFormat {
    Binary,
    /// Comma-separated floats, one sample per row. When `labels` is set the
    /// final column is parsed as an integer class label.
    Csv {
        labels: bool,
    },
}

impl BankFormat {
    /// Picks CSV for `.csv` / `.txt` extensions and binary otherwise.
    pub fn from_path(path: &Path, labels: bool) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") || ext.eq_ignore_ascii_case("txt") => {
                BankFormat::Csv { labels }
            }
            _ => BankFormat::Binary,
        }
    }
}

/// An `n x m` matrix of training (or query) features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    n: usize,
    m: usize,
    data: Vec<f32>,
    labels: Option<Vec<i32>>,
}

impl FeatureBank {
    /// Builds a validated bank from row-major data.
    pub fn new(n: usize, m: usize, data: Vec<f32>, labels: Option<Vec<i32>>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::invalid(format!(
                "feature bank must be non-empty, got n={n}, m={m}"
            )));
        }
        let expected = n
            .checked_mul(m)
            .ok_or_else(|| Error::invalid(format!("bank size {n}x{m} overflows")))?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "bank data length",
                expected,
                found: data.len(),
            });
        }
        if let Some((idx, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / m,
                col: idx % m,
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "label count",
                    expected: n,
                    found: labels.len(),
                });
            }
            if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l < 0) {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: label as i64,
                    classes: i32::MAX as usize,
                });
            }
        }
        Ok(FeatureBank { n, m, data, labels })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let m = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * m);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != m {
                return Err(Error::Ragged {
                    row: i,
                    expected: m,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        FeatureBank::new(rows.len(), m, data, None)
    }

    pub fn with_labels(self, labels: Vec<i32>) -> Result<Self> {
        FeatureBank::new(self.n, self.m, self.data, Some(labels))
    }

    /// Replaces the feature matrix, keeping labels. Used by transforms that
    /// preserve shape.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        FeatureBank {
            n: self.n,
            m: self.m,
            data,
            labels: self.labels.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.m)
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.m + j]
    }

    /// Number of classes implied by the labels (`max + 1`), if labelled.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map(|&max| max as usize + 1)
    }

    /// Checks that every label is below `classes`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            for (row, &label) in labels.iter().enumerate() {
                if label < 0 || label as usize >= classes {
                    return Err(Error::LabelOutOfRange {
                        row,
                        label: label as i64,
                        classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn ensure_dim(&self, what: &'static str, m: usize) -> Result<()> {
        if self.m != m {
            return Err(Error::DimensionMismatch {
                what,
                expected: m,
                found: self.m,
            });
        }
        Ok(())
    }
}

/// A single feature vector, held in `f64` because it is the result of a
/// reduction over a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(col) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        Ok(FeatureVector(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Column means of the bank, accumulated in `f64`.
pub fn mean_vector(bank: &FeatureBank) -> FeatureVector {
    let mut sums = vec![0.0f64; bank.m];
    for row in bank.rows() {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    let n = bank.n as f64;
    FeatureVector(sums.into_iter().map(|s| s / n).collect())
}

/// Scales one row to unit Euclidean norm in place. Zero rows stay zero.
pub fn l2_normalize(row: &mut [f32]) {
    let norm = row
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
}

/// Returns a copy of the bank with every row scaled to unit norm. Zero rows
/// are passed through unchanged.
pub fn l2_normalize_rows(bank: &FeatureBank) -> FeatureBank {
    let mut data = bank.data.clone();
    for row in data.chunks_exact_mut(bank.m) {
        l2_normalize(row);
    }
    bank.with_data(data)
}

/// A linear classifier head `logits = W z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    c: usize,
    m: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl LinearHead {
    pub fn new(c: usize, m: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if c == 0 || m == 0 {
            return Err(Error::invalid(format!(
                "linear head must be non-empty, got c={c}, m={m}"
            )));
        }
        if weights.len() != c * m {
            return Err(Error::DimensionMismatch {
                what: "head weights length",
                expected: c * m,
                found: weights.len(),
            });
        }
        if bias.len() != c {
            return Err(Error::DimensionMismatch {
                what: "head bias length",
                expected: c,
                found: bias.len(),
            });
        }
        if let Some(idx) = weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / m,
                col: idx % m,
            });
        }
        if let Some(col) = bias.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: c, col });
        }
        Ok(LinearHead {
            c,
            m,
            weights,
            bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Logits for one feature row, accumulated in `f64`.
    pub fn logits(&self, z: &[f32]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.m);
        self.weights
            .chunks_exact(self.m)
            .zip(&self.bias)
            .map(|(w, &b)| {
                w.iter()
                    .zip(z)
                    .map(|(&w, &x)| w as f64 * x as f64)
                    .sum::<f64>()
                    + b as f64
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Binary I/O

fn read_array<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format(what, format!("truncated input: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    read_array::<4>(r, what).map(u32::from_le_bytes)
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let found = read_array::<4>(r, what)?;
    if &found != magic {
        return Err(Error::format(
            what,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = read_u32(r, what)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            what,
            format!("unsupported version {version}"),
        ));
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, count: usize, what: &'static str) -> Result<Vec<f32>> {
    const CHUNK: usize = 1 << 16;
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; CHUNK.min(count) * 4];
    let mut remaining = count;
    while remaining > 0 {
        let take = remaining.min(CHUNK);
        let bytes = &mut buf[..take * 4];
        r.read_exact(bytes)
            .map_err(|e| Error::format(what, format!("truncated payload: {e}")))?;
        out.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= take;
    }
    Ok(out)
}

pub(crate) fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    for chunk in values.chunks(1 << 14) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn ensure_at_end(r: &mut impl Read, what: &'static str) -> Result<()> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::format(what, "trailing bytes after payload")),
        Err(e) => Err(Error::format(what, e.to_string())),
    }
}

pub fn read_bank(r: &mut impl Read) -> Result<FeatureBank> {
    const WHAT: &str = "bank file";
    check_magic(r, BANK_MAGIC, WHAT)?;
    let n = u64::from_le_bytes(read_array::<8>(r, WHAT)?);
    let m = read_u32(r, WHAT)? as usize;
    let [flag, r0, r1, r2] = read_array::<4>(r, WHAT)?;
    if flag > 1 {
        return Err(Error::format(
            WHAT,
            format!("labels flag must be 0 or 1, got {flag}"),
        ));
    }
    if [r0, r1, r2] != [0, 0, 0] {
        return Err(Error::format(WHAT, "reserved header bytes are not zero"));
    }
    let n = usize::try_from(n).map_err(|_| Error::format(WHAT, format!("n={n} too large")))?;
    if n == 0 || m == 0 {
        return Err(Error::format(WHAT, format!("empty bank n={n}, m={m}")));
    }
    let count = n
        .checked_mul(m)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| Error::format(WHAT, format!("n*m overflows for n={n}, m={m}")))?;
    let data = read_f32s(r, count, WHAT)?;
    let labels = if flag == 1 {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(i32::from_le_bytes(read_array::<4>(r, WHAT)?));
        }
        Some(labels)
    } else {
        None
    };
    ensure_at_end(r, WHAT)?;
    FeatureBank::new(n, m, data, labels)
}

pub fn write_bank(bank: &FeatureBank, w: &mut impl Write) -> std::io::Result<()> {
    let mut header = [0u8; BANK_HEADER_LEN];
    header[0..4].copy_from_slice(BANK_MAGIC);
    header[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[8..16].copy_from_slice(&(bank.n as u64).to_le_bytes());
    header[16..20].copy_from_slice(&(bank.m as u32).to_le_bytes());
    header[20] = bank.labels.is_some() as u8;
    w.write_all(&header)?;
    write_f32s(w, &bank.data)?;
    if let Some(labels) = &bank.labels {
        let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_head(r: &mut impl Read) -> Result<LinearHead> {
    const WHAT: &str = "head file";
    check_magic(r, HEAD_MAGIC, WHAT)?;
    let c = read_u32(r, WHAT)? as usize;
    let m = read_u32(r, WHAT)? as usize;
    if c == 0 || m == 0 {
        return Err(Error::format(WHAT, format!("empty head c={c}, m={m}")));
    }
    let weights = read_f32s(r, c * m, WHAT)?;
    let bias = read_f32s(r, c, WHAT)?;
    ensure_at_end(r, WHAT)?;
    LinearHead::new(c, m, weights, bias)
}

pub fn write_head(head: &LinearHead, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(HEAD_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(head.c as u32).to_le_bytes())?;
    w.write_all(&(head.m as u32).to_le_bytes())?;
    write_f32s(w, &head.weights)?;
    write_f32s(w, &head.bias)
}

// ---------------------------------------------------------------------------
// CSV

/// Parses CSV text into a bank. Blank lines are skipped.
pub fn parse_csv(text: &str, labels: bool) -> Result<FeatureBank> {
    let mut data = Vec::new();
    let mut label_vec = Vec::new();
    let mut width: Option<usize> = None;
    let mut row = 0usize;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = *width.get_or_insert(cells.len());
        if cells.len() != expected {
            return Err(Error::Ragged {
                row,
                expected,
                found: cells.len(),
            });
        }
        let (features, label) = if labels {
            if cells.len() < 2 {
                return Err(Error::format(
                    "CSV bank",
                    "labelled rows need at least one feature column and a label column",
                ));
            }
            let (f, l) = cells.split_at(cells.len() - 1);
            (f, Some(l[0]))
        } else {
            (&cells[..], None)
        };
        for (col, cell) in features.iter().enumerate() {
            let v: f32 = cell.parse().map_err(|_| {
                Error::format(
                    "CSV bank",
                    format!("row {row}, column {col}: cannot parse {cell:?}"),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            data.push(v);
        }
        if let Some(cell) = label {
            let l: i64 = cell.parse().map_err(|_| {
                Error::format(
                    "CSV bank",
                    format!("row {row}: label {cell:?} is not an integer"),
                )
            })?;
            if l < 0 || l > i32::MAX as i64 {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: l,
                    classes: i32::MAX as usize,
                });
            }
            label_vec.push(l as i32);
        }
        row += 1;
    }
    let width = width.ok_or_else(|| Error::format("CSV bank", "no rows"))?;
    let m = if labels { width - 1 } else { width };
    FeatureBank::new(row, m, data, labels.then_some(label_vec))
}

/// Formats a bank as CSV. Labels, when present and requested, go in the
/// last column.
pub fn format_csv(bank: &FeatureBank, labels: bool) -> String {
    let mut out = String::new();
    for (i, row) in bank.rows().enumerate() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&v.to_string());
        }
        if let (true, Some(l)) = (labels, bank.labels()) {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Path helpers

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>, format: BankFormat) -> Result<FeatureBank> {
    let path = path.as_ref();
    match format {
        BankFormat::Binary => read_bank(&mut open(path)?),
        BankFormat::Csv { labels } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, labels)
        }
    }
}

/// Writes the bank in the binary format.
pub fn save_bank(bank: &FeatureBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_bank(bank, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_head(path: impl AsRef<Path>) -> Result<LinearHead> {
    let path = path.as_ref();
    read_head(&mut open(path)?)
}

pub fn save_head(head: &LinearHead, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_head(head, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
