//! Binary file formats.
//!
//! All three share a 12-byte header: a 4-byte magic followed by two u32
//! little-endian dimensions.
//!
//! | magic  | dims  | payload                                             |
//! |--------|-------|-----------------------------------------------------|
//! | `PLLF` | N, d  | N·d f32 LE, row-major                               |
//! | `PLLC` | N, K  | N rows of ⌈K/8⌉ bytes, bit j = class j, LSB-first   |
//! | `PLLY` | N, K  | N u32 LE labels, each < K                           |
//!
//! A file must be exactly header + payload long; trailing bytes are rejected.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::data::{CandidateMatrix, ConfidenceMatrix, FeatureMatrix};
use crate::error::{Error, FormatError, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"PLLF";
pub const CANDIDATES_MAGIC: &[u8; 4] = b"PLLC";
pub const LABELS_MAGIC: &[u8; 4] = b"PLLY";
const HEADER_LEN: usize = 12;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn with_path<T>(path: &Path, r: std::result::Result<T, FormatError>) -> Result<T> {
    r.map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

fn header(bytes: &[u8], magic: &[u8; 4]) -> std::result::Result<(usize, usize), FormatError> {
    if bytes.len() < HEADER_LEN {
        // A short file with the wrong magic is still reported as truncated:
        // there is no header to speak of.
        return Err(FormatError::TruncatedHeader {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let a = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let b = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    Ok((a, b))
}

fn check_payload(bytes: &[u8], expected: usize) -> std::result::Result<&[u8], FormatError> {
    let actual = bytes.len() - HEADER_LEN;
    if actual < expected {
        return Err(FormatError::TruncatedPayload { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::TrailingBytes { expected, actual });
    }
    Ok(&bytes[HEADER_LEN..])
}

fn put_header(
    out: &mut Vec<u8>,
    magic: &[u8; 4],
    a: usize,
    b: usize,
) -> std::result::Result<(), FormatError> {
    let a =
        u32::try_from(a).map_err(|_| FormatError::Invalid(format!("dimension {a} exceeds u32")))?;
    let b =
        u32::try_from(b).map_err(|_| FormatError::Invalid(format!("dimension {b} exceeds u32")))?;
    out.extend_from_slice(magic);
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&b.to_le_bytes());
    Ok(())
}

pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<Array2<f32>, FormatError> {
    let (n, d) = header(bytes, MATRIX_MAGIC)?;
    let payload = check_payload(bytes, n * d * 4)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((n, d), values).expect("payload length checked"))
}

pub fn encode_matrix(m: &Array2<f32>) -> std::result::Result<Vec<u8>, FormatError> {
    let (n, d) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * 4);
    put_header(&mut out, MATRIX_MAGIC, n, d)?;
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_candidates(bytes: &[u8]) -> std::result::Result<CandidateMatrix, FormatError> {
    let (n, k) = header(bytes, CANDIDATES_MAGIC)?;
    let row_bytes = k.div_ceil(8);
    let payload = check_payload(bytes, n * row_bytes)?;
    if row_bytes == 0 && n > 0 {
        return Err(FormatError::EmptyCandidateSet { row: 0 });
    }
    for (row, chunk) in payload.chunks_exact(row_bytes.max(1)).enumerate() {
        if chunk.iter().all(|&b| b == 0) {
            return Err(FormatError::EmptyCandidateSet { row });
        }
    }
    CandidateMatrix::from_packed(n, k, payload.to_vec())
        .map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn encode_candidates(c: &CandidateMatrix) -> std::result::Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(HEADER_LEN + c.packed().len());
    put_header(&mut out, CANDIDATES_MAGIC, c.n(), c.k())?;
    out.extend_from_slice(c.packed());
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> std::result::Result<(Vec<usize>, usize), FormatError> {
    let (n, k) = header(bytes, LABELS_MAGIC)?;
    let payload = check_payload(bytes, n * 4)?;
    let mut labels = Vec::with_capacity(n);
    for (row, c) in payload.chunks_exact(4).enumerate() {
        let label = u32::from_le_bytes(c.try_into().unwrap());
        if label as usize >= k {
            return Err(FormatError::LabelOutOfRange {
                row,
                label,
                k: k as u32,
            });
        }
        labels.push(label as usize);
    }
    Ok((labels, k))
}

pub fn encode_labels(labels: &[usize], k: usize) -> std::result::Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(HEADER_LEN + labels.len() * 4);
    put_header(&mut out, LABELS_MAGIC, labels.len(), k)?;
    for (row, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(FormatError::LabelOutOfRange {
                row,
                label: y as u32,
                k: k as u32,
            });
        }
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    Ok(out)
}

/// Raw PLLF payload, no content validation.
pub fn read_matrix_file(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    with_path(path, decode_matrix(&read_file(path)?))
}

pub fn write_matrix_file(m: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &with_path(path, encode_matrix(m))?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    FeatureMatrix::new(read_matrix_file(path)?)
}

pub fn read_confidences(path: impl AsRef<Path>) -> Result<ConfidenceMatrix> {
    ConfidenceMatrix::new(read_matrix_file(path)?)
}

pub fn read_candidates_file(path: impl AsRef<Path>) -> Result<CandidateMatrix> {
    let path = path.as_ref();
    with_path(path, decode_candidates(&read_file(path)?))
}

pub fn write_candidates_file(c: &CandidateMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &with_path(path, encode_candidates(c))?)
}

/// Returns the labels and the K recorded in the header.
pub fn read_labels_file(path: impl AsRef<Path>) -> Result<(Vec<usize>, usize)> {
    let path = path.as_ref();
    with_path(path, decode_labels(&read_file(path)?))
}

pub fn write_labels_file(labels: &[usize], k: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &with_path(path, encode_labels(labels, k))?)
}

/// Hand-authored feature fixtures: one row per line, comma-separated decimals.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_features_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f32> = line
            .split(',')
            .map(|t| t.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                source: FormatError::Invalid(format!("line {}: {e}", lineno + 1)),
            })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    source: FormatError::Invalid(format!(
                        "line {}: expected {w} columns, found {}",
                        lineno + 1,
                        row.len()
                    )),
                })
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let d = width.unwrap_or(0);
    FeatureMatrix::new(Array2::from_shape_vec((rows, d), values).expect("row widths checked"))
}
