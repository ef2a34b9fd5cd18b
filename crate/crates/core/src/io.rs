//! KMV1 binary matrix files and headerless CSV.
//!
//! Layout: `b"KMV1"`, `u32` LE dtype tag (1 = f64), `u64` LE rows, `u64` LE
//! cols, then `rows * cols` row-major `f64` LE values. Nothing may follow the
//! payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::Result;
use crate::kernel::Matrix;

pub const MAGIC: &[u8; 4] = b"KMV1";
pub const DTYPE_F64: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: not a KMV1 file")]
    BadMagic,
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: u64 },
    #[error("shape {rows}x{cols} overflows")]
    ShapeOverflow { rows: u64, cols: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// On-disk matrix encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    Kmv1,
    Csv,
}

pub fn encode_kmv1(matrix: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.as_slice().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_kmv1(bytes: &[u8]) -> std::result::Result<Matrix, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader);
    }
    let dtype = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if dtype != DTYPE_F64 {
        return Err(FormatError::UnsupportedDtype(dtype));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or(FormatError::ShapeOverflow { rows, cols })?;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(FormatError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(FormatError::TrailingBytes {
            extra: found - expected,
        });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        data.push(v);
    }
    Ok(Matrix::new(rows, cols, data).expect("length checked above"))
}

/// Headerless comma-separated decimals, one row per line. Blank lines are
/// skipped; every row must have the same width.
pub fn parse_csv(text: &str) -> std::result::Result<Matrix, FormatError> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut width = 0;
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| FormatError::Csv {
                line: lineno,
                reason: format!("cannot parse {:?} as a number", field.trim()),
            })?;
            if !v.is_finite() {
                return Err(FormatError::NonFinite { row: rows, col });
            }
            data.push(v);
            width += 1;
        }
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(FormatError::Csv {
                    line: lineno,
                    reason: format!("expected {c} fields, found {width}"),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or(FormatError::Csv {
        line: 0,
        reason: "no rows".into(),
    })?;
    Ok(Matrix::new(rows, cols, data).expect("widths checked above"))
}

pub fn format_csv(matrix: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<Matrix> {
    let m = match format {
        MatrixFormat::Kmv1 => decode_kmv1(&fs::read(path)?)?,
        MatrixFormat::Csv => parse_csv(&fs::read_to_string(path)?)?,
    };
    Ok(m)
}

pub fn write_matrix(matrix: &Matrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Kmv1 => fs::write(path, encode_kmv1(matrix))?,
        MatrixFormat::Csv => fs::write(path, format_csv(matrix))?,
    }
    Ok(())
}
