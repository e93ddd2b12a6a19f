//! Matrix and vector file formats.
//!
//! Text matrices: a header line `rows cols`, then `rows` lines of
//! whitespace-separated entries in row-major order. The writer emits 17
//! significant digits, which round-trips every finite f64 exactly; the reader
//! accepts plain decimal or scientific notation. Binary matrices (`.bin`):
//! two 8-byte little-endian unsigned integers `rows`, `cols`, then
//! `rows * cols` little-endian f64 values in row-major order. Vector files
//! (targets): one value per line.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Formats a float with 17 significant digits (exact f64 round-trip).
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn write_matrix_text(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut line = String::new();
    writeln!(w, "{} {}", m.nrows(), m.ncols()).map_err(|e| io_err(path, e))?;
    for r in 0..m.nrows() {
        line.clear();
        for c in 0..m.ncols() {
            if c > 0 {
                line.push(' ');
            }
            line.push_str(&fmt17(m[(r, c)]));
        }
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_matrix_text(path: &Path) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut lines = reader.lines().enumerate();

    let (rows, cols) = loop {
        match lines.next() {
            Some((idx, line)) => {
                let line = line.map_err(|e| io_err(path, e))?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let mut parts = trimmed.split_whitespace();
                let rows: usize = parts
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err(path, idx + 1, "expected header `rows cols`"))?;
                let cols: usize = parts
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err(path, idx + 1, "expected header `rows cols`"))?;
                if parts.next().is_some() {
                    return Err(parse_err(path, idx + 1, "header has trailing tokens"));
                }
                break (rows, cols);
            }
            None => return Err(parse_err(path, 1, "empty file")),
        }
    };

    let mut values = Vec::with_capacity(rows * cols);
    for (idx, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, idx + 1, format!("`{tok}` is not a number")))?;
            values.push(v);
            if values.len() > rows * cols {
                return Err(parse_err(
                    path,
                    idx + 1,
                    format!("more than {} entries", rows * cols),
                ));
            }
        }
    }
    if values.len() != rows * cols {
        return Err(parse_err(
            path,
            0,
            format!("expected {} entries, found {}", rows * cols, values.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    w.write_all(&(m.nrows() as u64).to_le_bytes())
        .and_then(|()| w.write_all(&(m.ncols() as u64).to_le_bytes()))
        .map_err(|e| io_err(path, e))?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&m[(r, c)].to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_matrix_bin(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut word = [0u8; 8];
    r.read_exact(&mut word)
        .map_err(|_| parse_err(path, 0, "truncated header (offset 0)"))?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)
        .map_err(|_| parse_err(path, 0, "truncated header (offset 8)"))?;
    let cols = u64::from_le_bytes(word) as usize;

    let total = rows
        .checked_mul(cols)
        .ok_or_else(|| parse_err(path, 0, "dimension overflow in header"))?;
    let mut values = Vec::with_capacity(total);
    for i in 0..total {
        r.read_exact(&mut word).map_err(|_| {
            parse_err(
                path,
                0,
                format!("truncated at entry {i} (offset {})", 16 + 8 * i),
            )
        })?;
        values.push(f64::from_le_bytes(word));
    }
    if r.read(&mut word).map_err(|e| io_err(path, e))? != 0 {
        return Err(parse_err(path, 0, "trailing bytes after matrix data"));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn is_bin(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

/// Reads a matrix, dispatching on the `.bin` extension.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    if is_bin(path) {
        read_matrix_bin(path)
    } else {
        read_matrix_text(path)
    }
}

/// Writes a matrix, dispatching on the `.bin` extension.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    if is_bin(path) {
        write_matrix_bin(path, m)
    } else {
        write_matrix_text(path, m)
    }
}

pub fn write_vector_text(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for i in 0..v.len() {
        writeln!(w, "{}", fmt17(v[i])).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_vector_text(path: &Path) -> Result<DVector<f64>> {
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut values = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| parse_err(path, idx + 1, format!("`{t}` is not a number")))?;
        values.push(v);
    }
    Ok(DVector::from_vec(values))
}
