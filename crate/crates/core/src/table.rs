//! Small CSV helpers.
//!
//! All pipeline files are plain UTF-8 CSV. Floats are written with Rust's
//! shortest round-trip formatting, so load(save(x)) recovers exact bits and
//! reruns with the same seed produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Parse one CSV field, reporting file and line on failure.
pub fn parse_field<T: FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field.trim().parse::<T>().map_err(|_| {
        Error::parse(path, line, format!("cannot parse {what} from {field:?}"))
    })
}

/// Read a header CSV file, checking the header and returning the data rows
/// split into fields. Rows must have at least `min_fields` fields.
pub fn read_rows(path: &Path, header: &str, min_fields: usize) -> Result<Vec<Vec<String>>> {
    let content = read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim() == header => {}
        Some((_, first)) => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header {header:?}, found {first:?}"),
            ))
        }
        None => return Err(Error::parse(path, 1, "empty file")),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() < min_fields {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected at least {min_fields} fields, found {}", fields.len()),
            ));
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// Write an integer matrix as headerless CSV, one row per line.
pub fn write_matrix_u32(path: &Path, m: &Array2<u32>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    write_string(path, &out)
}

/// Read a headerless integer matrix written by [`write_matrix_u32`].
/// Every row must have the same number of columns.
pub fn read_matrix_u32(path: &Path) -> Result<Array2<u32>> {
    let content = read_to_string(path)?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            None => cols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("ragged row: expected {c} columns, found {}", fields.len()),
                ));
            }
            _ => {}
        }
        for f in fields {
            data.push(parse_field::<u32>(path, idx + 1, f, "integer")?);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::parse(path, 0, format!("bad matrix shape: {e}")))
}

/// Write a float matrix as headerless CSV with exact round-trip formatting.
pub fn write_matrix_f64(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    write_string(path, &out)
}
