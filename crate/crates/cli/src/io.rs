use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::CliError;

/// Parsed data CSV: column names and an `n x p` matrix.
pub struct Table {
    pub names: Vec<String>,
    pub values: DMatrix<f64>,
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

fn parse_cell(text: &str, path: &Path, line: u64, column: &str) -> Result<f64, CliError> {
    let t = text.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Err(CliError::Data(format!(
            "{}: line {line}, column {column}: missing value",
            path.display()
        )));
    }
    let v: f64 = t.parse().map_err(|_| {
        CliError::Data(format!(
            "{}: line {line}, column {column}: cannot parse '{t}' as a number",
            path.display()
        ))
    })?;
    if !v.is_finite() {
        return Err(CliError::Data(format!(
            "{}: line {line}, column {column}: value '{t}' is not finite",
            path.display()
        )));
    }
    Ok(v)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let at = e.position().map(|p| format!("line {}: ", p.line())).unwrap_or_default();
    CliError::Data(format!("{}: {at}{e}", path.display()))
}

/// Reads a CSV with a header row and numeric cells.
pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(CliError::Data(format!("{}: empty header", path.display())));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (cell, name) in record.iter().zip(&names) {
            rows.push(parse_cell(cell, path, line, name)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(Table {
        values: DMatrix::from_row_slice(n, names.len(), &rows),
        names,
    })
}

/// Reads a headerless numeric CSV (a kernel matrix).
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(open(path)?);
    let mut values = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        cols = record.len();
        for (j, cell) in record.iter().enumerate() {
            values.push(parse_cell(cell, path, line, &(j + 1).to_string())?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Data(format!("{}: empty matrix", path.display())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    let mut s = String::new();
    open(path)?
        .read_to_string(&mut s)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(s)
}

/// Opens the output file, or stdout.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => {
            let f = File::create(p).map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(io::BufWriter::new(f)))
        }
        None => Ok(Box::new(io::BufWriter::new(io::stdout()))),
    }
}

pub fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    let mut out = sink(path)?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Data(format!("write failed: {e}")))
}

/// Writes a header and rows of numbers. Floats use the shortest exact form.
pub fn write_csv(
    path: Option<&Path>,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    let fail = |e: csv::Error| CliError::Data(format!("write failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Data(format!("write failed: {e}")))
}
