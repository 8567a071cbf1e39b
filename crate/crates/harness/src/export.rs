//! Byte-stable CSV and binary PGM writers.
//!
//! CSV: header row, `,` separator, LF endings, numbers with 9 significant
//! digits in Rust's `.`-decimal scientific notation. PGM: `P5`, maxval 255,
//! row-major, `round(255 * clamp(v, 0, 1))`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{HarnessError, Result};

/// A cell of a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Column names plus rows of cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }
}

/// `{:.8e}`: 9 significant digits, platform independent.
pub fn format_number(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn to_csv(table: &Table) -> Result<String> {
    let mut out = table.header.join(",");
    out.push('\n');
    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != table.header.len() {
            return Err(HarnessError::Export(format!("row {r} has {} cells, header has {}", row.len(), table.header.len())));
        }
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            match cell {
                Cell::Int(v) => write!(out, "{v}").expect("write to string"),
                Cell::Num(v) if !v.is_finite() => {
                    return Err(HarnessError::Export(format!("non-finite value {v} in row {r}, column {}", table.header[i])))
                }
                Cell::Num(v) => out.push_str(&format_number(*v)),
                Cell::Text(s) => {
                    if s.contains([',', '\n', '"']) {
                        return Err(HarnessError::Export(format!("text cell {s:?} needs quoting")));
                    }
                    out.push_str(s)
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_csv(table: &Table, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(table)?)?;
    Ok(())
}

/// P5 bytes for a row-major `rows x cols` matrix.
pub fn to_pgm(values: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(HarnessError::Export(format!("{} values for a {rows} x {cols} image", values.len())));
    }
    if let Some(v) = values.iter().find(|v| v.is_nan()) {
        return Err(HarnessError::Export(format!("cannot export {v} to PGM")));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

pub fn export_pgm(values: &[f64], rows: usize, cols: usize, path: &Path) -> Result<()> {
    std::fs::write(path, to_pgm(values, rows, cols)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_payload_example() {
        let bytes = to_pgm(&[0.0, 1.0, 0.5, 0.25], 2, 2).unwrap();
        assert_eq!(&bytes[..bytes.len() - 4], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 255, 128, 64]);
        assert!(to_pgm(&[f64::NAN], 1, 1).is_err());
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(to_csv(&Table::new(&["k", "mean"])).unwrap(), "k,mean\n");
    }

    #[test]
    fn nan_is_rejected() {
        let mut t = Table::new(&["x"]);
        t.push(vec![Cell::Num(f64::NAN)]);
        assert!(matches!(to_csv(&t), Err(HarnessError::Export(_))));
    }
}
