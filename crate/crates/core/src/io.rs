//! CSV ingestion and export for [`Dataset`].
//!
//! The first row is a header. An empty cell or the literal `NA` marks a
//! missing value. A column whose observed values are all integers with at
//! most [`ORDINAL_MAX_LEVELS`] distinct values is inferred as ordinal.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Dataset, VariableKind};

pub const ORDINAL_MAX_LEVELS: usize = 50;

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let p = names.len();
    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut n = 0;
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != p {
            return Err(Error::Invalid(format!(
                "row {} has {} fields, header has {p}",
                line + 2,
                record.len()
            )));
        }
        for field in record.iter() {
            if field.is_empty() || field == "NA" {
                cells.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Invalid(format!("row {}: cannot parse {field:?}", line + 2))
                })?;
                cells.push(Some(v));
            }
        }
        n += 1;
    }
    let values = DMatrix::from_fn(n, p, |i, j| cells[i * p + j].unwrap_or(0.0));
    let missing = DMatrix::from_fn(n, p, |i, j| cells[i * p + j].is_none());
    let kinds = (0..p)
        .map(|j| infer_kind((0..n).filter_map(|i| cells[i * p + j])))
        .collect();
    Dataset::new(values, missing, kinds, names)
}

pub fn read_dataset_path(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

fn infer_kind(observed: impl Iterator<Item = f64>) -> VariableKind {
    let mut levels = BTreeSet::new();
    for v in observed {
        if v.fract() != 0.0 || v.abs() > 1e15 {
            return VariableKind::Continuous;
        }
        levels.insert(v as i64);
        if levels.len() > ORDINAL_MAX_LEVELS {
            return VariableKind::Continuous;
        }
    }
    if levels.is_empty() {
        VariableKind::Continuous
    } else {
        VariableKind::Ordinal
    }
}

/// Writes the header and rows; missing cells are written as `NA`.
pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(data.column_names())?;
    for i in 0..data.n() {
        let row: Vec<String> = (0..data.p())
            .map(|j| match data.get(i, j) {
                Some(v) => format_value(v),
                None => "NA".to_string(),
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.17e}")
    }
}
