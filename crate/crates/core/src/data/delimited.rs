use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Which column of a delimited file holds the class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelColumn {
    #[default]
    First,
    Last,
    Index(usize),
}

impl LabelColumn {
    fn resolve(self, width: usize) -> Option<usize> {
        match self {
            LabelColumn::First => Some(0),
            LabelColumn::Last => width.checked_sub(1),
            LabelColumn::Index(i) if i < width => Some(i),
            LabelColumn::Index(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelimitedOptions {
    pub delimiter: u8,
    pub label_column: LabelColumn,
    /// Skip the first line.
    pub header: bool,
}

impl Default for DelimitedOptions {
    fn default() -> Self {
        DelimitedOptions {
            delimiter: b',',
            label_column: LabelColumn::First,
            header: false,
        }
    }
}

/// Reads a rectangular file of finite numbers into an `N x w` matrix.
/// Blank lines are skipped; errors name the offending line and column.
pub fn read_matrix(path: &Path, delimiter: u8, header: bool) -> Result<Tensor> {
    read_rows(path, delimiter, header).map(|(t, _)| t)
}

/// Matrix plus the 1-based source line of every row.
fn read_rows(path: &Path, delimiter: u8, header: bool) -> Result<(Tensor, Vec<u64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let at = |line: u64| format!("{} line {line}", path.display());

    let mut width = None;
    let mut values = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            location: at(e.position().map_or(0, |p| p.line())),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                location: at(line),
                detail: format!("expected {w} columns, found {}", record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    location: format!("{}, column {}", at(line), col + 1),
                    detail: format!("'{cell}' is not a finite number"),
                })?;
            values.push(value);
        }
        lines.push(line);
    }
    let Some(w) = width else {
        return Err(Error::Parse {
            location: path.display().to_string(),
            detail: "file holds no data rows".into(),
        });
    };
    Ok((Tensor::new(vec![lines.len(), w], values)?, lines))
}

/// Reads a labelled numeric file. Features are the non-label columns in
/// file order; labels are remapped to `0..C` in ascending order of the raw
/// ids.
pub fn load_delimited(path: &Path, opts: DelimitedOptions) -> Result<Dataset> {
    let (table, lines) = read_rows(path, opts.delimiter, opts.header)?;
    let w = table.cols();
    let label_idx = opts.label_column.resolve(w).ok_or_else(|| Error::Parse {
        location: path.display().to_string(),
        detail: format!("label column {:?} does not exist in {w} columns", opts.label_column),
    })?;
    if w < 2 {
        return Err(Error::Parse {
            location: path.display().to_string(),
            detail: "need a label column and at least one feature column".into(),
        });
    }
    let mut features = Vec::with_capacity(table.rows() * (w - 1));
    let mut raw_labels = Vec::with_capacity(table.rows());
    for (i, &line) in lines.iter().enumerate() {
        let row = table.row(i);
        let label = row[label_idx];
        if label.fract() != 0.0 {
            return Err(Error::Parse {
                location: format!("{} line {line}, column {}", path.display(), label_idx + 1),
                detail: format!("label {label} is not an integer"),
            });
        }
        raw_labels.push(label as i64);
        features.extend(row.iter().enumerate().filter(|&(c, _)| c != label_idx).map(|(_, v)| *v));
    }

    let mut dense = BTreeMap::new();
    for &l in &raw_labels {
        dense.entry(l).or_insert(0usize);
    }
    for (i, v) in dense.values_mut().enumerate() {
        *v = i;
    }
    let labels: Vec<usize> = raw_labels.iter().map(|l| dense[l]).collect();
    let features = Tensor::new(vec![labels.len(), w - 1], features)?;
    let name = path
        .file_stem()
        .map_or_else(|| "delimited".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(features, labels, dense.len(), name)
}

/// `label<d>f1<d>f2...` with shortest round-trip float formatting, so a
/// reload reproduces every feature bit for bit.
pub fn format_row(label: usize, values: &[f64], delimiter: char) -> String {
    let mut line = label.to_string();
    for v in values {
        line.push(delimiter);
        line.push_str(&v.to_string());
    }
    line
}

/// Writes `ds` with the label in the first column.
pub fn write_delimited(ds: &Dataset, path: &Path, delimiter: char) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for i in 0..ds.len() {
        writeln!(out, "{}", format_row(ds.labels()[i], ds.features().row(i), delimiter))
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
