//! Sample sets and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major samples `X` (N x d) with targets `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Case name and seed, or the source file path.
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, provenance: impl Into<String>) -> Result<Self, DataError> {
        if x.is_empty() {
            return Err(DataError::Empty);
        }
        if y.len() != x.len() {
            return Err(DataError::Malformed { line: 0, msg: "x and y lengths differ".into() });
        }
        let d = x[0].len();
        for (i, row) in x.iter().enumerate() {
            if row.len() != d || d == 0 {
                return Err(DataError::Malformed { line: i + 2, msg: format!("row has {} inputs, expected {d}", row.len()) });
            }
            if row.iter().any(|v| !v.is_finite()) || !y[i].is_finite() {
                return Err(DataError::Malformed { line: i + 2, msg: "non-finite value".into() });
            }
        }
        Ok(Self { x, y, provenance: provenance.into() })
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Reads a CSV with header `x1,...,xd,y`.
pub fn read_csv(input: impl Read, provenance: &str) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(input);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.is_empty() {
        return Err(DataError::Empty);
    }
    let cols: Vec<&str> = header.iter().collect();
    let d = cols.len().saturating_sub(1);
    if cols.last() != Some(&"y") || d == 0 {
        return Err(DataError::Malformed { line: 1, msg: format!("header must be x1,...,xd,y, got '{}'", cols.join(",")) });
    }
    for (i, c) in cols[..d].iter().enumerate() {
        if *c != format!("x{}", i + 1) {
            return Err(DataError::Malformed { line: 1, msg: format!("column {} must be x{}, got '{c}'", i + 1, i + 1) });
        }
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let lineno = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 1 {
            return Err(DataError::Malformed {
                line: lineno,
                msg: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let mut vals = Vec::with_capacity(d + 1);
        for f in &rec {
            let v: f64 = f
                .parse()
                .map_err(|_| DataError::Malformed { line: lineno, msg: format!("bad number '{f}'") })?;
            if !v.is_finite() {
                return Err(DataError::Malformed { line: lineno, msg: format!("non-finite value '{f}'") });
            }
            vals.push(v);
        }
        y.push(vals.pop().unwrap());
        x.push(vals);
    }
    if x.is_empty() {
        return Err(DataError::Empty);
    }
    Dataset::new(x, y, provenance)
}

fn csv_error(e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        kind => DataError::Malformed { line, msg: format!("{kind:?}") },
    }
}

pub fn write_csv(out: &mut impl Write, data: &Dataset) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=data.dim()).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_error)?;
    for (row, y) in data.x.iter().zip(&data.y) {
        let rec: Vec<String> = row.iter().chain(std::iter::once(y)).map(|v| format!("{v:?}")).collect();
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(f), &path.display().to_string())
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(&mut f, data)?;
    f.flush()?;
    Ok(())
}
