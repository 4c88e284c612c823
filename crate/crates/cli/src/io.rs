//! CSV input and output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

/// Numeric table with its header.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    /// Row-major values.
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, k: usize) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r[k]))
    }

    pub fn columns(&self, ks: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), ks.len(), |i, j| self.rows[i][ks[j]])
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| CliError::data(path, format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::data(path, format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CliError::data(path, "missing header row"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::data(path, format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row = record
            .iter()
            .zip(&header)
            .map(|(field, name)| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        CliError::data(
                            path,
                            format!("line {line}, column `{name}`: `{field}` is not a finite number"),
                        )
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::data(path, "no data rows"));
    }
    Ok(Table { header, rows })
}

/// Design `x1..xp` and optional response `y`, in time order.
#[derive(Debug, Clone)]
pub struct RegressionInput {
    pub x: DMatrix<f64>,
    pub y: Option<DVector<f64>>,
}

pub fn read_regression(path: &Path, require_y: bool) -> Result<RegressionInput> {
    let table = read_table(path)?;
    let mut x_cols: Vec<(usize, usize)> = Vec::new();
    let mut y_col = None;
    for (k, name) in table.header.iter().enumerate() {
        if name == "y" {
            if y_col.replace(k).is_some() {
                return Err(CliError::data(path, "column `y` appears twice"));
            }
        } else if let Some(j) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
            x_cols.push((j, k));
        } else {
            return Err(CliError::data(
                path,
                format!("unexpected column `{name}`; expected x1..xp and y"),
            ));
        }
    }
    if require_y && y_col.is_none() {
        return Err(CliError::data(path, "missing response column `y`"));
    }
    x_cols.sort_unstable();
    if x_cols.is_empty() {
        return Err(CliError::data(path, "no design columns x1..xp"));
    }
    for (expected, &(j, _)) in (1..).zip(&x_cols) {
        if j != expected {
            return Err(CliError::data(path, format!("missing design column `x{expected}`")));
        }
    }
    let order: Vec<usize> = x_cols.iter().map(|&(_, k)| k).collect();
    Ok(RegressionInput {
        x: table.columns(&order),
        y: y_col.map(|k| table.column(k)),
    })
}

/// Every column is a node; the header holds the labels.
pub fn read_series(path: &Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    let table = read_table(path)?;
    let all: Vec<usize> = (0..table.header.len()).collect();
    Ok((table.columns(&all), table.header))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

/// Buffered CSV writer that reports the path on failure.
pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let file = File::create(&path).map_err(|source| CliError::Output {
            path: path.clone(),
            source,
        })?;
        let mut out = Self {
            writer: csv::Writer::from_writer(BufWriter::new(file)),
            path,
        };
        out.row(header)?;
        Ok(out)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| self.fail(e))
    }

    fn fail(&self, e: csv::Error) -> CliError {
        CliError::Output {
            path: self.path.clone(),
            source: std::io::Error::other(e.to_string()),
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|source| CliError::Output {
            path: self.path.clone(),
            source,
        })
    }
}

pub fn write_text(path: PathBuf, text: &str) -> Result<()> {
    let mut file = File::create(&path).map_err(|source| CliError::Output {
        path: path.clone(),
        source,
    })?;
    file.write_all(text.as_bytes())
        .map_err(|source| CliError::Output { path, source })
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
