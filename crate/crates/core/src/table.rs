//! Column-typed covariate tables and CSV ingestion.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CdeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }
}

/// Named columns of equal length. Numeric and categorical columns may be
/// mixed freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Column>,
    rows: usize,
}

impl Table {
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(CdeError::Shape(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let rows = columns.first().map(Column::len).unwrap_or(0);
        if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != rows) {
            return Err(CdeError::Shape(format!(
                "column '{}' has {} rows, expected {rows}",
                names[i],
                c.len()
            )));
        }
        Ok(Table { names, columns, rows })
    }

    /// Numeric table from a row-major matrix, columns named `x1..xD`.
    pub fn from_matrix(x: &DMatrix<f64>) -> Self {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        let columns = (0..x.ncols())
            .map(|j| Column::Numeric(x.column(j).iter().copied().collect()))
            .collect();
        Table {
            names,
            columns,
            rows: x.nrows(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(CdeError::Shape(format!("row {i} has {} values, expected {d}", rows[i].len())));
        }
        Ok(Self::from_matrix(&DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])))
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Table {
        Table {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            rows: rows.len(),
        }
    }

    /// Numeric view of the table; fails if any column is categorical.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.rows, self.columns.len());
        for (j, c) in self.columns.iter().enumerate() {
            match c {
                Column::Numeric(v) => {
                    for (i, x) in v.iter().enumerate() {
                        m[(i, j)] = *x;
                    }
                }
                Column::Categorical(_) => {
                    return Err(CdeError::Data(format!("column '{}' is categorical", self.names[j])))
                }
            }
        }
        Ok(m)
    }

    pub fn has_categorical(&self) -> bool {
        self.columns.iter().any(|c| matches!(c, Column::Categorical(_)))
    }

    /// Column-wise string rendering of one row, used by the CSV writer.
    pub fn row_strings(&self, r: usize) -> Vec<String> {
        self.columns
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => format_float(v[r]),
                Column::Categorical(v) => v[r].clone(),
            })
            .collect()
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("null")
}

/// Reads a CSV with a header row. Lines starting with `#` are comments.
///
/// The column named `response_col` becomes the response vector and must be
/// numeric; every other column becomes a covariate, typed as categorical if
/// any of its cells fails to parse as a number. Missing cells are rejected.
pub fn read_csv(path: impl AsRef<Path>, response_col: &str) -> Result<(Table, Vec<f64>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CdeError::io(path, e))?;
    read_csv_from(file, response_col)
}

pub fn read_csv_from<R: std::io::Read>(reader: R, response_col: &str) -> Result<(Table, Vec<f64>)> {
    let (t, z) = read_columns(reader, response_col, true)?;
    Ok((t, z.unwrap_or_default()))
}

/// Reads a covariate table; the response column is dropped when present.
/// Returns the responses if the column was found.
pub fn read_covariates(path: impl AsRef<Path>, response_col: &str) -> Result<(Table, Option<Vec<f64>>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CdeError::io(path, e))?;
    read_columns(file, response_col, false)
}

fn read_columns<R: std::io::Read>(reader: R, response_col: &str, required: bool) -> Result<(Table, Option<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CdeError::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CdeError::Data("missing header row".into()));
    }
    let resp_idx = header.iter().position(|h| h == response_col);
    if required && resp_idx.is_none() {
        return Err(CdeError::Data(format!("response column '{response_col}' not found in header")));
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CdeError::Data(format!("row {}: {e}", r + 1)))?;
        if rec.len() != header.len() {
            return Err(CdeError::Data(format!(
                "row {}: expected {} fields, found {}",
                r + 1,
                header.len(),
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            if is_missing(field) {
                return Err(CdeError::Data(format!(
                    "missing value at row {}, column '{}'",
                    r + 1,
                    header[j]
                )));
            }
            raw[j].push(field.to_string());
        }
    }

    let mut names = Vec::new();
    let mut columns = Vec::new();
    let mut response = Vec::new();
    for (j, cells) in raw.into_iter().enumerate() {
        let parsed: Option<Vec<f64>> = cells.iter().map(|s| s.parse::<f64>().ok()).collect();
        if Some(j) == resp_idx {
            let v = parsed.ok_or_else(|| {
                let bad = cells.iter().position(|s| s.parse::<f64>().is_err()).unwrap_or(0);
                CdeError::Data(format!("response column '{response_col}' is not numeric at row {}", bad + 1))
            })?;
            if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
                return Err(CdeError::Data(format!("non-finite response at row {}", bad + 1)));
            }
            response = v;
            continue;
        }
        names.push(header[j].clone());
        columns.push(match parsed {
            Some(v) => Column::Numeric(v),
            None => Column::Categorical(cells),
        });
    }
    let n_rows = columns.first().map_or(response.len(), Column::len);
    if n_rows == 0 {
        return Err(CdeError::Data("no data rows".into()));
    }
    let table = Table::new(names, columns)?;
    Ok((table, resp_idx.map(|_| response)))
}
