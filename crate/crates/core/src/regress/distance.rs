//! Covariate geometry: standardized Euclidean distances on tables, or
//! user-supplied distance matrices.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CdeError, Result};
use crate::table::{Column, Table};

const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Euclidean,
    Precomputed,
}

/// A distance over the covariate space.
///
/// `Euclidean` carries no matrix: distances are computed on standardized
/// table columns. `Precomputed` carries a validated square matrix over all
/// items (symmetric, zero diagonal, nonnegative).
#[derive(Debug, Clone, PartialEq)]
pub struct Distance {
    kind: DistanceKind,
    matrix: Option<DMatrix<f64>>,
}

impl Distance {
    pub fn euclidean() -> Self {
        Distance {
            kind: DistanceKind::Euclidean,
            matrix: None,
        }
    }

    pub fn precomputed(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(CdeError::Shape(format!(
                "distance matrix must be square, got {}x{}",
                n,
                matrix.ncols()
            )));
        }
        for i in 0..n {
            if matrix[(i, i)] != 0.0 {
                return Err(CdeError::Contract(format!(
                    "distance diagonal at {i} is {} (must be 0)",
                    matrix[(i, i)]
                )));
            }
            for j in 0..n {
                let v = matrix[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(CdeError::Contract(format!("distance ({i}, {j}) = {v} is not a finite nonnegative value")));
                }
                if (v - matrix[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(CdeError::Contract(format!("distance matrix asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Distance {
            kind: DistanceKind::Precomputed,
            matrix: Some(matrix),
        })
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        self.matrix.as_ref()
    }

    pub fn len(&self) -> usize {
        self.matrix.as_ref().map(|m| m.nrows()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-block `rows x cols` of the precomputed matrix.
    pub fn block(&self, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
        let m = self
            .matrix
            .as_ref()
            .ok_or_else(|| CdeError::Config("Euclidean distance has no stored matrix".into()))?;
        let n = m.nrows();
        if let Some(&bad) = rows.iter().chain(cols).find(|&&i| i >= n) {
            return Err(CdeError::Shape(format!("index {bad} outside distance matrix of size {n}")));
        }
        Ok(DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])]))
    }
}

/// Covariates as handed to a regression or to the conditional density
/// estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariates {
    Table(Table),
    Precomputed(Distance),
}

impl Covariates {
    pub fn n_rows(&self) -> usize {
        match self {
            Covariates::Table(t) => t.n_rows(),
            Covariates::Precomputed(d) => d.len(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Covariates::Table(Table::from_rows(rows)?))
    }
}

/// Query covariates at prediction time.
///
/// `Distances` holds one row per query and one column per training item of
/// the fitted model, in the model's training order.
#[derive(Debug, Clone, Copy)]
pub enum Queries<'a> {
    Table(&'a Table),
    Distances(&'a DMatrix<f64>),
}

impl Queries<'_> {
    pub fn n_rows(&self) -> usize {
        match self {
            Queries::Table(t) => t.n_rows(),
            Queries::Distances(m) => m.nrows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ColumnCode {
    Numeric { mean: f64, scale: f64 },
    Categorical { levels: Vec<String> },
}

/// Per-column standardization plus one-hot encoding learned on training
/// rows. Numeric columns map to zero mean and unit variance; categorical
/// columns map to `sqrt(1/2)`-scaled indicators so that two distinct levels
/// sit at unit distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    names: Vec<String>,
    codes: Vec<ColumnCode>,
}

pub(crate) fn mean_and_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn levels_of(v: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = v.to_vec();
    levels.sort();
    levels.dedup();
    levels
}

impl FeatureEncoder {
    pub fn fit(table: &Table) -> Self {
        let codes = table
            .columns()
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => {
                    let (mean, sd) = mean_and_sd(v);
                    ColumnCode::Numeric {
                        mean,
                        scale: if sd > 1e-12 { sd } else { 1.0 },
                    }
                }
                Column::Categorical(v) => ColumnCode::Categorical { levels: levels_of(v) },
            })
            .collect();
        FeatureEncoder {
            names: table.names().to_vec(),
            codes,
        }
    }

    pub fn width(&self) -> usize {
        self.codes
            .iter()
            .map(|c| match c {
                ColumnCode::Numeric { .. } => 1,
                ColumnCode::Categorical { levels } => levels.len(),
            })
            .sum()
    }

    /// Encodes `table`; unseen categorical levels encode as all zeros.
    pub fn encode(&self, table: &Table) -> Result<DMatrix<f64>> {
        if table.n_cols() != self.codes.len() {
            return Err(CdeError::Shape(format!(
                "expected {} covariate columns, got {}",
                self.codes.len(),
                table.n_cols()
            )));
        }
        let mut out = DMatrix::zeros(table.n_rows(), self.width());
        let mut offset = 0;
        for (j, (code, col)) in self.codes.iter().zip(table.columns()).enumerate() {
            match (code, col) {
                (ColumnCode::Numeric { mean, scale }, Column::Numeric(v)) => {
                    for (r, x) in v.iter().enumerate() {
                        out[(r, offset)] = (x - mean) / scale;
                    }
                    offset += 1;
                }
                (ColumnCode::Categorical { levels }, Column::Categorical(v)) => {
                    for (r, x) in v.iter().enumerate() {
                        if let Ok(pos) = levels.binary_search(x) {
                            out[(r, offset + pos)] = FRAC_1_SQRT_2;
                        }
                    }
                    offset += levels.len();
                }
                _ => {
                    return Err(CdeError::Shape(format!(
                        "column '{}' changed type between training and prediction",
                        self.names[j]
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
pub fn sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let p = a.ncols();
    debug_assert_eq!(p, b.ncols());
    // Row-major copies keep the inner loop contiguous.
    let ar: Vec<f64> = a.transpose().as_slice().to_vec();
    let br: Vec<f64> = b.transpose().as_slice().to_vec();
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        let ai = &ar[i * p..(i + 1) * p];
        for j in 0..b.nrows() {
            let bj = &br[j * p..(j + 1) * p];
            out[(i, j)] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    out
}

/// Median of the strictly-upper-triangular entries of a square matrix,
/// falling back to their mean and then to 1 when the median is zero.
pub(crate) fn median_offdiag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut vals = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for j in 1..n {
        for i in 0..j {
            vals.push(m[(i, j)]);
        }
    }
    if vals.is_empty() {
        return 1.0;
    }
    let mid = vals.len() / 2;
    let (_, med, _) = vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let med = *med;
    if med > 0.0 {
        return med;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// Fitted geometry shared by all regressions of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reference {
    /// Encoded training rows.
    Features {
        encoder: FeatureEncoder,
        train: DMatrix<f64>,
    },
    /// Training items of a precomputed distance matrix.
    Precomputed { n_train: usize },
}

impl Reference {
    pub fn n_train(&self) -> usize {
        match self {
            Reference::Features { train, .. } => train.nrows(),
            Reference::Precomputed { n_train } => *n_train,
        }
    }

    /// Squared distances from each query to each training item.
    pub fn query_sq_dists(&self, q: &Queries) -> Result<DMatrix<f64>> {
        match (self, q) {
            (Reference::Features { encoder, train }, Queries::Table(t)) => Ok(sq_dists(&encoder.encode(t)?, train)),
            (Reference::Precomputed { n_train }, Queries::Distances(d)) => {
                if d.ncols() != *n_train {
                    return Err(CdeError::Shape(format!(
                        "query distances have {} columns, model has {} training items",
                        d.ncols(),
                        n_train
                    )));
                }
                if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(CdeError::Contract("query distances must be finite and nonnegative".into()));
                }
                Ok(d.map(|v| v * v))
            }
            (Reference::Features { .. }, Queries::Distances(_)) => Err(CdeError::Shape(
                "model was fitted on a covariate table; queries must be a table".into(),
            )),
            (Reference::Precomputed { .. }, Queries::Table(_)) => Err(CdeError::Shape(
                "model was fitted on precomputed distances; queries must be distance rows".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precomputed_validation() {
        let ok = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(Distance::precomputed(ok).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.1, 0.0]);
        assert!(Distance::precomputed(asym).is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, 1.0, 0.0]);
        assert!(Distance::precomputed(diag).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(Distance::precomputed(neg).is_err());
    }

    #[test]
    fn encoder_standardizes_and_one_hots() {
        let t = Table::new(
            vec!["a".into(), "c".into()],
            vec![
                Column::Numeric(vec![1.0, 3.0]),
                Column::Categorical(vec!["u".into(), "v".into()]),
            ],
        )
        .unwrap();
        let enc = FeatureEncoder::fit(&t);
        let m = enc.encode(&t).unwrap();
        assert_eq!(m.ncols(), 3);
        assert!((m[(0, 0)] + 1.0).abs() < 1e-15 && (m[(1, 0)] - 1.0).abs() < 1e-15);
        let d = sq_dists(&m, &m);
        // numeric part contributes 4, categorical part contributes 1.
        assert!((d[(0, 1)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn median_handles_degenerate_inputs() {
        let z = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(median_offdiag(&z), 1.0);
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 4.0, 1.0, 0.0, 9.0, 4.0, 9.0, 0.0]);
        assert_eq!(median_offdiag(&m), 4.0);
    }
}
