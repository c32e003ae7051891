//! Empirical squared-error loss for conditional densities and the data
//! splits it is evaluated on.
//!
//! All losses are computed on the unit response scale, where the uniform
//! density scores exactly -1.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, ResponseScaler};
use crate::error::{CdeError, Result};
use crate::grid::{interpolate, trapezoid_weights};
use crate::regress::Queries;

/// Disjoint train/validation/test partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DataSplit {
    pub fn n(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Seeded uniform random partition. Train and validation sizes are
/// `round(n * fraction)`; the test part takes the remaining rows.
pub fn make_split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<DataSplit> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(CdeError::Config(format!("split fractions must be positive, got {fractions:?}")));
    }
    if ft + fv + fs > 1.0 + 1e-9 {
        return Err(CdeError::Config(format!("split fractions sum to {} > 1", ft + fv + fs)));
    }
    if n < 3 {
        return Err(CdeError::Size(format!("cannot split {n} rows into three parts")));
    }
    let n_train = (n as f64 * ft).round() as usize;
    let n_valid = (n as f64 * fv).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(CdeError::Size(format!(
            "{n} rows give an empty part with fractions {fractions:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut validation = idx[n_train..n_train + n_valid].to_vec();
    let mut test = idx[n_train + n_valid..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(DataSplit {
        train,
        validation,
        test,
        seed,
    })
}

/// Which representation supplied the squared-norm term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPath {
    /// Sum of squared expansion coefficients of the raw series.
    Coefficients,
    /// Trapezoid integral of the post-processed density on its grid.
    Grid,
}

impl std::fmt::Display for LossPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossPath::Coefficients => "coefficients",
            LossPath::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Sample SD of the per-point contributions over `sqrt(n_eval)`.
    pub se: f64,
    pub n_eval: usize,
    /// Evaluation responses outside the model's range, clamped to it.
    pub n_clamped: usize,
    pub path: LossPath,
}

/// Loss from per-point parts: `mean(sq_norm) - 2 mean(density at the
/// observed response)`.
pub fn loss_from_parts(sq_norms: &[f64], at_obs: &[f64], path: LossPath) -> Result<LossReport> {
    if sq_norms.len() != at_obs.len() {
        return Err(CdeError::Shape(format!(
            "{} squared norms for {} observations",
            sq_norms.len(),
            at_obs.len()
        )));
    }
    let n = sq_norms.len();
    if n == 0 {
        return Err(CdeError::Size("empty evaluation set".into()));
    }
    let contrib: Vec<f64> = sq_norms.iter().zip(at_obs).map(|(s, a)| s - 2.0 * a).collect();
    let loss = sq_norms.iter().sum::<f64>() / n as f64 - 2.0 * at_obs.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let m = contrib.iter().sum::<f64>() / n as f64;
        let var = contrib.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(LossReport {
        loss,
        se,
        n_eval: n,
        n_clamped: 0,
        path,
    })
}

/// Post-processed densities on a model's reference grid.
#[derive(Debug, Clone)]
pub struct DensityRows {
    /// One row per query, one column per grid point; unit response scale.
    pub values: DMatrix<f64>,
    pub fallback: Vec<bool>,
}

/// Anything that yields conditional densities on the unit response scale.
pub trait ConditionalDensity: Sync {
    fn scaler(&self) -> &ResponseScaler;

    /// Sorted grid over `[0, 1]` on which [`Self::unit_densities`] is defined.
    fn reference_grid(&self) -> Vec<f64>;

    fn unit_densities(&self, queries: &Queries) -> Result<DensityRows>;

    /// Raw expansion coefficients (queries x terms) for series models.
    fn series(&self, _queries: &Queries) -> Option<Result<(DMatrix<f64>, BasisSpec)>> {
        None
    }
}

/// Empirical loss of `model` on an evaluation set.
pub fn empirical_cde_loss<M: ConditionalDensity + ?Sized>(
    model: &M,
    queries: &Queries,
    z: &[f64],
    path: LossPath,
) -> Result<LossReport> {
    if z.is_empty() {
        return Err(CdeError::Size("empty evaluation set".into()));
    }
    if queries.n_rows() != z.len() {
        return Err(CdeError::Shape(format!(
            "{} query rows for {} responses",
            queries.n_rows(),
            z.len()
        )));
    }
    let scaler = model.scaler();
    let mut n_clamped = 0;
    let u: Vec<f64> = z
        .iter()
        .map(|&v| {
            let (u, c) = scaler.to_unit_clamped(v);
            n_clamped += c as usize;
            u
        })
        .collect();
    let (sq, at) = match path {
        LossPath::Grid => {
            let grid = model.reference_grid();
            let w = trapezoid_weights(&grid);
            let d = model.unit_densities(queries)?;
            let mut sq = Vec::with_capacity(z.len());
            let mut at = Vec::with_capacity(z.len());
            for (k, &uk) in u.iter().enumerate() {
                let row: Vec<f64> = d.values.row(k).iter().copied().collect();
                sq.push(row.iter().zip(&w).map(|(f, w)| f * f * w).sum());
                at.push(interpolate(&grid, &row, uk));
            }
            (sq, at)
        }
        LossPath::Coefficients => {
            let (coef, basis) = model
                .series(queries)
                .ok_or_else(|| CdeError::Contract("model has no series coefficients".into()))??;
            let mut sq = Vec::with_capacity(z.len());
            let mut at = Vec::with_capacity(z.len());
            let mut phi = vec![0.0; coef.ncols()];
            for (k, &uk) in u.iter().enumerate() {
                for (i, p) in phi.iter_mut().enumerate() {
                    *p = basis.value(i, uk);
                }
                let row = coef.row(k);
                sq.push(row.iter().map(|b| b * b).sum());
                at.push(row.iter().zip(&phi).map(|(b, p)| b * p).sum());
            }
            (sq, at)
        }
    };
    let mut report = loss_from_parts(&sq, &at, path)?;
    report.n_clamped = n_clamped;
    Ok(report)
}
