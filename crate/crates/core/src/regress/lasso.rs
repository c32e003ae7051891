//! L1-penalized linear regression on per-coordinate cubic features, fitted
//! by cyclic coordinate descent.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::distance::{levels_of, mean_and_sd};
use crate::error::{CdeError, Result};
use crate::table::{Column, Table};

/// Convergence threshold on the largest coefficient change in a sweep.
pub const CD_TOLERANCE: f64 = 1e-8;
const MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Expansion {
    /// `x` standardized, then `{x, x^2, x^3}` each standardized.
    Cubic { mean: f64, scale: f64, power_stats: [(f64, f64); 3] },
    /// Indicator per level, each standardized.
    OneHot { levels: Vec<String>, stats: Vec<(f64, f64)> },
}

/// Feature map learned on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFeatures {
    expansions: Vec<Expansion>,
}

fn safe_scale(sd: f64) -> f64 {
    if sd > 1e-12 {
        sd
    } else {
        1.0
    }
}

impl PolyFeatures {
    pub fn fit(table: &Table) -> Self {
        let expansions = table
            .columns()
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => {
                    let (mean, sd) = mean_and_sd(v);
                    let scale = safe_scale(sd);
                    let z: Vec<f64> = v.iter().map(|x| (x - mean) / scale).collect();
                    let mut power_stats = [(0.0, 1.0); 3];
                    for (p, slot) in power_stats.iter_mut().enumerate() {
                        let col: Vec<f64> = z.iter().map(|x| x.powi(p as i32 + 1)).collect();
                        let (m, s) = mean_and_sd(&col);
                        *slot = (m, safe_scale(s));
                    }
                    Expansion::Cubic { mean, scale, power_stats }
                }
                Column::Categorical(v) => {
                    let levels = levels_of(v);
                    let stats = levels
                        .iter()
                        .map(|l| {
                            let ind: Vec<f64> = v.iter().map(|x| if x == l { 1.0 } else { 0.0 }).collect();
                            let (m, s) = mean_and_sd(&ind);
                            (m, safe_scale(s))
                        })
                        .collect();
                    Expansion::OneHot { levels, stats }
                }
            })
            .collect();
        PolyFeatures { expansions }
    }

    pub fn width(&self) -> usize {
        self.expansions
            .iter()
            .map(|e| match e {
                Expansion::Cubic { .. } => 3,
                Expansion::OneHot { levels, .. } => levels.len(),
            })
            .sum()
    }

    pub fn transform(&self, table: &Table) -> Result<DMatrix<f64>> {
        if table.n_cols() != self.expansions.len() {
            return Err(CdeError::Shape(format!(
                "expected {} covariate columns, got {}",
                self.expansions.len(),
                table.n_cols()
            )));
        }
        let mut out = DMatrix::zeros(table.n_rows(), self.width());
        let mut off = 0;
        for (j, (e, col)) in self.expansions.iter().zip(table.columns()).enumerate() {
            match (e, col) {
                (Expansion::Cubic { mean, scale, power_stats }, Column::Numeric(v)) => {
                    for (r, x) in v.iter().enumerate() {
                        let z = (x - mean) / scale;
                        for (p, (m, s)) in power_stats.iter().enumerate() {
                            out[(r, off + p)] = (z.powi(p as i32 + 1) - m) / s;
                        }
                    }
                    off += 3;
                }
                (Expansion::OneHot { levels, stats }, Column::Categorical(v)) => {
                    for (r, x) in v.iter().enumerate() {
                        for (l, (level, (m, s))) in levels.iter().zip(stats).enumerate() {
                            let ind = if x == level { 1.0 } else { 0.0 };
                            out[(r, off + l)] = (ind - m) / s;
                        }
                    }
                    off += levels.len();
                }
                _ => return Err(CdeError::Shape(format!("covariate column {j} changed type"))),
            }
        }
        Ok(out)
    }
}

/// Result of one coordinate-descent solve.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub sweeps: usize,
    /// Objective `0.5 * MSE + penalty * |coef|_1` after each sweep.
    pub objective: Vec<f64>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Column-major design restricted to a row subset and centered on it.
pub(crate) struct CenteredDesign {
    n: usize,
    /// Column `j` occupies `cols[j*n..(j+1)*n]`.
    cols: Vec<f64>,
    means: Vec<f64>,
    /// `(1/n) * |x_j - mean_j|^2`.
    sq_norms: Vec<f64>,
}

impl CenteredDesign {
    pub(crate) fn new(x: &DMatrix<f64>, rows: &[usize]) -> Self {
        let n = rows.len();
        let p = x.ncols();
        let mut cols = vec![0.0; n * p];
        let mut means = vec![0.0; p];
        let mut sq_norms = vec![0.0; p];
        for j in 0..p {
            let m = rows.iter().map(|&r| x[(r, j)]).sum::<f64>() / n as f64;
            means[j] = m;
            let col = &mut cols[j * n..(j + 1) * n];
            for (slot, &r) in col.iter_mut().zip(rows) {
                *slot = x[(r, j)] - m;
            }
            sq_norms[j] = col.iter().map(|v| v * v).sum::<f64>() / n as f64;
        }
        CenteredDesign { n, cols, means, sq_norms }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    fn p(&self) -> usize {
        self.means.len()
    }
}

fn objective(resid: &[f64], coef: &[f64], penalty: f64) -> f64 {
    let n = resid.len() as f64;
    0.5 * resid.iter().map(|r| r * r).sum::<f64>() / n + penalty * coef.iter().map(|c| c.abs()).sum::<f64>()
}

/// Minimizes `(1/2n)|y - b0 - X b|^2 + penalty |b|_1` over the given design.
pub(crate) fn solve(design: &CenteredDesign, y: &[f64], penalty: f64, warm: Option<&[f64]>) -> LassoFit {
    let n = design.n;
    let p = design.p();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut coef: Vec<f64> = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p]);
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    for (j, &b) in coef.iter().enumerate() {
        if b != 0.0 {
            for (r, x) in resid.iter_mut().zip(design.col(j)) {
                *r -= b * x;
            }
        }
    }

    let mut trace = vec![objective(&resid, &coef, penalty)];
    let mut sweeps = 0;
    let update = |j: usize, coef: &mut [f64], resid: &mut [f64]| -> f64 {
        let s = design.sq_norms[j];
        if s <= 0.0 {
            return 0.0;
        }
        let xj = design.col(j);
        let old = coef[j];
        let rho = xj.iter().zip(resid.iter()).map(|(x, r)| x * r).sum::<f64>() / n as f64 + s * old;
        let new = soft_threshold(rho, penalty) / s;
        let delta = new - old;
        if delta != 0.0 {
            for (r, x) in resid.iter_mut().zip(xj) {
                *r -= delta * x;
            }
            coef[j] = new;
        }
        delta.abs()
    };

    while sweeps < MAX_SWEEPS {
        // Full sweep over all coordinates.
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            max_change = max_change.max(update(j, &mut coef, &mut resid));
        }
        sweeps += 1;
        trace.push(objective(&resid, &coef, penalty));
        if max_change < CD_TOLERANCE {
            break;
        }
        // Then iterate on the active set until it settles.
        let active: Vec<usize> = (0..p).filter(|&j| coef[j] != 0.0).collect();
        while sweeps < MAX_SWEEPS {
            let mut change: f64 = 0.0;
            for &j in &active {
                change = change.max(update(j, &mut coef, &mut resid));
            }
            sweeps += 1;
            trace.push(objective(&resid, &coef, penalty));
            if change < CD_TOLERANCE {
                break;
            }
        }
    }

    let intercept = y_mean - coef.iter().zip(&design.means).map(|(b, m)| b * m).sum::<f64>();
    LassoFit {
        intercept,
        coef,
        sweeps,
        objective: trace,
    }
}

/// Fits the penalized regression of `y` on the rows of `x`.
pub fn fit_lasso(x: &DMatrix<f64>, y: &[f64], penalty: f64) -> Result<LassoFit> {
    if x.nrows() != y.len() {
        return Err(CdeError::Shape(format!("{} design rows for {} targets", x.nrows(), y.len())));
    }
    if !(penalty > 0.0) {
        return Err(CdeError::Config("penalty must be positive".into()));
    }
    let rows: Vec<usize> = (0..x.nrows()).collect();
    Ok(solve(&CenteredDesign::new(x, &rows), y, penalty, None))
}

pub(crate) fn predict_row(x: &DMatrix<f64>, r: usize, intercept: f64, coef: &[f64]) -> f64 {
    intercept + coef.iter().enumerate().map(|(j, b)| if *b != 0.0 { b * x[(r, j)] } else { 0.0 }).sum::<f64>()
}
