//! Series conditional density estimator: one regression per basis
//! coefficient, with the number of retained terms chosen on held-out data.

mod bivariate;
mod density;
pub mod model_io;

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bivariate::{fit_2d, CutoffPairScore, Density2d, FittedCde2d, FlexCode2dConfig};
pub use density::{normalize_density, NormalizedDensity, PostProcess};
pub(crate) use density::{post_process_weighted, post_process_2d};

use crate::basis::{eval_basis, BasisSpec, ResponseScaler};
use crate::error::{CdeError, Result};
use crate::grid::{interpolate, trapezoid_weights, unit_grid, DEFAULT_GRID_CELLS};
use crate::loss::{loss_from_parts, make_split, ConditionalDensity, DataSplit, DensityRows, LossPath};
use crate::regress::{Covariates, Design, FittedRegressor, Prepared, Queries, RegressorConfig, TargetFit, TuneSplit};

pub const DEFAULT_MAX_CUTOFF: usize = 31;

/// Offset mixed into the seed of the regression tuning split.
const TUNE_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexCodeConfig {
    pub basis: BasisSpec,
    pub regressor: RegressorConfig,
    /// Largest number of basis terms considered.
    pub max_cutoff: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub post_process: PostProcess,
    /// Cells of the unit grid densities are post-processed on.
    pub grid_cells: usize,
}

impl FlexCodeConfig {
    pub fn new(basis: BasisSpec, regressor: RegressorConfig) -> Self {
        FlexCodeConfig {
            max_cutoff: DEFAULT_MAX_CUTOFF.min(basis.effective_terms()),
            basis,
            regressor,
            train_fraction: 0.7,
            validation_fraction: 0.15,
            seed: 0,
            post_process: PostProcess::default(),
            grid_cells: DEFAULT_GRID_CELLS,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_cutoff(mut self, max_cutoff: usize) -> Self {
        self.max_cutoff = max_cutoff;
        self
    }

    pub fn with_fractions(mut self, train: f64, validation: f64) -> Self {
        self.train_fraction = train;
        self.validation_fraction = validation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        self.regressor.validate()?;
        self.post_process.validate()?;
        if self.max_cutoff == 0 || self.max_cutoff > self.basis.effective_terms() {
            return Err(CdeError::Config(format!(
                "max cutoff {} must lie in 1..={}",
                self.max_cutoff,
                self.basis.effective_terms()
            )));
        }
        validate_fractions(self.train_fraction, self.validation_fraction)?;
        if self.grid_cells < 2 {
            return Err(CdeError::Config("grid needs at least 2 cells".into()));
        }
        Ok(())
    }
}

pub(crate) fn validate_fractions(train: f64, validation: f64) -> Result<()> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(train) || !ok(validation) || train + validation >= 1.0 {
        return Err(CdeError::Config(format!(
            "train ({train}) and validation ({validation}) fractions must lie in (0, 1) and sum to less than 1"
        )));
    }
    Ok(())
}

/// Validation loss of one candidate cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffScore {
    pub cutoff: usize,
    /// Loss of the post-processed density (the selection criterion).
    pub loss: f64,
    pub se: f64,
    /// Loss of the raw truncated series.
    pub coefficient_loss: f64,
}

/// A fitted univariate-response estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedCde {
    config: FlexCodeConfig,
    scaler: ResponseScaler,
    cutoff: usize,
    design: Arc<Design>,
    fits: Vec<TargetFit>,
    trace: Vec<CutoffScore>,
    split: DataSplit,
}

/// Densities on a caller-supplied grid of the original response scale.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub z: Vec<f64>,
    /// One row per query.
    pub values: DMatrix<f64>,
    /// Queries whose raw series had no positive mass.
    pub fallback: Vec<bool>,
}

/// Covariate state shared by all targets fitted on the same training rows.
pub(crate) fn prepare(
    regressor: &RegressorConfig,
    x: &Covariates,
    split: &DataSplit,
    seed: u64,
) -> Result<Prepared> {
    let inner = TuneSplit::random(split.train.len(), regressor.tune_fraction, seed ^ TUNE_SEED_OFFSET)?;
    Prepared::new(regressor, x, &split.train, &inner)
}

pub(crate) fn check_inputs(x: &Covariates, n_z: usize) -> Result<usize> {
    let n = x.n_rows();
    if n_z != n {
        return Err(CdeError::Shape(format!("{n_z} responses for {n} covariate rows")));
    }
    if n < 20 {
        return Err(CdeError::Size(format!("need at least 20 observations, got {n}")));
    }
    Ok(n)
}

/// Fits the estimator: splits the data, regresses the first `max_cutoff`
/// basis functions of the scaled response on the covariates and keeps the
/// cutoff with the smallest validation loss (smallest cutoff on ties).
pub fn fit(config: &FlexCodeConfig, x: &Covariates, z: &[f64]) -> Result<FittedCde> {
    config.validate()?;
    let n = check_inputs(x, z.len())?;
    let scaler = ResponseScaler::fit(z)?;
    let split = make_split(
        n,
        (
            config.train_fraction,
            config.validation_fraction,
            1.0 - config.train_fraction - config.validation_fraction,
        ),
        config.seed,
    )?;
    let u: Vec<f64> = z.iter().map(|&v| scaler.to_unit(v).clamp(0.0, 1.0)).collect();

    let prepared = prepare(&config.regressor, x, &split, config.seed)?;
    let fits: Vec<TargetFit> = (0..config.max_cutoff)
        .into_par_iter()
        .map(|i| {
            let w: Vec<f64> = split.train.iter().map(|&r| config.basis.value(i, u[r])).collect();
            prepared.fit_target(&w)
        })
        .collect::<Result<_>>()?;
    let design = Arc::new(prepared.into_design());

    let vq = x.query_rows(&split.validation, &split.train)?;
    let ctx = design.context(&vq.as_queries())?;
    let beta: Vec<Vec<f64>> = fits.par_iter().map(|f| f.model.predict(&ctx)).collect::<Result<_>>()?;
    let u_valid: Vec<f64> = split.validation.iter().map(|&r| u[r]).collect();
    let trace = score_cutoffs(config, &beta, &u_valid)?;

    let mut cutoff = 1;
    let mut best = f64::INFINITY;
    for s in &trace {
        if s.loss < best {
            best = s.loss;
            cutoff = s.cutoff;
        }
    }
    let mut fits = fits;
    fits.truncate(cutoff);
    Ok(FittedCde {
        config: config.clone(),
        scaler,
        cutoff,
        design,
        fits,
        trace,
        split,
    })
}

/// Validation loss for every cutoff `1..=max_cutoff` given the predicted
/// coefficients (`beta[i][k]` for term `i` at validation point `k`).
fn score_cutoffs(config: &FlexCodeConfig, beta: &[Vec<f64>], u_valid: &[f64]) -> Result<Vec<CutoffScore>> {
    let i0 = beta.len();
    let grid = unit_grid(config.grid_cells);
    let w = trapezoid_weights(&grid);
    let phi = eval_basis(&config.basis, &grid)?;
    let phi_cols: Vec<Vec<f64>> = (0..i0).map(|i| phi.column(i).iter().copied().collect()).collect();

    // parts[k] = per-cutoff (grid sq, grid at-obs, coefficient sq, coefficient at-obs)
    let parts: Vec<Vec<[f64; 4]>> = u_valid
        .par_iter()
        .enumerate()
        .map(|(k, &uk)| {
            let mut raw = vec![0.0; grid.len()];
            let mut csq = 0.0;
            let mut cat = 0.0;
            let mut out = Vec::with_capacity(i0);
            for i in 0..i0 {
                let b = beta[i][k];
                for (r, p) in raw.iter_mut().zip(&phi_cols[i]) {
                    *r += b * p;
                }
                csq += b * b;
                cat += b * config.basis.value(i, uk);
                let d = post_process_weighted(&w, &raw, &config.post_process)?;
                let gsq: f64 = d.values.iter().zip(&w).map(|(f, w)| f * f * w).sum();
                let gat = interpolate(&grid, &d.values, uk);
                out.push([gsq, gat, csq, cat]);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    (0..i0)
        .map(|i| {
            let col = |c: usize| parts.iter().map(|p| p[i][c]).collect::<Vec<f64>>();
            let g = loss_from_parts(&col(0), &col(1), LossPath::Grid)?;
            let c = loss_from_parts(&col(2), &col(3), LossPath::Coefficients)?;
            Ok(CutoffScore {
                cutoff: i + 1,
                loss: g.loss,
                se: g.se,
                coefficient_loss: c.loss,
            })
        })
        .collect()
}

impl FittedCde {
    pub fn config(&self) -> &FlexCodeConfig {
        &self.config
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn response_scaler(&self) -> &ResponseScaler {
        &self.scaler
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.config.basis
    }

    pub fn trace(&self) -> &[CutoffScore] {
        &self.trace
    }

    pub fn split(&self) -> &DataSplit {
        &self.split
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn target_fits(&self) -> &[TargetFit] {
        &self.fits
    }

    /// The regression estimating coefficient `i` (zero-based).
    pub fn regressor(&self, i: usize) -> Option<FittedRegressor> {
        self.fits.get(i).map(|f| FittedRegressor {
            design: Arc::clone(&self.design),
            fit: f.clone(),
        })
    }

    /// Predicted expansion coefficients, queries x cutoff.
    pub fn coefficients(&self, queries: &Queries) -> Result<DMatrix<f64>> {
        let ctx = self.design.context(queries)?;
        let cols: Vec<Vec<f64>> = self.fits.par_iter().map(|f| f.model.predict(&ctx)).collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(queries.n_rows(), self.cutoff, |r, c| cols[c][r]))
    }

    /// Raw truncated series on a unit-scale grid, queries x grid.
    pub fn raw_unit_series(&self, queries: &Queries, grid: &[f64]) -> Result<DMatrix<f64>> {
        let coef = self.coefficients(queries)?;
        let phi = eval_basis(&self.config.basis, grid)?;
        let phi = phi.columns(0, self.cutoff);
        Ok(coef * phi.transpose())
    }

    /// Post-processed unit-scale densities on `grid`.
    pub fn unit_densities_on(&self, queries: &Queries, grid: &[f64]) -> Result<DensityRows> {
        let raw = self.raw_unit_series(queries, grid)?;
        let w = trapezoid_weights(grid);
        let rows: Vec<_> = (0..raw.nrows())
            .into_par_iter()
            .map(|r| {
                let v: Vec<f64> = raw.row(r).iter().copied().collect();
                post_process_weighted(&w, &v, &self.config.post_process)
            })
            .collect::<Result<_>>()?;
        let mut values = DMatrix::zeros(raw.nrows(), grid.len());
        let mut fallback = Vec::with_capacity(rows.len());
        for (r, d) in rows.into_iter().enumerate() {
            values.row_mut(r).iter_mut().zip(&d.values).for_each(|(a, b)| *a = *b);
            fallback.push(d.fallback);
        }
        Ok(DensityRows { values, fallback })
    }

    /// Densities on `z_grid` (original response scale, ascending, inside
    /// the observed response range).
    ///
    /// A grid spanning the whole range is post-processed directly, so its
    /// rows integrate to one on it; any other grid is read off the model's
    /// reference grid by linear interpolation.
    pub fn predict_density(&self, queries: &Queries, z_grid: &[f64]) -> Result<DensityGrid> {
        let (u, full) = unit_positions(&self.scaler, z_grid)?;
        let width = self.scaler.width();
        let (values, fallback) = if full {
            let d = self.unit_densities_on(queries, &u)?;
            (d.values / width, d.fallback)
        } else {
            let grid = self.reference_grid();
            let d = self.unit_densities_on(queries, &grid)?;
            let mut out = DMatrix::zeros(d.values.nrows(), u.len());
            for r in 0..d.values.nrows() {
                let row: Vec<f64> = d.values.row(r).iter().copied().collect();
                for (c, &uc) in u.iter().enumerate() {
                    out[(r, c)] = interpolate(&grid, &row, uc) / width;
                }
            }
            (out, d.fallback)
        };
        Ok(DensityGrid {
            z: z_grid.to_vec(),
            values,
            fallback,
        })
    }
}

/// Maps a response grid into the unit interval. The flag reports whether
/// the grid covers the whole response range.
pub(crate) fn unit_positions(scaler: &ResponseScaler, z_grid: &[f64]) -> Result<(Vec<f64>, bool)> {
    if z_grid.len() < 2 {
        return Err(CdeError::Size("response grid needs at least two points".into()));
    }
    if let Some(i) = z_grid.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(CdeError::Config(format!("response grid is not ascending at index {}", i + 1)));
    }
    let tol = 1e-9 * scaler.width();
    let domain = || format!("[{}, {}]", scaler.z_min, scaler.z_max);
    for (i, &z) in z_grid.iter().enumerate() {
        if !(z >= scaler.z_min - tol && z <= scaler.z_max + tol) {
            return Err(CdeError::Domain {
                index: i,
                value: z,
                domain: domain(),
            });
        }
    }
    let full = (z_grid[0] - scaler.z_min).abs() <= tol && (z_grid[z_grid.len() - 1] - scaler.z_max).abs() <= tol;
    let mut u: Vec<f64> = z_grid.iter().map(|&z| scaler.to_unit(z).clamp(0.0, 1.0)).collect();
    if full {
        u[0] = 0.0;
        let last = u.len() - 1;
        u[last] = 1.0;
    }
    Ok((u, full))
}

impl ConditionalDensity for FittedCde {
    fn scaler(&self) -> &ResponseScaler {
        &self.scaler
    }

    fn reference_grid(&self) -> Vec<f64> {
        unit_grid(self.config.grid_cells)
    }

    fn unit_densities(&self, queries: &Queries) -> Result<DensityRows> {
        self.unit_densities_on(queries, &self.reference_grid())
    }

    fn series(&self, queries: &Queries) -> Option<Result<(DMatrix<f64>, BasisSpec)>> {
        Some(self.coefficients(queries).map(|c| (c, self.config.basis)))
    }
}

#[cfg(test)]
mod tests;
