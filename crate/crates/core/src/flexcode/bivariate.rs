//! Bivariate responses through a tensor-product basis.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_inputs, prepare, unit_positions, validate_fractions, PostProcess};
use crate::basis::{eval_basis, ResponseScaler, TensorBasisSpec};
use crate::error::{CdeError, Result};
use crate::grid::{trapezoid_weights, unit_grid};
use crate::loss::{loss_from_parts, make_split, DataSplit, LossPath};
use crate::regress::{Covariates, Design, Queries, RegressorConfig, TargetFit};

pub const DEFAULT_MAX_CUTOFF_2D: usize = 15;
pub const DEFAULT_GRID_CELLS_2D: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexCode2dConfig {
    pub basis: TensorBasisSpec,
    pub regressor: RegressorConfig,
    /// Largest cutoff per response coordinate.
    pub max_cutoffs: (usize, usize),
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub post_process: PostProcess,
    /// Cells per axis of the product grid.
    pub grid_cells: usize,
}

impl FlexCode2dConfig {
    pub fn new(basis: TensorBasisSpec, regressor: RegressorConfig) -> Self {
        let (e1, e2) = basis.effective_terms();
        FlexCode2dConfig {
            basis,
            regressor,
            max_cutoffs: (DEFAULT_MAX_CUTOFF_2D.min(e1), DEFAULT_MAX_CUTOFF_2D.min(e2)),
            train_fraction: 0.7,
            validation_fraction: 0.15,
            seed: 0,
            post_process: PostProcess::default(),
            grid_cells: DEFAULT_GRID_CELLS_2D,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.first.validate()?;
        self.basis.second.validate()?;
        self.regressor.validate()?;
        self.post_process.validate()?;
        let (e1, e2) = self.basis.effective_terms();
        let (m1, m2) = self.max_cutoffs;
        if m1 == 0 || m2 == 0 || m1 > e1 || m2 > e2 {
            return Err(CdeError::Config(format!(
                "max cutoffs ({m1}, {m2}) must lie in 1..={e1} and 1..={e2}"
            )));
        }
        validate_fractions(self.train_fraction, self.validation_fraction)?;
        if self.grid_cells < 2 {
            return Err(CdeError::Config("grid needs at least 2 cells per axis".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffPairScore {
    pub cutoffs: (usize, usize),
    pub loss: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedCde2d {
    config: FlexCode2dConfig,
    scalers: (ResponseScaler, ResponseScaler),
    cutoffs: (usize, usize),
    design: Arc<Design>,
    /// Row-major over `(i, j)` with `i < cutoffs.0`, `j < cutoffs.1`.
    fits: Vec<TargetFit>,
    trace: Vec<CutoffPairScore>,
    split: DataSplit,
}

/// Bivariate densities on a product grid of the original response scale.
#[derive(Debug, Clone)]
pub struct Density2d {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    /// One row per query; each row is the `z1.len() x z2.len()` grid in
    /// row-major order.
    pub values: DMatrix<f64>,
    pub fallback: Vec<bool>,
}

/// Fits tensor-product regressions for every `(i, j)` inside the maximal
/// rectangle and keeps the cutoff pair with the smallest validation loss.
pub fn fit_2d(config: &FlexCode2dConfig, x: &Covariates, z: &[(f64, f64)]) -> Result<FittedCde2d> {
    config.validate()?;
    let n = check_inputs(x, z.len())?;
    let z1: Vec<f64> = z.iter().map(|p| p.0).collect();
    let z2: Vec<f64> = z.iter().map(|p| p.1).collect();
    let scalers = (ResponseScaler::fit(&z1)?, ResponseScaler::fit(&z2)?);
    let u1: Vec<f64> = z1.iter().map(|&v| scalers.0.to_unit(v).clamp(0.0, 1.0)).collect();
    let u2: Vec<f64> = z2.iter().map(|&v| scalers.1.to_unit(v).clamp(0.0, 1.0)).collect();
    let split = make_split(
        n,
        (
            config.train_fraction,
            config.validation_fraction,
            1.0 - config.train_fraction - config.validation_fraction,
        ),
        config.seed,
    )?;
    let (m1, m2) = config.max_cutoffs;
    let (b1, b2) = (config.basis.first, config.basis.second);

    let prepared = prepare(&config.regressor, x, &split, config.seed)?;
    let all: Vec<TargetFit> = (0..m1 * m2)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / m2, c % m2);
            let w: Vec<f64> = split
                .train
                .iter()
                .map(|&r| b1.value(i, u1[r]) * b2.value(j, u2[r]))
                .collect();
            prepared.fit_target(&w)
        })
        .collect::<Result<_>>()?;
    let design = Arc::new(prepared.into_design());

    let vq = x.query_rows(&split.validation, &split.train)?;
    let ctx = design.context(&vq.as_queries())?;
    let beta: Vec<Vec<f64>> = all.par_iter().map(|f| f.model.predict(&ctx)).collect::<Result<_>>()?;

    // Per validation point, 2-D prefix sums of beta^2 and beta * phi(z').
    let nv = split.validation.len();
    let mut sq = vec![vec![0.0; nv]; m1 * m2];
    let mut at = vec![vec![0.0; nv]; m1 * m2];
    for (k, &r) in split.validation.iter().enumerate() {
        let p1: Vec<f64> = (0..m1).map(|i| b1.value(i, u1[r])).collect();
        let p2: Vec<f64> = (0..m2).map(|j| b2.value(j, u2[r])).collect();
        for i in 0..m1 {
            for j in 0..m2 {
                let b = beta[i * m2 + j][k];
                let mut s = b * b;
                let mut a = b * p1[i] * p2[j];
                if i > 0 {
                    s += sq[(i - 1) * m2 + j][k];
                    a += at[(i - 1) * m2 + j][k];
                }
                if j > 0 {
                    s += sq[i * m2 + j - 1][k];
                    a += at[i * m2 + j - 1][k];
                }
                if i > 0 && j > 0 {
                    s -= sq[(i - 1) * m2 + j - 1][k];
                    a -= at[(i - 1) * m2 + j - 1][k];
                }
                sq[i * m2 + j][k] = s;
                at[i * m2 + j][k] = a;
            }
        }
    }
    let mut trace = Vec::with_capacity(m1 * m2);
    for i in 0..m1 {
        for j in 0..m2 {
            let r = loss_from_parts(&sq[i * m2 + j], &at[i * m2 + j], LossPath::Coefficients)?;
            trace.push(CutoffPairScore {
                cutoffs: (i + 1, j + 1),
                loss: r.loss,
                se: r.se,
            });
        }
    }
    let mut best = &trace[0];
    for s in &trace {
        let size = |p: (usize, usize)| (p.0 * p.1, p.0);
        if s.loss < best.loss || (s.loss == best.loss && size(s.cutoffs) < size(best.cutoffs)) {
            best = s;
        }
    }
    let cutoffs = best.cutoffs;
    let fits: Vec<TargetFit> = (0..cutoffs.0)
        .flat_map(|i| (0..cutoffs.1).map(move |j| i * m2 + j))
        .map(|c| all[c].clone())
        .collect();
    Ok(FittedCde2d {
        config: config.clone(),
        scalers,
        cutoffs,
        design,
        fits,
        trace,
        split,
    })
}

impl FittedCde2d {
    pub fn config(&self) -> &FlexCode2dConfig {
        &self.config
    }

    pub fn cutoffs(&self) -> (usize, usize) {
        self.cutoffs
    }

    pub fn response_scalers(&self) -> (ResponseScaler, ResponseScaler) {
        self.scalers
    }

    pub fn trace(&self) -> &[CutoffPairScore] {
        &self.trace
    }

    pub fn split(&self) -> &DataSplit {
        &self.split
    }

    /// Predicted tensor coefficients, queries x `(I1 * I2)` row-major.
    pub fn coefficients(&self, queries: &Queries) -> Result<DMatrix<f64>> {
        let ctx = self.design.context(queries)?;
        let cols: Vec<Vec<f64>> = self.fits.par_iter().map(|f| f.model.predict(&ctx)).collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(queries.n_rows(), cols.len(), |r, c| cols[c][r]))
    }

    fn unit_on(&self, queries: &Queries, g1: &[f64], g2: &[f64]) -> Result<(DMatrix<f64>, Vec<bool>)> {
        let (c1, c2) = self.cutoffs;
        let coef = self.coefficients(queries)?;
        let p1 = eval_basis(&self.config.basis.first, g1)?;
        let p2 = eval_basis(&self.config.basis.second, g2)?;
        let (w1, w2) = (trapezoid_weights(g1), trapezoid_weights(g2));
        let (n1, n2) = (g1.len(), g2.len());
        let rows: Vec<_> = (0..coef.nrows())
            .into_par_iter()
            .map(|r| {
                // raw = P1 * B * P2^T with B the c1 x c2 coefficient block.
                let b = DMatrix::from_fn(c1, c2, |i, j| coef[(r, i * c2 + j)]);
                let raw = p1.columns(0, c1) * b * p2.columns(0, c2).transpose();
                let flat: Vec<f64> = (0..n1 * n2).map(|t| raw[(t / n2, t % n2)]).collect();
                super::post_process_2d(&w1, &w2, &flat, &self.config.post_process)
            })
            .collect::<Result<_>>()?;
        let mut values = DMatrix::zeros(coef.nrows(), n1 * n2);
        let mut fallback = Vec::with_capacity(rows.len());
        for (r, d) in rows.into_iter().enumerate() {
            values.row_mut(r).iter_mut().zip(&d.values).for_each(|(a, b)| *a = *b);
            fallback.push(d.fallback);
        }
        Ok((values, fallback))
    }

    /// Densities on the full observed response rectangle with
    /// `config.grid_cells` cells per axis.
    pub fn predict_density_default(&self, queries: &Queries) -> Result<Density2d> {
        let g = unit_grid(self.config.grid_cells);
        let z1: Vec<f64> = g.iter().map(|&u| self.scalers.0.from_unit(u)).collect();
        let z2: Vec<f64> = g.iter().map(|&u| self.scalers.1.from_unit(u)).collect();
        self.predict_density(queries, &z1, &z2)
    }

    /// Densities on the product of two ascending grids spanning the
    /// observed response ranges.
    pub fn predict_density(&self, queries: &Queries, z1: &[f64], z2: &[f64]) -> Result<Density2d> {
        let (u1, full1) = unit_positions(&self.scalers.0, z1)?;
        let (u2, full2) = unit_positions(&self.scalers.1, z2)?;
        if !(full1 && full2) {
            return Err(CdeError::Config(
                "bivariate grids must span the observed response ranges".into(),
            ));
        }
        let (values, fallback) = self.unit_on(queries, &u1, &u2)?;
        let area = self.scalers.0.width() * self.scalers.1.width();
        Ok(Density2d {
            z1: z1.to_vec(),
            z2: z2.to_vec(),
            values: values / area,
            fallback,
        })
    }
}
