//! Kernel conditional density estimators used as comparators: the
//! isotropic kernel density ratio, kernel nearest neighbors and the
//! distance-based functional kernel estimator.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::ResponseScaler;
use crate::error::{CdeError, Result};
use crate::flexcode::{post_process_weighted, validate_fractions, PostProcess};
use crate::grid::{interpolate, trapezoid_weights, unit_grid, DEFAULT_GRID_CELLS};
use crate::loss::{loss_from_parts, make_split, ConditionalDensity, DataSplit, DensityRows, LossPath};
use crate::regress::median_offdiag;
use crate::regress::{neighbor_order, Covariates, FeatureEncoder, Queries, Reference};

/// Grid used while tuning baseline bandwidths.
pub const TUNE_GRID_CELLS: usize = 200;

const COVARIATE_BANDWIDTHS: [f64; 8] = [1.5, 1.0, 0.75, 0.5, 0.35, 0.2, 0.1, 0.05];
const RESPONSE_BANDWIDTHS: [f64; 8] = [0.2, 0.15, 0.1, 0.075, 0.05, 0.035, 0.02, 0.01];
const NEIGHBOR_COUNTS: [usize; 9] = [5, 10, 20, 35, 50, 75, 100, 150, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// `sum_i K_hx(|x - X_i|) K_hz(z - Z_i) / sum_i K_hx(|x - X_i|)` with
    /// isotropic Gaussian kernels on standardized covariates.
    KernelRatio,
    /// Gaussian kernel smoothing of the responses of the `k` nearest
    /// training points.
    KernelNeighbors,
    /// Functional kernel estimator: `K(d / hx)` with `K(u) = (1 - u^2)_+`
    /// on any covariate distance, Gaussian kernel on the response.
    FunctionalKernel,
}

impl FromStr for BaselineKind {
    type Err = CdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kde" | "kernel_ratio" => Ok(BaselineKind::KernelRatio),
            "knn_cde" | "kernel_neighbors" => Ok(BaselineKind::KernelNeighbors),
            "fkde" | "functional_kernel" => Ok(BaselineKind::FunctionalKernel),
            _ => Err(CdeError::Config(format!("unknown baseline '{s}'"))),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::KernelRatio => "kde",
            BaselineKind::KernelNeighbors => "knn_cde",
            BaselineKind::FunctionalKernel => "fkde",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub grid_cells: usize,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        BaselineConfig {
            kind,
            train_fraction: 0.7,
            validation_fraction: 0.15,
            seed: 0,
            grid_cells: DEFAULT_GRID_CELLS,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineHyper {
    /// Covariate bandwidth in distance units, response bandwidth on the unit scale.
    Bandwidths { covariate: f64, response: f64 },
    Neighbors { k: usize, response: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedBaseline {
    config: BaselineConfig,
    scaler: ResponseScaler,
    reference: Reference,
    /// Unit-scale responses of the training rows.
    train_u: Vec<f64>,
    hyper: BaselineHyper,
    validation_loss: f64,
    split: DataSplit,
}

fn reference_for(x: &Covariates, train: &[usize]) -> Result<Reference> {
    Ok(match x {
        Covariates::Table(t) => {
            let tt = t.select_rows(train);
            let encoder = FeatureEncoder::fit(&tt);
            let features = encoder.encode(&tt)?;
            Reference::Features {
                encoder,
                train: features,
            }
        }
        Covariates::Precomputed(_) => Reference::Precomputed { n_train: train.len() },
    })
}

/// Row-normalized covariate weights, queries x training points.
fn weights(hyper: BaselineHyper, kind: BaselineKind, sq: &DMatrix<f64>) -> DMatrix<f64> {
    let (nq, nt) = sq.shape();
    let mut w = DMatrix::zeros(nq, nt);
    for r in 0..nq {
        match hyper {
            BaselineHyper::Neighbors { k, .. } => {
                let order = neighbor_order(sq.row(r).iter().copied());
                for &j in order.iter().take(k.min(nt)) {
                    w[(r, j as usize)] = 1.0;
                }
            }
            BaselineHyper::Bandwidths { covariate: h, .. } => {
                for j in 0..nt {
                    w[(r, j)] = match kind {
                        BaselineKind::FunctionalKernel => (1.0 - sq[(r, j)] / (h * h)).max(0.0),
                        _ => (-sq[(r, j)] / (2.0 * h * h)).exp(),
                    };
                }
            }
        }
        let total: f64 = w.row(r).sum();
        if total > 0.0 {
            w.row_mut(r).iter_mut().for_each(|v| *v /= total);
        } else {
            w.row_mut(r).fill(1.0 / nt as f64);
        }
    }
    w
}

/// Gaussian response kernels, training points x grid.
fn response_kernels(train_u: &[f64], grid: &[f64], h: f64) -> DMatrix<f64> {
    let c = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    DMatrix::from_fn(train_u.len(), grid.len(), |i, g| {
        let t = (grid[g] - train_u[i]) / h;
        c * (-0.5 * t * t).exp()
    })
}

fn normalized_rows(raw: &DMatrix<f64>, grid: &[f64]) -> Result<DensityRows> {
    let w = trapezoid_weights(grid);
    let pp = PostProcess::default();
    let rows: Vec<_> = (0..raw.nrows())
        .into_par_iter()
        .map(|r| {
            let v: Vec<f64> = raw.row(r).iter().copied().collect();
            post_process_weighted(&w, &v, &pp)
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

fn candidates(kind: BaselineKind, scale: f64, n_train: usize) -> Vec<BaselineHyper> {
    let mut out = Vec::new();
    match kind {
        BaselineKind::KernelNeighbors => {
            for &k in NEIGHBOR_COUNTS.iter().filter(|&&k| k <= n_train) {
                for &hz in &RESPONSE_BANDWIDTHS {
                    out.push(BaselineHyper::Neighbors { k, response: hz });
                }
            }
            if out.is_empty() {
                for &hz in &RESPONSE_BANDWIDTHS {
                    out.push(BaselineHyper::Neighbors { k: n_train, response: hz });
                }
            }
        }
        _ => {
            // Functional kernels have compact support, so they start wider.
            let widen = if kind == BaselineKind::FunctionalKernel { 2.0 } else { 1.0 };
            for &hx in &COVARIATE_BANDWIDTHS {
                for &hz in &RESPONSE_BANDWIDTHS {
                    out.push(BaselineHyper::Bandwidths {
                        covariate: widen * hx * scale,
                        response: hz,
                    });
                }
            }
        }
    }
    out
}

/// Splits the data as the series estimator does, tunes the bandwidths by
/// validation loss on a coarse grid and keeps the best candidate.
pub fn fit_baseline(config: &BaselineConfig, x: &Covariates, z: &[f64]) -> Result<FittedBaseline> {
    validate_fractions(config.train_fraction, config.validation_fraction)?;
    if config.grid_cells < 2 {
        return Err(CdeError::Config("grid needs at least 2 cells".into()));
    }
    let n = x.n_rows();
    if z.len() != n {
        return Err(CdeError::Shape(format!("{} responses for {n} covariate rows", z.len())));
    }
    if n < 20 {
        return Err(CdeError::Size(format!("need at least 20 observations, got {n}")));
    }
    if let (BaselineKind::KernelRatio, Covariates::Precomputed(_)) = (config.kind, x) {
        return Err(CdeError::Config("the kernel ratio estimator needs a covariate table".into()));
    }
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
    let train_u: Vec<f64> = split.train.iter().map(|&r| u[r]).collect();
    let reference = reference_for(x, &split.train)?;
    let train_q = x.query_rows(&split.train, &split.train)?;
    let scale = median_offdiag(&reference.query_sq_dists(&train_q.as_queries())?).sqrt();
    let valid_q = x.query_rows(&split.validation, &split.train)?;
    let sq = reference.query_sq_dists(&valid_q.as_queries())?;
    let u_valid: Vec<f64> = split.validation.iter().map(|&r| u[r]).collect();

    let grid = unit_grid(TUNE_GRID_CELLS);
    let tw = trapezoid_weights(&grid);
    let cands = candidates(config.kind, scale, split.train.len());
    let losses: Vec<f64> = cands
        .par_iter()
        .map(|&h| {
            let hz = match h {
                BaselineHyper::Bandwidths { response, .. } | BaselineHyper::Neighbors { response, .. } => response,
            };
            let raw = weights(h, config.kind, &sq) * response_kernels(&train_u, &grid, hz);
            let d = normalized_rows(&raw, &grid)?;
            let mut sqn = Vec::with_capacity(u_valid.len());
            let mut at = Vec::with_capacity(u_valid.len());
            for (k, &uk) in u_valid.iter().enumerate() {
                let row: Vec<f64> = d.values.row(k).iter().copied().collect();
                sqn.push(row.iter().zip(&tw).map(|(f, w)| f * f * w).sum());
                at.push(interpolate(&grid, &row, uk));
            }
            Ok(loss_from_parts(&sqn, &at, LossPath::Grid)?.loss)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(FittedBaseline {
        config: config.clone(),
        scaler,
        reference,
        train_u,
        hyper: cands[best],
        validation_loss: losses[best],
        split,
    })
}

impl FittedBaseline {
    pub fn kind(&self) -> BaselineKind {
        self.config.kind
    }

    pub fn hyper(&self) -> BaselineHyper {
        self.hyper
    }

    pub fn validation_loss(&self) -> f64 {
        self.validation_loss
    }

    pub fn split(&self) -> &DataSplit {
        &self.split
    }

    pub fn unit_densities_on(&self, queries: &Queries, grid: &[f64]) -> Result<DensityRows> {
        let sq = self.reference.query_sq_dists(queries)?;
        let hz = match self.hyper {
            BaselineHyper::Bandwidths { response, .. } | BaselineHyper::Neighbors { response, .. } => response,
        };
        let raw = weights(self.hyper, self.config.kind, &sq) * response_kernels(&self.train_u, grid, hz);
        normalized_rows(&raw, grid)
    }
}

impl ConditionalDensity for FittedBaseline {
    fn scaler(&self) -> &ResponseScaler {
        &self.scaler
    }

    fn reference_grid(&self) -> Vec<f64> {
        unit_grid(self.config.grid_cells)
    }

    fn unit_densities(&self, queries: &Queries) -> Result<DensityRows> {
        self.unit_densities_on(queries, &self.reference_grid())
    }
}
