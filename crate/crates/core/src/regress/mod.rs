//! Scalar regressions used to estimate the expansion coefficients.
//!
//! Every regressor is tuned the same way: candidate hyperparameters are fit
//! on one part of the training rows and scored by mean squared error on the
//! rest; the winner is refit on all training rows. Expensive per-candidate
//! work (distance matrices, neighbor orderings, kernel eigendecompositions,
//! feature maps) depends only on the covariates, so it is prepared once and
//! shared by every target fitted against the same covariates.

mod distance;
pub mod lasso;
pub mod spectral;
mod tune;

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use distance::{sq_dists, Covariates, Distance, DistanceKind, FeatureEncoder, Queries, Reference};
pub use lasso::{fit_lasso, LassoFit, PolyFeatures};
pub use spectral::{gaussian_kernel, spectral_embed, SpectralEmbedding};
pub(crate) use tune::Prepared;
pub(crate) use distance::median_offdiag;

use crate::error::{CdeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    Knn,
    NadarayaWatson,
    SpectralSeries,
    PenalizedLinear,
}

impl std::str::FromStr for RegressorKind {
    type Err = CdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "knn" => Ok(RegressorKind::Knn),
            "nw" | "nadaraya_watson" | "kernel" => Ok(RegressorKind::NadarayaWatson),
            "spectral" | "spec" | "spectral_series" => Ok(RegressorKind::SpectralSeries),
            "lasso" | "penalized_linear" => Ok(RegressorKind::PenalizedLinear),
            other => Err(CdeError::Config(format!("unknown regressor '{other}'"))),
        }
    }
}

impl std::fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressorKind::Knn => "knn",
            RegressorKind::NadarayaWatson => "nw",
            RegressorKind::SpectralSeries => "spectral",
            RegressorKind::PenalizedLinear => "lasso",
        })
    }
}

/// Candidate hyperparameters, one grid per regressor family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperGrid {
    Knn { neighbors: Vec<usize> },
    NadarayaWatson { bandwidths: Vec<f64> },
    SpectralSeries { bandwidths: Vec<f64>, eigenvectors: Vec<usize> },
    PenalizedLinear { penalties: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub grid: HyperGrid,
    /// Kernel bandwidths are multiples of the median squared pairwise
    /// training distance when set, absolute values otherwise.
    pub relative_bandwidth: bool,
    /// Share of training rows held out to score candidates.
    pub tune_fraction: f64,
}

const DEFAULT_TUNE_FRACTION: f64 = 0.25;

impl RegressorConfig {
    pub fn new(grid: HyperGrid) -> Self {
        RegressorConfig {
            grid,
            relative_bandwidth: true,
            tune_fraction: DEFAULT_TUNE_FRACTION,
        }
    }

    pub fn knn(neighbors: Vec<usize>) -> Self {
        Self::new(HyperGrid::Knn { neighbors })
    }

    pub fn nadaraya_watson(bandwidths: Vec<f64>) -> Self {
        Self::new(HyperGrid::NadarayaWatson { bandwidths })
    }

    pub fn spectral(bandwidths: Vec<f64>, eigenvectors: Vec<usize>) -> Self {
        Self::new(HyperGrid::SpectralSeries { bandwidths, eigenvectors })
    }

    pub fn penalized_linear(penalties: Vec<f64>) -> Self {
        Self::new(HyperGrid::PenalizedLinear { penalties })
    }

    pub fn with_absolute_bandwidth(mut self) -> Self {
        self.relative_bandwidth = false;
        self
    }

    /// Default grids for each family.
    pub fn default_for(kind: RegressorKind) -> Self {
        match kind {
            RegressorKind::Knn => Self::knn(vec![1, 2, 3, 5, 8, 12, 17, 25, 35, 50, 70, 100, 140, 200]),
            RegressorKind::NadarayaWatson => {
                Self::nadaraya_watson(vec![0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0])
            }
            RegressorKind::SpectralSeries => Self::spectral(
                vec![0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
                vec![1, 2, 3, 4, 6, 8, 10, 15, 20, 30, 40, 60, 80, 100, 150],
            ),
            RegressorKind::PenalizedLinear => {
                Self::penalized_linear(vec![0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001])
            }
        }
    }

    pub fn kind(&self) -> RegressorKind {
        match self.grid {
            HyperGrid::Knn { .. } => RegressorKind::Knn,
            HyperGrid::NadarayaWatson { .. } => RegressorKind::NadarayaWatson,
            HyperGrid::SpectralSeries { .. } => RegressorKind::SpectralSeries,
            HyperGrid::PenalizedLinear { .. } => RegressorKind::PenalizedLinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: &[f64]) -> Result<()> {
            if v.is_empty() {
                return Err(CdeError::Config(format!("{name} grid is empty")));
            }
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(CdeError::Config(format!("{name} grid value {x} must be positive")));
            }
            Ok(())
        }
        fn counts(name: &str, v: &[usize]) -> Result<()> {
            if v.is_empty() {
                return Err(CdeError::Config(format!("{name} grid is empty")));
            }
            if v.contains(&0) {
                return Err(CdeError::Config(format!("{name} grid values must be positive")));
            }
            Ok(())
        }
        match &self.grid {
            HyperGrid::Knn { neighbors } => counts("neighbor", neighbors)?,
            HyperGrid::NadarayaWatson { bandwidths } => positive("bandwidth", bandwidths)?,
            HyperGrid::SpectralSeries { bandwidths, eigenvectors } => {
                positive("bandwidth", bandwidths)?;
                counts("eigenvector", eigenvectors)?;
            }
            HyperGrid::PenalizedLinear { penalties } => positive("penalty", penalties)?,
        }
        if !(self.tune_fraction > 0.0 && self.tune_fraction < 1.0) {
            return Err(CdeError::Config(format!(
                "tune_fraction must lie in (0, 1), got {}",
                self.tune_fraction
            )));
        }
        Ok(())
    }
}

/// Hyperparameters selected for one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hyper {
    /// No tuning: constant target or degenerate covariates.
    Constant,
    Knn { k: usize },
    NadarayaWatson { bandwidth: f64 },
    SpectralSeries { bandwidth: f64, eigenvectors: usize },
    PenalizedLinear { penalty: f64 },
}

/// Fitted per-target state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetModel {
    Constant {
        value: f64,
    },
    Knn {
        k: usize,
        targets: Vec<f64>,
    },
    NadarayaWatson {
        /// Absolute bandwidth in squared-distance units.
        bandwidth: f64,
        targets: Vec<f64>,
        fallback: f64,
    },
    SpectralSeries {
        bandwidth: f64,
        eigenvectors: usize,
        /// Nystrom weights: prediction is `sum_k K(x, x_k) * weights[k]`,
        /// i.e. the top eigenpairs and projected coefficients collapsed
        /// into one vector over the training points.
        weights: Vec<f64>,
    },
    PenalizedLinear {
        intercept: f64,
        coef: Vec<f64>,
    },
}

/// Hyperparameters, fitted state and the held-out error that selected them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFit {
    pub hyper: Hyper,
    pub model: TargetModel,
    pub tune_mse: f64,
}

/// How covariates are turned into regression inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Distance { reference: Reference, scale: f64 },
    Linear { features: PolyFeatures },
}

/// Covariate-side state shared by every target of one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub kind: RegressorKind,
    pub geometry: Geometry,
}

/// Query covariates resolved against a [`Design`], reusable across targets.
pub struct QueryContext {
    n: usize,
    sq: Option<DMatrix<f64>>,
    features: Option<DMatrix<f64>>,
    order: OnceLock<Vec<Vec<u32>>>,
    kernels: std::sync::Mutex<Vec<(u64, Arc<DMatrix<f64>>)>>,
}

/// Training positions sorted by distance, ties by position.
pub(crate) fn neighbor_order(dists: impl Iterator<Item = f64>) -> Vec<u32> {
    let d: Vec<f64> = dists.collect();
    let mut idx: Vec<u32> = (0..d.len() as u32).collect();
    idx.sort_by(|&a, &b| d[a as usize].total_cmp(&d[b as usize]).then(a.cmp(&b)));
    idx
}

impl QueryContext {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn order(&self) -> &[Vec<u32>] {
        self.order.get_or_init(|| {
            let sq = self.sq.as_ref().expect("distance geometry");
            (0..sq.nrows()).map(|r| neighbor_order(sq.row(r).iter().copied())).collect()
        })
    }

    fn kernel(&self, bandwidth: f64) -> Result<Arc<DMatrix<f64>>> {
        let key = bandwidth.to_bits();
        let mut cache = self.kernels.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, k)) = cache.iter().find(|(b, _)| *b == key) {
            return Ok(Arc::clone(k));
        }
        let k = Arc::new(gaussian_kernel(self.sq.as_ref().expect("distance geometry"), bandwidth)?);
        cache.push((key, Arc::clone(&k)));
        Ok(k)
    }
}

impl Design {
    pub fn n_train(&self) -> Option<usize> {
        match &self.geometry {
            Geometry::Distance { reference, .. } => Some(reference.n_train()),
            Geometry::Linear { .. } => None,
        }
    }

    pub fn context(&self, q: &Queries) -> Result<QueryContext> {
        let (sq, features) = match &self.geometry {
            Geometry::Distance { reference, .. } => (Some(reference.query_sq_dists(q)?), None),
            Geometry::Linear { features } => match q {
                Queries::Table(t) => (None, Some(features.transform(t)?)),
                Queries::Distances(_) => {
                    return Err(CdeError::Shape("penalized linear models need table covariates".into()))
                }
            },
        };
        Ok(QueryContext {
            n: q.n_rows(),
            sq,
            features,
            order: OnceLock::new(),
            kernels: std::sync::Mutex::new(Vec::new()),
        })
    }
}

impl TargetModel {
    pub fn predict(&self, ctx: &QueryContext) -> Result<Vec<f64>> {
        let n = ctx.n;
        Ok(match self {
            TargetModel::Constant { value } => vec![*value; n],
            TargetModel::Knn { k, targets } => {
                let order = ctx.order();
                order
                    .iter()
                    .map(|o| {
                        let k = (*k).min(o.len()).max(1);
                        o[..k].iter().map(|&i| targets[i as usize]).sum::<f64>() / k as f64
                    })
                    .collect()
            }
            TargetModel::NadarayaWatson {
                bandwidth,
                targets,
                fallback,
            } => {
                let kern = ctx.kernel(*bandwidth)?;
                (0..n)
                    .map(|r| {
                        let mut num = 0.0;
                        let mut den = 0.0;
                        for (j, t) in targets.iter().enumerate() {
                            let w = kern[(r, j)];
                            num += w * t;
                            den += w;
                        }
                        if den > 0.0 && (num / den).is_finite() {
                            num / den
                        } else {
                            *fallback
                        }
                    })
                    .collect()
            }
            TargetModel::SpectralSeries { bandwidth, weights, .. } => {
                let kern = ctx.kernel(*bandwidth)?;
                (0..n)
                    .map(|r| weights.iter().enumerate().map(|(j, a)| kern[(r, j)] * a).sum())
                    .collect()
            }
            TargetModel::PenalizedLinear { intercept, coef } => {
                let f = ctx.features.as_ref().expect("linear geometry");
                (0..n).map(|r| lasso::predict_row(f, r, *intercept, coef)).collect()
            }
        })
    }
}

/// Owned query covariates, typically a row subset of a dataset.
#[derive(Debug, Clone)]
pub enum QueryData {
    Table(crate::table::Table),
    Distances(DMatrix<f64>),
}

impl QueryData {
    pub fn as_queries(&self) -> Queries<'_> {
        match self {
            QueryData::Table(t) => Queries::Table(t),
            QueryData::Distances(d) => Queries::Distances(d),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.as_queries().n_rows()
    }
}

impl Covariates {
    /// Queries for `rows` against a model trained on `train` (both index
    /// into these covariates).
    pub fn query_rows(&self, rows: &[usize], train: &[usize]) -> Result<QueryData> {
        match self {
            Covariates::Table(t) => Ok(QueryData::Table(t.select_rows(rows))),
            Covariates::Precomputed(d) => Ok(QueryData::Distances(d.block(rows, train)?)),
        }
    }
}

/// Disjoint fit/tune partition of row positions `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneSplit {
    pub fit: Vec<usize>,
    pub tune: Vec<usize>,
}

impl TuneSplit {
    pub fn new(fit: Vec<usize>, tune: Vec<usize>) -> Self {
        TuneSplit { fit, tune }
    }

    /// Seeded random partition with `round(n * tune_fraction)` tune rows
    /// (at least one of each).
    pub fn random(n: usize, tune_fraction: f64, seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        if n < 2 {
            return Err(CdeError::Size(format!("need at least 2 rows to tune, got {n}")));
        }
        let n_tune = ((n as f64 * tune_fraction).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut tune = idx[..n_tune].to_vec();
        let mut fit = idx[n_tune..].to_vec();
        tune.sort_unstable();
        fit.sort_unstable();
        Ok(TuneSplit { fit, tune })
    }

    pub(crate) fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.fit.iter().chain(&self.tune) {
            if i >= n {
                return Err(CdeError::Shape(format!("split index {i} outside 0..{n}")));
            }
            if seen[i] {
                return Err(CdeError::Contract(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CdeError::Contract(format!("split does not cover row {i}")));
        }
        if self.fit.is_empty() || self.tune.is_empty() {
            return Err(CdeError::Size("split parts must be nonempty".into()));
        }
        Ok(())
    }
}

/// A fitted scalar regression.
#[derive(Debug, Clone)]
pub struct FittedRegressor {
    pub design: Arc<Design>,
    pub fit: TargetFit,
}

impl FittedRegressor {
    pub fn kind(&self) -> RegressorKind {
        self.design.kind
    }

    pub fn hyper(&self) -> Hyper {
        self.fit.hyper
    }

    pub fn predict(&self, queries: &Queries) -> Result<Vec<f64>> {
        let ctx = self.design.context(queries)?;
        self.fit.model.predict(&ctx)
    }
}

/// Tunes and fits one regression of `w` on `x`.
///
/// Candidates are fit on `split.fit` and scored on `split.tune`; the best
/// candidate is refit on all rows.
pub fn fit_regressor(config: &RegressorConfig, x: &Covariates, w: &[f64], split: &TuneSplit) -> Result<FittedRegressor> {
    let n = x.n_rows();
    if w.len() != n {
        return Err(CdeError::Shape(format!("{} targets for {n} covariate rows", w.len())));
    }
    if n < 2 {
        return Err(CdeError::Size(format!("need at least 2 rows, got {n}")));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(CdeError::Numeric(format!("target {i} is not finite")));
    }
    split.validate(n)?;
    let rows: Vec<usize> = (0..n).collect();
    let prepared = Prepared::new(config, x, &rows, split)?;
    let fit = prepared.fit_target(w)?;
    Ok(FittedRegressor {
        design: Arc::new(prepared.into_design()),
        fit,
    })
}

#[cfg(test)]
mod tests;
