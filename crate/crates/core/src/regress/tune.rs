//! Covariate-side tuning cache and per-target hyperparameter search.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::distance::{median_offdiag, sq_dists, Covariates, FeatureEncoder, Reference};
use super::lasso::{self, CenteredDesign, PolyFeatures};
use super::spectral::{gaussian_kernel, SpectralEmbedding, RELATIVE_EIGEN_FLOOR};
use super::{neighbor_order, Design, Geometry, Hyper, HyperGrid, RegressorConfig, TargetFit, TargetModel, TuneSplit};
use crate::error::{CdeError, Result};

/// Spectral state for one bandwidth on the fit rows.
struct SpectralTune {
    /// Usable eigenvalues, descending.
    values: Vec<f64>,
    /// `n_fit x J` eigenvectors.
    vectors: DMatrix<f64>,
    /// `n_tune x J`: kernel rows of the tune points times the eigenvectors.
    cross: DMatrix<f64>,
}

enum Cache {
    Constant,
    Knn {
        /// For each tune row, fit positions by increasing distance.
        order: Vec<Vec<u32>>,
    },
    Nw {
        /// Per bandwidth, the `n_tune x n_fit` kernel weights.
        kernels: Vec<DMatrix<f64>>,
    },
    Spectral {
        tune: Vec<SpectralTune>,
        full: Vec<OnceLock<std::result::Result<SpectralEmbedding, String>>>,
        full_gram_sq: DMatrix<f64>,
    },
    Lasso {
        /// Designs on the fit rows and on all rows.
        fit: CenteredDesign,
        full: CenteredDesign,
        features: DMatrix<f64>,
    },
}

/// Everything about the covariates needed to tune and refit any number of
/// targets over the same rows.
pub(crate) struct Prepared {
    config: RegressorConfig,
    design: Design,
    split: TuneSplit,
    /// Grid values in preference order (largest bandwidth / penalty first,
    /// smallest neighbor count first).
    values: Vec<f64>,
    counts: Vec<usize>,
    cache: Cache,
    n: usize,
}

fn descending(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    v
}

fn ascending(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn mse(pred: impl Iterator<Item = f64>, truth: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.zip(truth) {
        s += (p - t) * (p - t);
        n += 1;
    }
    s / n as f64
}

impl Prepared {
    /// `rows` selects the training rows of `x`; `split` partitions positions
    /// `0..rows.len()`.
    pub(crate) fn new(config: &RegressorConfig, x: &Covariates, rows: &[usize], split: &TuneSplit) -> Result<Self> {
        config.validate()?;
        let n = rows.len();
        split.validate(n)?;
        let kind = config.kind();
        let (mut values, counts) = match &config.grid {
            HyperGrid::Knn { neighbors } => (Vec::new(), ascending(neighbors)),
            HyperGrid::NadarayaWatson { bandwidths } => (descending(bandwidths), Vec::new()),
            HyperGrid::SpectralSeries { bandwidths, eigenvectors } => (descending(bandwidths), ascending(eigenvectors)),
            HyperGrid::PenalizedLinear { penalties } => (descending(penalties), Vec::new()),
        };

        if let HyperGrid::PenalizedLinear { .. } = config.grid {
            let Covariates::Table(t) = x else {
                return Err(CdeError::Config(
                    "the penalized linear regressor needs table covariates, not a distance matrix".into(),
                ));
            };
            let table = t.select_rows(rows);
            let poly = PolyFeatures::fit(&table);
            let features = poly.transform(&table)?;
            let cache = Cache::Lasso {
                fit: CenteredDesign::new(&features, &split.fit),
                full: CenteredDesign::new(&features, &(0..n).collect::<Vec<_>>()),
                features,
            };
            return Ok(Prepared {
                config: config.clone(),
                design: Design {
                    kind,
                    geometry: Geometry::Linear { features: poly },
                },
                split: split.clone(),
                values,
                counts,
                cache,
                n,
            });
        }

        let (reference, train_sq) = match x {
            Covariates::Table(t) => {
                let table = t.select_rows(rows);
                let encoder = FeatureEncoder::fit(&table);
                let train = encoder.encode(&table)?;
                let sq = sq_dists(&train, &train);
                (Reference::Features { encoder, train }, sq)
            }
            Covariates::Precomputed(d) => {
                let block = d.block(rows, rows)?;
                (Reference::Precomputed { n_train: n }, block.map(|v| v * v))
            }
        };
        let scale = if config.relative_bandwidth { median_offdiag(&train_sq) } else { 1.0 };
        for v in &mut values {
            *v *= scale;
        }
        let degenerate = train_sq.iter().all(|&d| d <= 0.0);

        let cache = if degenerate {
            Cache::Constant
        } else {
            let tune_fit = sub(&train_sq, &split.tune, &split.fit);
            match config.grid {
                HyperGrid::Knn { .. } => Cache::Knn {
                    order: (0..tune_fit.nrows())
                        .map(|r| neighbor_order(tune_fit.row(r).iter().copied()))
                        .collect(),
                },
                HyperGrid::NadarayaWatson { .. } => Cache::Nw {
                    kernels: values
                        .iter()
                        .map(|&b| gaussian_kernel(&tune_fit, b))
                        .collect::<Result<_>>()?,
                },
                HyperGrid::SpectralSeries { .. } => {
                    let fit_fit = sub(&train_sq, &split.fit, &split.fit);
                    let j_max = counts.last().copied().unwrap_or(1);
                    let tune = values
                        .iter()
                        .map(|&b| spectral_tune(&fit_fit, &tune_fit, b, j_max))
                        .collect::<Result<_>>()?;
                    Cache::Spectral {
                        tune,
                        full: values.iter().map(|_| OnceLock::new()).collect(),
                        full_gram_sq: train_sq.clone(),
                    }
                }
                HyperGrid::PenalizedLinear { .. } => unreachable!(),
            }
        };

        Ok(Prepared {
            config: config.clone(),
            design: Design {
                kind,
                geometry: Geometry::Distance { reference, scale },
            },
            split: split.clone(),
            values,
            counts,
            cache,
            n,
        })
    }

    pub(crate) fn into_design(self) -> Design {
        self.design
    }

    /// The grid value as configured (relative when bandwidths are relative).
    fn configured(&self, abs: f64) -> f64 {
        match &self.design.geometry {
            Geometry::Distance { scale, .. } if self.config.relative_bandwidth => abs / scale,
            _ => abs,
        }
    }

    /// Tunes on the inner split, then refits the chosen candidate on all rows.
    pub(crate) fn fit_target(&self, w: &[f64]) -> Result<TargetFit> {
        if w.len() != self.n {
            return Err(CdeError::Shape(format!("{} targets for {} rows", w.len(), self.n)));
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let w_fit: Vec<f64> = self.split.fit.iter().map(|&i| w[i]).collect();
        let w_tune: Vec<f64> = self.split.tune.iter().map(|&i| w[i]).collect();
        let constant_target = w.iter().all(|&v| (v - w[0]).abs() <= 1e-14 * (1.0 + w[0].abs()));
        if constant_target || matches!(self.cache, Cache::Constant) {
            let fit_mean = w_fit.iter().sum::<f64>() / w_fit.len() as f64;
            return Ok(TargetFit {
                hyper: Hyper::Constant,
                model: TargetModel::Constant { value: mean },
                tune_mse: mse(std::iter::repeat(fit_mean), &w_tune),
            });
        }

        match &self.cache {
            Cache::Constant => unreachable!(),
            Cache::Knn { order } => {
                let n_fit = w_fit.len();
                let mut best: Option<(usize, f64)> = None;
                for &k in &self.counts {
                    let k_eff = k.min(n_fit);
                    let preds = order
                        .iter()
                        .map(|o| o[..k_eff].iter().map(|&i| w_fit[i as usize]).sum::<f64>() / k_eff as f64);
                    let e = mse(preds, &w_tune);
                    if best.is_none_or(|(_, b)| e < b) {
                        best = Some((k, e));
                    }
                }
                let (k, e) = best.expect("nonempty grid");
                Ok(TargetFit {
                    hyper: Hyper::Knn { k },
                    model: TargetModel::Knn {
                        k: k.min(self.n),
                        targets: w.to_vec(),
                    },
                    tune_mse: e,
                })
            }
            Cache::Nw { kernels } => {
                let fit_mean = w_fit.iter().sum::<f64>() / w_fit.len() as f64;
                let mut best: Option<(usize, f64)> = None;
                for (c, kern) in kernels.iter().enumerate() {
                    let preds = (0..kern.nrows()).map(|r| {
                        let row = kern.row(r);
                        let den: f64 = row.iter().sum();
                        let num: f64 = row.iter().zip(&w_fit).map(|(a, b)| a * b).sum();
                        if den > 0.0 {
                            num / den
                        } else {
                            fit_mean
                        }
                    });
                    let e = mse(preds, &w_tune);
                    if best.is_none_or(|(_, b)| e < b) {
                        best = Some((c, e));
                    }
                }
                let (c, e) = best.expect("nonempty grid");
                Ok(TargetFit {
                    hyper: Hyper::NadarayaWatson {
                        bandwidth: self.configured(self.values[c]),
                    },
                    model: TargetModel::NadarayaWatson {
                        bandwidth: self.values[c],
                        targets: w.to_vec(),
                        fallback: mean,
                    },
                    tune_mse: e,
                })
            }
            Cache::Spectral {
                tune,
                full,
                full_gram_sq,
            } => {
                // Per bandwidth, projected coefficients c_j = v_j . w / lambda_j,
                // accumulated over eigenvector counts.
                let wf = DVector::from_column_slice(&w_fit);
                let mut per_bw: Vec<Vec<f64>> = Vec::with_capacity(tune.len());
                for st in tune {
                    let coefs = st.vectors.tr_mul(&wf);
                    let mut errs = Vec::with_capacity(self.counts.len());
                    let mut pred = vec![0.0; st.cross.nrows()];
                    let mut used = 0;
                    for &j in &self.counts {
                        let j_eff = j.min(st.values.len());
                        while used < j_eff {
                            let c = coefs[used] / st.values[used];
                            for (p, m) in pred.iter_mut().zip(st.cross.column(used).iter()) {
                                *p += m * c;
                            }
                            used += 1;
                        }
                        errs.push(mse(pred.iter().copied(), &w_tune));
                    }
                    per_bw.push(errs);
                }
                let mut best: Option<(usize, usize, f64)> = None;
                for (ji, _) in self.counts.iter().enumerate() {
                    for (bi, errs) in per_bw.iter().enumerate() {
                        let e = errs[ji];
                        if best.is_none_or(|(_, _, b)| e < b) {
                            best = Some((bi, ji, e));
                        }
                    }
                }
                let (bi, ji, e) = best.expect("nonempty grid");
                let bw = self.values[bi];
                let j = self.counts[ji];
                let emb = full[bi]
                    .get_or_init(|| {
                        let j_cap = self.counts.last().copied().unwrap_or(1).min(self.n);
                        gaussian_kernel(full_gram_sq, bw)
                            .and_then(|g| SpectralEmbedding::from_gram(g, j_cap, bw))
                            .map_err(|e| e.to_string())
                    })
                    .as_ref()
                    .map_err(|m| CdeError::Numeric(m.clone()))?;
                let j_eff = j.min(emb.usable());
                let wa = DVector::from_column_slice(w);
                let mut weights = vec![0.0; self.n];
                for c in 0..j_eff {
                    let v = emb.vectors.column(c);
                    let s = v.dot(&wa) / emb.values[c];
                    for (a, x) in weights.iter_mut().zip(v.iter()) {
                        *a += x * s;
                    }
                }
                Ok(TargetFit {
                    hyper: Hyper::SpectralSeries {
                        bandwidth: self.configured(bw),
                        eigenvectors: j,
                    },
                    model: TargetModel::SpectralSeries {
                        bandwidth: bw,
                        eigenvectors: j_eff,
                        weights,
                    },
                    tune_mse: e,
                })
            }
            Cache::Lasso { fit, full, features } => {
                let mut best: Option<(usize, f64)> = None;
                let mut warm: Option<Vec<f64>> = None;
                for (c, &pen) in self.values.iter().enumerate() {
                    let f = lasso::solve(fit, &w_fit, pen, warm.as_deref());
                    let preds = self
                        .split
                        .tune
                        .iter()
                        .map(|&r| lasso::predict_row(features, r, f.intercept, &f.coef));
                    let e = mse(preds, &w_tune);
                    if best.is_none_or(|(_, b)| e < b) {
                        best = Some((c, e));
                    }
                    warm = Some(f.coef);
                }
                let (c, e) = best.expect("nonempty grid");
                let f = lasso::solve(full, w, self.values[c], None);
                Ok(TargetFit {
                    hyper: Hyper::PenalizedLinear {
                        penalty: self.values[c],
                    },
                    model: TargetModel::PenalizedLinear {
                        intercept: f.intercept,
                        coef: f.coef,
                    },
                    tune_mse: e,
                })
            }
        }
    }
}

fn spectral_tune(fit_fit: &DMatrix<f64>, tune_fit: &DMatrix<f64>, bw: f64, j_max: usize) -> Result<SpectralTune> {
    let gram = gaussian_kernel(fit_fit, bw)?;
    let n = gram.nrows();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    let usable = order
        .iter()
        .take(j_max.min(n))
        .take_while(|&&i| eig.eigenvalues[i] > 0.0 && eig.eigenvalues[i] > RELATIVE_EIGEN_FLOOR * top)
        .count();
    let mut vectors = DMatrix::zeros(n, usable);
    let mut values = Vec::with_capacity(usable);
    for (c, &src) in order.iter().take(usable).enumerate() {
        values.push(eig.eigenvalues[src]);
        vectors.set_column(c, &eig.eigenvectors.column(src));
    }
    let cross = gaussian_kernel(tune_fit, bw)? * &vectors;
    Ok(SpectralTune { values, vectors, cross })
}
