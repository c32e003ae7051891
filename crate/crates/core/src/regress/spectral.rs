//! Gaussian-kernel spectral basis over the covariates with Nystrom
//! out-of-sample extension.

use nalgebra::{DMatrix, SymmetricEigen};

use super::distance::{sq_dists, Covariates, FeatureEncoder};
use crate::error::{CdeError, Result};

/// Eigenpairs below this fraction of the leading eigenvalue are treated as
/// numerically zero and never used.
pub(crate) const RELATIVE_EIGEN_FLOOR: f64 = 1e-10;

/// `K(x, x') = exp(-d(x, x')^2 / (4 * bandwidth))` from squared distances.
pub fn gaussian_kernel(sq: &DMatrix<f64>, bandwidth: f64) -> Result<DMatrix<f64>> {
    if !(bandwidth > 0.0) {
        return Err(CdeError::Config(format!("kernel bandwidth must be positive, got {bandwidth}")));
    }
    let k = sq.map(|d| (-d / (4.0 * bandwidth)).exp());
    for j in 0..k.ncols() {
        for i in 0..k.nrows() {
            if !k[(i, j)].is_finite() {
                return Err(CdeError::Numeric(format!("kernel entry ({i}, {j}) is not finite")));
            }
        }
    }
    Ok(k)
}

/// Leading eigenpairs of a Gram matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    pub bandwidth: f64,
    pub values: Vec<f64>,
    /// `n x J`, orthonormal columns.
    pub vectors: DMatrix<f64>,
}

impl SpectralEmbedding {
    /// Eigen-decomposes `gram` and keeps at most `j` pairs.
    pub fn from_gram(gram: DMatrix<f64>, j: usize, bandwidth: f64) -> Result<Self> {
        let n = gram.nrows();
        if j == 0 || j > n {
            return Err(CdeError::Config(format!("eigenvector count {j} must lie in 1..={n}")));
        }
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut vectors = DMatrix::zeros(n, j);
        let mut values = Vec::with_capacity(j);
        for (c, &src) in order.iter().take(j).enumerate() {
            values.push(eig.eigenvalues[src]);
            let mut v = eig.eigenvectors.column(src).clone_owned();
            // Deterministic sign: positive sum, else positive first nonzero entry.
            let s: f64 = v.iter().sum();
            let flip = if s.abs() > 1e-12 {
                s < 0.0
            } else {
                v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0)
            };
            if flip {
                v.neg_mut();
            }
            vectors.set_column(c, &v);
        }
        Ok(SpectralEmbedding { bandwidth, values, vectors })
    }

    /// Number of leading pairs whose eigenvalue is numerically positive.
    pub fn usable(&self) -> usize {
        let top = self.values.first().copied().unwrap_or(0.0);
        self.values.iter().take_while(|&&l| l > RELATIVE_EIGEN_FLOOR * top && l > 0.0).count()
    }

    /// Nystrom extension `psi_j(x) = (1/lambda_j) sum_k K(x, x_k) v_jk`
    /// evaluated for every query row of `cross_sq` (queries x training).
    pub fn extend(&self, cross_sq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if cross_sq.ncols() != self.vectors.nrows() {
            return Err(CdeError::Shape(format!(
                "query distances have {} columns, embedding has {} points",
                cross_sq.ncols(),
                self.vectors.nrows()
            )));
        }
        let k = gaussian_kernel(cross_sq, self.bandwidth)?;
        let mut psi = k * &self.vectors;
        for (j, &l) in self.values.iter().enumerate() {
            let scale = if l > 0.0 { 1.0 / l } else { 0.0 };
            psi.column_mut(j).scale_mut(scale);
        }
        Ok(psi)
    }
}

/// Top-`j` eigenpairs of the Gaussian Gram matrix of `x`.
///
/// Table covariates are standardized over all rows before distances are
/// taken; precomputed distances are used as given.
pub fn spectral_embed(bandwidth: f64, x: &Covariates, j: usize) -> Result<SpectralEmbedding> {
    let sq = match x {
        Covariates::Table(t) => {
            let enc = FeatureEncoder::fit(t);
            let m = enc.encode(t)?;
            sq_dists(&m, &m)
        }
        Covariates::Precomputed(d) => d
            .matrix()
            .ok_or_else(|| CdeError::Config("precomputed covariates need a distance matrix".into()))?
            .map(|v| v * v),
    };
    let gram = gaussian_kernel(&sq, bandwidth)?;
    SpectralEmbedding::from_gram(gram, j, bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::Table;

    #[test]
    fn identical_points_give_rank_one_gram() {
        let x = Covariates::Table(Table::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        let e = spectral_embed(0.5, &x, 1).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        let inv = 1.0 / 3f64.sqrt();
        for i in 0..3 {
            assert!((e.vectors[(i, 0)] - inv).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_bandwidth_approaches_all_ones() {
        let x = Covariates::Table(Table::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]).unwrap());
        let e = spectral_embed(1e12, &x, 2).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-9);
        assert!(e.values[1].abs() < 1e-9);
    }

    #[test]
    fn nystrom_reproduces_training_eigenvectors() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.7).sin(), i as f64 / 12.0]).collect();
        let t = Table::from_rows(&rows).unwrap();
        let enc = FeatureEncoder::fit(&t);
        let m = enc.encode(&t).unwrap();
        let sq = sq_dists(&m, &m);
        let e = SpectralEmbedding::from_gram(gaussian_kernel(&sq, 0.8).unwrap(), 4, 0.8).unwrap();
        let psi = e.extend(&sq).unwrap();
        for j in 0..4 {
            for i in 0..12 {
                assert!((psi[(i, j)] - e.vectors[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_bad_bandwidth_and_count() {
        let x = Covariates::Table(Table::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
        assert!(spectral_embed(0.0, &x, 1).is_err());
        assert!(spectral_embed(1.0, &x, 3).is_err());
    }

    #[test]
    fn non_finite_kernel_entry_is_named() {
        let sq = DMatrix::from_row_slice(2, 2, &[0.0, f64::NAN, f64::NAN, 0.0]);
        let err = gaussian_kernel(&sq, 1.0).unwrap_err().to_string();
        assert!(err.contains("(1, 0)") || err.contains("(0, 1)"), "{err}");
    }
}
