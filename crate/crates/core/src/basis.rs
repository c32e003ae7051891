//! Orthonormal systems on the unit interval and their tensor products.
//!
//! Column `k` of an evaluated basis matrix holds the `(k+1)`-th basis
//! function. For the Fourier family this is the usual ordering: the
//! constant first, then cosine/sine pairs of increasing frequency, so that
//! truncating to the first `I` columns keeps the `I` smoothest terms.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CdeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Fourier,
    Cosine,
    HaarWavelet,
}

impl std::str::FromStr for BasisFamily {
    type Err = CdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fourier" => Ok(BasisFamily::Fourier),
            "cosine" => Ok(BasisFamily::Cosine),
            "haar" | "haar_wavelet" => Ok(BasisFamily::HaarWavelet),
            other => Err(CdeError::Config(format!("unknown basis family '{other}'"))),
        }
    }
}

/// A basis family together with the number of functions made available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub max_terms: usize,
}

impl BasisSpec {
    pub fn new(family: BasisFamily, max_terms: usize) -> Result<Self> {
        if max_terms == 0 {
            return Err(CdeError::Config("basis max_terms must be at least 1".into()));
        }
        Ok(BasisSpec { family, max_terms })
    }

    pub fn fourier(max_terms: usize) -> Result<Self> {
        Self::new(BasisFamily::Fourier, max_terms)
    }

    /// Number of columns produced by [`eval_basis`]. Haar systems are
    /// completed to a full resolution level, i.e. a power of two.
    pub fn effective_terms(&self) -> usize {
        match self.family {
            BasisFamily::HaarWavelet => self.max_terms.next_power_of_two(),
            _ => self.max_terms,
        }
    }

    /// Value of the `k`-th (zero-based) basis function at `z`.
    pub fn value(&self, k: usize, z: f64) -> f64 {
        match self.family {
            BasisFamily::Fourier => fourier(k, z),
            BasisFamily::Cosine => cosine(k, z),
            BasisFamily::HaarWavelet => haar(k, z),
        }
    }

    /// Writes all effective basis values at `z` into `out`.
    pub fn values_into(&self, z: f64, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.value(k, z);
        }
    }

    pub fn values(&self, z: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.effective_terms()];
        self.values_into(z, &mut out);
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.max_terms == 0 {
            return Err(CdeError::Config("basis max_terms must be at least 1".into()));
        }
        Ok(())
    }
}

fn fourier(k: usize, z: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    // One-based index i = k + 1: even i -> cosine, odd i -> sine.
    let freq = ((k + 1) / 2) as f64;
    if k % 2 == 1 {
        SQRT_2 * (2.0 * PI * freq * z).cos()
    } else {
        SQRT_2 * (2.0 * PI * freq * z).sin()
    }
}

fn cosine(k: usize, z: f64) -> f64 {
    if k == 0 {
        1.0
    } else {
        SQRT_2 * (PI * k as f64 * z).cos()
    }
}

/// Father function first, then mother wavelets level by level, shifts in
/// increasing order: column `2^j + s` is `2^{j/2} psi(2^j z - s)`.
fn haar(k: usize, z: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let level = usize::BITS - 1 - k.leading_zeros();
    let cells = 1usize << level;
    let shift = k - cells;
    let t = z * cells as f64;
    // Right endpoint belongs to the last cell.
    let cell = (t.floor() as usize).min(cells - 1);
    if cell != shift {
        return 0.0;
    }
    let frac = t - cell as f64;
    let amp = (cells as f64).sqrt();
    if frac < 0.5 {
        amp
    } else {
        -amp
    }
}

fn check_unit(values: impl Iterator<Item = f64>) -> Result<()> {
    for (index, value) in values.enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(CdeError::Domain {
                index,
                value,
                domain: "[0, 1]".into(),
            });
        }
    }
    Ok(())
}

/// Evaluates the basis on a grid of points in `[0, 1]`.
///
/// Returns a `len(z_grid) x effective_terms` matrix.
pub fn eval_basis(spec: &BasisSpec, z_grid: &[f64]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_unit(z_grid.iter().copied())?;
    let terms = spec.effective_terms();
    Ok(DMatrix::from_fn(z_grid.len(), terms, |r, c| spec.value(c, z_grid[r])))
}

/// Tensor product of two univariate bases on the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorBasisSpec {
    pub first: BasisSpec,
    pub second: BasisSpec,
}

impl TensorBasisSpec {
    pub fn new(first: BasisSpec, second: BasisSpec) -> Self {
        TensorBasisSpec { first, second }
    }

    pub fn effective_terms(&self) -> (usize, usize) {
        (self.first.effective_terms(), self.second.effective_terms())
    }

    /// Column of the pair `(i, j)` (zero-based, row-major over factors).
    pub fn column(&self, i: usize, j: usize) -> usize {
        i * self.second.effective_terms() + j
    }
}

/// Evaluates `phi_i(z1) * phi_j(z2)` for every grid pair; column `(i, j)`
/// sits at [`TensorBasisSpec::column`].
pub fn eval_tensor_basis(spec: &TensorBasisSpec, grid: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    spec.first.validate()?;
    spec.second.validate()?;
    check_unit(grid.iter().flat_map(|&(a, b)| [a, b]))
        .map_err(|e| match e {
            CdeError::Domain { index, value, domain } => CdeError::Domain {
                index: index / 2,
                value,
                domain,
            },
            other => other,
        })?;
    let (n1, n2) = spec.effective_terms();
    let mut out = DMatrix::zeros(grid.len(), n1 * n2);
    let mut f1 = vec![0.0; n1];
    let mut f2 = vec![0.0; n2];
    for (r, &(a, b)) in grid.iter().enumerate() {
        spec.first.values_into(a, &mut f1);
        spec.second.values_into(b, &mut f2);
        for i in 0..n1 {
            for j in 0..n2 {
                out[(r, i * n2 + j)] = f1[i] * f2[j];
            }
        }
    }
    Ok(out)
}

/// Affine map between the observed response range and the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseScaler {
    pub z_min: f64,
    pub z_max: f64,
}

impl ResponseScaler {
    pub fn new(z_min: f64, z_max: f64) -> Result<Self> {
        if !(z_min.is_finite() && z_max.is_finite()) {
            return Err(CdeError::Numeric("response range must be finite".into()));
        }
        if z_max <= z_min {
            return Err(CdeError::DegenerateResponse(z_min));
        }
        Ok(ResponseScaler { z_min, z_max })
    }

    /// Scaler spanning the observed range of `z`.
    pub fn fit(z: &[f64]) -> Result<Self> {
        if z.is_empty() {
            return Err(CdeError::Size("cannot scale an empty response".into()));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(CdeError::Numeric(format!("response at index {i} is not finite")));
        }
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo, hi)
    }

    pub fn width(&self) -> f64 {
        self.z_max - self.z_min
    }

    pub fn to_unit(&self, z: f64) -> f64 {
        (z - self.z_min) / self.width()
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.z_min + u * self.width()
    }

    /// Converts a density on the unit scale to the original response scale.
    pub fn density_to_original(&self, unit_density: f64) -> f64 {
        unit_density / self.width()
    }

    pub fn density_to_unit(&self, density: f64) -> f64 {
        density * self.width()
    }

    /// Unit-scale position clamped into `[0, 1]`; the flag reports clamping.
    pub fn to_unit_clamped(&self, z: f64) -> (f64, bool) {
        let u = self.to_unit(z);
        if u < 0.0 {
            (0.0, true)
        } else if u > 1.0 {
            (1.0, true)
        } else {
            (u, false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{trapezoid_weights, unit_grid};
    use proptest::prelude::*;

    fn gram_deviation(spec: &BasisSpec, points: usize, upto: usize) -> f64 {
        let grid = unit_grid(points - 1);
        let w = trapezoid_weights(&grid);
        let m = eval_basis(spec, &grid).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..upto {
            for j in 0..upto {
                let ip: f64 = (0..grid.len()).map(|r| w[r] * m[(r, i)] * m[(r, j)]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((ip - target).abs());
            }
        }
        worst
    }

    #[test]
    fn fourier_values_follow_standard_indexing() {
        let spec = BasisSpec::fourier(5).unwrap();
        let m = eval_basis(&spec, &[0.0, 0.25, 0.7]).unwrap();
        for r in 0..3 {
            assert_eq!(m[(r, 0)], 1.0);
        }
        assert!((m[(1, 2)] - SQRT_2).abs() < 1e-12);
        assert!((m[(0, 1)] - SQRT_2).abs() < 1e-15);
        assert!(m[(0, 2)].abs() < 1e-15);
    }

    #[test]
    fn orthonormality_on_fine_quadrature() {
        for fam in [BasisFamily::Fourier, BasisFamily::Cosine] {
            let spec = BasisSpec::new(fam, 30).unwrap();
            assert!(gram_deviation(&spec, 10_001, 30) < 1e-6, "{fam:?}");
        }
    }

    #[test]
    fn haar_is_orthonormal_under_cell_midpoints() {
        let haar = BasisSpec::new(BasisFamily::HaarWavelet, 30).unwrap();
        assert_eq!(haar.effective_terms(), 32);
        // Midpoints of 4096 equal cells never touch a breakpoint, so the
        // piecewise-constant products integrate exactly.
        let mid: Vec<f64> = (0..4096).map(|r| (r as f64 + 0.5) / 4096.0).collect();
        let m = eval_basis(&haar, &mid).unwrap();
        let g = m.transpose() * &m / 4096.0;
        for i in 0..32 {
            for j in 0..32 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn haar_levels_have_expected_support() {
        let spec = BasisSpec::new(BasisFamily::HaarWavelet, 4).unwrap();
        // Column 1 is the level-0 mother, columns 2 and 3 the level-1 shifts.
        assert_eq!(spec.value(1, 0.2), 1.0);
        assert_eq!(spec.value(1, 0.7), -1.0);
        assert_eq!(spec.value(2, 0.7), 0.0);
        assert!((spec.value(3, 0.9) + SQRT_2).abs() < 1e-15);
        assert!((spec.value(3, 1.0) + SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn fourier_projection_reconstructs_identity_in_the_interior() {
        let spec = BasisSpec::fourier(31).unwrap();
        let grid = unit_grid(10_000);
        let w = trapezoid_weights(&grid);
        let m = eval_basis(&spec, &grid).unwrap();
        let coef: Vec<f64> = (0..31)
            .map(|k| (0..grid.len()).map(|r| w[r] * grid[r] * m[(r, k)]).sum())
            .collect();
        let mut sq = 0.0;
        let mut count = 0usize;
        for (r, &z) in grid.iter().enumerate() {
            if (0.05..=0.95).contains(&z) {
                let approx: f64 = (0..31).map(|k| coef[k] * m[(r, k)]).sum();
                sq += (approx - z).powi(2);
                count += 1;
            }
        }
        let l2 = (sq / count as f64 * 0.9).sqrt();
        // Independent value: the truncated sine series of z - 1/2 leaves the
        // tail -sum_{k>15} sin(2 pi k z) / (pi k).
        let mut tail_sq = 0.0;
        let mut tail_n = 0usize;
        for r in 0..=900 {
            let z = 0.05 + r as f64 * 0.001;
            let e: f64 = (16..6000).map(|k| (2.0 * PI * k as f64 * z).sin() / (PI * k as f64)).sum();
            tail_sq += e * e;
            tail_n += 1;
        }
        let oracle = (tail_sq / tail_n as f64 * 0.9).sqrt();
        assert!((l2 - oracle).abs() < 1e-3, "{l2} vs {oracle}");
        assert!(l2 < 0.015, "interior L2 error {l2}");
    }

    #[test]
    fn out_of_range_point_is_reported() {
        let spec = BasisSpec::fourier(3).unwrap();
        match eval_basis(&spec, &[0.1, 1.2]) {
            Err(CdeError::Domain { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tensor_columns_are_products() {
        let spec = TensorBasisSpec::new(BasisSpec::fourier(3).unwrap(), BasisSpec::fourier(3).unwrap());
        let m = eval_tensor_basis(&spec, &[(0.25, 0.0), (0.6, 0.3)]).unwrap();
        assert_eq!(m[(0, spec.column(0, 0))], 1.0);
        assert_eq!(m[(1, spec.column(0, 0))], 1.0);
        assert!((m[(0, spec.column(2, 1))] - 2.0).abs() < 1e-12);
        assert!(matches!(
            eval_tensor_basis(&spec, &[(0.1, 0.2), (0.3, -0.1)]),
            Err(CdeError::Domain { index: 1, .. })
        ));
    }

    #[test]
    fn tensor_cosine_gram_is_identity_on_uniform_grid() {
        let spec = TensorBasisSpec::new(
            BasisSpec::new(BasisFamily::Cosine, 4).unwrap(),
            BasisSpec::new(BasisFamily::Cosine, 4).unwrap(),
        );
        // 200 x 200 midpoint grid: quadrature oracle for the unit square.
        let pts: Vec<(f64, f64)> = (0..200)
            .flat_map(|a| (0..200).map(move |b| ((a as f64 + 0.5) / 200.0, (b as f64 + 0.5) / 200.0)))
            .collect();
        let m = eval_tensor_basis(&spec, &pts).unwrap();
        let gram = m.transpose() * &m / pts.len() as f64;
        let dev = (gram - DMatrix::<f64>::identity(16, 16)).abs().max();
        assert!(dev < 1e-3, "max deviation {dev}");
    }

    proptest! {
        #[test]
        fn scaler_round_trip(lo in -1e3f64..1e3, width in 1e-3f64..1e3, u in 0.0f64..1.0) {
            let s = ResponseScaler::new(lo, lo + width).unwrap();
            let z = s.from_unit(u);
            let back = s.to_unit(z);
            prop_assert!((back - u).abs() <= 1e-12 * (1.0 + u.abs()) * (1.0 + lo.abs() / width));
            let z2 = s.from_unit(s.to_unit(z));
            prop_assert!((z2 - z).abs() <= 1e-12 * z.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_scaler_is_rejected() {
        assert!(matches!(ResponseScaler::fit(&[2.0, 2.0]), Err(CdeError::DegenerateResponse(_))));
    }
}
