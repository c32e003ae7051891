//! Seeded synthetic scenarios with known conditional densities.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::ResponseScaler;
use crate::error::{CdeError, Result};
use crate::grid::{trapezoid, unit_grid};
use crate::loss::{ConditionalDensity, DensityRows};
use crate::regress::Queries;
use crate::table::{Column, Table};

/// Standard deviation of every scenario's response noise.
pub const NOISE_SD: f64 = 0.5;

const LEVELS: [&str; 5] = ["c1", "c2", "c3", "c4", "c5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// `Z | x ~ N(x1, 0.5^2)`, `X ~ N(0, I)`.
    IrrelevantCovariates,
    /// Angle on a rotated unit circle in `D` dimensions, `Z | x ~ N(angle, 0.5^2)`.
    Manifold,
    /// `Z | x ~ N(mean(x), 0.5^2)`, `X ~ N(0, I)`.
    NonSparse,
    /// Half categorical, half Gaussian covariates with a two-regime response.
    MixedTypes,
    /// `Z ~ U(0, 1)` independent of `X ~ N(0, I)`.
    UniformNull,
}

impl std::str::FromStr for Scenario {
    type Err = CdeError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "irrelevantcovariates" | "irrelevant" => Ok(Scenario::IrrelevantCovariates),
            "manifold" => Ok(Scenario::Manifold),
            "nonsparse" => Ok(Scenario::NonSparse),
            "mixedtypes" | "mixed" => Ok(Scenario::MixedTypes),
            "uniformnull" | "uniform" => Ok(Scenario::UniformNull),
            _ => Err(CdeError::Config(format!("unknown scenario '{s}'"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::IrrelevantCovariates => "irrelevant_covariates",
            Scenario::Manifold => "manifold",
            Scenario::NonSparse => "non_sparse",
            Scenario::MixedTypes => "mixed_types",
            Scenario::UniformNull => "uniform_null",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub dims: usize,
    pub n: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, dims: usize, n: usize, seed: u64) -> Self {
        ScenarioConfig { scenario, dims, n, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CdeError::Config("n must be at least 1".into()));
        }
        let min_dims = match self.scenario {
            Scenario::Manifold => 2,
            Scenario::MixedTypes => 4,
            _ => 1,
        };
        if self.dims < min_dims {
            return Err(CdeError::Config(format!(
                "scenario {} needs at least {min_dims} dimensions, got {}",
                self.scenario, self.dims
            )));
        }
        if self.scenario == Scenario::MixedTypes && self.dims % 2 != 0 {
            return Err(CdeError::Config(format!(
                "mixed_types needs an even number of dimensions, got {}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Conditional law of the response at one covariate row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conditional {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Conditional {
    pub fn pdf(&self, z: f64) -> f64 {
        match *self {
            Conditional::Normal { mean, sd } => {
                let t = (z - mean) / sd;
                (-0.5 * t * t).exp() / (sd * (2.0 * PI).sqrt())
            }
            Conditional::Uniform { lo, hi } => {
                if z >= lo && z <= hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Conditional::Normal { mean, sd } => {
                let e: f64 = StandardNormal.sample(rng);
                mean + sd * e
            }
            Conditional::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }
}

/// The generating conditional density of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum TrueDensity {
    IrrelevantCovariates,
    Manifold {
        /// Orthogonal `D x D` map from circle coordinates to covariates.
        rotation: DMatrix<f64>,
    },
    NonSparse,
    MixedTypes,
    UniformNull,
}

fn numeric(table: &Table, col: usize, row: usize) -> Result<f64> {
    match table.columns().get(col) {
        Some(Column::Numeric(v)) => Ok(v[row]),
        Some(Column::Categorical(_)) => Err(CdeError::Data(format!("column {col} is categorical"))),
        None => Err(CdeError::Shape(format!("covariate table has no column {col}"))),
    }
}

impl TrueDensity {
    pub fn conditional(&self, x: &Table, row: usize) -> Result<Conditional> {
        if row >= x.n_rows() {
            return Err(CdeError::Shape(format!("row {row} outside table of {} rows", x.n_rows())));
        }
        let normal = |mean| Conditional::Normal { mean, sd: NOISE_SD };
        Ok(match self {
            TrueDensity::IrrelevantCovariates => normal(numeric(x, 0, row)?),
            TrueDensity::Manifold { rotation } => {
                let d = rotation.nrows();
                if x.n_cols() != d {
                    return Err(CdeError::Shape(format!("expected {d} covariates, got {}", x.n_cols())));
                }
                let v: Vec<f64> = (0..d).map(|j| numeric(x, j, row)).collect::<Result<_>>()?;
                // Circle coordinates are the first two entries of R^T x.
                let c: f64 = (0..d).map(|j| rotation[(j, 0)] * v[j]).sum();
                let s: f64 = (0..d).map(|j| rotation[(j, 1)] * v[j]).sum();
                normal(s.atan2(c).rem_euclid(2.0 * PI))
            }
            TrueDensity::NonSparse => {
                let d = x.n_cols();
                let sum: f64 = (0..d).map(|j| numeric(x, j, row)).sum::<Result<f64>>()?;
                normal(sum / d as f64)
            }
            TrueDensity::MixedTypes => {
                let half = x.n_cols() / 2;
                let level = match x.column(0) {
                    Column::Categorical(v) => v[row].as_str(),
                    Column::Numeric(_) => return Err(CdeError::Data("first column must be categorical".into())),
                };
                if level == LEVELS[0] || level == LEVELS[1] {
                    normal(numeric(x, half, row)?)
                } else {
                    Conditional::Normal {
                        mean: 10.0 + 2.0 * numeric(x, half + 1, row)?,
                        sd: 2.0 * NOISE_SD,
                    }
                }
            }
            TrueDensity::UniformNull => Conditional::Uniform { lo: 0.0, hi: 1.0 },
        })
    }

    pub fn pdf(&self, x: &Table, row: usize, z: f64) -> Result<f64> {
        Ok(self.conditional(x, row)?.pdf(z))
    }
}

/// Covariates, responses and the density that generated them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub x: Table,
    pub z: Vec<f64>,
    pub truth: TrueDensity,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_table(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    // Row-major draw order.
    let mut m = DMatrix::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            m[(r, c)] = gaussian(rng);
        }
    }
    m
}

/// Random orthogonal matrix: Q of the QR factorization of a Gaussian
/// matrix with signs fixed so that R has a positive diagonal.
pub(crate) fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = gaussian_table(rng, d, d);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn generate(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let ScenarioConfig { scenario, dims: d, n, seed } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (x, truth) = match scenario {
        Scenario::IrrelevantCovariates => (Table::from_matrix(&gaussian_table(&mut rng, n, d)), TrueDensity::IrrelevantCovariates),
        Scenario::NonSparse => (Table::from_matrix(&gaussian_table(&mut rng, n, d)), TrueDensity::NonSparse),
        Scenario::UniformNull => (Table::from_matrix(&gaussian_table(&mut rng, n, d)), TrueDensity::UniformNull),
        Scenario::Manifold => {
            let rotation = random_rotation(&mut rng, d);
            let mut m = DMatrix::zeros(n, d);
            for r in 0..n {
                let theta = rng.random_range(0.0..2.0 * PI);
                let (s, c) = theta.sin_cos();
                for j in 0..d {
                    m[(r, j)] = rotation[(j, 0)] * c + rotation[(j, 1)] * s;
                }
            }
            (Table::from_matrix(&m), TrueDensity::Manifold { rotation })
        }
        Scenario::MixedTypes => {
            let half = d / 2;
            let mut cats: Vec<Vec<String>> = vec![Vec::with_capacity(n); half];
            let mut nums: Vec<Vec<f64>> = vec![Vec::with_capacity(n); half];
            for _ in 0..n {
                for c in cats.iter_mut() {
                    c.push(LEVELS[rng.random_range(0..LEVELS.len())].to_string());
                }
                for v in nums.iter_mut() {
                    v.push(gaussian(&mut rng));
                }
            }
            let names = (1..=d).map(|j| format!("x{j}")).collect();
            let columns = cats
                .into_iter()
                .map(Column::Categorical)
                .chain(nums.into_iter().map(Column::Numeric))
                .collect();
            (Table::new(names, columns)?, TrueDensity::MixedTypes)
        }
    };

    let z = (0..n)
        .map(|r| Ok(truth.conditional(&x, r)?.sample(&mut rng)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Dataset {
        config: *config,
        x,
        z,
        truth,
    })
}

/// The generating density seen through a fitted model's response scaling,
/// truncated to the observed response range and renormalized there, for
/// oracle loss and coverage evaluation.
pub struct OracleDensity<'a> {
    pub truth: &'a TrueDensity,
    pub scaler: ResponseScaler,
    pub grid_cells: usize,
}

impl ConditionalDensity for OracleDensity<'_> {
    fn scaler(&self) -> &ResponseScaler {
        &self.scaler
    }

    fn reference_grid(&self) -> Vec<f64> {
        unit_grid(self.grid_cells)
    }

    fn unit_densities(&self, queries: &Queries) -> Result<DensityRows> {
        let Queries::Table(t) = queries else {
            return Err(CdeError::Shape("oracle densities need covariate tables".into()));
        };
        let grid = self.reference_grid();
        let width = self.scaler.width();
        let mut values = DMatrix::zeros(t.n_rows(), grid.len());
        for r in 0..t.n_rows() {
            let c = self.truth.conditional(t, r)?;
            let row: Vec<f64> = grid.iter().map(|&u| c.pdf(self.scaler.from_unit(u)) * width).collect();
            let mass = trapezoid(&grid, &row);
            if !(mass > 0.0) {
                return Err(CdeError::Numeric(format!("true density of row {r} has no mass in the response range")));
            }
            for (j, v) in row.into_iter().enumerate() {
                values[(r, j)] = v / mass;
            }
        }
        Ok(DensityRows {
            values,
            fallback: vec![false; t.n_rows()],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(t: &Table, j: usize) -> Vec<f64> {
        match t.column(j) {
            Column::Numeric(v) => v.clone(),
            _ => panic!("categorical"),
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn irrelevant_covariates_correlations() {
        let ds = generate(&ScenarioConfig::new(Scenario::IrrelevantCovariates, 10, 5000, 1)).unwrap();
        assert!(corr(&ds.z, &column(&ds.x, 0)) > 0.7);
        for j in 1..10 {
            assert!(corr(&ds.z, &column(&ds.x, j)).abs() < 0.1, "x{}", j + 1);
        }
    }

    #[test]
    fn manifold_rows_lie_on_the_rotated_circle() {
        let ds = generate(&ScenarioConfig::new(Scenario::Manifold, 6, 300, 2)).unwrap();
        let TrueDensity::Manifold { rotation } = &ds.truth else { panic!() };
        let x = ds.x.to_matrix().unwrap();
        let back = x * rotation;
        for r in 0..300 {
            let norm = (back[(r, 0)].powi(2) + back[(r, 1)].powi(2)).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for j in 2..6 {
                assert!(back[(r, j)].abs() < 1e-12);
            }
        }
        let qtq = rotation.transpose() * rotation;
        assert!((qtq - DMatrix::identity(6, 6)).amax() < 1e-12);
    }

    #[test]
    fn uniform_null_density_is_one() {
        let ds = generate(&ScenarioConfig::new(Scenario::UniformNull, 3, 100, 7)).unwrap();
        assert!(ds.z.iter().all(|z| (0.0..1.0).contains(z)));
        for r in 0..5 {
            assert_eq!(ds.truth.pdf(&ds.x, r, 0.3).unwrap(), 1.0);
        }
    }

    #[test]
    fn generation_is_seeded() {
        for s in [Scenario::Manifold, Scenario::MixedTypes, Scenario::NonSparse] {
            let c = ScenarioConfig::new(s, 4, 50, 9);
            let (a, b) = (generate(&c).unwrap(), generate(&c).unwrap());
            assert_eq!(a.x, b.x);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn invalid_dimensions_are_config_errors() {
        for (s, d) in [(Scenario::Manifold, 1), (Scenario::MixedTypes, 5), (Scenario::MixedTypes, 2), (Scenario::NonSparse, 0)] {
            assert!(matches!(generate(&ScenarioConfig::new(s, d, 10, 0)), Err(CdeError::Config(_))));
        }
    }

    #[test]
    fn moments_match_population_values() {
        // (scenario, dims, population mean, population variance)
        let cases = [
            (Scenario::IrrelevantCovariates, 10, 0.0, 1.25),
            (Scenario::Manifold, 5, PI, PI * PI / 3.0 + 0.25),
            (Scenario::NonSparse, 8, 0.0, 1.0 / 8.0 + 0.25),
            (Scenario::MixedTypes, 6, 6.0, 27.5),
            (Scenario::UniformNull, 2, 0.5, 1.0 / 12.0),
        ];
        for (s, d, mean, var) in cases {
            let z = generate(&ScenarioConfig::new(s, d, 5000, 11)).unwrap().z;
            let n = z.len() as f64;
            let m = z.iter().sum::<f64>() / n;
            let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            let m4 = z.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
            assert!((m - mean).abs() < 4.0 * (var / n).sqrt(), "{s} mean {m}");
            let se_var = ((m4 - v * v) / n).sqrt();
            assert!((v - var).abs() < 4.0 * se_var, "{s} variance {v}");
        }
    }

    #[test]
    fn oracle_rows_are_normalized_on_the_range() {
        let ds = generate(&ScenarioConfig::new(Scenario::IrrelevantCovariates, 2, 300, 4)).unwrap();
        let oracle = OracleDensity {
            truth: &ds.truth,
            scaler: ResponseScaler::fit(&ds.z).unwrap(),
            grid_cells: 500,
        };
        let d = oracle.unit_densities(&Queries::Table(&ds.x)).unwrap();
        let g = oracle.reference_grid();
        for r in 0..300 {
            let row: Vec<f64> = d.values.row(r).iter().copied().collect();
            assert!((trapezoid(&g, &row) - 1.0).abs() < 1e-12);
        }
        // Interior shape is the generating normal up to the range truncation.
        let c = ds.truth.conditional(&ds.x, 0).unwrap();
        let ratio = |j: usize| d.values[(0, j)] / (c.pdf(oracle.scaler.from_unit(g[j])) * oracle.scaler.width());
        assert!((ratio(100) - ratio(400)).abs() < 1e-9 * ratio(100));
    }

    #[test]
    fn mixed_regimes_follow_the_first_category() {
        let ds = generate(&ScenarioConfig::new(Scenario::MixedTypes, 4, 200, 3)).unwrap();
        let Column::Categorical(levels) = ds.x.column(0) else { panic!() };
        let x3 = column(&ds.x, 2);
        let x4 = column(&ds.x, 3);
        for r in 0..200 {
            let c = ds.truth.conditional(&ds.x, r).unwrap();
            let want = if levels[r] == "c1" || levels[r] == "c2" {
                Conditional::Normal { mean: x3[r], sd: 0.5 }
            } else {
                Conditional::Normal { mean: 10.0 + 2.0 * x4[r], sd: 1.0 }
            };
            assert_eq!(c, want);
        }
    }
}
