//! Simulation sweeps and the sample-set pipeline shared by the command-line
//! tool and the acceptance suite.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_baseline, BaselineConfig, BaselineKind};
use crate::basis::BasisSpec;
use crate::datasets::{generate, OracleDensity, Scenario, ScenarioConfig};
use crate::diagnostics::{coverage_from_densities, fractional_errors, point_summaries, CoverageCurve, PointPredictionMetrics};
use crate::distreg::{divergence_matrix, divergence_distance, sigma2_grid, KlConfig, SampleSet};
use crate::error::{CdeError, Result};
use crate::flexcode::{fit, FittedCde, FlexCodeConfig};
use crate::grid::unit_grid;
use crate::loss::{empirical_cde_loss, ConditionalDensity, LossPath, LossReport};
use crate::regress::{Covariates, HyperGrid, Queries, RegressorConfig, RegressorKind};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    FlexCode(RegressorKind),
    Baseline(BaselineKind),
    /// The generating density, truncated to the observed response range.
    Oracle,
}

impl FromStr for Method {
    type Err = CdeError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "oracle" || s == "truth" {
            return Ok(Method::Oracle);
        }
        if let Some(r) = s.strip_prefix("flexcode-").or_else(|| s.strip_prefix("flexcode_")) {
            return Ok(Method::FlexCode(r.parse()?));
        }
        if let Ok(b) = s.parse() {
            return Ok(Method::Baseline(b));
        }
        Ok(Method::FlexCode(s.parse()?))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FlexCode(r) => write!(f, "flexcode-{r}"),
            Method::Baseline(b) => write!(f, "{b}"),
            Method::Oracle => f.write_str("oracle"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub dims: Vec<usize>,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    pub max_cutoff: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub grid_cells: usize,
}

impl BenchmarkConfig {
    pub fn new(scenarios: Vec<Scenario>, methods: Vec<Method>, dims: Vec<usize>, sizes: Vec<usize>, reps: usize) -> Self {
        BenchmarkConfig {
            scenarios,
            methods,
            dims,
            sizes,
            reps,
            seed: 0,
            basis: BasisSpec::fourier(crate::flexcode::DEFAULT_MAX_CUTOFF).expect("default basis"),
            max_cutoff: crate::flexcode::DEFAULT_MAX_CUTOFF,
            train_fraction: 0.7,
            validation_fraction: 0.15,
            grid_cells: crate::grid::DEFAULT_GRID_CELLS,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(CdeError::Config("reps must be positive".into()));
        }
        for (name, empty) in [
            ("scenarios", self.scenarios.is_empty()),
            ("methods", self.methods.is_empty()),
            ("dims", self.dims.is_empty()),
            ("sizes", self.sizes.is_empty()),
        ] {
            if empty {
                return Err(CdeError::Config(format!("benchmark needs at least one entry in {name}")));
            }
        }
        for &s in &self.scenarios {
            for &d in &self.dims {
                ScenarioConfig::new(s, d, self.sizes[0], 0).validate()?;
            }
        }
        self.flexcode_config(RegressorKind::Knn, 0).validate()
    }

    pub fn flexcode_config(&self, kind: RegressorKind, seed: u64) -> FlexCodeConfig {
        let mut c = FlexCodeConfig::new(self.basis, RegressorConfig::default_for(kind))
            .with_seed(seed)
            .with_max_cutoff(self.max_cutoff)
            .with_fractions(self.train_fraction, self.validation_fraction);
        c.grid_cells = self.grid_cells;
        c
    }
}

/// One method on one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub scenario: Scenario,
    pub dims: usize,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub report: LossReport,
    pub wall_ms: f64,
}

pub const BENCHMARK_HEADER: &str = "method,scenario,D,n,loss,se,wall_ms,seed";

impl BenchmarkRow {
    /// CSV line; wall-clock time is written only when `timing` is set so
    /// that repeated runs are byte-identical.
    pub fn csv_line(&self, timing: bool) -> String {
        let wall = if timing { format!("{:.1}", self.wall_ms) } else { "NA".to_string() };
        format!(
            "{},{},{},{},{:.6},{:.6},{},{}",
            self.method, self.scenario, self.dims, self.n, self.report.loss, self.report.se, wall, self.seed
        )
    }
}

/// Seed of repetition `rep` of a sweep seeded with `seed`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    seed ^ rep as u64
}

/// Test-set loss of every method on one generated data set. All methods
/// share the data, the split and the response range.
pub fn run_replicate(
    config: &BenchmarkConfig,
    scenario: Scenario,
    dims: usize,
    n: usize,
    rep: usize,
) -> Result<Vec<BenchmarkRow>> {
    let seed = rep_seed(config.seed, rep);
    let ds = generate(&ScenarioConfig::new(scenario, dims, n, seed))?;
    let x = Covariates::Table(ds.x.clone());
    let mut rows = Vec::with_capacity(config.methods.len());
    let mut reference: Option<(Vec<usize>, crate::basis::ResponseScaler)> = None;
    let mut evaluate = |method: Method, m: &dyn ConditionalDensity, test: &[usize], start: Instant| -> Result<()> {
        let q = ds.x.select_rows(test);
        let zt: Vec<f64> = test.iter().map(|&r| ds.z[r]).collect();
        let report = empirical_cde_loss(m, &Queries::Table(&q), &zt, LossPath::Grid)?;
        rows.push(BenchmarkRow {
            method,
            scenario,
            dims,
            n,
            rep,
            seed,
            report,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(())
    };
    for &method in config.methods.iter().filter(|m| **m != Method::Oracle) {
        let start = Instant::now();
        match method {
            Method::FlexCode(kind) => {
                let model = fit(&config.flexcode_config(kind, seed), &x, &ds.z)?;
                let test = model.split().test.clone();
                reference.get_or_insert_with(|| (test.clone(), *model.response_scaler()));
                evaluate(method, &model, &test, start)?;
            }
            Method::Baseline(kind) => {
                let bc = BaselineConfig {
                    kind,
                    train_fraction: config.train_fraction,
                    validation_fraction: config.validation_fraction,
                    seed,
                    grid_cells: config.grid_cells,
                };
                let model = fit_baseline(&bc, &x, &ds.z)?;
                let test = model.split().test.clone();
                reference.get_or_insert_with(|| (test.clone(), *model.scaler()));
                evaluate(method, &model, &test, start)?;
            }
            Method::Oracle => unreachable!(),
        }
    }
    if config.methods.contains(&Method::Oracle) {
        let start = Instant::now();
        let (test, scaler) = match reference {
            Some(r) => r,
            None => {
                let split = crate::loss::make_split(
                    n,
                    (
                        config.train_fraction,
                        config.validation_fraction,
                        1.0 - config.train_fraction - config.validation_fraction,
                    ),
                    seed,
                )?;
                (split.test, crate::basis::ResponseScaler::fit(&ds.z)?)
            }
        };
        let oracle = OracleDensity {
            truth: &ds.truth,
            scaler,
            grid_cells: config.grid_cells,
        };
        evaluate(Method::Oracle, &oracle, &test, start)?;
    }
    let order = |m: &Method| config.methods.iter().position(|c| c == m).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| order(&r.method));
    Ok(rows)
}

/// Runs every scenario x dimension x size x repetition cell on `workers`
/// threads. Rows come back in sweep order whatever the thread count.
pub fn run_benchmark(config: &BenchmarkConfig, workers: usize) -> Result<Vec<BenchmarkRow>> {
    config.validate()?;
    let mut jobs = Vec::new();
    for &s in &config.scenarios {
        for &d in &config.dims {
            for &n in &config.sizes {
                for rep in 0..config.reps {
                    jobs.push((s, d, n, rep));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CdeError::Config(format!("cannot start {workers} workers: {e}")))?;
    let out: Vec<Vec<BenchmarkRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, d, n, rep)| run_replicate(config, s, d, n, rep))
            .collect::<Result<_>>()
    })?;
    Ok(out.into_iter().flatten().collect())
}

/// Mean loss over repetitions with the standard error across repetitions
/// and the average within-run standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub method: Method,
    pub scenario: Scenario,
    pub dims: usize,
    pub n: usize,
    pub reps: usize,
    pub mean_loss: f64,
    pub se_across: f64,
    pub mean_se_within: f64,
}

pub const SUMMARY_HEADER: &str = "method,scenario,D,n,reps,mean_loss,se_across,mean_se_within";

impl BenchmarkSummary {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.method, self.scenario, self.dims, self.n, self.reps, self.mean_loss, self.se_across, self.mean_se_within
        )
    }
}

pub fn summarize(rows: &[BenchmarkRow]) -> Vec<BenchmarkSummary> {
    let mut keys: Vec<(Method, Scenario, usize, usize)> = Vec::new();
    for r in rows {
        let k = (r.method, r.scenario, r.dims, r.n);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, scenario, dims, n)| {
            let sel: Vec<&BenchmarkRow> = rows
                .iter()
                .filter(|r| r.method == method && r.scenario == scenario && r.dims == dims && r.n == n)
                .collect();
            let k = sel.len() as f64;
            let mean = sel.iter().map(|r| r.report.loss).sum::<f64>() / k;
            let se_across = if sel.len() > 1 {
                let v = sel.iter().map(|r| (r.report.loss - mean).powi(2)).sum::<f64>() / (k - 1.0);
                (v / k).sqrt()
            } else {
                0.0
            };
            BenchmarkSummary {
                method,
                scenario,
                dims,
                n,
                reps: sel.len(),
                mean_loss: mean,
                se_across,
                mean_se_within: sel.iter().map(|r| r.report.se).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Sample sets `N(mu_i, 1)` with `mu_i ~ U(mu_lo, mu_hi)`, sizes uniform on
/// `sizes`, and responses `mu_i + N(0, noise_sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSetScenario {
    pub n_sets: usize,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SampleSetScenario {
    pub fn new(n_sets: usize, seed: u64) -> Self {
        SampleSetScenario {
            n_sets,
            mu_lo: 2.0,
            mu_hi: 6.0,
            min_size: 50,
            max_size: 200,
            noise_sd: 0.1,
            seed,
        }
    }

    pub fn generate(&self) -> Result<(Vec<SampleSet>, Vec<f64>)> {
        if self.n_sets == 0 || self.min_size < 3 || self.min_size > self.max_size || !(self.mu_lo < self.mu_hi) {
            return Err(CdeError::Config("invalid sample-set scenario".into()));
        }
        let noise = Normal::new(0.0, self.noise_sd).map_err(|e| CdeError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut sets = Vec::with_capacity(self.n_sets);
        let mut z = Vec::with_capacity(self.n_sets);
        for i in 0..self.n_sets {
            let mu = rng.random_range(self.mu_lo..self.mu_hi);
            let j = rng.random_range(self.min_size..=self.max_size);
            let pts: Vec<f64> = (0..j).map(|_| mu + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            sets.push(SampleSet::from_values(format!("set{i:04}"), &pts)?);
            z.push(mu + noise.sample(&mut rng));
        }
        Ok((sets, z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistFitConfig {
    pub kl: KlConfig,
    /// Kernel scales to try; empty means a grid around the median divergence.
    pub sigma2: Vec<f64>,
    pub basis: BasisSpec,
    pub max_cutoff: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub grid_cells: usize,
    pub levels: Vec<f64>,
    /// The response is modeled on the log scale; point errors are computed
    /// after mapping predictions back.
    pub log_response: bool,
}

impl Default for DistFitConfig {
    fn default() -> Self {
        DistFitConfig {
            kl: KlConfig::default(),
            sigma2: Vec::new(),
            basis: BasisSpec::fourier(crate::flexcode::DEFAULT_MAX_CUTOFF).expect("default basis"),
            max_cutoff: crate::flexcode::DEFAULT_MAX_CUTOFF,
            train_fraction: 0.7,
            validation_fraction: 0.15,
            seed: 0,
            grid_cells: crate::grid::DEFAULT_GRID_CELLS,
            levels: vec![0.25, 0.5, 0.75, 0.9],
            log_response: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Score {
    pub sigma2: f64,
    pub validation_loss: f64,
}

/// Held-out evaluation of a fitted conditional density model.
#[derive(Debug, Clone)]
pub struct HoldoutEvaluation {
    pub test: Vec<usize>,
    pub loss: LossReport,
    pub coverage: CoverageCurve,
    /// Posterior modes on the original response scale.
    pub modes: Vec<f64>,
    pub observed: Vec<f64>,
    pub mode_errors: PointPredictionMetrics,
}

#[derive(Debug, Clone)]
pub struct DistFitResult {
    pub model: FittedCde,
    pub sigma2: f64,
    pub sigma2_trace: Vec<Sigma2Score>,
    pub floor_warnings: usize,
    pub evaluation: HoldoutEvaluation,
    /// Same split, same estimator, sample variance as the only covariate.
    pub dispersion_baseline: HoldoutEvaluation,
}

fn model_response(z: &[f64], log: bool) -> Result<Vec<f64>> {
    if !log {
        return Ok(z.to_vec());
    }
    z.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(CdeError::Domain {
                    index: i,
                    value: v,
                    domain: "(0, inf) for a log-scale response".into(),
                })
            }
        })
        .collect()
}

/// Test loss, coverage and mode errors of `model` on its own test rows.
pub fn evaluate_holdout(model: &FittedCde, x: &Covariates, z_model: &[f64], z_obs: &[f64], levels: &[f64], log: bool) -> Result<HoldoutEvaluation> {
    let test = model.split().test.clone();
    let q = x.query_rows(&test, &model.split().train)?;
    let queries = q.as_queries();
    let zt: Vec<f64> = test.iter().map(|&r| z_model[r]).collect();
    let loss = empirical_cde_loss(model, &queries, &zt, LossPath::Grid)?;
    let grid = unit_grid(model.config().grid_cells);
    let d = model.unit_densities(&queries)?;
    let scaler = model.response_scaler();
    let ut: Vec<f64> = zt.iter().map(|&v| scaler.to_unit_clamped(v).0).collect();
    let coverage = coverage_from_densities(&grid, &d.values, &ut, levels)?;
    let modes = (0..d.values.nrows())
        .map(|r| {
            let row: Vec<f64> = d.values.row(r).iter().copied().collect();
            let m = scaler.from_unit(point_summaries(&grid, &row)?.mode);
            Ok(if log { m.exp() } else { m })
        })
        .collect::<Result<Vec<f64>>>()?;
    let observed: Vec<f64> = test.iter().map(|&r| z_obs[r]).collect();
    let mode_errors = fractional_errors(&modes, &observed)?;
    Ok(HoldoutEvaluation {
        test,
        loss,
        coverage,
        modes,
        observed,
        mode_errors,
    })
}

fn spectral_on_kernel(sigma2: f64) -> RegressorConfig {
    let RegressorConfig { grid: HyperGrid::SpectralSeries { eigenvectors, .. }, .. } =
        RegressorConfig::default_for(RegressorKind::SpectralSeries)
    else {
        unreachable!()
    };
    RegressorConfig::spectral(vec![sigma2 / 4.0], eigenvectors).with_absolute_bandwidth()
}

/// Divergences between sample sets, the exponential divergence kernel and
/// the series estimator on its eigenvectors; the kernel scale is chosen by
/// validation loss.
pub fn fit_sample_sets(config: &DistFitConfig, sets: &[SampleSet], z: &[f64]) -> Result<DistFitResult> {
    config.kl.validate()?;
    if sets.len() != z.len() {
        return Err(CdeError::Shape(format!("{} sample sets for {} responses", sets.len(), z.len())));
    }
    let zm = model_response(z, config.log_response)?;
    let (raw, warnings) = divergence_matrix(sets, config.kl.k)?;
    let sigma2 = if config.sigma2.is_empty() { sigma2_grid(&raw)? } else { config.sigma2.clone() };
    if let Some(s) = sigma2.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(CdeError::Config(format!("kernel scale {s} must be positive")));
    }
    let x = Covariates::Precomputed(divergence_distance(&raw)?);
    let base = |reg: RegressorConfig| {
        let mut c = FlexCodeConfig::new(config.basis, reg)
            .with_seed(config.seed)
            .with_max_cutoff(config.max_cutoff)
            .with_fractions(config.train_fraction, config.validation_fraction);
        c.grid_cells = config.grid_cells;
        c
    };
    let fits: Vec<FittedCde> = sigma2
        .par_iter()
        .map(|&s| fit(&base(spectral_on_kernel(s)), &x, &zm))
        .collect::<Result<_>>()?;
    let trace: Vec<Sigma2Score> = sigma2
        .iter()
        .zip(&fits)
        .map(|(&s, m)| Sigma2Score {
            sigma2: s,
            validation_loss: m.trace().iter().find(|t| t.cutoff == m.cutoff()).map(|t| t.loss).unwrap_or(f64::INFINITY),
        })
        .collect();
    let mut best = 0;
    for (i, t) in trace.iter().enumerate() {
        if t.validation_loss < trace[best].validation_loss {
            best = i;
        }
    }
    let model = fits.into_iter().nth(best).expect("nonempty grid");
    let evaluation = evaluate_holdout(&model, &x, &zm, z, &config.levels, config.log_response)?;

    let var_rows: Vec<Vec<f64>> = sets.iter().map(|s| vec![s.sample_variance()]).collect();
    let xv = Covariates::Table(Table::from_rows(&var_rows)?);
    let disp = fit(&base(RegressorConfig::default_for(RegressorKind::Knn)), &xv, &zm)?;
    let dispersion_baseline = evaluate_holdout(&disp, &xv, &zm, z, &config.levels, config.log_response)?;
    Ok(DistFitResult {
        model,
        sigma2: sigma2[best],
        sigma2_trace: trace,
        floor_warnings: warnings.len(),
        evaluation,
        dispersion_baseline,
    })
}
