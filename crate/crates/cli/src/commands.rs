use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flexcde::basis::{BasisFamily, BasisSpec};
use flexcde::bench::{
    fit_sample_sets, run_benchmark, summarize, BenchmarkConfig, DistFitConfig, HoldoutEvaluation, Method,
    SampleSetScenario, BENCHMARK_HEADER, SUMMARY_HEADER,
};
use flexcde::datasets::{generate, Scenario, ScenarioConfig};
use flexcde::diagnostics::{coverage_curve, hpd_segments_csv, point_summaries};
use flexcde::distreg::{read_sample_sets, write_sample_sets, KlConfig};
use flexcde::flexcode::model_io::{load, save_with_comment, SavedModel};
use flexcde::flexcode::{fit, FittedCde, FlexCodeConfig};
use flexcde::grid::uniform_grid;
use flexcde::loss::{empirical_cde_loss, LossPath};
use flexcde::regress::{Covariates, Queries, RegressorConfig, RegressorKind};
use flexcde::table::{format_float, read_covariates, read_csv};
use flexcde::CdeError;

use crate::{Args, BasisArg, Command, RegressorArg};

const SAMPLE_SETS: &str = "sample_sets";

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CdeError::Config(msg.into()).into()
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::Generate => "generate",
        Command::Fit => "fit",
        Command::Predict => "predict",
        Command::Evaluate => "evaluate",
        Command::Diagnose => "diagnose",
        Command::Benchmark => "benchmark",
        Command::Distfit => "distfit",
    }
}

/// Provenance line written at the top of every output file.
fn provenance(args: &Args) -> String {
    format!(
        "flexcde {} cmd={} seed={}",
        env!("CARGO_PKG_VERSION"),
        command_name(args.cmd),
        args.seed
    )
}

fn with_header(args: &Args, body: &str) -> String {
    format!("# {}\n{body}", provenance(args))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, cmd: Command) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| config_err(format!("--{flag} is required for {}", command_name(cmd))))
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> Result<Vec<T>> {
    let out: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| config_err(format!("--{flag}: cannot parse '{t}'"))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(config_err(format!("--{flag} is empty")));
    }
    Ok(out)
}

fn single<T: std::str::FromStr + Copy>(s: &str, flag: &str) -> Result<T> {
    let v = parse_list::<T>(s, flag)?;
    if v.len() != 1 {
        return Err(config_err(format!("--{flag} takes one value for this command")));
    }
    Ok(v[0])
}

fn basis_spec(args: &Args) -> Result<BasisSpec> {
    let family = match args.basis {
        BasisArg::Fourier => BasisFamily::Fourier,
        BasisArg::Cosine => BasisFamily::Cosine,
        BasisArg::Haar => BasisFamily::HaarWavelet,
    };
    Ok(BasisSpec::new(family, args.max_cutoff)?)
}

fn regressor_kind(r: RegressorArg) -> RegressorKind {
    match r {
        RegressorArg::Knn => RegressorKind::Knn,
        RegressorArg::Nw => RegressorKind::NadarayaWatson,
        RegressorArg::Spectral => RegressorKind::SpectralSeries,
        RegressorArg::Lasso => RegressorKind::PenalizedLinear,
    }
}

fn levels(args: &Args) -> Result<Vec<f64>> {
    parse_list(&args.alpha_levels, "alpha-levels")
}

fn load_univariate(args: &Args) -> Result<FittedCde> {
    let path = required(&args.model, "model", args.cmd)?;
    match load(path)? {
        SavedModel::Univariate { model } => Ok(model),
        SavedModel::Bivariate { .. } => Err(CdeError::Data(format!(
            "{} holds a bivariate-response model; this command needs a univariate one",
            path.display()
        ))
        .into()),
    }
}

fn model_label(model: &FittedCde) -> String {
    format!("flexcode-{}", model.config().regressor.kind())
}

pub fn run(args: &Args) -> Result<()> {
    if args.workers > 0 {
        // A pool may already exist when running inside a test harness.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build_global();
    }
    match args.cmd {
        Command::Generate => cmd_generate(args),
        Command::Fit => cmd_fit(args),
        Command::Predict => cmd_predict(args),
        Command::Evaluate => cmd_evaluate(args),
        Command::Diagnose => cmd_diagnose(args),
        Command::Benchmark => cmd_benchmark(args),
        Command::Distfit => cmd_distfit(args),
    }
}

fn cmd_generate(args: &Args) -> Result<()> {
    let out = required(&args.out, "out", args.cmd)?;
    let n: usize = single(&args.n, "n")?;
    let name = args.scenario.trim().to_ascii_lowercase().replace(['-', ' '], "_");
    if name == SAMPLE_SETS || name == "samplesets" {
        let (sets, z) = SampleSetScenario::new(n, args.seed).generate()?;
        write_sample_sets(out, &sets, &z, &args.response_col, Some(&provenance(args)))?;
        return Ok(());
    }
    let scenario: Scenario = args.scenario.parse()?;
    let dims: usize = single(&args.dims, "dims")?;
    let ds = generate(&ScenarioConfig::new(scenario, dims, n, args.seed))?;
    if ds.x.names().iter().any(|c| c == &args.response_col) {
        return Err(config_err(format!("--response-col '{}' clashes with a covariate name", args.response_col)));
    }
    let mut s = ds.x.names().join(",");
    let _ = writeln!(s, ",{}", args.response_col);
    for r in 0..ds.x.n_rows() {
        let mut row = ds.x.row_strings(r);
        row.push(format_float(ds.z[r]));
        let _ = writeln!(s, "{}", row.join(","));
    }
    write_file(out, &with_header(args, &s))
}

fn cmd_fit(args: &Args) -> Result<()> {
    let data = required(&args.data, "data", args.cmd)?;
    let model_path = required(&args.model, "model", args.cmd)?;
    let (x, z) = read_csv(data, &args.response_col)?;
    let mut config = FlexCodeConfig::new(basis_spec(args)?, RegressorConfig::default_for(regressor_kind(args.regressor)))
        .with_seed(args.seed)
        .with_max_cutoff(args.max_cutoff)
        .with_fractions(args.train_frac, args.valid_frac);
    config.grid_cells = args.grid;
    config.validate()?;
    let model = fit(&config, &Covariates::Table(x), &z)?;
    let mut trace = String::from("cutoff,loss,se,coefficient_loss,selected\n");
    for t in model.trace() {
        let _ = writeln!(
            trace,
            "{},{},{},{},{}",
            t.cutoff,
            format_float(t.loss),
            format_float(t.se),
            format_float(t.coefficient_loss),
            u8::from(t.cutoff == model.cutoff())
        );
    }
    let trace_path = args.out.clone().unwrap_or_else(|| model_path.with_extension("trace.csv"));
    if let Some(parent) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_with_comment(&SavedModel::Univariate { model }, model_path, Some(&provenance(args)))?;
    write_file(&trace_path, &with_header(args, &trace))
}

fn response_grid(model: &FittedCde, cells: usize) -> Result<Vec<f64>> {
    let s = model.response_scaler();
    Ok(uniform_grid(s.z_min, s.z_max, cells))
}

fn cmd_predict(args: &Args) -> Result<()> {
    let data = required(&args.data, "data", args.cmd)?;
    let out = required(&args.out, "out", args.cmd)?;
    let model = load_univariate(args)?;
    let (x, _) = read_covariates(data, &args.response_col)?;
    let grid = response_grid(&model, args.grid)?;
    let d = model.predict_density(&Queries::Table(&x), &grid)?;
    let mut s = String::from("query,z,density\n");
    for r in 0..d.values.nrows() {
        for (c, z) in grid.iter().enumerate() {
            let _ = writeln!(s, "{r},{},{}", format_float(*z), format_float(d.values[(r, c)]));
        }
    }
    write_file(out, &with_header(args, &s))
}

fn cmd_evaluate(args: &Args) -> Result<()> {
    let data = required(&args.data, "data", args.cmd)?;
    let out = required(&args.out, "out", args.cmd)?;
    let model = load_univariate(args)?;
    let (x, z) = read_csv(data, &args.response_col)?;
    let name = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut s = String::from("method,data,D,n,loss,se,n_clamped,path,seed\n");
    for path in [LossPath::Grid, LossPath::Coefficients] {
        let r = empirical_cde_loss(&model, &Queries::Table(&x), &z, path)?;
        let _ = writeln!(
            s,
            "{},{name},{},{},{},{},{},{path},{}",
            model_label(&model),
            x.n_cols(),
            r.n_eval,
            format_float(r.loss),
            format_float(r.se),
            r.n_clamped,
            model.config().seed
        );
    }
    write_file(out, &with_header(args, &s))
}

fn cmd_diagnose(args: &Args) -> Result<()> {
    let data = required(&args.data, "data", args.cmd)?;
    let out = required(&args.out, "out", args.cmd)?;
    let model = load_univariate(args)?;
    let (x, z) = read_csv(data, &args.response_col)?;
    let levels = levels(args)?;
    let q = Queries::Table(&x);
    let curve = coverage_curve(&model, &q, &z, &levels)?;
    write_file(&out.join("coverage.csv"), &with_header(args, &curve.to_csv()))?;

    let grid = response_grid(&model, args.grid)?;
    let d = model.predict_density(&q, &grid)?;
    let ids: Vec<String> = (0..x.n_rows()).map(|r| r.to_string()).collect();
    let hpd = hpd_segments_csv(&grid, &d.values, &ids, &levels)?;
    write_file(&out.join("hpd.csv"), &with_header(args, &hpd))?;

    let mut s = String::from("query,observed,mean,mode\n");
    for r in 0..d.values.nrows() {
        let row: Vec<f64> = d.values.row(r).iter().copied().collect();
        let p = point_summaries(&grid, &row)?;
        let _ = writeln!(s, "{r},{},{},{}", format_float(z[r]), format_float(p.mean), format_float(p.mode));
    }
    write_file(&out.join("points.csv"), &with_header(args, &s))
}

fn cmd_benchmark(args: &Args) -> Result<()> {
    let out = required(&args.out, "out", args.cmd)?;
    let mut cfg = BenchmarkConfig::new(
        parse_list::<Scenario>(&args.scenario, "scenario")?,
        parse_list::<Method>(&args.methods, "methods")?,
        parse_list(&args.dims, "dims")?,
        parse_list(&args.n, "n")?,
        args.reps,
    )
    .with_seed(args.seed);
    cfg.basis = basis_spec(args)?;
    cfg.max_cutoff = args.max_cutoff;
    cfg.train_fraction = args.train_frac;
    cfg.validation_fraction = args.valid_frac;
    cfg.grid_cells = args.grid;
    let rows = run_benchmark(&cfg, rayon::current_num_threads())?;
    let mut s = format!("{BENCHMARK_HEADER}\n");
    for r in &rows {
        let _ = writeln!(s, "{}", r.csv_line(args.timing));
    }
    write_file(out, &with_header(args, &s))?;
    let mut sum = format!("{SUMMARY_HEADER}\n");
    for r in summarize(&rows) {
        let _ = writeln!(sum, "{}", r.csv_line());
    }
    write_file(&out.with_extension("summary.csv"), &with_header(args, &sum))
}

fn holdout_row(label: &str, e: &HoldoutEvaluation) -> String {
    format!(
        "{label},{},{},{},{},{},{}\n",
        format_float(e.loss.loss),
        format_float(e.loss.se),
        e.loss.n_eval,
        format_float(e.mode_errors.mean),
        format_float(e.mode_errors.median),
        format_float(e.mode_errors.scatter68)
    )
}

fn cmd_distfit(args: &Args) -> Result<()> {
    let data = required(&args.data, "data", args.cmd)?;
    let out = required(&args.out, "out", args.cmd)?;
    let (sets, z) = read_sample_sets(data, &args.response_col)?;
    let config = DistFitConfig {
        kl: KlConfig {
            k: args.kl_k,
            ..KlConfig::default()
        },
        sigma2: match &args.sigma2_grid {
            Some(s) => parse_list(s, "sigma2-grid")?,
            None => Vec::new(),
        },
        basis: basis_spec(args)?,
        max_cutoff: args.max_cutoff,
        train_fraction: args.train_frac,
        validation_fraction: args.valid_frac,
        seed: args.seed,
        grid_cells: args.grid,
        levels: levels(args)?,
        log_response: args.log_scale_response,
    };
    let r = fit_sample_sets(&config, &sets, &z)?;

    let mut s = String::from("sigma2,validation_loss,selected\n");
    for t in &r.sigma2_trace {
        let _ = writeln!(
            s,
            "{},{},{}",
            format_float(t.sigma2),
            format_float(t.validation_loss),
            u8::from(t.sigma2 == r.sigma2)
        );
    }
    write_file(&out.join("sigma2.csv"), &with_header(args, &s))?;

    let mut s = String::from("method,loss,se,n_eval,mean_eps,median_eps,scatter68\n");
    s += &holdout_row("flexcode-kl-kernel", &r.evaluation);
    s += &holdout_row("dispersion-only", &r.dispersion_baseline);
    write_file(&out.join("loss.csv"), &with_header(args, &s))?;
    write_file(&out.join("coverage.csv"), &with_header(args, &r.evaluation.coverage.to_csv()))?;

    let mut s = String::from("id,observed,mode,dispersion_mode\n");
    for (k, &i) in r.evaluation.test.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            sets[i].id,
            format_float(r.evaluation.observed[k]),
            format_float(r.evaluation.modes[k]),
            format_float(r.dispersion_baseline.modes[k])
        );
    }
    write_file(&out.join("predictions.csv"), &with_header(args, &s))?;
    if let Some(m) = &args.model {
        save_with_comment(&SavedModel::Univariate { model: r.model }, m, Some(&provenance(args)))?;
    }
    Ok(())
}
