//! End-to-end: simulate, write and read CSV, fit, persist, predict, score.

use std::io::Write;

use flexcde::basis::{BasisFamily, BasisSpec, TensorBasisSpec};
use flexcde::datasets::{generate, OracleDensity, Scenario, ScenarioConfig};
use flexcde::flexcode::model_io::{load, save, SavedModel};
use flexcde::flexcode::{fit, fit_2d, FlexCode2dConfig, FlexCodeConfig};
use flexcde::grid::{trapezoid, uniform_grid};
use flexcde::loss::{empirical_cde_loss, LossPath};
use flexcde::regress::{Covariates, RegressorConfig, RegressorKind};
use flexcde::table::{format_float, read_csv, Table};

fn write_csv(path: &std::path::Path, x: &Table, z: &[f64]) {
    let mut f = std::fs::File::create(path).unwrap();
    let mut names = x.names().to_vec();
    names.push("z".into());
    writeln!(f, "{}", names.join(",")).unwrap();
    for (r, zr) in z.iter().enumerate() {
        let mut cells = x.row_strings(r);
        cells.push(format_float(*zr));
        writeln!(f, "{}", cells.join(",")).unwrap();
    }
}

#[test]
fn csv_fit_save_load_predict() {
    let ds = generate(&ScenarioConfig::new(Scenario::IrrelevantCovariates, 3, 600, 21)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    write_csv(&csv, &ds.x, &ds.z);

    let (x, z) = read_csv(&csv, "z").unwrap();
    assert_eq!(z, ds.z);
    assert_eq!(x.to_matrix().unwrap(), ds.x.to_matrix().unwrap());

    let cfg = FlexCodeConfig::new(
        BasisSpec::new(BasisFamily::Fourier, 31).unwrap(),
        RegressorConfig::default_for(RegressorKind::Knn),
    )
    .with_seed(5);
    let cov = Covariates::Table(x.clone());
    let model = fit(&cfg, &cov, &z).unwrap();
    assert!(model.cutoff() >= 1 && model.cutoff() <= 31);

    let path = dir.path().join("model.json");
    save(&SavedModel::Univariate { model: model.clone() }, &path).unwrap();
    let SavedModel::Univariate { model: loaded } = load(&path).unwrap() else {
        panic!("wrong model kind");
    };

    let queries = x.select_rows(&model.split().test);
    let q = flexcde::regress::Queries::Table(&queries);
    let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = uniform_grid(zmin, zmax, 400);
    let a = model.predict_density(&q, &grid).unwrap();
    let b = loaded.predict_density(&q, &grid).unwrap();
    assert_eq!(a.values, b.values);
    for r in 0..a.values.nrows() {
        let row: Vec<f64> = a.values.row(r).iter().copied().collect();
        assert!(row.iter().all(|v| *v >= 0.0));
        assert!((trapezoid(&grid, &row) - 1.0).abs() < 0.01);
    }

    // The fitted model beats the flat density but not the generating one.
    let zt: Vec<f64> = model.split().test.iter().map(|&i| z[i]).collect();
    let fitted = empirical_cde_loss(&model, &q, &zt, LossPath::Grid).unwrap();
    let oracle = OracleDensity {
        truth: &ds.truth,
        scaler: model.response_scaler().clone(),
        grid_cells: 1000,
    };
    let best = empirical_cde_loss(&oracle, &q, &zt, LossPath::Grid).unwrap();
    assert!(fitted.loss < -1.0, "{}", fitted.loss);
    assert!(best.loss < fitted.loss + 2.0 * fitted.se, "{} vs {}", best.loss, fitted.loss);
}

#[test]
fn bivariate_response_densities_are_normalized() {
    let ds = generate(&ScenarioConfig::new(Scenario::IrrelevantCovariates, 2, 500, 8)).unwrap();
    let z: Vec<(f64, f64)> = ds.z.iter().enumerate().map(|(i, &v)| (v, -v + 0.1 * ((i % 7) as f64 - 3.0))).collect();
    let basis = TensorBasisSpec::new(
        BasisSpec::new(BasisFamily::Cosine, 8).unwrap(),
        BasisSpec::new(BasisFamily::Cosine, 8).unwrap(),
    );
    let cfg = FlexCode2dConfig::new(basis, RegressorConfig::default_for(RegressorKind::Knn)).with_seed(3);
    let model = fit_2d(&cfg, &Covariates::Table(ds.x.clone()), &z).unwrap();
    let q = ds.x.select_rows(&[0, 1, 2]);
    let d = model.predict_density_default(&flexcde::regress::Queries::Table(&q)).unwrap();
    let (n1, n2) = (d.z1.len(), d.z2.len());
    for r in 0..3 {
        let inner: Vec<f64> = (0..n1)
            .map(|i| {
                let row: Vec<f64> = (0..n2).map(|j| d.values[(r, i * n2 + j)]).collect();
                trapezoid(&d.z2, &row)
            })
            .collect();
        assert!((trapezoid(&d.z1, &inner) - 1.0).abs() < 0.02);
    }
    let (c1, c2) = model.cutoffs();
    assert!(c1 > 1 && c2 > 1, "{c1} {c2}");
}
