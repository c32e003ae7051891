use super::*;
use crate::basis::{BasisFamily, TensorBasisSpec};
use crate::datasets::{generate, Scenario, ScenarioConfig};
use crate::grid::{trapezoid, uniform_grid};
use crate::loss::empirical_cde_loss;
use crate::regress::{Hyper, RegressorKind};
use crate::table::Table;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn knn_config(max_terms: usize) -> FlexCodeConfig {
    FlexCodeConfig::new(
        BasisSpec::fourier(max_terms).unwrap(),
        RegressorConfig::default_for(RegressorKind::Knn),
    )
}

fn scenario(s: Scenario, d: usize, n: usize, seed: u64) -> (Table, Vec<f64>) {
    let ds = generate(&ScenarioConfig::new(s, d, n, seed)).unwrap();
    (ds.x, ds.z)
}

fn full_grid(model: &FittedCde, cells: usize) -> Vec<f64> {
    let s = model.response_scaler();
    uniform_grid(s.z_min, s.z_max, cells)
}

#[test]
fn uniform_response_gives_flat_density() {
    let (x, z) = scenario(Scenario::UniformNull, 2, 2000, 5);
    let model = fit(&knn_config(31).with_seed(5), &Covariates::Table(x.clone()), &z).unwrap();
    let q = x.select_rows(&model.split().test[..50]);
    let grid = full_grid(&model, 200);
    let d = model.predict_density(&Queries::Table(&q), &grid).unwrap();
    let width = model.response_scaler().width();
    let sup = d.values.iter().map(|v| (v * width - 1.0).abs()).fold(0.0, f64::max);
    assert!(sup < 0.15, "sup deviation {sup}, cutoff {}", model.cutoff());
}

#[test]
fn first_cutoff_has_coefficient_loss_minus_one() {
    for seed in 0..5 {
        let (x, z) = scenario(Scenario::IrrelevantCovariates, 3, 200, seed);
        let model = fit(&knn_config(8).with_seed(seed), &Covariates::Table(x), &z).unwrap();
        assert_eq!(model.trace()[0].coefficient_loss, -1.0);
        assert!((model.trace()[0].loss + 1.0).abs() < 1e-9);
    }
}

#[test]
fn single_term_model_is_flat_on_the_original_scale() {
    let (x, z) = scenario(Scenario::NonSparse, 3, 100, 2);
    let model = fit(&knn_config(1).with_max_cutoff(1), &Covariates::Table(x.clone()), &z).unwrap();
    assert_eq!(model.cutoff(), 1);
    let grid = full_grid(&model, 50);
    let d = model.predict_density(&Queries::Table(&x.select_rows(&[0, 1, 2])), &grid).unwrap();
    let want = 1.0 / model.response_scaler().width();
    assert!(d.values.iter().all(|v| (v - want).abs() < 1e-12 * want.max(1.0)));
}

#[test]
fn knn_beats_uniform_on_irrelevant_covariates() {
    let (x, z) = scenario(Scenario::IrrelevantCovariates, 10, 1000, 3);
    let model = fit(&knn_config(31).with_seed(3), &Covariates::Table(x.clone()), &z).unwrap();
    let test = &model.split().test;
    let zt: Vec<f64> = test.iter().map(|&r| z[r]).collect();
    let q = x.select_rows(test);
    let r = empirical_cde_loss(&model, &Queries::Table(&q), &zt, LossPath::Grid).unwrap();
    assert!(r.loss < -1.0, "test loss {}", r.loss);
}

#[test]
fn mode_tracks_the_first_covariate() {
    let (x, z) = scenario(Scenario::IrrelevantCovariates, 2, 2000, 8);
    let model = fit(&knn_config(31).with_seed(8), &Covariates::Table(x), &z).unwrap();
    let q = Table::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let grid = full_grid(&model, 1000);
    let d = model.predict_density(&Queries::Table(&q), &grid).unwrap();
    let (arg, _) = d.values.row(0).iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    assert!(grid[arg].abs() <= 0.15, "mode at {}", grid[arg]);
}

#[test]
fn densities_are_nonnegative_and_normalized_for_every_regressor() {
    let (x, z) = scenario(Scenario::Manifold, 4, 300, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let q = Table::from_rows(&rows).unwrap();
    for kind in [
        RegressorKind::Knn,
        RegressorKind::NadarayaWatson,
        RegressorKind::SpectralSeries,
        RegressorKind::PenalizedLinear,
    ] {
        for family in [BasisFamily::Fourier, BasisFamily::Cosine, BasisFamily::HaarWavelet] {
            let cfg = FlexCodeConfig::new(BasisSpec::new(family, 16).unwrap(), RegressorConfig::default_for(kind));
            let model = fit(&cfg, &Covariates::Table(x.clone()), &z).unwrap();
            let grid = full_grid(&model, 1000);
            let d = model.predict_density(&Queries::Table(&q), &grid).unwrap();
            for r in 0..100 {
                let row: Vec<f64> = d.values.row(r).iter().copied().collect();
                assert!(row.iter().all(|&v| v >= 0.0));
                let mass = trapezoid(&grid, &row);
                assert!((mass - 1.0).abs() < 1e-6, "{kind} {family:?} mass {mass}");
            }
        }
    }
}

#[test]
fn identical_queries_give_identical_rows() {
    let (x, z) = scenario(Scenario::NonSparse, 3, 200, 6);
    let model = fit(&knn_config(10), &Covariates::Table(x.clone()), &z).unwrap();
    let q = x.select_rows(&[7, 7]);
    let d = model.predict_density(&Queries::Table(&q), &full_grid(&model, 100)).unwrap();
    assert_eq!(d.values.row(0), d.values.row(1));
}

#[test]
fn partial_grids_interpolate_the_reference_grid() {
    let (x, z) = scenario(Scenario::NonSparse, 3, 200, 6);
    let model = fit(&knn_config(10), &Covariates::Table(x.clone()), &z).unwrap();
    let s = *model.response_scaler();
    let q = x.select_rows(&[1, 2]);
    let reference = model.predict_density(&Queries::Table(&q), &full_grid(&model, model.config().grid_cells)).unwrap();
    let inner: Vec<f64> = reference.z[10..20].to_vec();
    let d = model.predict_density(&Queries::Table(&q), &inner).unwrap();
    for r in 0..2 {
        for (c, _) in inner.iter().enumerate() {
            let want = reference.values[(r, 10 + c)];
            assert!((d.values[(r, c)] - want).abs() < 1e-9 * want.max(1.0));
        }
    }
    assert!(s.width() > 0.0);
}

#[test]
fn predict_refuses_bad_grids() {
    let (x, z) = scenario(Scenario::NonSparse, 2, 100, 1);
    let model = fit(&knn_config(5), &Covariates::Table(x.clone()), &z).unwrap();
    let s = *model.response_scaler();
    let q = x.select_rows(&[0]);
    let outside = [s.z_min - 1.0, s.z_max];
    assert!(matches!(model.predict_density(&Queries::Table(&q), &outside), Err(CdeError::Domain { index: 0, .. })));
    let unsorted = [s.z_max, s.z_min];
    assert!(matches!(model.predict_density(&Queries::Table(&q), &unsorted), Err(CdeError::Config(_))));
}

#[test]
fn fit_rejects_degenerate_inputs() {
    let (x, _) = scenario(Scenario::NonSparse, 2, 30, 1);
    let cx = Covariates::Table(x.clone());
    assert!(matches!(fit(&knn_config(5), &cx, &[2.0; 30]), Err(CdeError::DegenerateResponse(_))));
    let small = Covariates::Table(x.select_rows(&(0..10).collect::<Vec<_>>()));
    let z: Vec<f64> = (0..10).map(|i| i as f64).collect();
    assert!(matches!(fit(&knn_config(5), &small, &z), Err(CdeError::Size(_))));
    assert!(matches!(fit(&knn_config(5).with_max_cutoff(6), &cx, &vec![0.0; 30]), Err(CdeError::Config(_))));
    assert!(matches!(fit(&knn_config(5).with_fractions(0.9, 0.1), &cx, &vec![0.0; 30]), Err(CdeError::Config(_))));
}

#[test]
fn fitting_is_deterministic() {
    let (x, z) = scenario(Scenario::Manifold, 3, 300, 12);
    let cx = Covariates::Table(x);
    for kind in [RegressorKind::Knn, RegressorKind::SpectralSeries] {
        let cfg = FlexCodeConfig::new(BasisSpec::fourier(16).unwrap(), RegressorConfig::default_for(kind)).with_seed(12);
        let a = fit(&cfg, &cx, &z).unwrap();
        let b = fit(&cfg, &cx, &z).unwrap();
        assert_eq!(a.cutoff(), b.cutoff());
        assert_eq!(a.trace(), b.trace());
        let ha: Vec<Hyper> = a.target_fits().iter().map(|f| f.hyper).collect();
        let hb: Vec<Hyper> = b.target_fits().iter().map(|f| f.hyper).collect();
        assert_eq!(ha, hb);
    }
}

#[test]
fn saved_models_predict_identically() {
    let (x, z) = scenario(Scenario::IrrelevantCovariates, 3, 300, 13);
    for kind in [
        RegressorKind::Knn,
        RegressorKind::NadarayaWatson,
        RegressorKind::SpectralSeries,
        RegressorKind::PenalizedLinear,
    ] {
        let cfg = FlexCodeConfig::new(BasisSpec::fourier(12).unwrap(), RegressorConfig::default_for(kind));
        let model = fit(&cfg, &Covariates::Table(x.clone()), &z).unwrap();
        let text = model_io::to_json(&model_io::SavedModel::Univariate { model: model.clone() }).unwrap();
        let model_io::SavedModel::Univariate { model: back } = model_io::from_json(&text).unwrap() else {
            panic!("wrong variant")
        };
        let q = x.select_rows(&(0..40).collect::<Vec<_>>());
        let grid = full_grid(&model, model.config().grid_cells);
        let a = model.predict_density(&Queries::Table(&q), &grid).unwrap();
        let b = back.predict_density(&Queries::Table(&q), &grid).unwrap();
        assert_eq!(a.values, b.values, "{kind}");
        assert_eq!(model.trace(), back.trace());
    }
}

#[test]
fn model_documents_are_checked() {
    assert!(matches!(model_io::from_json("{\"format\":\"other\",\"version\":1}"), Err(CdeError::Serde(_))));
    assert!(matches!(model_io::from_json("{\"format\":\"flexcde-model\",\"version\":9}"), Err(CdeError::Serde(_))));
    assert!(matches!(model_io::from_json("not json"), Err(CdeError::Serde(_))));
}

#[test]
fn series_and_grid_losses_agree_without_clipping() {
    let (x, z) = scenario(Scenario::UniformNull, 2, 1000, 21);
    let model = fit(&knn_config(3).with_max_cutoff(3), &Covariates::Table(x.clone()), &z).unwrap();
    let v = &model.split().validation;
    let q = x.select_rows(v);
    // Only meaningful where the raw series stayed positive; the uniform
    // response keeps the low-order coefficients small.
    let coef = model.coefficients(&Queries::Table(&q)).unwrap();
    let bound: f64 = (0..coef.nrows())
        .map(|r| coef.row(r).iter().skip(1).map(|b| b.abs() * 2f64.sqrt()).sum::<f64>())
        .fold(0.0, f64::max);
    assert!(bound < 1.0);
    for s in model.trace() {
        assert!((s.loss - s.coefficient_loss).abs() < 1e-4, "{s:?}");
    }
}

fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    // P(X >= k) for X ~ Bin(n, 1/2).
    let mut c = 1.0f64;
    let mut total = 0.0;
    for i in 0..=n {
        if i >= k {
            total += c;
        }
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    total / 2f64.powi(n as i32)
}

#[test]
fn first_cutoff_wins_on_uniform_response() {
    let mut wins = [0u64; 10];
    for seed in 0..50 {
        let (x, z) = scenario(Scenario::UniformNull, 2, 1000, 100 + seed);
        let model = fit(&knn_config(10).with_seed(seed), &Covariates::Table(x), &z).unwrap();
        let t = model.trace();
        for i in 1..10 {
            wins[i] += (t[0].coefficient_loss <= t[i].coefficient_loss) as u64;
        }
    }
    for (i, &w) in wins.iter().enumerate().skip(1) {
        assert!(binomial_upper_tail(50, w) < 0.01, "I={} wins {w}/50", i + 1);
    }
}

#[test]
fn binomial_tail_matches_known_values() {
    assert!((binomial_upper_tail(2, 1) - 0.75).abs() < 1e-15);
    assert!((binomial_upper_tail(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
    assert_eq!(binomial_upper_tail(50, 0), 1.0);
}

fn tensor_config() -> FlexCode2dConfig {
    let b = BasisSpec::fourier(15).unwrap();
    FlexCode2dConfig::new(TensorBasisSpec::new(b, b), RegressorConfig::default_for(RegressorKind::Knn))
}

fn pair_data(n: usize, seed: u64, diagonal: bool) -> (Table, Vec<(f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let z = (0..n)
        .map(|_| {
            let a: f64 = rng.random();
            (a, if diagonal { a } else { rng.random() })
        })
        .collect();
    (Table::from_rows(&rows).unwrap(), z)
}

#[test]
fn bivariate_uniform_is_flat() {
    let (x, z) = pair_data(2000, 31, false);
    let model = fit_2d(&tensor_config(), &Covariates::Table(x.clone()), &z).unwrap();
    let q = x.select_rows(&model.split().test[..20]);
    let d = model.predict_density_default(&Queries::Table(&q)).unwrap();
    let (s1, s2) = model.response_scalers();
    let area = s1.width() * s2.width();
    let sup = d.values.iter().map(|v| (v * area - 1.0).abs()).fold(0.0, f64::max);
    assert!(sup < 0.2, "sup deviation {sup}, cutoffs {:?}", model.cutoffs());
    let first = model.trace().iter().find(|s| s.cutoffs == (1, 1)).unwrap();
    assert_eq!(first.loss, -1.0);
}

#[test]
fn bivariate_diagonal_concentrates_mass() {
    let (x, z) = pair_data(2000, 32, true);
    let model = fit_2d(&tensor_config(), &Covariates::Table(x.clone()), &z).unwrap();
    let q = x.select_rows(&model.split().test[..20]);
    let d = model.predict_density_default(&Queries::Table(&q)).unwrap();
    let w1 = trapezoid_weights(&d.z1);
    let w2 = trapezoid_weights(&d.z2);
    let n2 = d.z2.len();
    for r in 0..d.values.nrows() {
        let mut total = 0.0;
        let mut band = 0.0;
        for (i, a) in d.z1.iter().enumerate() {
            for (j, b) in d.z2.iter().enumerate() {
                let m = d.values[(r, i * n2 + j)] * w1[i] * w2[j];
                assert!(m >= 0.0);
                total += m;
                if (a - b).abs() < 0.1 {
                    band += m;
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-4, "mass {total}");
        assert!(band > 0.5, "band mass {band}");
    }
}

#[test]
fn bivariate_grids_must_cover_the_ranges() {
    let (x, z) = pair_data(100, 33, false);
    let mut cfg = tensor_config();
    cfg.max_cutoffs = (3, 3);
    let model = fit_2d(&cfg, &Covariates::Table(x.clone()), &z).unwrap();
    let (s1, s2) = model.response_scalers();
    let q = x.select_rows(&[0]);
    let g1 = uniform_grid(s1.z_min, s1.z_max, 10);
    let part = uniform_grid(s2.z_min, (s2.z_min + s2.z_max) / 2.0, 10);
    assert!(model.predict_density(&Queries::Table(&q), &g1, &part).is_err());
    assert!(fit_2d(&cfg, &Covariates::Table(x), &vec![(0.5, 0.5); 100]).is_err());
}
