use super::*;
use crate::table::Table;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn table_1d(x: &[f64]) -> Table {
    Table::from_rows(&x.iter().map(|v| vec![*v]).collect::<Vec<_>>()).unwrap()
}

fn halves(n: usize) -> TuneSplit {
    TuneSplit::new((0..n).filter(|i| i % 2 == 0).collect(), (0..n).filter(|i| i % 2 == 1).collect())
}

#[test]
fn knn_with_all_neighbors_is_the_mean() {
    let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let w: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
    let cfg = RegressorConfig::knn(vec![10]);
    let fit = fit_regressor(&cfg, &Covariates::Table(table_1d(&x)), &w, &halves(10)).unwrap();
    let q = table_1d(&[-3.0, 4.4, 100.0]);
    let mean = w.iter().sum::<f64>() / 10.0;
    for p in fit.predict(&Queries::Table(&q)).unwrap() {
        assert!((p - mean).abs() < 1e-12);
    }
}

#[test]
fn knn_single_neighbor_returns_own_target() {
    let x: Vec<f64> = (0..8).map(|i| (i as f64).powf(1.3)).collect();
    let w: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
    let t = table_1d(&x);
    let fit = fit_regressor(&RegressorConfig::knn(vec![1]), &Covariates::Table(t.clone()), &w, &halves(8)).unwrap();
    assert_eq!(fit.predict(&Queries::Table(&t)).unwrap(), w);
}

#[test]
fn knn_two_neighbors_example() {
    let t = table_1d(&[0.0, 1.0, 2.0]);
    let split = TuneSplit::new(vec![0, 2], vec![1]);
    let fit = fit_regressor(&RegressorConfig::knn(vec![2]), &Covariates::Table(t), &[0.0, 10.0, 20.0], &split).unwrap();
    let p = fit.predict(&Queries::Table(&table_1d(&[0.9]))).unwrap();
    assert!((p[0] - 5.0).abs() < 1e-12);
}

#[test]
fn nadaraya_watson_matches_direct_formula() {
    let x: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
    let w: Vec<f64> = x.iter().map(|v| (3.0 * v).cos() + v).collect();
    let h = 0.01;
    let cfg = RegressorConfig::nadaraya_watson(vec![h]).with_absolute_bandwidth();
    // Precomputed distances keep the raw scale for the oracle.
    let d = DMatrix::from_fn(20, 20, |i, j| (x[i] - x[j]).abs());
    let cov = Covariates::Precomputed(Distance::precomputed(d).unwrap());
    let fit = fit_regressor(&cfg, &cov, &w, &halves(20)).unwrap();
    let queries = [0.0, 0.13, 0.5, 0.77, 1.0];
    let qd = DMatrix::from_fn(queries.len(), 20, |i, j| (queries[i] - x[j]).abs());
    let got = fit.predict(&Queries::Distances(&qd)).unwrap();
    for (q, g) in queries.iter().zip(got) {
        let ws: Vec<f64> = x.iter().map(|xi| (-(q - xi).powi(2) / (4.0 * h)).exp()).collect();
        let want = ws.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / ws.iter().sum::<f64>();
        assert!((g - want).abs() < 1e-12, "{g} vs {want}");
    }
}

#[test]
fn nadaraya_watson_bandwidth_is_near_the_grid_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 200;
    let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let w: Vec<f64> = x
        .iter()
        .map(|v| v + 0.1 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let grid: Vec<f64> = (0..20).map(|i| 1e-5 * 10f64.powf(i as f64 * 5.0 / 19.0)).collect();
    let split = TuneSplit::random(n, 0.25, 17).unwrap();
    let d = DMatrix::from_fn(n, n, |i, j| (x[i] - x[j]).abs());
    let cov = Covariates::Precomputed(Distance::precomputed(d).unwrap());
    let cfg = RegressorConfig::nadaraya_watson(grid.clone()).with_absolute_bandwidth();
    let fit = fit_regressor(&cfg, &cov, &w, &split).unwrap();

    let oracle = grid
        .iter()
        .map(|&h| {
            let mut sse = 0.0;
            for &t in &split.tune {
                let ws: Vec<f64> = split.fit.iter().map(|&f| (-(x[t] - x[f]).powi(2) / (4.0 * h)).exp()).collect();
                let total: f64 = ws.iter().sum();
                let pred = if total > 0.0 {
                    ws.iter().zip(&split.fit).map(|(a, &f)| a * w[f]).sum::<f64>() / total
                } else {
                    split.fit.iter().map(|&f| w[f]).sum::<f64>() / split.fit.len() as f64
                };
                sse += (w[t] - pred).powi(2);
            }
            sse / split.tune.len() as f64
        })
        .fold(f64::INFINITY, f64::min);
    assert!(fit.fit.tune_mse <= 1.5 * oracle, "{} vs oracle {oracle}", fit.fit.tune_mse);
}

#[test]
fn fitted_coefficients_are_no_rougher_than_the_truth() {
    use crate::basis::{BasisSpec, ResponseScaler};
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 2000;
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let z: Vec<f64> = x.iter().map(|m| { let e: f64 = StandardNormal.sample(&mut rng); m + 0.5 * e }).collect();
    let scaler = ResponseScaler::fit(&z).unwrap();
    let basis = BasisSpec::fourier(5).unwrap();
    let eps: Vec<f64> = (0..20000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let xs: Vec<f64> = (0..=80).map(|i| -2.0 + 0.05 * i as f64).collect();
    let lipschitz = |v: &[f64]| v.windows(2).map(|p| (p[1] - p[0]).abs() / 0.05).fold(0.0, f64::max);
    let split = TuneSplit::random(n, 0.25, 23).unwrap();
    let cov = Covariates::Table(table_1d(&x));
    let q = table_1d(&xs);
    for i in 0..5 {
        let w: Vec<f64> = z.iter().map(|&v| basis.value(i, scaler.to_unit(v))).collect();
        let fit = fit_regressor(&RegressorConfig::default_for(RegressorKind::NadarayaWatson), &cov, &w, &split).unwrap();
        let fitted = fit.predict(&Queries::Table(&q)).unwrap();
        // Monte Carlo oracle with common draws across the grid.
        let truth: Vec<f64> = xs
            .iter()
            .map(|m| eps.iter().map(|e| basis.value(i, scaler.to_unit(m + 0.5 * e).clamp(0.0, 1.0))).sum::<f64>() / eps.len() as f64)
            .collect();
        let (lf, lt) = (lipschitz(&fitted), lipschitz(&truth));
        assert!(lf <= 3.0 * 2f64.sqrt() * lt + 1e-12, "term {i}: fitted {lf} vs oracle {lt}");
    }
}

/// Top eigenvectors by power iteration with deflation.
fn power_eigvecs(m: &DMatrix<f64>, count: usize) -> Vec<Vec<f64>> {
    let n = m.nrows();
    let mut found: Vec<Vec<f64>> = Vec::new();
    for c in 0..count {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7 + c * 3) % 5) as f64 * 0.1).collect();
        for _ in 0..5000 {
            let mut nv: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[(i, j)] * v[j]).sum()).collect();
            for f in &found {
                let d: f64 = nv.iter().zip(f).map(|(a, b)| a * b).sum();
                for (x, y) in nv.iter_mut().zip(f) {
                    *x -= d * y;
                }
            }
            let norm = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = nv.into_iter().map(|x| x / norm).collect();
        }
        found.push(v);
    }
    found
}

#[test]
fn spectral_second_eigenvector_splits_two_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<[f64; 2]> = (0..50)
        .map(|i| {
            let c = if i < 25 { 0.0 } else { 3.0 };
            [c + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]
        })
        .collect();
    let d = DMatrix::from_fn(50, 50, |i, j| ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt());
    let bw = 1.0;
    let cov = Covariates::Precomputed(Distance::precomputed(d.clone()).unwrap());
    let e = spectral_embed(bw, &cov, 2).unwrap();
    let gram = d.map(|v| (-v * v / (4.0 * bw)).exp());
    let oracle = power_eigvecs(&gram, 2);
    for j in 0..2 {
        let dot: f64 = (0..50).map(|i| e.vectors[(i, j)] * oracle[j][i]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-8, "eigenvector {j}: {dot}");
    }
    let first = e.vectors[(0, 1)].signum();
    for i in 0..50 {
        let want = if i < 25 { first } else { -first };
        assert_eq!(e.vectors[(i, 1)].signum(), want, "point {i}");
    }
}

#[test]
fn spectral_regression_fits_a_smooth_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
    let w: Vec<f64> = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin()).collect();
    let split = TuneSplit::random(300, 0.25, 1).unwrap();
    let cfg = RegressorConfig::default_for(RegressorKind::SpectralSeries);
    let fit = fit_regressor(&cfg, &Covariates::Table(table_1d(&x)), &w, &split).unwrap();
    let q: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
    let p = fit.predict(&Queries::Table(&table_1d(&q))).unwrap();
    for (qi, pi) in q.iter().zip(p) {
        assert!((pi - (2.0 * std::f64::consts::PI * qi).sin()).abs() < 0.1, "{qi}: {pi}");
    }
}

#[test]
fn every_regressor_handles_degenerate_covariates() {
    let rows = vec![vec![1.0, 2.0]; 12];
    let w: Vec<f64> = (0..12).map(|i| i as f64).collect();
    for kind in [
        RegressorKind::Knn,
        RegressorKind::NadarayaWatson,
        RegressorKind::SpectralSeries,
        RegressorKind::PenalizedLinear,
    ] {
        let fit = fit_regressor(
            &RegressorConfig::default_for(kind),
            &Covariates::from_rows(&rows).unwrap(),
            &w,
            &halves(12),
        )
        .unwrap();
        let t = Table::from_rows(&rows[..3]).unwrap();
        for p in fit.predict(&Queries::Table(&t)).unwrap() {
            assert!((p - 5.5).abs() < 1e-9, "{kind}: {p}");
        }
    }
}

#[test]
fn averaging_regressors_stay_within_target_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random(), rng.random()]).collect();
    let w: Vec<f64> = (0..60).map(|_| rng.random_range(-2.0..3.0)).collect();
    let lo = w.iter().cloned().fold(f64::MAX, f64::min);
    let hi = w.iter().cloned().fold(f64::MIN, f64::max);
    let q: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)]).collect();
    let qt = Table::from_rows(&q).unwrap();
    for kind in [RegressorKind::Knn, RegressorKind::NadarayaWatson] {
        let fit = fit_regressor(
            &RegressorConfig::default_for(kind),
            &Covariates::from_rows(&rows).unwrap(),
            &w,
            &TuneSplit::random(60, 0.25, 2).unwrap(),
        )
        .unwrap();
        for p in fit.predict(&Queries::Table(&qt)).unwrap() {
            assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }
    }
}

#[test]
fn lasso_on_distances_is_rejected() {
    let d = DMatrix::from_fn(4, 4, |i, j| (i as f64 - j as f64).abs());
    let cov = Covariates::Precomputed(Distance::precomputed(d).unwrap());
    let err = fit_regressor(
        &RegressorConfig::default_for(RegressorKind::PenalizedLinear),
        &cov,
        &[1.0, 2.0, 3.0, 4.0],
        &halves(4),
    )
    .unwrap_err();
    assert!(matches!(err, CdeError::Config(_)));
}

#[test]
fn ties_prefer_smallest_neighbor_count() {
    // A constant target within each half of a split makes k = 1 and k = 2
    // score equally on the tune rows.
    let x = [0.0, 0.01, 10.0, 10.01];
    let w = [1.0, 1.0, 5.0, 5.0];
    let split = TuneSplit::new(vec![0, 2], vec![1, 3]);
    let fit = fit_regressor(
        &RegressorConfig::knn(vec![2, 1]),
        &Covariates::Table(table_1d(&x)),
        &w,
        &split,
    )
    .unwrap();
    assert_eq!(fit.hyper(), Hyper::Knn { k: 1 });
}

#[test]
fn invalid_grids_are_config_errors() {
    assert!(RegressorConfig::knn(vec![]).validate().is_err());
    assert!(RegressorConfig::knn(vec![0]).validate().is_err());
    assert!(RegressorConfig::nadaraya_watson(vec![-1.0]).validate().is_err());
    assert!(RegressorConfig::penalized_linear(vec![f64::NAN]).validate().is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn predictions_are_invariant_to_row_permutation(seed in 0u64..1000, kind_ix in 0usize..4) {
            let kind = [RegressorKind::Knn, RegressorKind::NadarayaWatson, RegressorKind::SpectralSeries, RegressorKind::PenalizedLinear][kind_ix];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random(), rng.random::<f64>() * 3.0]).collect();
            let w: Vec<f64> = rows.iter().map(|r| r[0] * r[1] + rng.random::<f64>() * 0.1).collect();
            let split = TuneSplit::random(n, 0.3, seed).unwrap();
            let perm: Vec<usize> = (0..n).rev().collect();
            let inv = |i: usize| n - 1 - i;
            let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let w_p: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let split_p = TuneSplit::new(
                { let mut v: Vec<usize> = split.fit.iter().map(|&i| inv(i)).collect(); v.sort(); v },
                { let mut v: Vec<usize> = split.tune.iter().map(|&i| inv(i)).collect(); v.sort(); v },
            );
            let cfg = RegressorConfig::default_for(kind);
            let a = fit_regressor(&cfg, &Covariates::from_rows(&rows).unwrap(), &w, &split).unwrap();
            let b = fit_regressor(&cfg, &Covariates::from_rows(&rows_p).unwrap(), &w_p, &split_p).unwrap();
            let q: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.random(), rng.random::<f64>() * 3.0]).collect();
            let qt = Table::from_rows(&q).unwrap();
            let pa = a.predict(&Queries::Table(&qt)).unwrap();
            let pb = b.predict(&Queries::Table(&qt)).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()), "{kind}: {x} vs {y}");
            }
        }
    }
}
