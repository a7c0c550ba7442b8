use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::dist::normal_quantile;
use crate::grid::Grid;
use crate::rng;
use crate::spline::build_spline_basis;
use crate::synth::{beta_tm1, generate_tm1, SyntheticDataset, Tm1Config};

fn tm1(d: f64, w: f64, seed: u64) -> SyntheticDataset {
    generate_tm1(&Tm1Config {
        d,
        w,
        seed,
        ..Tm1Config::default()
    })
    .unwrap()
}

fn basis_for(grid: &Grid) -> SplineBasis {
    build_spline_basis(grid, 30, 3).unwrap()
}

fn fit(sim: &SyntheticDataset, options: &FoSROptions) -> FoSRFit {
    fit_fosr(&sim.data, &basis_for(&sim.data.grid), options).unwrap()
}

#[test]
fn noise_free_tm1_recovers_beta() {
    let sim = generate_tm1(&Tm1Config {
        d: 1.0,
        w: 0.5,
        lambda1: 1e-6,
        sigma_eps: 1e-6,
        seed: 11,
        ..Tm1Config::default()
    })
    .unwrap();
    let fit = fit(&sim, &FoSROptions::default());
    let truth = beta_tm1(1.0, 0.5, &sim.data.grid).unwrap();
    let err = fit.coefficient_functions[1]
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 0.02, "max error {err}");
}

#[test]
fn fit_structure_invariants() {
    let sim = tm1(0.5, 0.5, 3);
    let fit = fit(&sim, &FoSROptions::default());
    assert_eq!(fit.n_coefficients(), 2);
    assert_eq!(fit.spline_coefficients.len(), 60);
    assert_eq!(fit.smoothing_parameters.len(), 2);
    assert!(fit.smoothing_parameters.iter().all(|l| *l > 0.0));
    assert!(fit.iterations >= 2 && fit.iterations <= 4);
    for q in 0..2 {
        let again = fit.basis.evaluate(fit.block(q));
        assert_eq!(again.as_slice(), fit.coefficient_functions[q].values());
    }
    let c = &fit.coefficient_covariance;
    assert_eq!((c - c.transpose()).amax(), 0.0);
    let eig = c.clone().symmetric_eigen();
    let top = eig.eigenvalues.max();
    assert!(eig.eigenvalues.iter().all(|v| *v > -1e-10 * top));
    assert!(fit.variance_components.sigma2 > 0.2 && fit.variance_components.sigma2 < 0.3);
}

#[test]
fn rank_deficient_design_is_rejected() {
    let sim = tm1(0.0, 0.0, 5);
    let mut data = sim.data.clone();
    let col = data.covariates.column(0).into_owned();
    data.covariates = DMatrix::from_columns(&[col.clone(), col * 2.0]);
    data.covariate_names = vec!["a".into(), "b".into()];
    let basis = basis_for(&data.grid);
    assert!(matches!(
        fit_fosr(&data, &basis, &FoSROptions::default()),
        Err(Error::RankDeficient(_))
    ));
}

#[test]
fn fixed_smoothing_checks_its_length() {
    let sim = tm1(0.0, 0.0, 5);
    let opts = FoSROptions {
        smoothing: SmoothingChoice::Fixed(vec![1.0]),
        ..FoSROptions::default()
    };
    let basis = basis_for(&sim.data.grid);
    assert!(matches!(
        fit_fosr(&sim.data, &basis, &opts),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn pointwise_multiplier_is_normal_quantile() {
    let sim = tm1(0.5, 0.0, 8);
    let fit = fit(&sim, &FoSROptions::default());
    let band = pointwise_band(&fit, 1, 0.05).unwrap();
    assert!((band.pointwise_multiplier - 1.959_96).abs() < 1e-5);
    for j in 0..band.estimate.len() {
        let half = band.pointwise_upper[j] - band.estimate[j];
        assert!((half - 1.959_963_984_540_054 * band.standard_errors[j]).abs() < 1e-12);
    }
    assert!(pointwise_band(&fit, 2, 0.05).is_err());
    assert!(pointwise_band(&fit, 1, 1.5).is_err());
}

#[test]
fn zero_covariance_collapses_band() {
    let sim = tm1(0.5, 0.0, 8);
    let mut fit = fit(&sim, &FoSROptions::default());
    fit.coefficient_covariance.fill(0.0);
    let band = cma_band(&fit, 1, 0.05, 500, 1).unwrap();
    let sim_band = band.simultaneous.as_ref().unwrap();
    for j in 0..band.estimate.len() {
        assert_eq!(band.pointwise_lower[j], band.estimate[j]);
        assert_eq!(band.pointwise_upper[j], band.estimate[j]);
        assert_eq!(sim_band.lower[j], band.estimate[j]);
        assert_eq!(sim_band.upper[j], band.estimate[j]);
    }
}

#[test]
fn zero_estimate_has_unit_p_value() {
    let rows = DMatrix::<f64>::identity(3, 3);
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 2.0, 0.1, 0.0, 0.1, 1.0]);
    let cal = max_statistic_calibration(&rows, &cov, &[0.0; 3], 0.05, 2000, 4).unwrap();
    assert_eq!(cal.p_value, 1.0);
    assert_eq!(cal.statistic, 0.0);
}

#[test]
fn single_point_multiplier_matches_pointwise() {
    let rows = DMatrix::from_element(1, 1, 1.0);
    let cov = DMatrix::from_element(1, 1, 0.3);
    let cal = max_statistic_calibration(&rows, &cov, &[0.1], 0.05, DEFAULT_DRAWS, 17).unwrap();
    let z = normal_quantile(0.975);
    assert!(cal.multiplier >= z);
    assert!((cal.multiplier - z).abs() < 0.06, "{}", cal.multiplier);
}

/// Empirical `(1 - α)` quantile of `max(|Z1|, |Z2|)` by direct simulation.
fn brute_force_two_point(draws: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed);
    let mut m: Vec<f64> = (0..draws)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            a.abs().max(b.abs())
        })
        .collect();
    m.sort_by(|a, b| a.total_cmp(b));
    m[(0.95 * draws as f64) as usize]
}

#[test]
fn two_independent_points_match_bivariate_oracle() {
    let oracle = brute_force_two_point(400_000, 2024);
    assert!((oracle - 2.236).abs() < 0.01, "oracle {oracle}");
    let rows = DMatrix::<f64>::identity(2, 2);
    let cov = DMatrix::<f64>::identity(2, 2) * 0.7;
    let cal = max_statistic_calibration(&rows, &cov, &[0.0, 0.0], 0.05, DEFAULT_DRAWS, 99).unwrap();
    assert!(
        (cal.multiplier - oracle).abs() < 0.03,
        "{} vs {oracle}",
        cal.multiplier
    );
}

#[test]
fn indefinite_covariance_is_an_error() {
    let rows = DMatrix::<f64>::identity(2, 2);
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]);
    assert!(matches!(
        max_statistic_calibration(&rows, &cov, &[0.0, 0.0], 0.05, 100, 1),
        Err(Error::NotPositiveSemidefinite(_))
    ));
    let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-9]);
    assert!(max_statistic_calibration(&rows, &tiny, &[0.0, 0.0], 0.05, 100, 1).is_ok());
}

#[test]
fn bands_nest_and_test_is_dual_to_band() {
    for (seed, d) in [(1_u64, 0.0), (2, 0.2), (3, 0.3), (4, 0.0), (5, 1.0)] {
        let sim = tm1(d, 0.5, seed);
        let fit = fit(&sim, &FoSROptions::default());
        for q in 0..2 {
            let band = cma_band(&fit, q, 0.05, 2000, seed).unwrap();
            let s = band.simultaneous.as_ref().unwrap();
            assert!(s.multiplier >= band.pointwise_multiplier);
            for j in 0..band.estimate.len() {
                assert!(s.lower[j] <= band.pointwise_lower[j]);
                assert!(s.upper[j] >= band.pointwise_upper[j]);
                assert!(band.pointwise_lower[j] <= band.estimate[j]);
                assert!(band.estimate[j] <= band.pointwise_upper[j]);
            }
            let reject = s.global_p < 0.05;
            if s.multiplier > band.pointwise_multiplier {
                assert_eq!(reject, band.excludes_zero().unwrap(), "seed {seed} q {q}");
            }
        }
    }
}

#[test]
fn global_test_is_reproducible() {
    let sim = tm1(0.3, 0.0, 21);
    let fit = fit(&sim, &FoSROptions::default());
    let a = fosr_global_test(&fit, 1, 0.05, 5).unwrap();
    let b = fosr_global_test(&fit, 1, 0.05, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fine_grids_are_thinned_for_bands() {
    let grid = alloc::sync::Arc::new(Grid::uniform(601).unwrap());
    let sim = generate_tm1(&Tm1Config {
        grid,
        n_subjects: 60,
        d: 0.5,
        seed: 2,
        ..Tm1Config::default()
    })
    .unwrap();
    let fit = fit(&sim, &FoSROptions::default());
    let band = pointwise_band(&fit, 1, 0.05).unwrap();
    assert!(band.subsampled);
    assert_eq!(band.indices.len(), BAND_MAX_POINTS);
    assert_eq!(band.indices[0], 0);
    assert_eq!(*band.indices.last().unwrap(), 600);
    assert!(band.indices.windows(2).all(|w| w[1] > w[0]));
}

/// Per-point OLS slope curve of W on [1, X], then its least-squares line.
fn best_line_of_raw_slope(sim: &SyntheticDataset) -> Vec<f64> {
    let x = &sim.data.covariates;
    let y = &sim.data.response;
    let n = x.nrows() as f64;
    let xm = x.column(0).sum() / n;
    let sxx: f64 = x.column(0).iter().map(|v| (v - xm).powi(2)).sum();
    let slope: Vec<f64> = (0..y.ncols())
        .map(|j| {
            let ym = y.column(j).sum() / n;
            x.column(0)
                .iter()
                .zip(y.column(j).iter())
                .map(|(a, b)| (a - xm) * (b - ym))
                .sum::<f64>()
                / sxx
        })
        .collect();
    let s = sim.data.grid.points();
    let p = s.len() as f64;
    let sm = s.iter().sum::<f64>() / p;
    let vm = slope.iter().sum::<f64>() / p;
    let b = s
        .iter()
        .zip(&slope)
        .map(|(a, v)| (a - sm) * (v - vm))
        .sum::<f64>()
        / s.iter().map(|a| (a - sm).powi(2)).sum::<f64>();
    s.iter().map(|a| vm + b * (a - sm)).collect()
}

#[test]
fn heavier_smoothing_flattens_toward_the_best_line() {
    let sim = tm1(1.0, 0.3, 31);
    let mut roughness = Vec::new();
    let mut last = None;
    for log_rho in [-6.0_f64, -2.0, 2.0, 6.0, 12.0, 20.0] {
        let rho = libm::exp(log_rho);
        let opts = FoSROptions {
            smoothing: SmoothingChoice::Fixed(vec![1.0, rho]),
            generalized: false,
            ..FoSROptions::default()
        };
        let f = fit(&sim, &opts);
        let theta = nalgebra::DVector::from_column_slice(f.block(1));
        roughness.push(theta.dot(&(&f.basis.penalty * &theta)));
        last = Some(f);
    }
    for w in roughness.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-6) + 1e-15, "{roughness:?}");
    }
    let f = last.unwrap();
    let line = best_line_of_raw_slope(&sim);
    let dev = f.coefficient_functions[1]
        .values()
        .iter()
        .zip(&line)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-4, "deviation from the best line {dev}");
}
