//! Regression of principal component scores on scalar covariates.
//!
//! Each score column is fit by its own homoskedastic OLS with an intercept;
//! component tests are combined per covariate either by the raw minimum
//! p-value or with a Bonferroni correction.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dist::student_t_two_sided;
use crate::error::{Error, Result};
use crate::fpca::EigenSystem;
use crate::grid::{inner_product, FunctionOnGrid};

/// Classical linear model fit with intercept in position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub t_statistics: Vec<f64>,
    pub p_values: Vec<f64>,
    pub residual_variance: f64,
    pub df: usize,
}

/// Relative size below which a pivot of the scaled design counts as zero.
const RANK_TOL: f64 = 1e-10;

/// Least squares of `y` on `[1, x]` with two-sided t-tests on `N - Q - 1` df.
pub fn ols_fit(y: &[f64], x: &DMatrix<f64>) -> Result<OlsFit> {
    let n = y.len();
    let q = x.ncols();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} responses, design has {} rows",
            x.nrows()
        )));
    }
    if n <= q + 1 {
        return Err(Error::InsufficientData(format!(
            "N = {n} must exceed Q + 1 = {}",
            q + 1
        )));
    }
    let k = q + 1;
    let mut design = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let mut scale = Vec::with_capacity(k);
    for (j, mut col) in design.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::RankDeficient(format!(
                "design column {j} is zero or non-finite"
            )));
        }
        col /= norm;
        scale.push(norm);
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let max_pivot = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if let Some(j) = (0..k).find(|&j| r[(j, j)].abs() <= RANK_TOL * max_pivot) {
        return Err(Error::RankDeficient(format!(
            "design column {j} is linearly dependent on earlier columns"
        )));
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().tr_mul(&yv);
    let b_scaled = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::Singular("ols triangular solve"))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::Singular("ols triangular inverse"))?;

    let fitted = &design * &b_scaled;
    let rss: f64 = (yv - fitted).norm_squared();
    let df = n - k;
    let sigma2 = rss / df as f64;

    let mut coefficients = Vec::with_capacity(k);
    let mut standard_errors = Vec::with_capacity(k);
    let mut t_statistics = Vec::with_capacity(k);
    let mut p_values = Vec::with_capacity(k);
    for j in 0..k {
        let b = b_scaled[j] / scale[j];
        let unscaled_var: f64 = r_inv.row(j).iter().map(|v| v * v).sum();
        let se = (sigma2 * unscaled_var).sqrt() / scale[j];
        let t = if se > 0.0 {
            b / se
        } else if b == 0.0 {
            0.0
        } else {
            b.signum() * f64::INFINITY
        };
        coefficients.push(b);
        standard_errors.push(se);
        t_statistics.push(t);
        p_values.push(student_t_two_sided(t, df as f64));
    }
    Ok(OlsFit {
        coefficients,
        standard_errors,
        t_statistics,
        p_values,
        residual_variance: sigma2,
        df,
    })
}

/// Per-component regressions of scores on covariates.
///
/// Matrices are L x (Q + 1); row l is component l + 1, column 0 the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RpcsFit {
    pub slopes: DMatrix<f64>,
    pub standard_errors: DMatrix<f64>,
    pub t_statistics: DMatrix<f64>,
    pub p_values: DMatrix<f64>,
    pub residual_variances: Vec<f64>,
    pub n: usize,
    pub l: usize,
    pub q: usize,
}

pub fn rpcs_regress(scores: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<RpcsFit> {
    let (n, l) = scores.shape();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} score rows, {} covariate rows",
            x.nrows()
        )));
    }
    if l == 0 {
        return Err(Error::InvalidConfig(
            "need at least one score column".into(),
        ));
    }
    let q = x.ncols();
    let mut fit = RpcsFit {
        slopes: DMatrix::zeros(l, q + 1),
        standard_errors: DMatrix::zeros(l, q + 1),
        t_statistics: DMatrix::zeros(l, q + 1),
        p_values: DMatrix::zeros(l, q + 1),
        residual_variances: Vec::with_capacity(l),
        n,
        l,
        q,
    };
    for c in 0..l {
        let y: Vec<f64> = scores.column(c).iter().copied().collect();
        let ols = ols_fit(&y, x)?;
        for j in 0..=q {
            fit.slopes[(c, j)] = ols.coefficients[j];
            fit.standard_errors[(c, j)] = ols.standard_errors[j];
            fit.t_statistics[(c, j)] = ols.t_statistics[j];
            fit.p_values[(c, j)] = ols.p_values[j];
        }
        fit.residual_variances.push(ols.residual_variance);
    }
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Correction {
    /// Minimum component p-value, no multiplicity adjustment.
    None,
    Bonferroni,
}

impl Correction {
    pub fn name(self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::Bonferroni => "bonferroni",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTestResult {
    /// 1-based covariate index.
    pub covariate: usize,
    pub component_p_values: Vec<f64>,
    pub correction: Correction,
    pub global_p: f64,
    pub alpha: f64,
    pub reject: bool,
}

/// Combines component p-values: `min p` or `min(1, L min p)`.
pub fn combine_p_values(p_values: &[f64], correction: Correction) -> f64 {
    let min = p_values.iter().copied().fold(1.0, f64::min);
    match correction {
        Correction::None => min,
        Correction::Bonferroni => (p_values.len() as f64 * min).min(1.0),
    }
}

/// Tests `b_ql = 0` for every component l, for the 1-based covariate `q`.
pub fn rpcs_joint_test(
    fit: &RpcsFit,
    q: usize,
    alpha: f64,
    correction: Correction,
) -> Result<JointTestResult> {
    if q == 0 || q > fit.q {
        return Err(Error::IndexOutOfRange {
            index: q,
            max: fit.q,
        });
    }
    let component_p_values: Vec<f64> = fit.p_values.column(q).iter().copied().collect();
    Ok(joint_test_from_p_values(
        q,
        component_p_values,
        alpha,
        correction,
    ))
}

pub fn joint_test_from_p_values(
    covariate: usize,
    component_p_values: Vec<f64>,
    alpha: f64,
    correction: Correction,
) -> JointTestResult {
    let global_p = combine_p_values(&component_p_values, correction);
    JointTestResult {
        covariate,
        component_p_values,
        correction,
        global_p,
        alpha,
        reject: global_p < alpha,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconstruction {
    /// Every component, significant or not.
    All,
    /// Only components with p below alpha (Bonferroni-adjusted if requested).
    Significant { bonferroni: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedEffect {
    pub function: FunctionOnGrid,
    /// 0-based components that entered the sum.
    pub components: Vec<usize>,
    /// Significant mode with nothing significant; `function` is zero.
    pub empty_selection: bool,
}

/// `β̃_q(s) = Σ_l b̂_ql φ̂_l(s)` over all or only the significant components.
pub fn reconstruct_effect(
    fit: &RpcsFit,
    system: &EigenSystem,
    q: usize,
    mode: Reconstruction,
    alpha: f64,
) -> Result<ReconstructedEffect> {
    if q == 0 || q > fit.q {
        return Err(Error::IndexOutOfRange {
            index: q,
            max: fit.q,
        });
    }
    if fit.l != system.n_components() {
        return Err(Error::DimensionMismatch(format!(
            "fit has {} components, eigensystem {}",
            fit.l,
            system.n_components()
        )));
    }
    let components: Vec<usize> = (0..fit.l)
        .filter(|&l| match mode {
            Reconstruction::All => true,
            Reconstruction::Significant { bonferroni } => {
                let p = fit.p_values[(l, q)];
                let p = if bonferroni {
                    (p * fit.l as f64).min(1.0)
                } else {
                    p
                };
                p < alpha
            }
        })
        .collect();
    let mut function = FunctionOnGrid::zeros(system.grid().clone());
    for &l in &components {
        function = function.add_scaled(fit.slopes[(l, q)], &system.eigenfunctions[l])?;
    }
    Ok(ReconstructedEffect {
        function,
        empty_selection: components.is_empty()
            && matches!(mode, Reconstruction::Significant { .. }),
        components,
    })
}

/// Projections `b_ql = ∫ β_q(s) φ_l(s) ds` of an effect onto each eigenfunction.
pub fn theoretical_projection(beta: &FunctionOnGrid, system: &EigenSystem) -> Result<Vec<f64>> {
    system
        .eigenfunctions
        .iter()
        .map(|phi| inner_product(beta, phi))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpca::{fit_fpca, Selection, Smoothing};
    use crate::grid::Grid;
    use crate::synth::fourier_eigenfunction;
    use alloc::sync::Arc;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn exact_line() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64 / 3.0);
        let y: Vec<f64> = (0..10).map(|i| 2.0 + 3.0 * (i as f64 / 3.0)).collect();
        let fit = ols_fit(&y, &x).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-12);
        assert!(fit.p_values[1] < 1e-12);
    }

    #[test]
    fn singular_designs() {
        let x = DMatrix::from_fn(20, 2, |i, _| i as f64);
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(matches!(ols_fit(&y, &x), Err(Error::RankDeficient(_))));
        let z = DMatrix::from_fn(20, 1, |_, _| 0.0);
        assert!(matches!(ols_fit(&y, &z), Err(Error::RankDeficient(_))));
        let small = DMatrix::from_fn(2, 1, |i, _| i as f64);
        assert!(matches!(
            ols_fit(&[1.0, 2.0], &small),
            Err(Error::InsufficientData(_))
        ));
        let scores = DMatrix::from_fn(20, 2, |i, l| (i * (l + 1)) as f64);
        assert!(matches!(
            rpcs_regress(&scores, &z),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn null_size_is_calibrated() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let reps = 1000;
        let mut rejections = 0;
        for _ in 0..reps {
            let x = DMatrix::from_fn(100, 1, |_, _| rng.random::<f64>());
            let y: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
            if ols_fit(&y, &x).unwrap().p_values[1] < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!((0.035..=0.065).contains(&rate), "{rate}");
    }

    #[test]
    fn joint_test_rules() {
        let r =
            joint_test_from_p_values(1, vec![0.02, 0.9, 0.9, 0.9], 0.05, Correction::Bonferroni);
        assert!((r.global_p - 0.08).abs() < 1e-15 && !r.reject);
        let r =
            joint_test_from_p_values(1, vec![0.178, 0.893, 0.0749, 0.146], 0.05, Correction::None);
        assert_eq!(r.global_p, 0.0749);
        assert!(!r.reject);
        for c in [Correction::None, Correction::Bonferroni] {
            let r = joint_test_from_p_values(1, vec![1.0; 4], 0.05, c);
            assert_eq!(r.global_p, 1.0);
        }
    }

    fn toy_fit(p: [f64; 3], slopes: [f64; 3]) -> RpcsFit {
        RpcsFit {
            slopes: DMatrix::from_fn(3, 2, |l, j| if j == 1 { slopes[l] } else { 0.0 }),
            standard_errors: DMatrix::from_element(3, 2, 0.1),
            t_statistics: DMatrix::zeros(3, 2),
            p_values: DMatrix::from_fn(3, 2, |l, j| if j == 1 { p[l] } else { 0.5 }),
            residual_variances: vec![1.0; 3],
            n: 50,
            l: 3,
            q: 1,
        }
    }

    fn fourier_system(g: &Arc<Grid>, l: usize) -> EigenSystem {
        let phis: Vec<_> = (1..=l)
            .map(|k| fourier_eigenfunction(k, g).unwrap())
            .collect();
        let data = DMatrix::from_fn(12, g.len(), |i, j| {
            phis.iter()
                .enumerate()
                .map(|(k, f)| ((i * 7 + k * 3) % 5) as f64 * f.values()[j] / (k + 1) as f64)
                .sum::<f64>()
        });
        let mut sys = fit_fpca(g, &data, Selection::Fixed(l), Smoothing::Off).unwrap();
        sys.eigenfunctions = phis;
        sys
    }

    #[test]
    fn reconstruction_modes() {
        let g = Arc::new(Grid::uniform(101).unwrap());
        let sys = fourier_system(&g, 3);
        let fit = toy_fit([0.01, 0.3, 0.02], [0.5, 0.2, -0.4]);
        let all = reconstruct_effect(&fit, &sys, 1, Reconstruction::All, 0.05).unwrap();
        let expected = sys.eigenfunctions[0]
            .scaled(0.5)
            .add_scaled(0.2, &sys.eigenfunctions[1])
            .unwrap()
            .add_scaled(-0.4, &sys.eigenfunctions[2])
            .unwrap();
        assert!(all
            .function
            .values()
            .iter()
            .zip(expected.values())
            .all(|(a, b)| (a - b).abs() < 1e-14));
        let sig = reconstruct_effect(
            &fit,
            &sys,
            1,
            Reconstruction::Significant { bonferroni: false },
            0.05,
        )
        .unwrap();
        assert_eq!(sig.components, vec![0, 2]);
        let bon = reconstruct_effect(
            &fit,
            &sys,
            1,
            Reconstruction::Significant { bonferroni: true },
            0.05,
        )
        .unwrap();
        assert_eq!(bon.components, vec![0]);
        let none = reconstruct_effect(
            &toy_fit([0.5, 0.3, 0.2], [1.0, 1.0, 1.0]),
            &sys,
            1,
            Reconstruction::Significant { bonferroni: false },
            0.05,
        )
        .unwrap();
        assert!(none.empty_selection);
        assert!(none.function.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_component_reconstruction() {
        let g = Arc::new(Grid::uniform(101).unwrap());
        let sys = fourier_system(&g, 1);
        let mut fit = toy_fit([0.01, 0.3, 0.02], [0.5, 0.0, 0.0]);
        fit.l = 1;
        fit.slopes = DMatrix::from_row_slice(1, 2, &[0.0, 0.5]);
        fit.p_values = DMatrix::from_row_slice(1, 2, &[0.5, 0.01]);
        let r = reconstruct_effect(&fit, &sys, 1, Reconstruction::All, 0.05).unwrap();
        for (v, phi) in r
            .function
            .values()
            .iter()
            .zip(sys.eigenfunctions[0].values())
        {
            assert!((v - 0.5 * phi).abs() < 1e-15);
        }
    }

    #[test]
    fn projections() {
        let g = Arc::new(Grid::uniform(201).unwrap());
        let sys = fourier_system(&g, 4);
        let b = theoretical_projection(&sys.eigenfunctions[1], &sys).unwrap();
        for (l, v) in b.iter().enumerate() {
            let target = if l == 1 { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-3);
        }
        let one = FunctionOnGrid::from_fn(g.clone(), |_| 1.0);
        assert!(theoretical_projection(&one, &sys)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-3));
        let beta = crate::synth::beta_tm1(1.0, 0.5, &g).unwrap();
        assert!((theoretical_projection(&beta, &sys).unwrap()[0] - 0.5).abs() < 1e-3);
    }
}
