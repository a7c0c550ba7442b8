//! Function-on-scalar regression with penalized splines.
//!
//! Every coefficient function is expanded in the same B-spline basis, so the
//! stacked design `[1, X] ⊗ B` makes all normal equations Kronecker products
//! of a small covariate cross-product and a `K x K` basis cross-product.
//! Smoothing parameters come from REML under working independence, after
//! which the within-curve covariance is estimated by FPCA of the residuals
//! and the coefficients are refit by penalized GLS.

mod bands;
mod reml;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::fpca::{fit_fpca, EigenSystem, Selection, Smoothing};
use crate::grid::{FunctionOnGrid, Grid};
use crate::spline::SplineBasis;

pub use bands::{
    cma_band, fosr_global_test, max_statistic_calibration, pointwise_band, BandSet, GlobalTest,
    MaxCalibration, SimultaneousBand, BAND_MAX_POINTS, DEFAULT_DRAWS,
};

/// How the smoothing parameters are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum SmoothingChoice {
    /// REML on the working-independence fit and again on the first GLS step.
    Reml,
    /// Fixed relative values `ρ_q`; the penalty on block q is
    /// `ρ_q · tr(H_qq) / tr(S) · S`.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoSROptions {
    pub residual_selection: Selection,
    pub residual_smoothing: Smoothing,
    pub smoothing: SmoothingChoice,
    /// When false the working-independence fit is returned.
    pub generalized: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FoSROptions {
    fn default() -> Self {
        Self {
            residual_selection: Selection::default(),
            residual_smoothing: Smoothing::Penalized { lambda: 1.0 },
            smoothing: SmoothingChoice::Reml,
            generalized: true,
            max_iterations: 4,
            tolerance: 1e-4,
        }
    }
}

/// Plug-in residual covariance `Φ Λ Φ' + σ² I`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub eigenvalues: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoSRFit {
    /// β̂_0, β̂_1, …, β̂_Q.
    pub coefficient_functions: Vec<FunctionOnGrid>,
    /// Blocks of length K in the same order as the coefficient functions.
    pub spline_coefficients: Vec<f64>,
    pub coefficient_covariance: DMatrix<f64>,
    pub smoothing_parameters: Vec<f64>,
    pub relative_smoothing: Vec<f64>,
    pub eigensystem_used: Option<EigenSystem>,
    pub variance_components: VarianceComponents,
    /// Penalized GLS steps taken.
    pub iterations: usize,
    /// Relative change in the spline coefficients at each GLS step.
    pub deltas: Vec<f64>,
    pub converged: bool,
    pub basis: SplineBasis,
    pub covariate_names: Vec<alloc::string::String>,
}

impl FoSRFit {
    pub fn n_coefficients(&self) -> usize {
        self.coefficient_functions.len()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.coefficient_functions[0].grid()
    }

    /// Spline coefficients of β̂_q.
    pub fn block(&self, q: usize) -> &[f64] {
        let k = self.basis.k;
        &self.spline_coefficients[q * k..(q + 1) * k]
    }

    /// Covariance of the spline coefficients of β̂_q.
    pub fn covariance_block(&self, q: usize) -> DMatrix<f64> {
        let k = self.basis.k;
        self.coefficient_covariance
            .view((q * k, q * k), (k, k))
            .into_owned()
    }
}

/// Sufficient statistics of `vec(W) = ([1, X] ⊗ B) θ + e` under a working
/// precision `Ω` shared by all curves.
#[derive(Debug, Clone)]
pub(crate) struct NormalEquations {
    /// `Z' Z`, m x m.
    pub zz: DMatrix<f64>,
    /// `B' Ω B`, K x K.
    pub g: DMatrix<f64>,
    /// `B' Ω W' Z`, K x m.
    pub r: DMatrix<f64>,
    /// `tr(W Ω W')`.
    pub yy: f64,
    /// Number of scalar observations.
    pub n_obs: usize,
}

impl NormalEquations {
    pub fn m(&self) -> usize {
        self.zz.nrows()
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        self.zz.kronecker(&self.g)
    }

    pub fn rhs(&self) -> DVector<f64> {
        DVector::from_iterator(self.r.len(), self.r.iter().copied())
    }

    /// `tr(H_qq) / tr(S)`, the scale that makes ρ dimensionless.
    pub fn penalty_scales(&self, penalty: &DMatrix<f64>) -> Vec<f64> {
        let tg = self.g.trace();
        let ts = penalty.trace();
        (0..self.m()).map(|q| self.zz[(q, q)] * tg / ts).collect()
    }
}

pub(crate) fn penalized_system(
    hessian: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    lambdas: &[f64],
) -> DMatrix<f64> {
    let k = penalty.nrows();
    let mut a = hessian.clone();
    for (q, lam) in lambdas.iter().enumerate() {
        let mut block = a.view_mut((q * k, q * k), (k, k));
        block += penalty * *lam;
    }
    a
}

struct Design {
    z: DMatrix<f64>,
    wz: DMatrix<f64>,
    btb: DMatrix<f64>,
    yy: f64,
}

fn design(data: &FunctionalDataset, basis: &SplineBasis) -> Result<Design> {
    let (n, p) = data.response.shape();
    if basis.matrix.nrows() != p {
        return Err(Error::DimensionMismatch(format!(
            "basis has {} rows, data have {p} points",
            basis.matrix.nrows()
        )));
    }
    let m = data.n_covariates() + 1;
    if n <= m {
        return Err(Error::InsufficientData(format!(
            "N = {n} must exceed Q + 1 = {m}"
        )));
    }
    if data.response.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(
            "response contains non-finite values".into(),
        ));
    }
    let z = DMatrix::from_fn(n, m, |i, j| {
        if j == 0 {
            1.0
        } else {
            data.covariates[(i, j - 1)]
        }
    });
    let zz = z.tr_mul(&z);
    let d: Vec<f64> = (0..m).map(|j| zz[(j, j)].sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::RankDeficient("design has a zero column".into()));
    }
    let scaled = DMatrix::from_fn(m, m, |a, b| zz[(a, b)] / (d[a] * d[b]));
    let min_eig = scaled
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(min_eig > 1e-10) {
        return Err(Error::RankDeficient(
            "design [1, X] is not of full rank".into(),
        ));
    }
    Ok(Design {
        wz: data.response.tr_mul(&z),
        yy: data.response.norm_squared(),
        btb: basis.matrix.tr_mul(&basis.matrix),
        z,
    })
}

fn independence_equations(d: &Design, basis: &SplineBasis) -> NormalEquations {
    NormalEquations {
        zz: d.z.tr_mul(&d.z),
        g: d.btb.clone(),
        r: basis.matrix.tr_mul(&d.wz),
        yy: d.yy,
        n_obs: d.z.nrows() * basis.matrix.nrows(),
    }
}

/// Normal equations under `Ω = (Φ Λ Φ' + σ² I)^{-1}` via Woodbury.
fn generalized_equations(
    d: &Design,
    data: &FunctionalDataset,
    basis: &SplineBasis,
    phi: &DMatrix<f64>,
    lambdas: &[f64],
    sigma2: f64,
) -> Result<NormalEquations> {
    let l = lambdas.len();
    let b = &basis.matrix;
    let bw = b.tr_mul(&d.wz);
    if l == 0 {
        return Ok(NormalEquations {
            zz: d.z.tr_mul(&d.z),
            g: &d.btb / sigma2,
            r: bw / sigma2,
            yy: d.yy / sigma2,
            n_obs: d.z.nrows() * b.nrows(),
        });
    }
    let mut core = phi.tr_mul(phi);
    for (k, lam) in lambdas.iter().enumerate() {
        core[(k, k)] += sigma2 / lam;
    }
    let chol = Cholesky::<f64, Dyn>::new(core).ok_or(Error::Singular("woodbury core"))?;
    let bphi = b.tr_mul(phi);
    let g = (&d.btb - &bphi * chol.solve(&bphi.transpose())) / sigma2;
    let phiwz = phi.tr_mul(&d.wz);
    let r = (bw - &bphi * chol.solve(&phiwz)) / sigma2;
    let u = &data.response * phi;
    let ut = u.transpose();
    let quad = ut.dot(&chol.solve(&ut));
    Ok(NormalEquations {
        zz: d.z.tr_mul(&d.z),
        g: (&g + g.transpose()) * 0.5,
        r,
        yy: (d.yy - quad) / sigma2,
        n_obs: d.z.nrows() * b.nrows(),
    })
}

struct Solved {
    theta: DVector<f64>,
    lambdas: Vec<f64>,
    rho: Vec<f64>,
    covariance: DMatrix<f64>,
    sigma2: f64,
}

fn solve(eq: &NormalEquations, penalty: &DMatrix<f64>, rho: &[f64]) -> Result<Solved> {
    let scales = eq.penalty_scales(penalty);
    let lambdas: Vec<f64> = rho.iter().zip(&scales).map(|(r, s)| r * s).collect();
    let h = eq.hessian();
    let a = penalized_system(&h, penalty, &lambdas);
    let chol = Cholesky::<f64, Dyn>::new(a).ok_or(Error::Singular("penalized normal equations"))?;
    let rhs = eq.rhs();
    let theta = chol.solve(&rhs);
    let inv = chol.inverse();
    let cov = &inv * &h * &inv;
    let covariance = (&cov + cov.transpose()) * 0.5;
    let m0 = 2 * eq.m();
    let sigma2 = ((eq.yy - theta.dot(&rhs)) / (eq.n_obs - m0) as f64).max(0.0);
    Ok(Solved {
        theta,
        lambdas,
        rho: rho.to_vec(),
        covariance,
        sigma2,
    })
}

fn choose_rho(
    eq: &NormalEquations,
    basis: &SplineBasis,
    choice: &SmoothingChoice,
) -> Result<Vec<f64>> {
    match choice {
        SmoothingChoice::Reml => Ok(reml::select(eq, &basis.penalty)),
        SmoothingChoice::Fixed(rho) => {
            if rho.len() != eq.m() {
                return Err(Error::InvalidConfig(format!(
                    "{} smoothing parameters given for {} coefficient functions",
                    rho.len(),
                    eq.m()
                )));
            }
            if rho.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                return Err(Error::InvalidConfig(
                    "smoothing parameters must be positive".into(),
                ));
            }
            Ok(rho.clone())
        }
    }
}

fn coefficient_curves(
    grid: &Arc<Grid>,
    basis: &SplineBasis,
    theta: &DVector<f64>,
) -> Vec<FunctionOnGrid> {
    let k = basis.k;
    (0..theta.len() / k)
        .map(|q| {
            let vals = basis.evaluate(&theta.as_slice()[q * k..(q + 1) * k]);
            FunctionOnGrid::new(grid.clone(), vals).expect("basis rows match grid")
        })
        .collect()
}

fn residuals(
    d: &Design,
    data: &FunctionalDataset,
    basis: &SplineBasis,
    theta: &DVector<f64>,
) -> DMatrix<f64> {
    let k = basis.k;
    let m = d.z.ncols();
    let coef = DMatrix::from_column_slice(k, m, theta.as_slice());
    let curves = &basis.matrix * coef;
    &data.response - &d.z * curves.transpose()
}

struct ResidualStructure {
    system: EigenSystem,
    phi: DMatrix<f64>,
    lambdas: Vec<f64>,
    sigma2: f64,
}

fn residual_structure(
    grid: &Arc<Grid>,
    resid: &DMatrix<f64>,
    options: &FoSROptions,
) -> Result<ResidualStructure> {
    let (n, p) = resid.shape();
    let system = fit_fpca(
        grid,
        resid,
        options.residual_selection,
        options.residual_smoothing,
    )?;
    let kept: Vec<usize> = {
        let lead = system.eigenvalues.first().copied().unwrap_or(0.0);
        (0..system.n_components())
            .filter(|&l| system.eigenvalues[l] > lead * 1e-12)
            .collect()
    };
    let phi = DMatrix::from_fn(p, kept.len(), |j, c| {
        system.eigenfunctions[kept[c]].values()[j]
    });
    let lambdas: Vec<f64> = kept.iter().map(|&l| system.eigenvalues[l]).collect();
    let mean = system.mean_function.values();
    let raw: Vec<f64> = (0..p)
        .map(|j| {
            resid
                .column(j)
                .iter()
                .map(|v| (v - mean[j]) * (v - mean[j]))
                .sum::<f64>()
                / (n as f64 - 1.0)
        })
        .collect();
    let mean_raw = raw.iter().sum::<f64>() / p as f64;
    let explained = (0..p)
        .map(|j| {
            (0..kept.len())
                .map(|c| lambdas[c] * phi[(j, c)] * phi[(j, c)])
                .sum::<f64>()
        })
        .sum::<f64>()
        / p as f64;
    let floor = (mean_raw * 1e-6).max(f64::MIN_POSITIVE);
    let sigma2 = (mean_raw - explained).max(floor);
    Ok(ResidualStructure {
        system,
        phi,
        lambdas,
        sigma2,
    })
}

fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    let denom = old.norm().max(f64::MIN_POSITIVE);
    (new - old).norm() / denom
}

/// Fits `W_i(s) = β_0(s) + Σ_q X_iq β_q(s) + e_i(s)`.
pub fn fit_fosr(
    data: &FunctionalDataset,
    basis: &SplineBasis,
    options: &FoSROptions,
) -> Result<FoSRFit> {
    if options.max_iterations == 0 && options.generalized {
        return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
    }
    if !(options.tolerance > 0.0) {
        return Err(Error::InvalidConfig("tolerance must be positive".into()));
    }
    let d = design(data, basis)?;
    let grid = data.grid.clone();
    let m = d.z.ncols();
    if d.z.nrows() * basis.matrix.nrows() <= 2 * m {
        return Err(Error::InsufficientData("too few observations".into()));
    }

    let wi = independence_equations(&d, basis);
    let rho = choose_rho(&wi, basis, &options.smoothing)?;
    let mut current = solve(&wi, &basis.penalty, &rho)?;
    let mut variance = VarianceComponents {
        eigenvalues: Vec::new(),
        sigma2: current.sigma2,
    };
    if !options.generalized {
        let covariance = current.covariance * current.sigma2;
        return Ok(FoSRFit {
            coefficient_functions: coefficient_curves(&grid, basis, &current.theta),
            spline_coefficients: current.theta.as_slice().to_vec(),
            coefficient_covariance: covariance,
            smoothing_parameters: current.lambdas,
            relative_smoothing: current.rho,
            eigensystem_used: None,
            variance_components: variance,
            iterations: 0,
            deltas: Vec::new(),
            converged: true,
            basis: basis.clone(),
            covariate_names: data.covariate_names.clone(),
        });
    }

    let mut deltas = Vec::new();
    let mut system = None;
    let mut rho = rho;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=options.max_iterations {
        let resid = residuals(&d, data, basis, &current.theta);
        let rs = residual_structure(&grid, &resid, options)?;
        let eq = generalized_equations(&d, data, basis, &rs.phi, &rs.lambdas, rs.sigma2)?;
        if it == 1 {
            rho = choose_rho(&eq, basis, &options.smoothing)?;
        }
        let next = solve(&eq, &basis.penalty, &rho)?;
        let delta = relative_change(&next.theta, &current.theta);
        iterations = it;
        variance = VarianceComponents {
            eigenvalues: rs.lambdas,
            sigma2: rs.sigma2,
        };
        system = Some(rs.system);
        current = next;
        deltas.push(delta);
        if it >= 2 && delta < options.tolerance {
            converged = true;
            break;
        }
    }
    if options.max_iterations == 1 {
        converged = true;
    }

    Ok(FoSRFit {
        coefficient_functions: coefficient_curves(&grid, basis, &current.theta),
        spline_coefficients: current.theta.as_slice().to_vec(),
        coefficient_covariance: current.covariance,
        smoothing_parameters: current.lambdas,
        relative_smoothing: current.rho,
        eigensystem_used: system,
        variance_components: variance,
        iterations,
        deltas,
        converged,
        basis: basis.clone(),
        covariate_names: data.covariate_names.clone(),
    })
}

#[cfg(test)]
mod tests;
