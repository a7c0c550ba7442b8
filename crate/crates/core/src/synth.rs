//! Seeded generators for the two simulation mechanisms.
//!
//! TM1: `W_i(s) = X_i1 β_{1,d,w}(s) + ξ_i1 φ_1(s) + ε_i(s)` with one Fourier
//! component. TM2: two covariates and four Fourier components with
//! eigenvalues halving from 1. Covariates are Uniform(0, 1), scores are
//! Normal(0, λ_l) and noise is white Normal(0, σ_ε²).

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::grid::{FunctionOnGrid, Grid};
use crate::rng;

pub const DEFAULT_SUBJECTS: usize = 300;
pub const DEFAULT_POINTS: usize = 101;
pub const DEFAULT_SIGMA_EPS: f64 = 0.5;
pub const TM1_LAMBDA: f64 = 0.5;
pub const TM2_EIGENVALUES: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// One of the four Fourier eigenfunctions
/// `√2 sin(2πs), √2 cos(2πs), √2 sin(4πs), √2 cos(4πs)` (1-based index).
pub fn fourier_eigenfunction(index: usize, grid: &Arc<Grid>) -> Result<FunctionOnGrid> {
    let f: fn(f64) -> f64 = match index {
        1 => |s| SQRT_2 * (2.0 * PI * s).sin(),
        2 => |s| SQRT_2 * (2.0 * PI * s).cos(),
        3 => |s| SQRT_2 * (4.0 * PI * s).sin(),
        4 => |s| SQRT_2 * (4.0 * PI * s).cos(),
        _ => return Err(Error::IndexOutOfRange { index, max: 4 }),
    };
    Ok(FunctionOnGrid::from_fn(grid.clone(), f))
}

fn sine(k: f64) -> impl Fn(f64) -> f64 {
    move |s| SQRT_2 * (2.0 * PI * k * s).sin()
}

fn check_effect(d: f64, w: f64) -> Result<()> {
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "effect size d = {d} must be >= 0"
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidConfig(format!(
            "weight w = {w} must lie in [0, 1]"
        )));
    }
    Ok(())
}

/// `β_{1,d,w}(s) = d {w + (1 - w) √2 sin(2πs)}`.
pub fn beta_tm1(d: f64, w: f64, grid: &Arc<Grid>) -> Result<FunctionOnGrid> {
    check_effect(d, w)?;
    let phi = sine(1.0);
    Ok(FunctionOnGrid::from_fn(grid.clone(), |s| {
        d * (w + (1.0 - w) * phi(s))
    }))
}

/// Coefficient pair `(β_1, β_2)` of scenario-2 case `case_id`.
///
/// Cases 1-3 use `β_1 ≡ 1`, cases 4-6 use `β_1 = √2 sin(2πs)`; `β_2 = w + (1 - w) f_2`
/// with `f_2 = √2 sin(2πks)` and `k = 1, 2, 3` within each triple. Both are
/// scaled by `d`.
pub fn beta_pair_tm2(
    case_id: u8,
    d: f64,
    w: f64,
    grid: &Arc<Grid>,
) -> Result<(FunctionOnGrid, FunctionOnGrid)> {
    check_effect(d, w)?;
    if !(1..=6).contains(&case_id) {
        return Err(Error::UnknownCase(case_id));
    }
    let beta1 = if case_id <= 3 {
        FunctionOnGrid::from_fn(grid.clone(), |_| d)
    } else {
        let f = sine(1.0);
        FunctionOnGrid::from_fn(grid.clone(), |s| d * f(s))
    };
    let k = f64::from((case_id - 1) % 3 + 1);
    let f2 = sine(k);
    let beta2 = FunctionOnGrid::from_fn(grid.clone(), |s| d * (w + (1.0 - w) * f2(s)));
    Ok((beta1, beta2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tm1Config {
    pub n_subjects: usize,
    pub grid: Arc<Grid>,
    pub d: f64,
    pub w: f64,
    pub lambda1: f64,
    pub sigma_eps: f64,
    pub seed: u64,
}

impl Default for Tm1Config {
    fn default() -> Self {
        Self {
            n_subjects: DEFAULT_SUBJECTS,
            grid: Arc::new(Grid::uniform(DEFAULT_POINTS).expect("valid default grid")),
            d: 0.0,
            w: 0.0,
            lambda1: TM1_LAMBDA,
            sigma_eps: DEFAULT_SIGMA_EPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tm2Config {
    pub n_subjects: usize,
    pub grid: Arc<Grid>,
    pub d: f64,
    pub w: f64,
    pub case_id: u8,
    pub eigenvalues: [f64; 4],
    pub sigma_eps: f64,
    /// Scalar intercept β_0 added to every curve.
    pub beta0: f64,
    pub seed: u64,
}

impl Default for Tm2Config {
    fn default() -> Self {
        Self {
            n_subjects: DEFAULT_SUBJECTS,
            grid: Arc::new(Grid::uniform(DEFAULT_POINTS).expect("valid default grid")),
            d: 0.0,
            w: 0.0,
            case_id: 1,
            eigenvalues: TM2_EIGENVALUES,
            sigma_eps: DEFAULT_SIGMA_EPS,
            beta0: 0.0,
            seed: 0,
        }
    }
}

/// A simulated dataset plus every component it was assembled from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub data: FunctionalDataset,
    pub intercept: f64,
    pub betas: Vec<FunctionOnGrid>,
    pub eigenfunctions: Vec<FunctionOnGrid>,
    pub eigenvalues: Vec<f64>,
    /// N x L true scores.
    pub scores: DMatrix<f64>,
    /// N x P measurement error.
    pub noise: DMatrix<f64>,
}

impl SyntheticDataset {
    /// Rebuilds the response from the stored components.
    pub fn reconstruct_response(&self) -> DMatrix<f64> {
        assemble(
            self.intercept,
            &self.data.covariates,
            &self.betas,
            &self.scores,
            &self.eigenfunctions,
            &self.noise,
        )
    }
}

fn assemble(
    intercept: f64,
    covariates: &DMatrix<f64>,
    betas: &[FunctionOnGrid],
    scores: &DMatrix<f64>,
    phis: &[FunctionOnGrid],
    noise: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n, p) = noise.shape();
    DMatrix::from_fn(n, p, |i, j| {
        let mut v = intercept;
        for (q, beta) in betas.iter().enumerate() {
            v += covariates[(i, q)] * beta.values()[j];
        }
        for (l, phi) in phis.iter().enumerate() {
            v += scores[(i, l)] * phi.values()[j];
        }
        v + noise[(i, j)]
    })
}

fn check_common(n: usize, sigma_eps: f64, eigenvalues: &[f64]) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_subjects = {n} must be >= 2"
        )));
    }
    if !(sigma_eps.is_finite() && sigma_eps >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma_eps = {sigma_eps} must be >= 0"
        )));
    }
    if eigenvalues.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidConfig(
            "eigenvalues must be finite and >= 0".into(),
        ));
    }
    Ok(())
}

fn simulate(
    n: usize,
    grid: &Arc<Grid>,
    intercept: f64,
    betas: Vec<FunctionOnGrid>,
    eigenfunctions: Vec<FunctionOnGrid>,
    eigenvalues: Vec<f64>,
    sigma_eps: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    let p = grid.len();
    let q = betas.len();
    let l = eigenfunctions.len();
    let mut rng = rng::stream(seed);
    let score_dists: Vec<Normal<f64>> = eigenvalues
        .iter()
        .map(|lam| Normal::new(0.0, lam.sqrt()).expect("validated variance"))
        .collect();
    let noise_dist = Normal::new(0.0, sigma_eps).expect("validated sigma");

    let mut covariates = DMatrix::zeros(n, q);
    let mut scores = DMatrix::zeros(n, l);
    let mut noise = DMatrix::zeros(n, p);
    for i in 0..n {
        for k in 0..q {
            covariates[(i, k)] = rng.random::<f64>();
        }
        for (k, dist) in score_dists.iter().enumerate() {
            scores[(i, k)] = dist.sample(&mut rng);
        }
        for j in 0..p {
            noise[(i, j)] = noise_dist.sample(&mut rng);
        }
    }
    let response = assemble(
        intercept,
        &covariates,
        &betas,
        &scores,
        &eigenfunctions,
        &noise,
    );
    let names: Vec<String> = (1..=q).map(|k| format!("X{k}")).collect();
    let ids: Vec<String> = (1..=n).map(|i| format!("{i}")).collect();
    let data = FunctionalDataset::new(grid.clone(), response, covariates, names, ids)?;
    Ok(SyntheticDataset {
        data,
        intercept,
        betas,
        eigenfunctions,
        eigenvalues,
        scores,
        noise,
    })
}

pub fn generate_tm1(config: &Tm1Config) -> Result<SyntheticDataset> {
    check_common(config.n_subjects, config.sigma_eps, &[config.lambda1])?;
    let beta = beta_tm1(config.d, config.w, &config.grid)?;
    let phi = fourier_eigenfunction(1, &config.grid)?;
    simulate(
        config.n_subjects,
        &config.grid,
        0.0,
        vec![beta],
        vec![phi],
        vec![config.lambda1],
        config.sigma_eps,
        config.seed,
    )
}

pub fn generate_tm2(config: &Tm2Config) -> Result<SyntheticDataset> {
    check_common(config.n_subjects, config.sigma_eps, &config.eigenvalues)?;
    if !config.beta0.is_finite() {
        return Err(Error::InvalidConfig("beta0 must be finite".into()));
    }
    let (b1, b2) = beta_pair_tm2(config.case_id, config.d, config.w, &config.grid)?;
    let phis = (1..=4)
        .map(|l| fourier_eigenfunction(l, &config.grid))
        .collect::<Result<Vec<_>>>()?;
    simulate(
        config.n_subjects,
        &config.grid,
        config.beta0,
        vec![b1, b2],
        phis,
        config.eigenvalues.to_vec(),
        config.sigma_eps,
        config.seed,
    )
}
