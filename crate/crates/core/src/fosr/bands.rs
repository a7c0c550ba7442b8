//! Pointwise and simultaneous confidence bands for fitted coefficient
//! functions, and the max-|t| global test.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::FoSRFit;
use crate::dist::normal_quantile;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_DRAWS: usize = 10_000;
/// Bands on finer grids are computed on an even subgrid of this many points.
pub const BAND_MAX_POINTS: usize = 300;
const CLIP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SimultaneousBand {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub multiplier: f64,
    /// Observed `max_j |β̂(s_j)| / SE(s_j)`.
    pub statistic: f64,
    pub global_p: f64,
    pub n_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    pub q: usize,
    pub alpha: f64,
    /// Grid indices the band is evaluated at.
    pub indices: Vec<usize>,
    pub points: Vec<f64>,
    pub estimate: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub pointwise_multiplier: f64,
    pub pointwise_lower: Vec<f64>,
    pub pointwise_upper: Vec<f64>,
    pub simultaneous: Option<SimultaneousBand>,
    /// True when the grid was thinned to `BAND_MAX_POINTS`.
    pub subsampled: bool,
}

impl BandSet {
    /// Whether the simultaneous band leaves out zero somewhere.
    pub fn excludes_zero(&self) -> Option<bool> {
        self.simultaneous.as_ref().map(|s| {
            s.lower
                .iter()
                .zip(&s.upper)
                .any(|(lo, hi)| *lo > 0.0 || *hi < 0.0)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTest {
    pub p_value: f64,
    pub statistic: f64,
    pub reject: bool,
}

/// Result of calibrating `max_j |f_j| / se_j` for `f ~ N(0, A V A')`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxCalibration {
    pub multiplier: f64,
    pub statistic: f64,
    pub p_value: f64,
}

fn band_indices(p: usize) -> (Vec<usize>, bool) {
    if p <= BAND_MAX_POINTS {
        return ((0..p).collect(), false);
    }
    let last = (p - 1) as f64;
    let n = BAND_MAX_POINTS - 1;
    let idx = (0..=n)
        .map(|i| libm::round(i as f64 * last / n as f64) as usize)
        .collect();
    (idx, true)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "alpha = {alpha} outside (0, 1)"
        )));
    }
    Ok(())
}

fn check_q(fit: &FoSRFit, q: usize) -> Result<()> {
    if q >= fit.n_coefficients() {
        return Err(Error::IndexOutOfRange {
            index: q,
            max: fit.n_coefficients() - 1,
        });
    }
    Ok(())
}

fn standard_errors(rows: &DMatrix<f64>, cov: &DMatrix<f64>) -> Vec<f64> {
    let rv = rows * cov;
    (0..rows.nrows())
        .map(|j| rv.row(j).dot(&rows.row(j)).max(0.0).sqrt())
        .collect()
}

/// `β̂_q(s) ± z_{1-α/2} SE(s)`.
pub fn pointwise_band(fit: &FoSRFit, q: usize, alpha: f64) -> Result<BandSet> {
    check_alpha(alpha)?;
    check_q(fit, q)?;
    let grid = fit.grid();
    let (indices, subsampled) = band_indices(grid.len());
    let rows = fit.basis.matrix.select_rows(indices.iter());
    let se = standard_errors(&rows, &fit.covariance_block(q));
    let values = fit.coefficient_functions[q].values();
    let estimate: Vec<f64> = indices.iter().map(|&j| values[j]).collect();
    let z = normal_quantile(1.0 - alpha / 2.0);
    Ok(BandSet {
        q,
        alpha,
        points: indices.iter().map(|&j| grid.points()[j]).collect(),
        pointwise_lower: estimate.iter().zip(&se).map(|(e, s)| e - z * s).collect(),
        pointwise_upper: estimate.iter().zip(&se).map(|(e, s)| e + z * s).collect(),
        indices,
        estimate,
        standard_errors: se,
        pointwise_multiplier: z,
        simultaneous: None,
        subsampled,
    })
}

/// Eigen-factor `V = F F'` after clipping negative eigenvalues.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let worst = eig.eigenvalues.iter().copied().fold(0.0, f64::min);
    if top > 0.0 && -worst > CLIP_TOLERANCE * top {
        return Err(Error::NotPositiveSemidefinite(-worst / top));
    }
    if top <= 0.0 && worst < 0.0 {
        return Err(Error::NotPositiveSemidefinite(f64::INFINITY));
    }
    let mut f = eig.eigenvectors;
    for (k, mut col) in f.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    Ok(f)
}

/// Simulates the null distribution of `max_j |(A u)_j| / se_j` with
/// `u ~ N(0, V)`, returning its `(1 - α)` quantile (never below the
/// pointwise normal quantile) and the tail probability of the observed
/// statistic of `estimate`.
pub fn max_statistic_calibration(
    rows: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    estimate: &[f64],
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Result<MaxCalibration> {
    check_alpha(alpha)?;
    if n_draws == 0 {
        return Err(Error::InvalidConfig("n_draws must be >= 1".into()));
    }
    if rows.nrows() != estimate.len() || rows.ncols() != cov.nrows() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} x {} evaluation rows, covariance {} x {}, {} estimates",
            rows.nrows(),
            rows.ncols(),
            cov.nrows(),
            cov.ncols(),
            estimate.len()
        )));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let factor = psd_factor(cov)?;
    let se = standard_errors(rows, cov);
    let top = se.iter().copied().fold(0.0, f64::max);
    let active: Vec<usize> = (0..se.len())
        .filter(|&j| se[j] > top * 1e-12 && se[j] > 0.0)
        .collect();
    if active.is_empty() {
        let zero = estimate.iter().all(|e| *e == 0.0);
        return Ok(MaxCalibration {
            multiplier: z,
            statistic: if zero { 0.0 } else { f64::INFINITY },
            p_value: if zero { 1.0 } else { 0.0 },
        });
    }
    let statistic = active
        .iter()
        .map(|&j| (estimate[j] / se[j]).abs())
        .fold(0.0, f64::max);
    let scaled = DMatrix::from_fn(active.len(), factor.ncols(), |a, c| {
        let j = active[a];
        (0..rows.ncols())
            .map(|b| rows[(j, b)] * factor[(b, c)])
            .sum::<f64>()
            / se[j]
    });

    let mut rng = rng::stream(seed);
    let k = factor.ncols();
    let mut u = DVector::<f64>::zeros(k);
    let mut f = DVector::<f64>::zeros(active.len());
    let mut maxima = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        for v in u.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        f.gemv(1.0, &scaled, &u, 0.0);
        maxima.push(f.amax());
    }
    let exceed = maxima.iter().filter(|m| **m >= statistic).count();
    maxima.sort_by(|a, b| a.total_cmp(b));
    let rank = (libm::floor((1.0 - alpha) * n_draws as f64) as usize + 1).min(n_draws);
    Ok(MaxCalibration {
        multiplier: maxima[rank - 1].max(z),
        statistic,
        p_value: exceed as f64 / n_draws as f64,
    })
}

/// Pointwise band plus the simultaneous band calibrated on `n_draws`
/// Gaussian draws of the coefficient block.
pub fn cma_band(fit: &FoSRFit, q: usize, alpha: f64, n_draws: usize, seed: u64) -> Result<BandSet> {
    let mut band = pointwise_band(fit, q, alpha)?;
    let rows = fit.basis.matrix.select_rows(band.indices.iter());
    let cal = max_statistic_calibration(
        &rows,
        &fit.covariance_block(q),
        &band.estimate,
        alpha,
        n_draws,
        seed,
    )?;
    let c = cal.multiplier;
    band.simultaneous = Some(SimultaneousBand {
        lower: band
            .estimate
            .iter()
            .zip(&band.standard_errors)
            .map(|(e, s)| e - c * s)
            .collect(),
        upper: band
            .estimate
            .iter()
            .zip(&band.standard_errors)
            .map(|(e, s)| e + c * s)
            .collect(),
        multiplier: c,
        statistic: cal.statistic,
        global_p: cal.p_value,
        n_draws,
    });
    Ok(band)
}

/// Tests `β_q ≡ 0` with the CMA max-|t| calibration.
pub fn fosr_global_test(fit: &FoSRFit, q: usize, alpha: f64, seed: u64) -> Result<GlobalTest> {
    let band = cma_band(fit, q, alpha, DEFAULT_DRAWS, seed)?;
    let sim = band.simultaneous.expect("cma band is simultaneous");
    Ok(GlobalTest {
        p_value: sim.global_p,
        statistic: sim.statistic,
        reject: sim.global_p < alpha,
    })
}
