//! Functional PCA on a common grid.
//!
//! The sample covariance `C` is turned into an L2 operator by the quadrature
//! weights: we eigendecompose `W^{1/2} C W^{1/2}` and map eigenvectors back
//! with `W^{-1/2}`, which makes every returned eigenfunction unit-norm under
//! [`crate::grid::inner_product`]. Eigenvalues are therefore on the
//! integrated-variance scale.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{inner_product, FunctionOnGrid, Grid};

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Fixed(usize),
    /// Smallest L whose cumulative proportion of variance reaches the threshold.
    Pve(f64),
}

impl Default for Selection {
    fn default() -> Self {
        Selection::Pve(0.90)
    }
}

/// Optional covariance smoothing before the eigendecomposition.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Smoothing {
    #[default]
    Off,
    /// Second-difference penalized smoother applied along both axes of `C`,
    /// with the given penalty weight. The diagonal is excluded from the fit
    /// and filled from the smoothed surface so white noise is not carried
    /// into the eigenfunctions.
    Penalized { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub mean_function: FunctionOnGrid,
    pub eigenfunctions: Vec<FunctionOnGrid>,
    /// Decreasing, nonnegative.
    pub eigenvalues: Vec<f64>,
    /// N x L, row i is subject i.
    pub scores: DMatrix<f64>,
    /// Cumulative proportion of variance explained by the first l components.
    pub pve: Vec<f64>,
    /// Per-point white-noise variance left after L components.
    pub residual_variance: f64,
    /// Integrated variance of the centered data.
    pub total_variance: f64,
}

impl EigenSystem {
    pub fn n_components(&self) -> usize {
        self.eigenfunctions.len()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.mean_function.grid()
    }

    /// P x L matrix of eigenfunction values.
    pub fn eigenfunction_matrix(&self) -> DMatrix<f64> {
        let p = self.grid().len();
        DMatrix::from_fn(p, self.n_components(), |j, l| {
            self.eigenfunctions[l].values()[j]
        })
    }

    /// `mean + scores * eigenfunctions^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut out = &self.scores * self.eigenfunction_matrix().transpose();
        let mean = self.mean_function.values();
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(mean) {
                *v += m;
            }
        }
        out
    }
}

fn column_means(data: &DMatrix<f64>) -> Vec<f64> {
    let n = data.nrows() as f64;
    data.column_iter().map(|c| c.sum() / n).collect()
}

fn centered(data: &DMatrix<f64>, mean: &[f64]) -> DMatrix<f64> {
    let mut y = data.clone();
    for (j, mut col) in y.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    y
}

/// Fits FPCA to an N x P matrix of curves on `grid`.
pub fn fit_fpca(
    grid: &Arc<Grid>,
    data: &DMatrix<f64>,
    selection: Selection,
    smoothing: Smoothing,
) -> Result<EigenSystem> {
    let (n, p) = data.shape();
    if p != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "data has {p} columns, grid has {} points",
            grid.len()
        )));
    }
    if n < 2 || p < 2 {
        return Err(Error::InsufficientData(format!(
            "need N >= 2 and P >= 2, got N = {n}, P = {p}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(
            "data contain non-finite values".into(),
        ));
    }
    let max_l = (n - 1).min(p);
    match selection {
        Selection::Fixed(l) if l == 0 || l > max_l => {
            return Err(Error::InvalidConfig(format!(
                "L = {l} outside 1..={max_l} = min(N-1, P)"
            )))
        }
        Selection::Pve(t) if !(t > 0.0 && t <= 1.0) => {
            return Err(Error::InvalidConfig(format!(
                "pve threshold {t} outside (0, 1]"
            )))
        }
        _ => {}
    }

    let mean = column_means(data);
    let y = centered(data, &mean);
    let mut cov = y.tr_mul(&y) / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    if let Smoothing::Penalized { lambda } = smoothing {
        cov = smooth_covariance(&cov, lambda)?;
    }

    let sqrt_w: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let op = DMatrix::from_fn(p, p, |a, b| sqrt_w[a] * cov[(a, b)] * sqrt_w[b]);
    let total_variance: f64 = (0..p).map(|j| grid.weights()[j] * cov[(j, j)]).sum();
    let eig = SymmetricEigen::new(op);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();

    let lead = values[0];
    if !(lead > 0.0) || total_variance <= 0.0 {
        return Err(Error::RankDeficient("data have no variation".into()));
    }
    let rank = values.iter().filter(|v| **v > lead * 1e-10).count();
    let cumulative: Vec<f64> = values
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some((*acc / total_variance).min(1.0))
        })
        .collect();
    let l = match selection {
        Selection::Fixed(l) => l,
        Selection::Pve(t) => cumulative
            .iter()
            .position(|c| *c >= t - 1e-12)
            .map(|k| k + 1)
            .unwrap_or(rank)
            .min(max_l),
    };
    if l > rank {
        return Err(Error::RankDeficient(format!(
            "{l} components requested, data have rank {rank}"
        )));
    }

    let eigenfunctions: Vec<FunctionOnGrid> = order[..l]
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k);
            let vals: Vec<f64> = (0..p).map(|j| v[j] / sqrt_w[j]).collect();
            let f = FunctionOnGrid::new(grid.clone(), vals).expect("length p");
            let norm = crate::grid::l2_norm(&f);
            f.scaled(1.0 / norm)
        })
        .collect();

    let eigenvalues = values[..l].to_vec();
    let leftover = (total_variance - eigenvalues.iter().sum::<f64>()).max(0.0);
    let residual_variance = if l < p {
        leftover * p as f64 / ((p - l) as f64 * grid.domain_length())
    } else {
        0.0
    };
    let mean_function = FunctionOnGrid::new(grid.clone(), mean).expect("length p");
    let phi = DMatrix::from_fn(p, l, |j, k| eigenfunctions[k].values()[j]);
    let scores = weighted_projection(&y, grid, &phi);

    Ok(EigenSystem {
        mean_function,
        eigenfunctions,
        eigenvalues,
        scores,
        pve: cumulative[..l].to_vec(),
        residual_variance,
        total_variance,
    })
}

fn weighted_projection(centered: &DMatrix<f64>, grid: &Grid, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut wphi = phi.clone();
    for (j, mut row) in wphi.row_iter_mut().enumerate() {
        row *= grid.weights()[j];
    }
    centered * wphi
}

/// Scores `ξ_il = ∫ (W_i(s) - μ(s)) φ_l(s) ds` of already-centered curves.
pub fn compute_scores(
    centered: &DMatrix<f64>,
    eigenfunctions: &[FunctionOnGrid],
) -> Result<DMatrix<f64>> {
    let Some(first) = eigenfunctions.first() else {
        return Ok(DMatrix::zeros(centered.nrows(), 0));
    };
    let grid = first.grid();
    if eigenfunctions.iter().any(|f| !f.grid().same_as(grid)) || centered.ncols() != grid.len() {
        return Err(Error::GridMismatch);
    }
    let phi = DMatrix::from_fn(grid.len(), eigenfunctions.len(), |j, l| {
        eigenfunctions[l].values()[j]
    });
    Ok(weighted_projection(centered, grid, &phi))
}

/// Reference used to orient eigenfunctions.
#[derive(Debug, Clone, Copy)]
pub enum SignReference<'a> {
    /// Make `<φ_l, reference_l>` nonnegative.
    Functions(&'a [FunctionOnGrid]),
    /// Make the value of largest magnitude positive.
    PeakPositive,
}

/// Flips eigenfunctions (and their score columns) to a deterministic sign.
pub fn sign_align(mut system: EigenSystem, reference: SignReference<'_>) -> Result<EigenSystem> {
    for l in 0..system.n_components() {
        let flip = match reference {
            SignReference::Functions(refs) => match refs.get(l) {
                Some(r) => inner_product(&system.eigenfunctions[l], r)? < 0.0,
                None => false,
            },
            SignReference::PeakPositive => {
                let vals = system.eigenfunctions[l].values();
                let peak =
                    vals.iter().copied().fold(
                        0.0f64,
                        |best, v| if v.abs() > best.abs() { v } else { best },
                    );
                peak < 0.0
            }
        };
        if flip {
            system.eigenfunctions[l] = system.eigenfunctions[l].scaled(-1.0);
            let mut col = system.scores.column_mut(l);
            col.neg_mut();
        }
    }
    Ok(system)
}

fn smooth_covariance(cov: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "smoothing lambda {lambda} must be >= 0"
        )));
    }
    let p = cov.nrows();
    // Replace the noise-inflated diagonal by the average of its neighbours
    // before smoothing; the smoother then fills it back in.
    let mut c = cov.clone();
    for j in 0..p {
        let nb: Vec<f64> = [j.checked_sub(1), (j + 1 < p).then_some(j + 1)]
            .into_iter()
            .flatten()
            .map(|k| cov[(j, k)])
            .collect();
        if !nb.is_empty() {
            c[(j, j)] = nb.iter().sum::<f64>() / nb.len() as f64;
        }
    }
    let smoother = DMatrix::<f64>::identity(p, p) + crate::spline::difference_penalty(p) * lambda;
    let chol = smoother
        .cholesky()
        .ok_or(Error::Singular("covariance smoother"))?;
    let rows = chol.solve(&c);
    let both = chol.solve(&rows.transpose());
    Ok((&both + both.transpose()) * 0.5)
}

/// Column means of a score matrix; used by tests and diagnostics.
pub fn score_means(scores: &DMatrix<f64>) -> DVector<f64> {
    let n = scores.nrows() as f64;
    DVector::from_iterator(scores.ncols(), scores.column_iter().map(|c| c.sum() / n))
}
