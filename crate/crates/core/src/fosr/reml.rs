//! Restricted likelihood for the smoothing parameters with the scale
//! profiled out.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, Dyn};

use super::NormalEquations;

const LOG_RHO_MIN: f64 = -15.0;
const LOG_RHO_MAX: f64 = 10.0;
const GOLDEN_STEPS: usize = 12;
const CYCLES: usize = 2;

/// REML criterion in coordinates where `B'ΩB = I` and the penalty is
/// diagonal, so `H + S_λ` splits into K systems of size m.
struct Criterion {
    zz: DMatrix<f64>,
    /// Penalty eigenvalues in the transformed basis.
    s: Vec<f64>,
    /// Row k holds the transformed right-hand side for basis direction k.
    rhs: DMatrix<f64>,
    scales: Vec<f64>,
    yy: f64,
    dof: f64,
    penalty_rank: f64,
}

impl Criterion {
    fn new(eq: &NormalEquations, penalty: &DMatrix<f64>) -> Option<Self> {
        let chol = Cholesky::<f64, Dyn>::new(eq.g.clone())?;
        let l = chol.l();
        let linv = l.clone().try_inverse()?;
        let c = &linv * penalty * linv.transpose();
        let eig = ((&c + c.transpose()) * 0.5).symmetric_eigen();
        let t = linv.transpose() * &eig.eigenvectors;
        Some(Self {
            zz: eq.zz.clone(),
            s: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
            rhs: t.tr_mul(&eq.r),
            scales: eq.penalty_scales(penalty),
            yy: eq.yy,
            dof: (eq.n_obs - 2 * eq.m()) as f64,
            penalty_rank: (penalty.nrows().saturating_sub(2)) as f64,
        })
    }

    /// `(n - M0) ln σ̂² + ln|H + S_λ| - Σ_q rank(S) ln λ_q`, up to a constant.
    fn eval(&self, log_rho: &[f64]) -> f64 {
        let m = self.zz.nrows();
        let lambdas: Vec<f64> = log_rho
            .iter()
            .zip(&self.scales)
            .map(|(lr, s)| libm::exp(*lr) * s)
            .collect();
        let mut log_det = 0.0;
        let mut fitted = 0.0;
        for (k, sk) in self.s.iter().enumerate() {
            let mut a = self.zz.clone();
            for q in 0..m {
                a[(q, q)] += sk * lambdas[q];
            }
            let Some(chol) = Cholesky::<f64, Dyn>::new(a) else {
                return f64::INFINITY;
            };
            let b = self.rhs.row(k).transpose();
            fitted += b.dot(&chol.solve(&b));
            log_det += chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| 2.0 * libm::log(*v))
                .sum::<f64>();
        }
        let rss = (self.yy - fitted).max(self.yy.abs() * 1e-15 + f64::MIN_POSITIVE);
        let log_pen: f64 = lambdas
            .iter()
            .map(|l| self.penalty_rank * libm::log(*l))
            .sum();
        self.dof * libm::log(rss / self.dof) + log_det - log_pen
    }
}

fn golden(f: &mut impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let ratio = 0.5 * (libm::sqrt(5.0) - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_STEPS {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

fn grid_points() -> impl Iterator<Item = f64> {
    let n = (LOG_RHO_MAX - LOG_RHO_MIN) as usize;
    (0..=n).map(|i| LOG_RHO_MIN + i as f64)
}

/// Relative smoothing parameters ρ_q minimizing the REML criterion: a common
/// log-spaced grid, then per-coordinate grid and golden-section refinement.
pub(crate) fn select(eq: &NormalEquations, penalty: &DMatrix<f64>) -> Vec<f64> {
    let m = eq.m();
    let Some(crit) = Criterion::new(eq, penalty) else {
        return vec![1.0; m];
    };

    let mut best = vec![0.0; m];
    let mut best_val = f64::INFINITY;
    for lr in grid_points() {
        let v = crit.eval(&vec![lr; m]);
        if v < best_val {
            best_val = v;
            best = vec![lr; m];
        }
    }

    for cycle in 0..CYCLES {
        for q in 0..m {
            let mut trial = best.clone();
            if cycle == 0 {
                for lr in grid_points() {
                    trial[q] = lr;
                    let v = crit.eval(&trial);
                    if v < best_val {
                        best_val = v;
                        best[q] = lr;
                    }
                }
            }
            let centre = best[q];
            let mut trial = best.clone();
            let mut f = |x: f64| {
                trial[q] = x;
                crit.eval(&trial)
            };
            let lo = (centre - 1.0).max(LOG_RHO_MIN);
            let hi = (centre + 1.0).min(LOG_RHO_MAX);
            let (x, v) = golden(&mut f, lo, hi);
            if v < best_val {
                best_val = v;
                best[q] = x;
            }
        }
    }
    best.iter().map(|lr| libm::exp(*lr)).collect()
}
