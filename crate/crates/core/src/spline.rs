//! Clamped B-spline bases on a grid with a second-difference penalty.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_BASIS_SIZE: usize = 30;
pub const DEFAULT_DEGREE: usize = 3;

/// `K` B-splines of a given degree evaluated on a grid, plus their
/// smoothness penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    /// P x K evaluations.
    pub matrix: DMatrix<f64>,
    /// K x K second-difference penalty `D' D` on the Greville abscissae.
    pub penalty: DMatrix<f64>,
    pub knots: Vec<f64>,
    pub k: usize,
    pub degree: usize,
}

impl SplineBasis {
    /// Rank of the penalty null space.
    pub fn null_space_dim(&self) -> usize {
        2.min(self.k)
    }

    /// Evaluates `B c` on the grid.
    pub fn evaluate(&self, coefficients: &[f64]) -> Vec<f64> {
        assert_eq!(coefficients.len(), self.k, "coefficient length");
        let (p, k) = self.matrix.shape();
        (0..p)
            .map(|j| (0..k).map(|b| self.matrix[(j, b)] * coefficients[b]).sum())
            .collect()
    }
}

/// Clamped knot vector with equally spaced interior knots on `[lo, hi]`.
fn clamped_knots(lo: f64, hi: f64, k: usize, degree: usize) -> Vec<f64> {
    let segments = k - degree;
    let mut knots = Vec::with_capacity(k + degree + 1);
    knots.extend(core::iter::repeat(lo).take(degree));
    for i in 0..=segments {
        knots.push(lo + (hi - lo) * i as f64 / segments as f64);
    }
    knots.extend(core::iter::repeat(hi).take(degree));
    knots
}

/// Cox-de Boor recursion for all `k` basis functions at `x`.
fn eval_all(knots: &[f64], k: usize, degree: usize, x: f64) -> Vec<f64> {
    let m = knots.len() - 1;
    let mut basis = vec![0.0; m];
    let last = knots[m];
    let span = if x >= last {
        (0..m).rev().find(|&i| knots[i] < knots[i + 1]).unwrap_or(0)
    } else {
        (0..m)
            .find(|&i| knots[i] <= x && x < knots[i + 1])
            .unwrap_or(0)
    };
    basis[span] = 1.0;
    for p in 1..=degree {
        for i in 0..(m - p) {
            let mut v = 0.0;
            let d1 = knots[i + p] - knots[i];
            if d1 > 0.0 {
                v += (x - knots[i]) / d1 * basis[i];
            }
            let d2 = knots[i + p + 1] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + p + 1] - x) / d2 * basis[i + 1];
            }
            basis[i] = v;
        }
    }
    basis.truncate(k);
    basis
}

/// Squared second-difference penalty `D2' D2` of size `k`.
pub fn difference_penalty(k: usize) -> DMatrix<f64> {
    if k < 3 {
        return DMatrix::zeros(k, k);
    }
    let d = DMatrix::from_fn(k - 2, k, |r, c| match c.wrapping_sub(r) {
        0 | 2 => 1.0,
        1 => -2.0,
        _ => 0.0,
    });
    d.tr_mul(&d)
}

/// Greville abscissae: the knot averages at which linear coefficient
/// sequences reproduce the identity function.
pub fn greville_abscissae(knots: &[f64], k: usize, degree: usize) -> Vec<f64> {
    (0..k)
        .map(|i| {
            if degree == 0 {
                0.5 * (knots[i] + knots[i + 1])
            } else {
                knots[i + 1..=i + degree].iter().sum::<f64>() / degree as f64
            }
        })
        .collect()
}

/// Second divided differences at the Greville abscissae, scaled by the
/// interior knot spacing. Equal to the plain second-difference penalty where
/// the abscissae are evenly spaced; its null space is exactly the functions
/// linear in `s`.
pub fn greville_penalty(knots: &[f64], k: usize, degree: usize) -> DMatrix<f64> {
    if k < 3 {
        return DMatrix::zeros(k, k);
    }
    let g = greville_abscissae(knots, k, degree);
    let h = (knots[knots.len() - 1] - knots[0]) / (k - degree) as f64;
    let mut d = DMatrix::zeros(k - 2, k);
    for r in 0..k - 2 {
        let a = h / (g[r + 1] - g[r]);
        let b = h / (g[r + 2] - g[r + 1]);
        d[(r, r)] = a;
        d[(r, r + 1)] = -(a + b);
        d[(r, r + 2)] = b;
    }
    d.tr_mul(&d)
}

/// Builds `k` clamped B-splines of `degree` with equally spaced knots
/// spanning the grid.
pub fn build_spline_basis(grid: &Grid, k: usize, degree: usize) -> Result<SplineBasis> {
    if k < degree + 1 {
        return Err(Error::InvalidConfig(format!(
            "basis size {k} must be at least degree + 1 = {}",
            degree + 1
        )));
    }
    let p = grid.len();
    if p < k {
        return Err(Error::InsufficientData(format!(
            "grid of {p} points is too coarse for {k} basis functions"
        )));
    }
    let pts = grid.points();
    let knots = clamped_knots(pts[0], pts[p - 1], k, degree);
    let mut matrix = DMatrix::zeros(p, k);
    for (j, &s) in pts.iter().enumerate() {
        for (b, v) in eval_all(&knots, k, degree, s).into_iter().enumerate() {
            matrix[(j, b)] = v;
        }
    }
    Ok(SplineBasis {
        matrix,
        penalty: greville_penalty(&knots, k, degree),
        knots,
        k,
        degree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(p: usize, k: usize) -> SplineBasis {
        build_spline_basis(&Grid::uniform(p).unwrap(), k, 3).unwrap()
    }

    #[test]
    fn partition_of_unity() {
        let b = basis(101, 30);
        for row in b.matrix.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= -1e-15));
        }
        let ones = vec![1.0; 30];
        assert!(b.evaluate(&ones).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn reproduces_linear_functions() {
        let grid = Grid::uniform(101).unwrap();
        let b = build_spline_basis(&grid, 30, 3).unwrap();
        let y = nalgebra::DVector::from_iterator(101, grid.points().iter().map(|s| 2.0 * s - 0.3));
        let coef = b.matrix.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let fit = &b.matrix * &coef;
        let max_err = (fit - y).amax();
        assert!(max_err < 1e-8, "{max_err}");
    }

    #[test]
    fn penalty_kills_constants_and_lines() {
        let b = basis(101, 30);
        let c = nalgebra::DVector::from_element(30, 3.5);
        assert!((c.transpose() * &b.penalty * &c)[(0, 0)].abs() < 1e-12);
        let g = greville_abscissae(&b.knots, 30, 3);
        let line = nalgebra::DVector::from_iterator(30, g.iter().map(|x| 4.0 * x - 1.0));
        assert!((line.transpose() * &b.penalty * &line)[(0, 0)].abs() < 1e-9);
        let vals = b.evaluate(line.as_slice());
        for (v, s) in vals.iter().zip(Grid::uniform(101).unwrap().points()) {
            assert!((v - (4.0 * s - 1.0)).abs() < 1e-12);
        }
        let sym = (&b.penalty - b.penalty.transpose()).amax();
        assert_eq!(sym, 0.0);
        let eig = b.penalty.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|v| *v > -1e-10));
        assert_eq!(eig.eigenvalues.iter().filter(|v| v.abs() < 1e-8).count(), 2);
    }

    #[test]
    fn interior_rows_match_plain_differences() {
        let b = basis(101, 30);
        let plain = difference_penalty(30);
        for r in 6..24 {
            for c in 0..30 {
                assert!((b.penalty[(r, c)] - plain[(r, c)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        let grid = Grid::uniform(20).unwrap();
        assert!(matches!(
            build_spline_basis(&grid, 3, 3),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            build_spline_basis(&grid, 30, 3),
            Err(Error::InsufficientData(_))
        ));
        assert!(build_spline_basis(&grid, 4, 3).is_ok());
    }

    #[test]
    fn non_uniform_grid_spans_its_range() {
        let grid = Grid::new(vec![0.1, 0.2, 0.35, 0.5, 0.55, 0.7, 0.8, 0.95]).unwrap();
        let b = build_spline_basis(&grid, 6, 3).unwrap();
        assert_eq!(b.knots.first(), Some(&0.1));
        assert_eq!(b.knots.last(), Some(&0.95));
        assert!((b.matrix[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((b.matrix[(7, 5)] - 1.0).abs() < 1e-12);
    }
}
