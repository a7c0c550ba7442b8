//! Functions sampled on a shared one-dimensional grid, with the L2 geometry
//! realized by trapezoid quadrature.
//!
//! Every integral over the observation domain in this crate goes through
//! [`Grid::weights`], so non-uniform grids are handled the same way as
//! uniform ones.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Trapezoid quadrature weights for strictly increasing points.
///
/// `w_1 = (s_2 - s_1)/2`, `w_P = (s_P - s_{P-1})/2` and interior
/// `w_j = (s_{j+1} - s_{j-1})/2`.
pub fn quad_weights(points: &[f64]) -> Result<Vec<f64>> {
    let p = points.len();
    if p < 2 {
        return Err(Error::InvalidGrid("need at least two points"));
    }
    if points.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidGrid("non-finite point"));
    }
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("points must be strictly increasing"));
    }
    let mut weights = Vec::with_capacity(p);
    weights.push((points[1] - points[0]) / 2.0);
    for j in 1..p - 1 {
        weights.push((points[j + 1] - points[j - 1]) / 2.0);
    }
    weights.push((points[p - 1] - points[p - 2]) / 2.0);
    Ok(weights)
}

/// Observation grid on `[0, 1]` with its quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        let weights = quad_weights(&points)?;
        if points[0] < 0.0 || points[points.len() - 1] > 1.0 {
            return Err(Error::InvalidGrid("points must lie in [0, 1]"));
        }
        Ok(Self { points, weights })
    }

    /// `p` equally spaced points from 0 to 1 inclusive.
    pub fn uniform(p: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::InvalidGrid("need at least two points"));
        }
        let step = 1.0 / (p - 1) as f64;
        let mut points: Vec<f64> = (0..p).map(|j| j as f64 * step).collect();
        points[p - 1] = 1.0;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Length of the observed domain, `s_P - s_1`, which the weights sum to.
    pub fn domain_length(&self) -> f64 {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Weighted sum `sum_j w_j a_j b_j` of two raw value slices on this grid.
    pub fn integrate_product(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.len());
        debug_assert_eq!(b.len(), self.len());
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    /// Same grid, either by identity or by identical points.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || self.points == other.points
    }
}

/// A function sampled at the points of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionOnGrid {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl FunctionOnGrid {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.points().iter().map(|&s| f(s)).collect();
        Self { grid, values }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let values = alloc::vec![0.0; grid.len()];
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, c: f64, other: &Self) -> Result<Self> {
        self.check_grid(other)?;
        Ok(Self {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    fn check_grid(&self, other: &Self) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Quadrature approximation of `∫ f(s) g(s) ds`.
pub fn inner_product(f: &FunctionOnGrid, g: &FunctionOnGrid) -> Result<f64> {
    f.check_grid(g)?;
    Ok(f.grid.integrate_product(&f.values, &g.values))
}

pub fn l2_norm(f: &FunctionOnGrid) -> f64 {
    f.grid
        .integrate_product(&f.values, &f.values)
        .max(0.0)
        .sqrt()
}

/// `<f, g> / (|f| |g|)`, clamped to `[-1, 1]` against rounding.
pub fn l2_correlation(f: &FunctionOnGrid, g: &FunctionOnGrid) -> Result<f64> {
    let ip = inner_product(f, g)?;
    let nf = l2_norm(f);
    let ng = l2_norm(g);
    if nf == 0.0 || ng == 0.0 {
        return Err(Error::DegenerateFunction);
    }
    Ok((ip / (nf * ng)).clamp(-1.0, 1.0))
}

/// L2 distance `|f - g|`.
pub fn l2_distance(f: &FunctionOnGrid, g: &FunctionOnGrid) -> Result<f64> {
    let diff = f.add_scaled(-1.0, g)?;
    Ok(l2_norm(&diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    fn sin2(grid: &Arc<Grid>, k: f64) -> FunctionOnGrid {
        FunctionOnGrid::from_fn(grid.clone(), |s| 2f64.sqrt() * (2.0 * PI * k * s).sin())
    }

    #[test]
    fn three_point_weights() {
        assert_eq!(quad_weights(&[0.0, 0.5, 1.0]).unwrap(), [0.25, 0.5, 0.25]);
        assert_eq!(quad_weights(&[0.0, 1.0]).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn uniform_101_weights() {
        let g = Grid::uniform(101).unwrap();
        let w = g.weights();
        assert!((w[0] - 0.005).abs() < 1e-12 && (w[100] - 0.005).abs() < 1e-12);
        assert!(w[1..100].iter().all(|x| (x - 0.01).abs() < 1e-12));
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(matches!(quad_weights(&[0.3]), Err(Error::InvalidGrid(_))));
        assert!(matches!(
            quad_weights(&[0.0, 0.5, 0.5]),
            Err(Error::InvalidGrid(_))
        ));
        assert!(matches!(
            quad_weights(&[0.0, 0.7, 0.2]),
            Err(Error::InvalidGrid(_))
        ));
        assert!(Grid::new(alloc::vec![-0.1, 0.5]).is_err());
        assert!(Grid::new(alloc::vec![0.5, 1.2]).is_err());
    }

    #[test]
    fn weights_sum_to_domain_length() {
        let g = Grid::new(alloc::vec![0.1, 0.15, 0.4, 0.9]).unwrap();
        let total: f64 = g.weights().iter().sum();
        assert!((total - g.domain_length()).abs() < 1e-14);
    }

    #[test]
    fn fourier_inner_products() {
        let g = Arc::new(Grid::uniform(201).unwrap());
        let s = sin2(&g, 1.0);
        let c = FunctionOnGrid::from_fn(g.clone(), |x| 2f64.sqrt() * (2.0 * PI * x).cos());
        assert!((inner_product(&s, &s).unwrap() - 1.0).abs() < 1e-3);
        assert!(inner_product(&s, &c).unwrap().abs() < 1e-3);
        assert!((l2_norm(&s) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn tm1_effect_projection_and_correlation() {
        let g = Arc::new(Grid::uniform(201).unwrap());
        let w = 0.5;
        let beta = FunctionOnGrid::from_fn(g.clone(), |s| {
            w + (1.0 - w) * 2f64.sqrt() * (2.0 * PI * s).sin()
        });
        let phi = sin2(&g, 1.0);
        assert!((inner_product(&beta, &phi).unwrap() - 0.5).abs() < 1e-3);
        let expected = (1.0 - w) / (w * w + (1.0 - w) * (1.0 - w)).sqrt();
        assert!((l2_correlation(&beta, &phi).unwrap() - expected).abs() < 2e-3);
        assert!((l2_correlation(&beta, &beta).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mismatched_grids_and_zero_norm() {
        let a = Arc::new(Grid::uniform(11).unwrap());
        let b = Arc::new(Grid::uniform(12).unwrap());
        let f = FunctionOnGrid::from_fn(a.clone(), |s| s);
        let g = FunctionOnGrid::from_fn(b, |s| s);
        assert_eq!(inner_product(&f, &g), Err(Error::GridMismatch));
        let z = FunctionOnGrid::zeros(a);
        assert_eq!(l2_correlation(&f, &z), Err(Error::DegenerateFunction));
        // equal points on distinct allocations count as the same grid
        let c = Arc::new(Grid::uniform(11).unwrap());
        let h = FunctionOnGrid::from_fn(c, |s| s);
        assert!(inner_product(&f, &h).is_ok());
    }

    #[test]
    fn orthonormality_error_shrinks_with_density() {
        let err = |p: usize| {
            let g = Arc::new(Grid::uniform(p).unwrap());
            let s = sin2(&g, 2.0);
            (inner_product(&s, &s).unwrap() - 1.0).abs()
                + inner_product(&s, &sin2(&g, 1.0)).unwrap().abs()
        };
        // trapezoid is exact for these periodic integrands up to rounding on
        // uniform grids; compare on a mildly non-uniform family instead
        let jerr = |p: usize| {
            let pts: Vec<f64> = (0..p)
                .map(|j| {
                    let u = j as f64 / (p - 1) as f64;
                    u + 0.02 * (PI * u).sin() * (2.0 * PI * u).sin()
                })
                .collect();
            let g = Arc::new(Grid::new(pts).unwrap());
            let s = sin2(&g, 2.0);
            (inner_product(&s, &s).unwrap() - 1.0).abs()
        };
        assert!(err(51) < 1e-10 && err(201) < 1e-10);
        assert!(jerr(201) < jerr(51));
    }

    #[test]
    fn jittered_grid_agrees_with_uniform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = 201;
        let mut pts: Vec<f64> = (0..p).map(|j| j as f64 / (p - 1) as f64).collect();
        for x in pts.iter_mut().take(p - 1).skip(1) {
            *x += rng.random_range(-0.3..0.3) / (p - 1) as f64;
        }
        let jg = Arc::new(Grid::new(pts).unwrap());
        let ug = Arc::new(Grid::uniform(p).unwrap());
        for k in 1..=2 {
            for (a, b) in [(k as f64, k as f64), (1.0, 2.0)] {
                let ju = inner_product(&sin2(&jg, a), &sin2(&jg, b)).unwrap();
                let uu = inner_product(&sin2(&ug, a), &sin2(&ug, b)).unwrap();
                assert!((ju - uu).abs() < 1e-2);
            }
        }
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cauchy_schwarz(a in proptest::collection::vec(-5.0f64..5.0, 17),
                          b in proptest::collection::vec(-5.0f64..5.0, 17)) {
            let g = Arc::new(Grid::uniform(17).unwrap());
            let f = FunctionOnGrid::new(g.clone(), a).unwrap();
            let h = FunctionOnGrid::new(g, b).unwrap();
            let ip = inner_product(&f, &h).unwrap();
            prop_assert!(ip.abs() <= l2_norm(&f) * l2_norm(&h) * (1.0 + 1e-12) + 1e-12);
            if let Ok(r) = l2_correlation(&f, &h) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
