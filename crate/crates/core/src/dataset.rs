use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{FunctionOnGrid, Grid};

/// Curves observed on a common grid together with scalar covariates.
///
/// `response` is N x P (row i holds subject i), `covariates` is N x Q and
/// does not include an intercept column.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    pub grid: Arc<Grid>,
    pub response: DMatrix<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub ids: Vec<String>,
}

impl FunctionalDataset {
    pub fn new(
        grid: Arc<Grid>,
        response: DMatrix<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let n = response.nrows();
        if response.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "response has {} columns, grid has {} points",
                response.ncols(),
                grid.len()
            )));
        }
        if covariates.nrows() != n || ids.len() != n {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} curves, {} covariate rows, {} ids",
                n,
                covariates.nrows(),
                ids.len()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        Ok(Self {
            grid,
            response,
            covariates,
            covariate_names,
            ids,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.response.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.response.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn curve(&self, i: usize) -> FunctionOnGrid {
        let values = self.response.row(i).iter().copied().collect();
        FunctionOnGrid::new(self.grid.clone(), values).expect("row length matches grid")
    }
}
