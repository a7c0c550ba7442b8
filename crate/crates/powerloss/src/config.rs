//! Flat TOML configuration shared by all subcommands.
//!
//! Every key is optional; command-line flags override the file. Unknown
//! keys are rejected. Relative paths are resolved against the directory of
//! the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::io::{DatasetManifest, FunctionalFormat, GridSpec};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    // Input data.
    pub functional: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub format: Option<FunctionalFormat>,
    pub grid: Option<GridSpec>,
    pub binary: Option<Vec<String>>,

    // Simulation.
    pub scenario: Option<String>,
    pub case: Option<u8>,
    pub d: Option<f64>,
    pub w: Option<f64>,
    pub n_subjects: Option<usize>,
    pub n_points: Option<usize>,
    pub sigma_eps: Option<f64>,
    pub lambda1: Option<f64>,
    pub eigenvalues: Option<[f64; 4]>,
    pub beta0: Option<f64>,

    // Common.
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,

    // FPCA.
    pub pve: Option<f64>,
    pub components: Option<usize>,
    pub fpca_smoothing: Option<f64>,

    // Score regression.
    pub scores: Option<PathBuf>,
    pub eigenfunctions: Option<PathBuf>,
    pub reconstruction_bonferroni: Option<bool>,

    // Function-on-scalar regression.
    pub basis_size: Option<usize>,
    pub n_draws: Option<usize>,
    pub fosr_pve: Option<f64>,
    pub fosr_components: Option<usize>,
    pub fosr_max_iterations: Option<usize>,

    // Power study.
    pub cases: Option<Vec<u8>>,
    pub d_values: Option<Vec<f64>>,
    pub w_values: Option<Vec<f64>>,
    pub n_replicates: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub rpcs_components: Option<usize>,
    pub rpcs_pve: Option<f64>,
}

pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_ALPHA: f64 = 0.05;

impl Config {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|source| Error::Toml {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.functional,
            &mut cfg.covariates,
            &mut cfg.out,
            &mut cfg.scores,
            &mut cfg.eigenfunctions,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn alpha(&self) -> Result<f64> {
        let a = self.alpha.unwrap_or(DEFAULT_ALPHA);
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("alpha = {a} outside (0, 1)")));
        }
        Ok(a)
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("`{key}` path is required")))
        };
        Ok(DatasetManifest {
            functional: need(&self.functional, "functional")?,
            covariates: need(&self.covariates, "covariates")?,
            format: self.format.unwrap_or_default(),
            grid: self.grid.unwrap_or_default(),
            binary: self.binary.clone().unwrap_or_default(),
        })
    }

    /// The configuration as recorded in run metadata. The thread count and
    /// output directory are left out because they never change results.
    pub fn echo(&self) -> Self {
        Self {
            threads: None,
            out: None,
            ..self.clone()
        }
    }
}
