//! The full analysis of a gridded functional dataset: FPCA, score
//! regressions, function-on-scalar regression with bands, the correlation
//! table between fitted effects and eigenfunctions, and effect
//! reconstructions. Results are written as a fixed set of CSV and JSON files.

use std::path::{Path, PathBuf};

use powerloss_core::fosr::{cma_band, fit_fosr, BandSet, FoSRFit, FoSROptions};
use powerloss_core::fpca::{
    fit_fpca, sign_align, EigenSystem, Selection, SignReference, Smoothing,
};
use powerloss_core::grid::l2_correlation;
use powerloss_core::rng::substream;
use powerloss_core::rpcs::{
    reconstruct_effect, rpcs_joint_test, rpcs_regress, Correction, JointTestResult,
    ReconstructedEffect, Reconstruction, RpcsFit,
};
use powerloss_core::spline::{build_spline_basis, DEFAULT_DEGREE};
use powerloss_core::FunctionalDataset;
use serde::Serialize;
use serde_json::json;

use crate::error::{io_err, Result};
use crate::io::{create_file, fmt_f64, write_csv};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub selection: Selection,
    pub fpca_smoothing: Smoothing,
    pub alpha: f64,
    pub seed: u64,
    pub basis_size: usize,
    pub n_draws: usize,
    pub fosr: FoSROptions,
    pub reconstruction_bonferroni: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            selection: Selection::default(),
            fpca_smoothing: Smoothing::Off,
            alpha: 0.05,
            seed: crate::config::DEFAULT_SEED,
            basis_size: powerloss_core::spline::DEFAULT_BASIS_SIZE,
            n_draws: powerloss_core::fosr::DEFAULT_DRAWS,
            fosr: FoSROptions::default(),
            reconstruction_bonferroni: false,
        }
    }
}

/// Seed of the CMA draws for covariate `q` (1-based) of an analysis.
pub fn covariate_band_seed(seed: u64, q: usize) -> u64 {
    substream(seed, 1 + q as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateReport {
    pub name: String,
    /// 1-based covariate index.
    pub q: usize,
    pub joint_tests: Vec<JointTestResult>,
    pub band: Option<BandSet>,
    /// `l2_correlation(β̂_q, φ̂_l)`; `None` when β̂_q is identically zero.
    pub correlations: Vec<Option<f64>>,
    pub rpcs_all: ReconstructedEffect,
    pub rpcs_significant: ReconstructedEffect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub eigensystem: EigenSystem,
    pub rpcs: RpcsFit,
    pub fosr: Option<FoSRFit>,
    pub fosr_failure: Option<String>,
    pub covariates: Vec<CovariateReport>,
    pub alpha: f64,
    pub n_draws: usize,
}

pub fn fpca_step(data: &FunctionalDataset, options: &AnalysisOptions) -> Result<EigenSystem> {
    let system = fit_fpca(
        &data.grid,
        &data.response,
        options.selection,
        options.fpca_smoothing,
    )?;
    Ok(sign_align(system, SignReference::PeakPositive)?)
}

pub fn fosr_step(data: &FunctionalDataset, options: &AnalysisOptions) -> Result<FoSRFit> {
    let basis = build_spline_basis(&data.grid, options.basis_size, DEFAULT_DEGREE)?;
    Ok(fit_fosr(data, &basis, &options.fosr)?)
}

pub fn fosr_bands(fit: &FoSRFit, options: &AnalysisOptions) -> Result<Vec<BandSet>> {
    (1..fit.n_coefficients())
        .map(|q| {
            Ok(cma_band(
                fit,
                q,
                options.alpha,
                options.n_draws,
                covariate_band_seed(options.seed, q),
            )?)
        })
        .collect()
}

pub fn analyze(data: &FunctionalDataset, options: &AnalysisOptions) -> Result<AnalysisReport> {
    if data.n_covariates() == 0 {
        return Err(crate::error::Error::Config(
            "analysis needs at least one covariate".into(),
        ));
    }
    let system = fpca_step(data, options)?;
    let rpcs = rpcs_regress(&system.scores, &data.covariates)?;

    let (fosr, fosr_failure, bands) = match fosr_step(data, options)
        .and_then(|fit| fosr_bands(&fit, options).map(|b| (fit, b)))
    {
        Ok((fit, bands)) => (Some(fit), None, bands.into_iter().map(Some).collect()),
        Err(e) => (None, Some(e.to_string()), vec![None; data.n_covariates()]),
    };

    let mut covariates = Vec::with_capacity(data.n_covariates());
    for (idx, band) in bands.into_iter().enumerate() {
        let q = idx + 1;
        let joint_tests = [Correction::None, Correction::Bonferroni]
            .into_iter()
            .map(|c| rpcs_joint_test(&rpcs, q, options.alpha, c))
            .collect::<powerloss_core::Result<Vec<_>>>()?;
        let correlations = match &fosr {
            Some(fit) => system
                .eigenfunctions
                .iter()
                .map(|phi| l2_correlation(&fit.coefficient_functions[q], phi).ok())
                .collect(),
            None => vec![None; system.n_components()],
        };
        let rpcs_all = reconstruct_effect(&rpcs, &system, q, Reconstruction::All, options.alpha)?;
        let rpcs_significant = reconstruct_effect(
            &rpcs,
            &system,
            q,
            Reconstruction::Significant {
                bonferroni: options.reconstruction_bonferroni,
            },
            options.alpha,
        )?;
        covariates.push(CovariateReport {
            name: data.covariate_names[idx].clone(),
            q,
            joint_tests,
            band,
            correlations,
            rpcs_all,
            rpcs_significant,
        });
    }
    Ok(AnalysisReport {
        eigensystem: system,
        rpcs,
        fosr,
        fosr_failure,
        covariates,
        alpha: options.alpha,
        n_draws: options.n_draws,
    })
}

/// Makes a covariate name safe for use in a file name.
pub fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "covariate".to_string()
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "NA".to_string())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut file = create_file(path)?;
    serde_json::to_writer_pretty(&mut file, value).map_err(|source| crate::error::Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    use std::io::Write;
    writeln!(file).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

pub fn write_eigen_files(dir: &Path, system: &EigenSystem) -> Result<Vec<PathBuf>> {
    let l = system.n_components();
    let path = dir.join("fpca_eigenvalues.csv");
    let rows: Vec<Vec<String>> = (0..l)
        .map(|k| {
            let prev = if k == 0 { 0.0 } else { system.pve[k - 1] };
            vec![
                (k + 1).to_string(),
                fmt_f64(system.eigenvalues[k]),
                fmt_f64(system.pve[k] - prev),
                fmt_f64(system.pve[k]),
            ]
        })
        .collect();
    let header = ["component", "eigenvalue", "pve", "cumulative_pve"].map(String::from);
    write_csv(&path, &header, &rows)?;

    let fpath = dir.join("fpca_eigenfunctions.csv");
    let mut header = vec!["s".to_string(), "mean".to_string()];
    header.extend((1..=l).map(|k| format!("phi_{k}")));
    let points = system.grid().points();
    let rows: Vec<Vec<String>> = (0..points.len())
        .map(|j| {
            let mut r = vec![
                fmt_f64(points[j]),
                fmt_f64(system.mean_function.values()[j]),
            ];
            r.extend(system.eigenfunctions.iter().map(|f| fmt_f64(f.values()[j])));
            r
        })
        .collect();
    write_csv(&fpath, &header, &rows)?;
    Ok(vec![path, fpath])
}

pub fn write_scores(dir: &Path, ids: &[String], system: &EigenSystem) -> Result<PathBuf> {
    let path = dir.join("fpca_scores.csv");
    let mut header = vec!["id".to_string()];
    header.extend((1..=system.n_components()).map(|k| format!("xi_{k}")));
    let rows: Vec<Vec<String>> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut r = vec![id.clone()];
            r.extend(system.scores.row(i).iter().map(|v| fmt_f64(*v)));
            r
        })
        .collect();
    write_csv(&path, &header, &rows)?;
    Ok(path)
}

pub fn write_rpcs_files(
    dir: &Path,
    names: &[String],
    fit: &RpcsFit,
    joint: &[Vec<JointTestResult>],
) -> Result<Vec<PathBuf>> {
    let path = dir.join("rpcs_fit.csv");
    let header = [
        "component",
        "term",
        "estimate",
        "std_error",
        "t_statistic",
        "p_value",
    ]
    .map(String::from);
    let mut rows = Vec::new();
    for l in 0..fit.l {
        for j in 0..=fit.q {
            let term = if j == 0 {
                "(intercept)".to_string()
            } else {
                names[j - 1].clone()
            };
            rows.push(vec![
                (l + 1).to_string(),
                term,
                fmt_f64(fit.slopes[(l, j)]),
                fmt_f64(fit.standard_errors[(l, j)]),
                fmt_f64(fit.t_statistics[(l, j)]),
                fmt_f64(fit.p_values[(l, j)]),
            ]);
        }
    }
    write_csv(&path, &header, &rows)?;

    let jpath = dir.join("rpcs_joint_tests.json");
    let tests: Vec<serde_json::Value> = joint
        .iter()
        .flatten()
        .map(|t| {
            json!({
                "covariate": names[t.covariate - 1],
                "correction": t.correction.name(),
                "component_p_values": t.component_p_values,
                "global_p": t.global_p,
                "alpha": t.alpha,
                "reject": t.reject,
            })
        })
        .collect();
    write_json(&jpath, &json!({ "n_components": fit.l, "tests": tests }))?;
    Ok(vec![path, jpath])
}

pub fn write_band_file(dir: &Path, name: &str, band: Option<&BandSet>) -> Result<PathBuf> {
    let path = dir.join(format!("fosr_bands_{}.csv", file_stem(name)));
    let header = ["s", "estimate", "pw_lo", "pw_hi", "cma_lo", "cma_hi"].map(String::from);
    let rows: Vec<Vec<String>> = match band {
        Some(b) => (0..b.estimate.len())
            .map(|j| {
                let sim = b.simultaneous.as_ref();
                vec![
                    fmt_f64(b.points[j]),
                    fmt_f64(b.estimate[j]),
                    fmt_f64(b.pointwise_lower[j]),
                    fmt_f64(b.pointwise_upper[j]),
                    opt(sim.map(|s| s.lower[j])),
                    opt(sim.map(|s| s.upper[j])),
                ]
            })
            .collect(),
        None => Vec::new(),
    };
    write_csv(&path, &header, &rows)?;
    Ok(path)
}

pub fn fosr_summary(
    fit: Option<&FoSRFit>,
    failure: Option<&str>,
    names: &[String],
    bands: &[Option<&BandSet>],
    alpha: f64,
) -> serde_json::Value {
    let covs: Vec<serde_json::Value> = names
        .iter()
        .zip(bands)
        .map(|(name, band)| {
            let sim = band.and_then(|b| b.simultaneous.as_ref());
            json!({
                "covariate": name,
                "global_p": sim.map(|s| s.global_p),
                "statistic": sim.map(|s| s.statistic),
                "reject": sim.map(|s| s.global_p < alpha),
                "pointwise_multiplier": band.map(|b| b.pointwise_multiplier),
                "simultaneous_multiplier": sim.map(|s| s.multiplier),
                "n_draws": sim.map(|s| s.n_draws),
                "band_subsampled": band.map(|b| b.subsampled),
            })
        })
        .collect();
    json!({
        "alpha": alpha,
        "failure": failure,
        "covariates": covs,
        "smoothing_parameters": fit.map(|f| f.smoothing_parameters.clone()),
        "relative_smoothing": fit.map(|f| f.relative_smoothing.clone()),
        "variance_components": fit.map(|f| json!({
            "eigenvalues": f.variance_components.eigenvalues,
            "sigma2": f.variance_components.sigma2,
        })),
        "iterations": fit.map(|f| f.iterations),
        "deltas": fit.map(|f| f.deltas.clone()),
        "converged": fit.map(|f| f.converged),
    })
}

/// Writes the full report layout into `dir` and returns the paths written
/// (excluding run metadata).
pub fn emit(report: &AnalysisReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = write_eigen_files(dir, &report.eigensystem)?;
    let names: Vec<String> = report.covariates.iter().map(|c| c.name.clone()).collect();
    let joint: Vec<Vec<JointTestResult>> = report
        .covariates
        .iter()
        .map(|c| c.joint_tests.clone())
        .collect();
    written.extend(write_rpcs_files(dir, &names, &report.rpcs, &joint)?);

    let bands: Vec<Option<&BandSet>> = report.covariates.iter().map(|c| c.band.as_ref()).collect();
    for (c, band) in report.covariates.iter().zip(&bands) {
        written.push(write_band_file(dir, &c.name, *band)?);
    }
    let gpath = dir.join("fosr_global.json");
    write_json(
        &gpath,
        &fosr_summary(
            report.fosr.as_ref(),
            report.fosr_failure.as_deref(),
            &names,
            &bands,
            report.alpha,
        ),
    )?;
    written.push(gpath);

    let cpath = dir.join("correlations.csv");
    let l = report.eigensystem.n_components();
    let mut header = vec!["covariate".to_string()];
    header.extend((1..=l).map(|k| format!("phi_{k}")));
    let rows: Vec<Vec<String>> = report
        .covariates
        .iter()
        .map(|c| {
            let mut r = vec![c.name.clone()];
            r.extend(c.correlations.iter().map(|v| opt(*v)));
            r
        })
        .collect();
    write_csv(&cpath, &header, &rows)?;
    written.push(cpath);

    let points = report.eigensystem.grid().points();
    for c in &report.covariates {
        let path = dir.join(format!("reconstruction_{}.csv", file_stem(&c.name)));
        let header = ["s", "fosr", "rpcs_all", "rpcs_significant"].map(String::from);
        let fosr = report
            .fosr
            .as_ref()
            .map(|f| f.coefficient_functions[c.q].values());
        let rows: Vec<Vec<String>> = (0..points.len())
            .map(|j| {
                vec![
                    fmt_f64(points[j]),
                    opt(fosr.map(|v| v[j])),
                    fmt_f64(c.rpcs_all.function.values()[j]),
                    fmt_f64(c.rpcs_significant.function.values()[j]),
                ]
            })
            .collect();
        write_csv(&path, &header, &rows)?;
        written.push(path);
    }
    Ok(written)
}
