//! Command-line surface. Every subcommand resolves a [`Config`] from an
//! optional TOML file plus flags, writes its outputs into the output
//! directory, and finishes with `run_metadata.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use powerloss_core::fosr::FoSROptions;
use powerloss_core::fpca::{EigenSystem, Selection, Smoothing};
use powerloss_core::rpcs::{
    reconstruct_effect, rpcs_joint_test, rpcs_regress, Correction, Reconstruction,
};
use powerloss_core::synth::{
    generate_tm1, generate_tm2, SyntheticDataset, Tm1Config, Tm2Config, DEFAULT_POINTS,
    DEFAULT_SIGMA_EPS, DEFAULT_SUBJECTS, TM1_LAMBDA, TM2_EIGENVALUES,
};
use powerloss_core::{FunctionOnGrid, Grid};
use serde_json::json;

use crate::config::Config;
use crate::error::{io_err, Error, Result};
use crate::io::{
    fmt_f64, ingest, read_functions, read_id_matrix, write_csv, write_dataset, Ingested,
};
use crate::powerlab::{
    run_power_study, summarize, ComponentRule, Method, PowerStudyConfig, PowerTable, Scenario,
};
use crate::report::{
    analyze, emit, file_stem, fosr_bands, fosr_step, fosr_summary, fpca_step, write_band_file,
    write_eigen_files, write_json, write_rpcs_files, write_scores, AnalysisOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "powerloss",
    version,
    about = "Score regression versus function-on-scalar regression"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the power study. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Functional CSV (wide or long).
    #[arg(long)]
    pub functional: Option<PathBuf>,
    /// Covariate CSV.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from one of the two generative models.
    Simulate,
    /// Functional principal components of a dataset.
    Fpca(DataArgs),
    /// Regress principal component scores on covariates.
    Rpcs {
        /// Scores CSV with an id column.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        covariates: Option<PathBuf>,
        /// Eigenfunction CSV (`s`, optional `mean`, `phi_1..`), enables
        /// effect reconstructions.
        #[arg(long)]
        eigenfunctions: Option<PathBuf>,
    },
    /// Function-on-scalar regression with pointwise and simultaneous bands.
    Fosr(DataArgs),
    /// Monte Carlo power study.
    Power,
    /// Full report on a dataset.
    Analyze(DataArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let g = &cli.global;
    cfg.out = g.out.clone().or(cfg.out);
    cfg.seed = g.seed.or(cfg.seed);
    cfg.threads = g.threads.or(cfg.threads);
    cfg.alpha = g.alpha.or(cfg.alpha);
    match &cli.command {
        Command::Fpca(a) | Command::Fosr(a) | Command::Analyze(a) => {
            cfg.functional = a.functional.clone().or(cfg.functional);
            cfg.covariates = a.covariates.clone().or(cfg.covariates);
        }
        Command::Rpcs {
            scores,
            covariates,
            eigenfunctions,
        } => {
            cfg.scores = scores.clone().or(cfg.scores);
            cfg.covariates = covariates.clone().or(cfg.covariates);
            cfg.eigenfunctions = eigenfunctions.clone().or(cfg.eigenfunctions);
        }
        Command::Simulate | Command::Power => {}
    }
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("powerloss-out"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let (name, extra) = match &cli.command {
        Command::Simulate => ("simulate", simulate(&cfg, &out)?),
        Command::Fpca(_) => ("fpca", fpca(&cfg, &out)?),
        Command::Rpcs { .. } => ("rpcs", rpcs(&cfg, &out)?),
        Command::Fosr(_) => ("fosr", fosr(&cfg, &out)?),
        Command::Power => ("power", power(&cfg, &out)?),
        Command::Analyze(_) => ("analyze", analyze_command(&cfg, &out)?),
    };
    write_metadata(&out, name, &cfg, extra)
}

fn write_metadata(out: &Path, command: &str, cfg: &Config, extra: serde_json::Value) -> Result<()> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": powerloss_core::VERSION,
        "seed": cfg.seed(),
        "alpha": cfg.alpha()?,
        "config": cfg.echo(),
        "details": extra,
    });
    write_json(&out.join("run_metadata.json"), &meta)
}

fn grid_json(grid: &Grid) -> serde_json::Value {
    json!(grid.points())
}

fn selection(cfg: &Config) -> Result<Selection> {
    match (cfg.components, cfg.pve) {
        (Some(_), Some(_)) => Err(Error::Config(
            "set at most one of `components` and `pve`".into(),
        )),
        (Some(0), None) => Err(Error::Config("`components` must be >= 1".into())),
        (Some(l), None) => Ok(Selection::Fixed(l)),
        (None, Some(t)) if t > 0.0 && t <= 1.0 => Ok(Selection::Pve(t)),
        (None, Some(t)) => Err(Error::Config(format!("pve = {t} outside (0, 1]"))),
        (None, None) => Ok(Selection::default()),
    }
}

fn fpca_smoothing(cfg: &Config) -> Result<Smoothing> {
    match cfg.fpca_smoothing {
        None => Ok(Smoothing::Off),
        Some(l) if l.is_finite() && l > 0.0 => Ok(Smoothing::Penalized { lambda: l }),
        Some(l) if l == 0.0 => Ok(Smoothing::Off),
        Some(l) => Err(Error::Config(format!("fpca_smoothing = {l} must be >= 0"))),
    }
}

pub fn analysis_options(cfg: &Config) -> Result<AnalysisOptions> {
    let mut fosr = FoSROptions::default();
    match (cfg.fosr_components, cfg.fosr_pve) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set at most one of `fosr_components` and `fosr_pve`".into(),
            ))
        }
        (Some(l), None) => fosr.residual_selection = Selection::Fixed(l),
        (None, Some(t)) => fosr.residual_selection = Selection::Pve(t),
        (None, None) => {}
    }
    if let Some(it) = cfg.fosr_max_iterations {
        fosr.max_iterations = it;
    }
    let defaults = AnalysisOptions::default();
    Ok(AnalysisOptions {
        selection: selection(cfg)?,
        fpca_smoothing: fpca_smoothing(cfg)?,
        alpha: cfg.alpha()?,
        seed: cfg.seed(),
        basis_size: cfg.basis_size.unwrap_or(defaults.basis_size),
        n_draws: cfg.n_draws.unwrap_or(defaults.n_draws),
        fosr,
        reconstruction_bonferroni: cfg.reconstruction_bonferroni.unwrap_or(false),
    })
}

fn scenario(cfg: &Config) -> Result<Scenario> {
    match cfg.scenario.as_deref().unwrap_or("tm1") {
        "tm1" => Ok(Scenario::Tm1),
        "tm2" => Ok(Scenario::Tm2),
        other => Err(Error::Config(format!("unknown scenario `{other}`"))),
    }
}

fn uniform_grid(cfg: &Config) -> Result<Arc<Grid>> {
    Ok(Arc::new(Grid::uniform(
        cfg.n_points.unwrap_or(DEFAULT_POINTS),
    )?))
}

pub fn simulate_dataset(cfg: &Config) -> Result<SyntheticDataset> {
    let grid = uniform_grid(cfg)?;
    let n_subjects = cfg.n_subjects.unwrap_or(DEFAULT_SUBJECTS);
    let sigma_eps = cfg.sigma_eps.unwrap_or(DEFAULT_SIGMA_EPS);
    let d = cfg.d.unwrap_or(0.0);
    let w = cfg.w.unwrap_or(0.0);
    let seed = cfg.seed();
    let data = match scenario(cfg)? {
        Scenario::Tm1 => generate_tm1(&Tm1Config {
            n_subjects,
            grid,
            d,
            w,
            lambda1: cfg.lambda1.unwrap_or(TM1_LAMBDA),
            sigma_eps,
            seed,
        })?,
        Scenario::Tm2 => generate_tm2(&Tm2Config {
            n_subjects,
            grid,
            d,
            w,
            case_id: cfg.case.unwrap_or(1),
            eigenvalues: cfg.eigenvalues.unwrap_or(TM2_EIGENVALUES),
            sigma_eps,
            beta0: cfg.beta0.unwrap_or(0.0),
            seed,
        })?,
    };
    Ok(data)
}

fn simulate(cfg: &Config, out: &Path) -> Result<serde_json::Value> {
    let sim = simulate_dataset(cfg)?;
    write_dataset(out, &sim.data)?;

    let grid = &sim.data.grid;
    let mut header = vec!["s".to_string(), "intercept".to_string()];
    header.extend((1..=sim.betas.len()).map(|q| format!("beta_{q}")));
    header.extend((1..=sim.eigenfunctions.len()).map(|l| format!("phi_{l}")));
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|j| {
            let mut r = vec![fmt_f64(grid.points()[j]), fmt_f64(sim.intercept)];
            r.extend(sim.betas.iter().map(|b| fmt_f64(b.values()[j])));
            r.extend(sim.eigenfunctions.iter().map(|f| fmt_f64(f.values()[j])));
            r
        })
        .collect();
    write_csv(&out.join("truth.csv"), &header, &rows)?;
    Ok(json!({
        "scenario": scenario(cfg)?.name(),
        "n_subjects": sim.data.n_subjects(),
        "eigenvalues": sim.eigenvalues,
        "grid": grid_json(grid),
    }))
}

fn load(cfg: &Config) -> Result<Ingested> {
    ingest(&cfg.manifest()?)
}

fn ingest_details(ing: &Ingested) -> serde_json::Value {
    json!({
        "n_subjects": ing.dataset.n_subjects(),
        "grid": grid_json(&ing.dataset.grid),
        "original_grid": ing.original_points,
        "grid_mapping": { "offset": ing.mapping.offset, "scale": ing.mapping.scale },
        "rejected_rows": ing.rejected.iter().map(|r| json!({
            "line": r.line, "id": r.id, "missing_values": r.missing_values,
        })).collect::<Vec<_>>(),
        "binary": ing.binary.iter().map(|b| json!({
            "column": b.column, "zero": b.zero, "one": b.one,
        })).collect::<Vec<_>>(),
    })
}

fn fpca(cfg: &Config, out: &Path) -> Result<serde_json::Value> {
    let ing = load(cfg)?;
    let options = analysis_options(cfg)?;
    let system = fpca_step(&ing.dataset, &options)?;
    write_eigen_files(out, &system)?;
    write_scores(out, &ing.dataset.ids, &system)?;
    Ok(json!({
        "input": ingest_details(&ing),
        "n_components": system.n_components(),
        "residual_variance": system.residual_variance,
        "total_variance": system.total_variance,
    }))
}

/// Rebuilds an eigensystem from an eigenfunction table; only the
/// eigenfunctions are meaningful.
fn eigensystem_from_table(path: &Path) -> Result<EigenSystem> {
    let (s, names, values) = read_functions(path)?;
    let grid = Arc::new(Grid::new(s)?);
    let mut mean = FunctionOnGrid::zeros(grid.clone());
    let mut eigenfunctions = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let f = FunctionOnGrid::new(grid.clone(), values.column(c).iter().copied().collect())?;
        if name == "mean" {
            mean = f;
        } else {
            eigenfunctions.push(f);
        }
    }
    let l = eigenfunctions.len();
    Ok(EigenSystem {
        mean_function: mean,
        eigenfunctions,
        eigenvalues: vec![0.0; l],
        scores: DMatrix::zeros(0, l),
        pve: vec![0.0; l],
        residual_variance: 0.0,
        total_variance: 0.0,
    })
}

fn rpcs(cfg: &Config, out: &Path) -> Result<serde_json::Value> {
    let alpha = cfg.alpha()?;
    let scores_path = cfg
        .scores
        .clone()
        .ok_or_else(|| Error::Config("`scores` path is required".into()))?;
    let cov_path = cfg
        .covariates
        .clone()
        .ok_or_else(|| Error::Config("`covariates` path is required".into()))?;
    let (score_ids, _, scores) = read_id_matrix(&scores_path)?;
    let (cov_ids, names, x) = read_id_matrix(&cov_path)?;
    // Align covariate rows to the score ids.
    let mut rows = Vec::with_capacity(score_ids.len());
    for (i, id) in score_ids.iter().enumerate() {
        let pos = cov_ids
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| Error::IdMismatch {
                path: cov_path.clone(),
                line: i as u64 + 2,
                id: id.clone(),
                other: scores_path.clone(),
            })?;
        rows.push(pos);
    }
    if cov_ids.len() != score_ids.len() {
        let extra = cov_ids
            .iter()
            .enumerate()
            .find(|(_, c)| !score_ids.contains(c));
        if let Some((i, id)) = extra {
            return Err(Error::IdMismatch {
                path: scores_path.clone(),
                line: i as u64 + 2,
                id: id.clone(),
                other: cov_path.clone(),
            });
        }
    }
    let x = DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)]);
    let fit = rpcs_regress(&scores, &x)?;
    let joint = (1..=fit.q)
        .map(|q| {
            [Correction::None, Correction::Bonferroni]
                .into_iter()
                .map(|c| rpcs_joint_test(&fit, q, alpha, c))
                .collect::<powerloss_core::Result<Vec<_>>>()
        })
        .collect::<powerloss_core::Result<Vec<_>>>()?;
    write_rpcs_files(out, &names, &fit, &joint)?;

    if let Some(path) = &cfg.eigenfunctions {
        let system = eigensystem_from_table(path)?;
        let bonferroni = cfg.reconstruction_bonferroni.unwrap_or(false);
        for q in 1..=fit.q {
            let all = reconstruct_effect(&fit, &system, q, Reconstruction::All, alpha)?;
            let sig = reconstruct_effect(
                &fit,
                &system,
                q,
                Reconstruction::Significant { bonferroni },
                alpha,
            )?;
            let header = ["s", "rpcs_all", "rpcs_significant"].map(String::from);
            let rows: Vec<Vec<String>> = (0..system.grid().len())
                .map(|j| {
                    vec![
                        fmt_f64(system.grid().points()[j]),
                        fmt_f64(all.function.values()[j]),
                        fmt_f64(sig.function.values()[j]),
                    ]
                })
                .collect();
            let path = out.join(format!("reconstruction_{}.csv", file_stem(&names[q - 1])));
            write_csv(&path, &header, &rows)?;
        }
    }
    Ok(json!({ "n_subjects": fit.n, "n_components": fit.l }))
}

fn fosr(cfg: &Config, out: &Path) -> Result<serde_json::Value> {
    let ing = load(cfg)?;
    let options = analysis_options(cfg)?;
    let fit = fosr_step(&ing.dataset, &options)?;
    let bands = fosr_bands(&fit, &options)?;
    let names = &ing.dataset.covariate_names;
    for (name, band) in names.iter().zip(&bands) {
        write_band_file(out, name, Some(band))?;
    }
    let refs: Vec<_> = bands.iter().map(Some).collect();
    write_json(
        &out.join("fosr_global.json"),
        &fosr_summary(Some(&fit), None, names, &refs, options.alpha),
    )?;
    Ok(json!({ "input": ingest_details(&ing), "n_draws": options.n_draws }))
}

pub fn power_config(cfg: &Config) -> Result<PowerStudyConfig> {
    let d = PowerStudyConfig::default();
    let methods = match &cfg.methods {
        None => d.methods.clone(),
        Some(names) => names
            .iter()
            .map(|n| {
                Method::ALL
                    .into_iter()
                    .find(|m| m.name() == n)
                    .ok_or_else(|| Error::Config(format!("unknown method `{n}`")))
            })
            .collect::<Result<_>>()?,
    };
    let rpcs_components = match (cfg.rpcs_components, cfg.rpcs_pve) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set at most one of `rpcs_components` and `rpcs_pve`".into(),
            ))
        }
        (Some(l), None) => ComponentRule::Fixed(l),
        (None, Some(t)) => ComponentRule::Pve(t),
        (None, None) => d.rpcs_components,
    };
    let fosr_residual_components = match (cfg.fosr_components, cfg.fosr_pve) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "set at most one of `fosr_components` and `fosr_pve`".into(),
            ))
        }
        (Some(l), None) => ComponentRule::Fixed(l),
        (None, Some(t)) => ComponentRule::Pve(t),
        (None, None) => d.fosr_residual_components,
    };
    let config = PowerStudyConfig {
        scenario: scenario(cfg)?,
        cases: cfg.cases.clone().unwrap_or(d.cases),
        d_values: cfg.d_values.clone().unwrap_or(d.d_values),
        w_values: cfg.w_values.clone().unwrap_or(d.w_values),
        n_replicates: cfg.n_replicates.unwrap_or(d.n_replicates),
        alpha: cfg.alpha()?,
        n_subjects: cfg.n_subjects.unwrap_or(d.n_subjects),
        n_points: cfg.n_points.unwrap_or(d.n_points),
        sigma_eps: cfg.sigma_eps.unwrap_or(d.sigma_eps),
        lambda1: cfg.lambda1.unwrap_or(d.lambda1),
        eigenvalues: cfg.eigenvalues.unwrap_or(d.eigenvalues),
        methods,
        base_seed: cfg.seed(),
        rpcs_components,
        fosr_residual_components,
        basis_size: cfg.basis_size.unwrap_or(d.basis_size),
        n_draws: cfg.n_draws.unwrap_or(d.n_draws),
    };
    config.validate()?;
    Ok(config)
}

pub fn write_power_table(out: &Path, table: &PowerTable) -> Result<()> {
    let header = [
        "scenario",
        "case",
        "d",
        "w",
        "method",
        "target",
        "rejections",
        "n_valid",
        "n_failed",
        "power",
        "mc_se",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.scenario.name().to_string(),
                r.case.to_string(),
                fmt_f64(r.d),
                fmt_f64(r.w),
                r.method.name().to_string(),
                r.target.to_string(),
                r.rejections.to_string(),
                r.n_replicates.to_string(),
                r.n_failed.to_string(),
                fmt_f64(r.power),
                fmt_f64(r.mc_se),
            ]
        })
        .collect();
    write_csv(&out.join("power_table.csv"), &header, &rows)?;

    // One row per point of a power curve in d, keyed by everything else.
    let header = [
        "curve", "scenario", "case", "w", "method", "target", "d", "power", "lower", "upper",
    ]
    .map(String::from);
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let curve = format!(
                "{}_case{}_w{}_{}_beta{}",
                r.scenario.name(),
                r.case,
                fmt_f64(r.w),
                r.method.name(),
                r.target
            );
            vec![
                curve,
                r.scenario.name().to_string(),
                r.case.to_string(),
                fmt_f64(r.w),
                r.method.name().to_string(),
                r.target.to_string(),
                fmt_f64(r.d),
                fmt_f64(r.power),
                fmt_f64((r.power - 1.96 * r.mc_se).max(0.0)),
                fmt_f64((r.power + 1.96 * r.mc_se).min(1.0)),
            ]
        })
        .collect();
    write_csv(&out.join("power_curves.csv"), &header, &rows)
}

fn power(cfg: &Config, out: &Path) -> Result<serde_json::Value> {
    let config = power_config(cfg)?;
    let table = run_power_study(&config, cfg.threads)?;
    write_power_table(out, &table)?;
    let summary = summarize(&table, &["scenario", "case", "w", "method", "target"])?;
    Ok(json!({
        "study": config,
        "monotonicity_flags": summary.flags,
        "grid": grid_json(&Grid::uniform(config.n_points)?),
    }))
}

fn analyze_command(cfg: &Config, out: &Path) -> Result<serde_json::Value> {
    let ing = load(cfg)?;
    let options = analysis_options(cfg)?;
    let report = analyze(&ing.dataset, &options)?;
    emit(&report, out)?;
    let band_seeds: Vec<_> = (1..=ing.dataset.n_covariates())
        .map(|q| crate::report::covariate_band_seed(options.seed, q))
        .collect();
    Ok(json!({
        "input": ingest_details(&ing),
        "band_seeds": band_seeds,
        "n_draws": options.n_draws,
        "fosr_failure": report.fosr_failure,
    }))
}
