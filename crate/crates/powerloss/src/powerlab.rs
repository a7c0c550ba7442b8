//! Monte Carlo size and power of the score-regression and function-on-scalar
//! tests over lattices of data-generating parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use powerloss_core::fosr::{cma_band, fit_fosr, FoSROptions};
use powerloss_core::fpca::{fit_fpca, Selection, Smoothing};
use powerloss_core::rng::substream;
use powerloss_core::rpcs::{rpcs_joint_test, rpcs_regress, Correction};
use powerloss_core::spline::{build_spline_basis, SplineBasis, DEFAULT_BASIS_SIZE, DEFAULT_DEGREE};
use powerloss_core::synth::{
    generate_tm1, generate_tm2, SyntheticDataset, Tm1Config, Tm2Config, DEFAULT_POINTS,
    DEFAULT_SIGMA_EPS, DEFAULT_SUBJECTS, TM1_LAMBDA, TM2_EIGENVALUES,
};
use powerloss_core::Grid;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Tm1,
    Tm2,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Tm1 => "TM1",
            Scenario::Tm2 => "TM2",
        }
    }

    /// Number of true eigenfunctions, used for the matched component count.
    pub fn true_components(self) -> usize {
        match self {
            Scenario::Tm1 => 1,
            Scenario::Tm2 => 4,
        }
    }

    pub fn targets(self) -> &'static [usize] {
        match self {
            Scenario::Tm1 => &[1],
            Scenario::Tm2 => &[1, 2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fosr,
    RpcsNone,
    RpcsBonferroni,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fosr, Method::RpcsNone, Method::RpcsBonferroni];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fosr => "fosr",
            Method::RpcsNone => "rpcs_none",
            Method::RpcsBonferroni => "rpcs_bonferroni",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How many principal components a pipeline keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRule {
    /// The true number of eigenfunctions of the scenario.
    Matched,
    Fixed(usize),
    Pve(f64),
}

impl ComponentRule {
    fn selection(self, scenario: Scenario) -> Selection {
        match self {
            ComponentRule::Matched => Selection::Fixed(scenario.true_components()),
            ComponentRule::Fixed(l) => Selection::Fixed(l),
            ComponentRule::Pve(t) => Selection::Pve(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerStudyConfig {
    pub scenario: Scenario,
    pub cases: Vec<u8>,
    pub d_values: Vec<f64>,
    pub w_values: Vec<f64>,
    pub n_replicates: usize,
    pub alpha: f64,
    pub n_subjects: usize,
    pub n_points: usize,
    pub sigma_eps: f64,
    pub lambda1: f64,
    pub eigenvalues: [f64; 4],
    pub methods: Vec<Method>,
    pub base_seed: u64,
    pub rpcs_components: ComponentRule,
    pub fosr_residual_components: ComponentRule,
    pub basis_size: usize,
    pub n_draws: usize,
}

impl Default for PowerStudyConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Tm1,
            cases: vec![1],
            d_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            w_values: vec![0.0, 0.5, 1.0],
            n_replicates: 1000,
            alpha: 0.05,
            n_subjects: DEFAULT_SUBJECTS,
            n_points: DEFAULT_POINTS,
            sigma_eps: DEFAULT_SIGMA_EPS,
            lambda1: TM1_LAMBDA,
            eigenvalues: TM2_EIGENVALUES,
            methods: Method::ALL.to_vec(),
            base_seed: 20_240_601,
            rpcs_components: ComponentRule::Matched,
            fosr_residual_components: ComponentRule::Matched,
            basis_size: DEFAULT_BASIS_SIZE,
            n_draws: powerloss_core::fosr::DEFAULT_DRAWS,
        }
    }
}

impl PowerStudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_replicates == 0 {
            return bad("n_replicates must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.d_values.is_empty() || self.w_values.is_empty() || self.methods.is_empty() {
            return bad("d_values, w_values and methods must be nonempty");
        }
        if self.scenario == Scenario::Tm2 && self.cases.is_empty() {
            return bad("cases must be nonempty for TM2");
        }
        if self.d_values.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("d values must be >= 0");
        }
        if self.w_values.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("w values must lie in [0, 1]");
        }
        if self.n_draws == 0 {
            return bad("n_draws must be >= 1");
        }
        Ok(())
    }

    /// Every (case, d, w) cell in lattice order.
    pub fn cells(&self) -> Vec<Cell> {
        let cases: Vec<u8> = match self.scenario {
            Scenario::Tm1 => vec![0],
            Scenario::Tm2 => self.cases.clone(),
        };
        let mut out = Vec::new();
        for &case in &cases {
            for &d in &self.d_values {
                for &w in &self.w_values {
                    out.push(Cell { case, d, w });
                }
            }
        }
        out
    }
}

/// One point of the parameter lattice. `case` is 0 for TM1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub case: u8,
    pub d: f64,
    pub w: f64,
}

/// Reject flags of one replicate; `None` marks a failed fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplicateOutcome {
    /// Keyed by (method, target coefficient).
    pub flags: BTreeMap<(Method, usize), Option<bool>>,
}

/// Seed of the dataset for replicate `r`. The same seed is used in every
/// cell so that cells are compared on common random numbers.
pub fn replicate_seed(base_seed: u64, replicate: usize) -> u64 {
    substream(base_seed, replicate as u64)
}

/// Seed of the CMA draws for target `q` of a dataset.
pub fn band_seed(dataset_seed: u64, q: usize) -> u64 {
    substream(dataset_seed, 1 + q as u64)
}

pub fn simulate_cell(
    config: &PowerStudyConfig,
    grid: &Arc<Grid>,
    cell: Cell,
    seed: u64,
) -> Result<SyntheticDataset> {
    let sim = match config.scenario {
        Scenario::Tm1 => generate_tm1(&Tm1Config {
            n_subjects: config.n_subjects,
            grid: grid.clone(),
            d: cell.d,
            w: cell.w,
            lambda1: config.lambda1,
            sigma_eps: config.sigma_eps,
            seed,
        })?,
        Scenario::Tm2 => generate_tm2(&Tm2Config {
            n_subjects: config.n_subjects,
            grid: grid.clone(),
            d: cell.d,
            w: cell.w,
            case_id: cell.case,
            eigenvalues: config.eigenvalues,
            sigma_eps: config.sigma_eps,
            beta0: 0.0,
            seed,
        })?,
    };
    Ok(sim)
}

/// Shared, per-study state: the grid and spline basis.
pub struct StudyContext {
    pub grid: Arc<Grid>,
    pub basis: SplineBasis,
}

impl StudyContext {
    pub fn new(config: &PowerStudyConfig) -> Result<Self> {
        let grid = Arc::new(Grid::uniform(config.n_points)?);
        let basis = build_spline_basis(&grid, config.basis_size, DEFAULT_DEGREE)?;
        Ok(Self { grid, basis })
    }
}

/// Runs every requested method on replicate `replicate` of `cell`.
pub fn run_replicate(
    config: &PowerStudyConfig,
    ctx: &StudyContext,
    cell: Cell,
    replicate: usize,
) -> Result<ReplicateOutcome> {
    let seed = replicate_seed(config.base_seed, replicate);
    let sim = simulate_cell(config, &ctx.grid, cell, seed)?;
    let targets = config.scenario.targets();
    let mut outcome = ReplicateOutcome::default();

    if config.methods.contains(&Method::Fosr) {
        let options = FoSROptions {
            residual_selection: config.fosr_residual_components.selection(config.scenario),
            residual_smoothing: Smoothing::Penalized { lambda: 1.0 },
            ..FoSROptions::default()
        };
        let fit = fit_fosr(&sim.data, &ctx.basis, &options)
            .ok()
            .filter(|f| f.converged);
        for &q in targets {
            let flag = fit
                .as_ref()
                .and_then(|f| fosr_reject(f, q, config.alpha, config.n_draws, band_seed(seed, q)));
            outcome.flags.insert((Method::Fosr, q), flag);
        }
    }

    let rpcs_methods: Vec<(Method, Correction)> = [
        (Method::RpcsNone, Correction::None),
        (Method::RpcsBonferroni, Correction::Bonferroni),
    ]
    .into_iter()
    .filter(|(m, _)| config.methods.contains(m))
    .collect();
    if !rpcs_methods.is_empty() {
        let fit = fit_fpca(
            &ctx.grid,
            &sim.data.response,
            config.rpcs_components.selection(config.scenario),
            Smoothing::Off,
        )
        .and_then(|sys| rpcs_regress(&sys.scores, &sim.data.covariates))
        .ok();
        for (method, correction) in rpcs_methods {
            for &q in targets {
                let flag = fit.as_ref().and_then(|f| {
                    rpcs_joint_test(f, q, config.alpha, correction)
                        .ok()
                        .map(|t| t.reject)
                });
                outcome.flags.insert((method, q), flag);
            }
        }
    }
    Ok(outcome)
}

fn fosr_reject(
    fit: &powerloss_core::fosr::FoSRFit,
    q: usize,
    alpha: f64,
    n_draws: usize,
    seed: u64,
) -> Option<bool> {
    cma_band(fit, q, alpha, n_draws, seed)
        .ok()
        .and_then(|b| b.simultaneous)
        .map(|s| s.global_p < alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub scenario: Scenario,
    pub case: u8,
    pub d: f64,
    pub w: f64,
    pub method: Method,
    pub target: usize,
    pub rejections: usize,
    /// Replicates with a usable result; the power denominator.
    pub n_replicates: usize,
    pub n_failed: usize,
    pub power: f64,
    pub mc_se: f64,
}

impl PowerRow {
    pub fn new(
        scenario: Scenario,
        cell: Cell,
        method: Method,
        target: usize,
        rejections: usize,
        n_replicates: usize,
        n_failed: usize,
    ) -> Self {
        let (power, mc_se) = if n_replicates == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let p = rejections as f64 / n_replicates as f64;
            (p, (p * (1.0 - p) / n_replicates as f64).sqrt())
        };
        Self {
            scenario,
            case: cell.case,
            d: cell.d,
            w: cell.w,
            method,
            target,
            rejections,
            n_replicates,
            n_failed,
            power,
            mc_se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
}

impl PowerTable {
    pub fn find(
        &self,
        case: u8,
        d: f64,
        w: f64,
        method: Method,
        target: usize,
    ) -> Option<&PowerRow> {
        self.rows.iter().find(|r| {
            r.case == case && r.d == d && r.w == w && r.method == method && r.target == target
        })
    }
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t.max(1));
    }
    b.build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Sweeps the whole lattice. The table depends only on the configuration,
/// never on `threads`.
pub fn run_power_study(config: &PowerStudyConfig, threads: Option<usize>) -> Result<PowerTable> {
    config.validate()?;
    let ctx = StudyContext::new(config)?;
    let cells = config.cells();
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..config.n_replicates).map(move |r| (c, r)))
        .collect();
    let pool = thread_pool(threads)?;
    let outcomes: Vec<ReplicateOutcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, r)| run_replicate(config, &ctx, cells[c], r))
            .collect::<Result<_>>()
    })?;

    let mut rows = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let cell_out = &outcomes[c * config.n_replicates..(c + 1) * config.n_replicates];
        for &method in &config.methods {
            for &q in config.scenario.targets() {
                let mut rej = 0;
                let mut valid = 0;
                let mut failed = 0;
                for o in cell_out {
                    match o.flags.get(&(method, q)).copied().flatten() {
                        Some(true) => {
                            rej += 1;
                            valid += 1;
                        }
                        Some(false) => valid += 1,
                        None => failed += 1,
                    }
                }
                rows.push(PowerRow::new(
                    config.scenario,
                    *cell,
                    method,
                    q,
                    rej,
                    valid,
                    failed,
                ));
            }
        }
    }
    Ok(PowerTable { rows })
}

/// Dimensions a power table can be grouped by.
pub const GROUP_KEYS: [&str; 6] = ["scenario", "case", "d", "w", "method", "target"];

fn key_value(row: &PowerRow, key: &str) -> String {
    match key {
        "scenario" => row.scenario.name().to_string(),
        "case" => row.case.to_string(),
        "d" => row.d.to_string(),
        "w" => row.w.to_string(),
        "method" => row.method.name().to_string(),
        "target" => row.target.to_string(),
        _ => unreachable!("validated key"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub key: Vec<(String, String)>,
    pub n_rows: usize,
    pub mean_power: f64,
    /// Standard error of the mean power, treating rows as independent.
    pub mc_se: f64,
}

/// A drop in power between adjacent effect sizes larger than two joint
/// Monte Carlo standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityFlag {
    pub scenario: Scenario,
    pub case: u8,
    pub w: f64,
    pub method: Method,
    pub target: usize,
    pub d_from: f64,
    pub d_to: f64,
    pub drop: f64,
    pub joint_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub flags: Vec<MonotonicityFlag>,
}

pub fn summarize(table: &PowerTable, by: &[&str]) -> Result<Summary> {
    if table.rows.is_empty() {
        return Err(Error::Config("cannot summarize an empty table".into()));
    }
    if let Some(k) = by.iter().find(|k| !GROUP_KEYS.contains(k)) {
        return Err(Error::UnknownKey(k.to_string()));
    }
    let mut groups: Vec<(Vec<(String, String)>, Vec<&PowerRow>)> = Vec::new();
    for row in &table.rows {
        let key: Vec<(String, String)> = by
            .iter()
            .map(|k| (k.to_string(), key_value(row, k)))
            .collect();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    let rows = groups
        .into_iter()
        .map(|(key, rows)| {
            let n = rows.len() as f64;
            SummaryRow {
                n_rows: rows.len(),
                mean_power: rows.iter().map(|r| r.power).sum::<f64>() / n,
                mc_se: rows.iter().map(|r| r.mc_se * r.mc_se).sum::<f64>().sqrt() / n,
                key,
            }
        })
        .collect();

    let mut flags = Vec::new();
    let mut series: Vec<((Scenario, u8, u64, Method, usize), Vec<&PowerRow>)> = Vec::new();
    for row in &table.rows {
        let k = (
            row.scenario,
            row.case,
            row.w.to_bits(),
            row.method,
            row.target,
        );
        match series.iter_mut().find(|(sk, _)| *sk == k) {
            Some((_, v)) => v.push(row),
            None => series.push((k, vec![row])),
        }
    }
    for (_, mut rows) in series {
        rows.sort_by(|a, b| a.d.total_cmp(&b.d));
        for pair in rows.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let joint = (a.mc_se * a.mc_se + b.mc_se * b.mc_se).sqrt();
            let drop = a.power - b.power;
            if drop > 2.0 * joint {
                flags.push(MonotonicityFlag {
                    scenario: a.scenario,
                    case: a.case,
                    w: a.w,
                    method: a.method,
                    target: a.target,
                    d_from: a.d,
                    d_to: b.d,
                    drop,
                    joint_se: joint,
                });
            }
        }
    }
    Ok(Summary { rows, flags })
}
