//! Scenario harness: simulate, fit along an `eps` sweep, score each fit by
//! its exact population risk, and summarize rates.
//!
//! Every cell `(group, n, replicate)` draws from its own derived seed, so a
//! report depends only on the config and never on scheduling.

use nalgebra::DVector;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::complexity::{
    approximate_dimension, local_dimensions, partition_diagnostics, s_complexity, ApproxDimension,
    PartitionDiagnostics,
};
use crate::covariance::{gram_matrix_with_mean, GramModel, KernelSpec};
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::grid::{
    build_uniform_grid, build_uniform_grid_nd, canonical_subgradient, dominant_set, weighted_l1_norm, Grid,
    GridFunction, MeasureKind, NoiseKind, OracleSpec,
};
use crate::sampler::{derive_seed, rng_for, sample_design, simulate, Driver};
use crate::solver::{excess_risk, fit_path, fit_population, theta_of, LassoProblem, SolverOptions};
use crate::sparsity::{alignment_coefficient, rkhs_norm, spike_subgradient, SpikeStyle};

const STREAM_ORACLE: u64 = 0x6f72_6163;
const STREAM_CANDIDATES: u64 = 0x6361_6e64;

pub const DEFAULT_D_SWEEP: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    RateSweep,
    SpikeSeparation,
    Partition,
    StationaryGrid,
    VerifyApprox,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::RateSweep => "rate_sweep",
            Scenario::SpikeSeparation => "spike_separation",
            Scenario::Partition => "partition",
            Scenario::StationaryGrid => "stationary_grid",
            Scenario::VerifyApprox => "verify_approx",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    /// Number of points (per axis when `dim > 1`).
    pub n: usize,
    #[serde(default = "unit_interval")]
    pub interval: [f64; 2],
    #[serde(default = "one_usize")]
    pub dim: usize,
    #[serde(default = "lebesgue")]
    pub measure: MeasureKind,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        if self.dim == 1 {
            build_uniform_grid(self.n, self.interval, self.measure)
        } else {
            build_uniform_grid_nd(self.n, self.interval, self.dim, self.measure)
        }
    }
}

/// True slope. Spike and dense magnitudes are masses `theta_t = mu_t lambda_t`
/// per point for spikes, and `lambda_t` itself for the dense oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleConfig {
    Zero,
    /// `s` alternating-sign spikes with the given separation. One-dimensional
    /// grids get equispaced spikes centered in the interval; higher
    /// dimensions get seeded random positions at least `separation` apart.
    Spikes {
        s: usize,
        separation: f64,
        #[serde(default = "one_f64")]
        magnitude: f64,
    },
    /// Random signs at every point, `|lambda_t| = amplitude`.
    Dense {
        #[serde(default = "one_f64")]
        amplitude: f64,
    },
    Values {
        slope: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonRule {
    /// The values listed in `epsilons`.
    Fixed,
    /// `D sigma_Y S(T) sqrt(s_bar / n)` with `s_bar = s + 3 ln(log2 n + 2) + 3`.
    Sparse,
    /// `D sigma_Y S(T) / sqrt(n)`.
    SlowRate,
    /// `D sigma_Y sqrt(s / n)` with `s` the number of oracle spikes.
    Stationary,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub max_iters: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: default_tol(),
            max_iters: None,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iters: self.max_iters,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    pub grid: GridConfig,
    pub oracle: OracleConfig,
    #[serde(default)]
    pub intercept: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub noise_kind: NoiseKind,
    #[serde(default)]
    pub driver: Driver,
    #[serde(default)]
    pub n_list: Vec<usize>,
    pub epsilon_rule: EpsilonRule,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_d_sweep")]
    pub d_sweep: Vec<f64>,
    #[serde(default = "one_usize")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Confidence parameter `s` entering `s_bar` of the sparse rule.
    #[serde(default = "one_f64")]
    pub confidence: f64,
    #[serde(default = "one_f64")]
    pub l_const: f64,
    /// Spike separations swept by `spike_separation`.
    #[serde(default)]
    pub separations: Vec<f64>,
    /// Random candidate triples per `eps` for `verify_approx`.
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_b")]
    pub alignment_b: f64,
    /// Skip alignment coefficients in the spike table (they dominate runtime
    /// on large grids).
    #[serde(default)]
    pub skip_alignment: bool,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn unit_interval() -> [f64; 2] {
    [0.0, 1.0]
}
fn one_usize() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn lebesgue() -> MeasureKind {
    MeasureKind::Lebesgue
}
fn default_tol() -> f64 {
    1e-8
}
fn default_d_sweep() -> Vec<f64> {
    DEFAULT_D_SWEEP.to_vec()
}
fn default_candidates() -> usize {
    100
}
fn default_b() -> f64 {
    16.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.replicates == 0 {
            return invalid("replicates must be at least 1");
        }
        if self.scenario != Scenario::VerifyApprox {
            if self.n_list.is_empty() {
                return invalid("n_list must not be empty");
            }
            if self.n_list.windows(2).any(|w| w[1] <= w[0]) || self.n_list[0] == 0 {
                return invalid("n_list must be positive and strictly increasing");
            }
        }
        match self.epsilon_rule {
            EpsilonRule::Fixed if self.epsilons.is_empty() => return invalid("fixed rule needs epsilons"),
            EpsilonRule::Fixed => {}
            _ if self.d_sweep.is_empty() => return invalid("d_sweep must not be empty"),
            _ => {}
        }
        if self.epsilons.iter().chain(&self.d_sweep).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return invalid("epsilons and D values must be finite and nonnegative");
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return invalid("noise_sd must be finite and nonnegative");
        }
        if self.scenario == Scenario::SpikeSeparation {
            if self.separations.is_empty() {
                return invalid("spike_separation needs separations");
            }
            if !matches!(self.oracle, OracleConfig::Spikes { .. }) {
                return invalid("spike_separation needs a spikes oracle");
            }
        }
        if self.scenario == Scenario::Partition && !matches!(self.kernel, KernelSpec::Block { .. }) {
            return invalid("partition scenario needs a block kernel");
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<GramModel> {
        gram_matrix_with_mean(&self.kernel, &self.grid.build()?, self.mean.clone())
    }

    /// The oracle, with the spike separation optionally overridden.
    pub fn build_oracle(&self, model: &GramModel, separation: Option<f64>) -> Result<OracleSpec> {
        build_oracle(
            &self.oracle,
            model,
            self.intercept,
            self.noise_sd,
            self.noise_kind,
            self.seed,
            separation,
        )
    }
}

/// Model-only configuration shared by the `gram`, `simulate`, `diagnose`
/// and `complexity` commands. Experiment configs parse as this too.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kernel: KernelSpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub noise_kind: NoiseKind,
    #[serde(default)]
    pub driver: Driver,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn build_model(&self) -> Result<GramModel> {
        self.kernel.validate()?;
        gram_matrix_with_mean(&self.kernel, &self.grid.build()?, self.mean.clone())
    }

    /// The configured oracle, or a zero slope when none is given.
    pub fn build_oracle(&self, model: &GramModel) -> Result<OracleSpec> {
        let zero = OracleConfig::Zero;
        build_oracle(
            self.oracle.as_ref().unwrap_or(&zero),
            model,
            self.intercept,
            self.noise_sd,
            self.noise_kind,
            self.seed,
            None,
        )
    }
}

pub fn build_oracle(
    cfg: &OracleConfig,
    model: &GramModel,
    intercept: f64,
    noise_sd: f64,
    noise_kind: NoiseKind,
    seed: u64,
    separation: Option<f64>,
) -> Result<OracleSpec> {
    let grid = model.grid();
    let n = grid.len();
    let slope = match cfg {
        OracleConfig::Zero => GridFunction::zeros(n),
        OracleConfig::Values { slope } => {
            crate::error::check_len(n, slope.len())?;
            GridFunction::new(slope.clone())?
        }
        OracleConfig::Dense { amplitude } => {
            let mut rng = rng_for(seed, &[STREAM_ORACLE]);
            GridFunction::new(
                (0..n)
                    .map(|_| if rng.random::<bool>() { *amplitude } else { -*amplitude })
                    .collect(),
            )?
        }
        OracleConfig::Spikes { s, separation: sep, magnitude } => {
            let sep = separation.unwrap_or(*sep);
            let idx = spike_positions(grid, *s, sep, seed)?;
            let mut v = vec![0.0; n];
            for (j, &i) in idx.iter().enumerate() {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                v[i] = sign * magnitude / grid.weights()[i];
            }
            GridFunction::new(v)?
        }
    };
    OracleSpec::new(slope, intercept, noise_sd, noise_kind)
}

/// Grid indices of `s` spikes at least `separation` apart.
pub fn spike_positions(grid: &Grid, s: usize, separation: f64, seed: u64) -> Result<Vec<usize>> {
    let n = grid.len();
    if s == 0 || s > n {
        return invalid(format!("cannot place {s} spikes on {n} points"));
    }
    if grid.dim() == 1 {
        let c = grid.coords();
        let h = if n > 1 { (c[n - 1] - c[0]) / (n - 1) as f64 } else { 1.0 };
        let step = ((separation / h).round() as usize).max(1);
        let span = (s - 1) * step;
        if span >= n {
            return invalid(format!("{s} spikes {separation} apart do not fit on the grid"));
        }
        let start = (n - 1 - span) / 2;
        return Ok((0..s).map(|j| start + j * step).collect());
    }
    let mut rng = rng_for(seed, &[STREAM_ORACLE, 1]);
    let mut out: Vec<usize> = Vec::with_capacity(s);
    for _ in 0..100_000 {
        if out.len() == s {
            break;
        }
        let i = rng.random_range(0..n);
        let far = out.iter().all(|&j| {
            let d2: f64 = grid.point(i).iter().zip(grid.point(j)).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= separation
        });
        if far {
            out.push(i);
        }
    }
    if out.len() < s {
        return Err(Error::Infeasible(format!("could not place {s} spikes {separation} apart")));
    }
    out.sort_unstable();
    Ok(out)
}

/// `Var(Y) = theta*^T K theta* + sigma_xi^2`.
pub fn response_sd(model: &GramModel, oracle: &OracleSpec) -> f64 {
    let theta = theta_of(&oracle.slope, model.grid());
    (theta.dot(&(model.k() * &theta)).max(0.0) + oracle.noise_sd * oracle.noise_sd).sqrt()
}

/// `int_{T \ T_w} |lambda| d mu`.
pub fn leakage(lambda: &GridFunction, w: &GridFunction, grid: &Grid) -> Result<f64> {
    let on = dominant_set(w)?;
    let mut inside = vec![false; lambda.len()];
    for i in on {
        inside[i] = true;
    }
    Ok(lambda
        .values()
        .iter()
        .zip(grid.weights())
        .zip(&inside)
        .filter(|(_, &t)| !t)
        .map(|((l, m), _)| l.abs() * m)
        .sum())
}

/// Subgradient used to measure leakage: interpolating for 1-d spikes,
/// canonical otherwise.
pub fn reference_subgradient(grid: &Grid, oracle: &OracleSpec) -> Result<GridFunction> {
    let support = oracle.slope.support();
    if grid.dim() == 1 && !support.is_empty() && support.len() < grid.len() / 2 {
        spike_subgradient(grid, &oracle.slope, SpikeStyle::Interpolating)
    } else {
        canonical_subgradient(&oracle.slope, None)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub scenario: String,
    pub n: usize,
    pub epsilon: f64,
    pub replicate: usize,
    pub risk: f64,
    pub l1: f64,
    pub leakage: f64,
    pub iters: usize,
    pub converged: bool,
    #[serde(skip)]
    pub setting: usize,
    #[serde(skip)]
    pub d: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SettingSummary {
    pub setting: usize,
    /// `D` for rule-based settings; `None` for fixed `eps`.
    pub d: Option<f64>,
    pub epsilon: Vec<(usize, f64)>,
    pub median_risk: Vec<(usize, f64)>,
    pub slope: Option<f64>,
    pub stderr: Option<f64>,
    /// Mean over `n` of `log(median risk)`; the smallest wins.
    pub score: f64,
    pub nonconverged: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupSummary {
    pub label: String,
    pub settings: Vec<SettingSummary>,
    pub best_setting: usize,
    pub slope: Option<f64>,
    pub stderr: Option<f64>,
}

impl GroupSummary {
    pub fn best(&self) -> &SettingSummary {
        &self.settings[self.best_setting]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpikeRow {
    pub separation: f64,
    pub w_interp_norm: f64,
    pub w_canonical_norm: f64,
    pub alignment: Option<f64>,
    /// Median risk at the largest `n` under the group's best setting.
    pub median_risk: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionSummary {
    pub diagnostics: PartitionDiagnostics,
    pub approx_dim: ApproxDimension,
    pub local_dims: Vec<usize>,
    pub local_dims_sum: usize,
    pub alignment: f64,
    /// `beta * sqrt(sum_j ||w_j||^2_{K_j})` when the beta bound is finite.
    pub alignment_bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutcome {
    pub epsilon: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub leakage: f64,
    pub leakage_bound: f64,
    pub leakage_margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationSummary {
    pub cells: usize,
    pub passed: usize,
    pub min_margin: f64,
    pub min_leakage_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub sigma_y: f64,
    pub s_t: f64,
    pub groups: Vec<GroupSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spike_table: Option<Vec<SpikeRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationSummary>,
    #[serde(skip)]
    pub rows: Vec<Row>,
}

struct Group {
    label: String,
    oracle: OracleSpec,
    w: GridFunction,
    sigma_y: f64,
    spikes: usize,
}

pub fn run_scenario(config: &ExperimentConfig, exec: Execution) -> Result<ExperimentReport> {
    config.validate()?;
    let model = config.build_model()?;
    if config.scenario == Scenario::VerifyApprox {
        return run_verification(config, &model, exec);
    }
    let s_t = s_complexity(&model, config.l_const);
    let separations: Vec<Option<f64>> = if config.scenario == Scenario::SpikeSeparation {
        config.separations.iter().map(|&s| Some(s)).collect()
    } else {
        vec![None]
    };
    let mut groups = Vec::new();
    for sep in &separations {
        let oracle = config.build_oracle(&model, *sep)?;
        let label = match sep {
            Some(s) => format!("{}/{s}", config.scenario.name()),
            None => config.scenario.name().to_string(),
        };
        groups.push(Group {
            label,
            w: reference_subgradient(model.grid(), &oracle)?,
            sigma_y: response_sd(&model, &oracle),
            spikes: oracle.slope.support().len(),
            oracle,
        });
    }
    let settings: Vec<Option<f64>> = match config.epsilon_rule {
        EpsilonRule::Fixed => vec![None; config.epsilons.len()],
        _ => config.d_sweep.iter().map(|&d| Some(d)).collect(),
    };
    let epsilon_of = |g: &Group, setting: usize, n: usize| -> f64 {
        let nf = n as f64;
        match (config.epsilon_rule, settings[setting]) {
            (EpsilonRule::Fixed, _) | (_, None) => config.epsilons[setting],
            (EpsilonRule::Sparse, Some(d)) => {
                let s_bar = config.confidence + 3.0 * (nf.log2() + 2.0).ln() + 3.0;
                d * g.sigma_y * s_t * (s_bar / nf).sqrt()
            }
            (EpsilonRule::SlowRate, Some(d)) => d * g.sigma_y * s_t / nf.sqrt(),
            (EpsilonRule::Stationary, Some(d)) => d * g.sigma_y * (g.spikes.max(1) as f64 / nf).sqrt(),
        }
    };
    let cells: Vec<(usize, usize, usize)> = (0..groups.len())
        .flat_map(|g| {
            config
                .n_list
                .iter()
                .flat_map(move |&n| (0..config.replicates).map(move |r| (g, n, r)))
        })
        .collect();
    let options = config.solver.options();
    let results = exec.map(cells.len(), |c| -> Result<Vec<Row>> {
        let (gi, n, rep) = cells[c];
        let g = &groups[gi];
        let seed = derive_seed(config.seed, &[gi as u64, n as u64, rep as u64]);
        let sample = simulate(&model, &g.oracle, n, config.driver, seed, Execution::Serial)?;
        let eps: Vec<f64> = (0..settings.len()).map(|s| epsilon_of(g, s, n)).collect();
        let mut order: Vec<usize> = (0..eps.len()).collect();
        order.sort_by(|&a, &b| eps[b].total_cmp(&eps[a]));
        let sorted: Vec<f64> = order.iter().map(|&i| eps[i]).collect();
        let problem = LassoProblem::empirical(&sample, model.grid(), sorted[0], options)?;
        let fits = fit_path(&problem, &sorted)?;
        let mut rows: Vec<Option<Row>> = vec![None; eps.len()];
        for (fit, &setting) in fits.iter().zip(&order) {
            rows[setting] = Some(Row {
                scenario: g.label.clone(),
                n,
                epsilon: eps[setting],
                replicate: rep,
                risk: excess_risk(&fit.slope, fit.intercept, &model, &g.oracle)?,
                l1: weighted_l1_norm(&fit.slope, model.grid())?,
                leakage: leakage(&fit.slope, &g.w, model.grid())?,
                iters: fit.iterations,
                converged: fit.converged,
                setting,
                d: settings[setting],
            });
        }
        Ok(rows.into_iter().flatten().collect())
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let summaries: Vec<GroupSummary> = groups
        .iter()
        .map(|g| summarize_group(&g.label, &rows, &settings, &config.n_list))
        .collect();
    let mut report = ExperimentReport {
        config: config.clone(),
        sigma_y: groups[0].sigma_y,
        s_t,
        groups: summaries,
        spike_table: None,
        partition: None,
        verification: None,
        rows,
    };
    match config.scenario {
        Scenario::SpikeSeparation => {
            let mut table = Vec::new();
            for (g, summary) in groups.iter().zip(&report.groups) {
                let mut row = spike_norms(&model, &g.oracle, !config.skip_alignment, config.alignment_b)?;
                row.separation = separations_value(g, config);
                row.median_risk = summary.best().median_risk.last().map(|p| p.1);
                table.push(row);
            }
            report.spike_table = Some(table);
        }
        Scenario::Partition => {
            let g = &groups[0];
            let n = *config.n_list.last().unwrap_or(&1);
            report.partition = Some(partition_summary(&model, g, n, config)?);
        }
        _ => {}
    }
    Ok(report)
}

fn separations_value(g: &Group, config: &ExperimentConfig) -> f64 {
    g.label
        .rsplit('/')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(match config.oracle {
            OracleConfig::Spikes { separation, .. } => separation,
            _ => f64::NAN,
        })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn summarize_group(label: &str, rows: &[Row], settings: &[Option<f64>], n_list: &[usize]) -> GroupSummary {
    let mut out = Vec::with_capacity(settings.len());
    for (s, d) in settings.iter().enumerate() {
        let mine: Vec<&Row> = rows.iter().filter(|r| r.scenario == label && r.setting == s).collect();
        let mut eps = Vec::new();
        let mut med = Vec::new();
        for &n in n_list {
            let cell: Vec<&&Row> = mine.iter().filter(|r| r.n == n).collect();
            if let Some(r) = cell.first() {
                eps.push((n, r.epsilon));
            }
            med.push((n, median(cell.iter().map(|r| r.risk).collect())));
        }
        let ns: Vec<f64> = med.iter().map(|p| p.0 as f64).collect();
        let rs: Vec<f64> = med.iter().map(|p| p.1).collect();
        let (slope, stderr) = match fit_rate_slope(&ns, &rs) {
            Ok((a, b)) => (Some(a), Some(b)),
            Err(_) => (None, None),
        };
        let score = rs.iter().map(|r| r.max(f64::MIN_POSITIVE).ln()).sum::<f64>() / rs.len().max(1) as f64;
        out.push(SettingSummary {
            setting: s,
            d: *d,
            epsilon: eps,
            median_risk: med,
            slope,
            stderr,
            score,
            nonconverged: mine.iter().filter(|r| !r.converged).count(),
        });
    }
    let best = out
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.score.total_cmp(&b.1.score))
        .map(|(i, _)| i)
        .unwrap_or(0);
    GroupSummary {
        label: label.to_string(),
        slope: out.get(best).and_then(|s| s.slope),
        stderr: out.get(best).and_then(|s| s.stderr),
        settings: out,
        best_setting: best,
    }
}

/// Least-squares slope of `log risk` against `log n`, with a jackknife
/// standard error.
pub fn fit_rate_slope(ns: &[f64], risks: &[f64]) -> Result<(f64, f64)> {
    if ns.len() != risks.len() {
        return Err(Error::SizeMismatch {
            expected: ns.len(),
            got: risks.len(),
        });
    }
    if ns.len() < 3 {
        return invalid("rate fit needs at least 3 sample sizes");
    }
    if ns.iter().chain(risks).any(|v| !(*v > 0.0 && v.is_finite())) {
        return invalid("rate fit needs positive finite n and risk values");
    }
    let x: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = risks.iter().map(|v| v.ln()).collect();
    let ls = |skip: Option<usize>| -> f64 {
        let idx: Vec<usize> = (0..x.len()).filter(|&i| Some(i) != skip).collect();
        let k = idx.len() as f64;
        let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / k;
        let my = idx.iter().map(|&i| y[i]).sum::<f64>() / k;
        let sxy: f64 = idx.iter().map(|&i| (x[i] - mx) * (y[i] - my)).sum();
        let sxx: f64 = idx.iter().map(|&i| (x[i] - mx).powi(2)).sum();
        sxy / sxx
    };
    let slope = ls(None);
    let k = x.len() as f64;
    let loo: Vec<f64> = (0..x.len()).map(|i| ls(Some(i))).collect();
    let mean = loo.iter().sum::<f64>() / k;
    let var = (k - 1.0) / k * loo.iter().map(|s| (s - mean).powi(2)).sum::<f64>();
    if !slope.is_finite() {
        return invalid("sample sizes must be distinct");
    }
    Ok((slope, var.sqrt()))
}

/// RKHS norms of the interpolating and canonical subgradients of a spike
/// oracle, and optionally the alignment coefficient of the former.
pub fn spike_norms(model: &GramModel, oracle: &OracleSpec, with_alignment: bool, b: f64) -> Result<SpikeRow> {
    let grid = model.grid();
    let interp = spike_subgradient(grid, &oracle.slope, SpikeStyle::Interpolating)?;
    let canon = canonical_subgradient(&oracle.slope, None)?;
    let alignment = if with_alignment {
        Some(alignment_coefficient(model, &interp, b, 1e-8)?.value)
    } else {
        None
    };
    Ok(SpikeRow {
        separation: f64::NAN,
        w_interp_norm: rkhs_norm(model, &interp)?,
        w_canonical_norm: rkhs_norm(model, &canon)?,
        alignment,
        median_risk: None,
    })
}

/// Spike-separation sweep: norms, alignment and risk per separation.
pub fn run_spike_separation(config: &ExperimentConfig, exec: Execution) -> Result<Vec<SpikeRow>> {
    if config.scenario != Scenario::SpikeSeparation {
        return invalid("config is not a spike_separation scenario");
    }
    Ok(run_scenario(config, exec)?.spike_table.unwrap_or_default())
}

fn partition_summary(model: &GramModel, g: &Group, n: usize, config: &ExperimentConfig) -> Result<PartitionSummary> {
    let parts = model.partition().map(|p| p.to_vec()).unwrap_or_else(|| vec![0..model.len()]);
    let lam = &g.oracle.slope;
    let w = canonical_subgradient(lam, None)?;
    let diagnostics = partition_diagnostics(model, &parts, lam, &w, config.alignment_b, 2000, config.seed)?;
    let approx_dim = approximate_dimension(&w, lam, g.sigma_y.max(f64::MIN_POSITIVE), n, model)?;
    let local_dims = local_dimensions(&w, lam, g.sigma_y.max(f64::MIN_POSITIVE), n, model, &parts)?;
    let alignment = match alignment_coefficient(model, &w, config.alignment_b, 1e-8) {
        Ok(a) => a.value,
        Err(Error::Infeasible(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let block_norm_sq: f64 = parts
        .iter()
        .map(|r| {
            let idx: Vec<usize> = r.clone().collect();
            let kj = crate::linalg::principal_submatrix(model.k(), &idx);
            let wj: Vec<f64> = idx.iter().map(|&i| w.values()[i]).collect();
            crate::sparsity::rkhs_norm_matrix(&kj, &wj).map(|v| v * v)
        })
        .sum::<Result<f64>>()?;
    Ok(PartitionSummary {
        alignment_bound: diagnostics.beta_bound.map(|b| b * block_norm_sq.sqrt()),
        local_dims_sum: local_dims.iter().sum(),
        diagnostics,
        approx_dim,
        local_dims,
        alignment,
    })
}

/// A candidate `(lambda, w, a)` with `w` in the subdifferential of `||lambda||_1`.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub lambda: GridFunction,
    pub w: GridFunction,
    pub a: f64,
}

/// Random candidates: sparse `lambda` with up to 4 atoms, a random fill of
/// the subgradient off the support, and a perturbed intercept. The first
/// candidate is the oracle itself when its slope is nonzero.
pub fn random_candidates(model: &GramModel, oracle: &OracleSpec, count: usize, seed: u64) -> Result<Vec<Candidate>> {
    let n = model.len();
    let mut out = Vec::with_capacity(count);
    if count > 0 && !oracle.slope.is_zero() {
        out.push(Candidate {
            lambda: oracle.slope.clone(),
            w: canonical_subgradient(&oracle.slope, None)?,
            a: oracle.intercept,
        });
    }
    let mass = model.grid().total_mass() / n as f64;
    while out.len() < count {
        let mut rng = rng_for(seed, &[STREAM_CANDIDATES, out.len() as u64]);
        let k = rng.random_range(1..=4.min(n));
        let mut v = vec![0.0; n];
        for i in sample_indices(&mut rng, n, k) {
            v[i] = rng.sample::<f64, _>(StandardNormal) * 2.0 / mass;
        }
        let lambda = GridFunction::new(v)?;
        let fill = GridFunction::new((0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())?;
        let w = canonical_subgradient(&lambda, Some(&fill))?;
        let a = oracle.intercept + 0.5 * rng.sample::<f64, _>(StandardNormal);
        out.push(Candidate { lambda, w, a });
    }
    Ok(out)
}

/// Checks `||f_eps - f*||^2 <= ||f_{lambda,a} - f*||^2 + eps^2 a^(b)(w)^2 / 4`
/// and the companion leakage bound `int_{T \ T_w} |lambda_eps| <= (4/eps) RHS`
/// for each candidate, against the population solution at `eps`.
///
/// A numerical slack of `1e-9 (1 + RHS)` absorbs solver tolerance.
pub fn verify_approx_theorem(
    model: &GramModel,
    oracle: &OracleSpec,
    epsilon: f64,
    candidates: &[Candidate],
    b: f64,
    options: SolverOptions,
) -> Result<(Vec<VerifyOutcome>, crate::solver::LassoFit)> {
    if model.len() > 64 {
        return invalid("verification is limited to grids of at most 64 points");
    }
    let fit = fit_population(model, oracle, epsilon, options)?;
    let lhs = excess_risk(&fit.slope, fit.intercept, model, oracle)?;
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let approx = excess_risk(&c.lambda, c.a, model, oracle)?;
        // an empty cone leaves only u = 0, so the supremum is 0
        let align = match alignment_coefficient(model, &c.w, b, 1e-10) {
            Ok(r) => r.value,
            Err(Error::Infeasible(_)) => 0.0,
            Err(e) => return Err(e),
        };
        let rhs = approx + 0.25 * epsilon * epsilon * align * align;
        let leak = leakage(&fit.slope, &c.w, model.grid())?;
        let leak_bound = if epsilon > 0.0 { 4.0 * rhs / epsilon } else { f64::INFINITY };
        let slack = 1e-9 * (1.0 + rhs);
        let margin = rhs - lhs;
        let leakage_margin = leak_bound - leak;
        out.push(VerifyOutcome {
            epsilon,
            lhs,
            rhs,
            margin,
            leakage: leak,
            leakage_bound: leak_bound,
            leakage_margin,
            pass: margin >= -slack && leakage_margin >= -slack * 4.0 / epsilon.max(1e-300),
        });
    }
    Ok((out, fit))
}

fn run_verification(config: &ExperimentConfig, model: &GramModel, exec: Execution) -> Result<ExperimentReport> {
    let oracle = config.build_oracle(model, None)?;
    let epsilons = if config.epsilons.is_empty() {
        vec![0.01, 0.1, 1.0]
    } else {
        config.epsilons.clone()
    };
    let candidates = random_candidates(model, &oracle, config.candidates, config.seed)?;
    let options = config.solver.options();
    let results = exec.map(epsilons.len(), |i| {
        verify_approx_theorem(model, &oracle, epsilons[i], &candidates, config.alignment_b, options)
    });
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (res, fit) = r?;
        for (j, o) in res.iter().enumerate() {
            rows.push(Row {
                scenario: Scenario::VerifyApprox.name().to_string(),
                n: 0,
                epsilon: epsilons[i],
                replicate: j,
                risk: o.lhs,
                l1: weighted_l1_norm(&fit.slope, model.grid())?,
                leakage: o.leakage,
                iters: fit.iterations,
                converged: fit.converged,
                setting: i,
                d: None,
            });
        }
        outcomes.extend(res);
    }
    let verification = VerificationSummary {
        cells: outcomes.len(),
        passed: outcomes.iter().filter(|o| o.pass).count(),
        min_margin: outcomes.iter().map(|o| o.margin).fold(f64::INFINITY, f64::min),
        min_leakage_margin: outcomes.iter().map(|o| o.leakage_margin).fold(f64::INFINITY, f64::min),
    };
    Ok(ExperimentReport {
        config: config.clone(),
        sigma_y: response_sd(model, &oracle),
        s_t: s_complexity(model, config.l_const),
        groups: vec![],
        spike_table: None,
        partition: None,
        verification: Some(verification),
        rows,
    })
}

/// Monte Carlo estimate of `||f_{lambda,a} - f*||^2_{L2(Pi)}` from fresh
/// design draws, with its standard error.
pub fn mc_excess_risk(
    lambda: &GridFunction,
    a: f64,
    model: &GramModel,
    oracle: &OracleSpec,
    draws: usize,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64)> {
    let grid = model.grid();
    let x = sample_design(model, draws, Driver::Gaussian, seed, exec)?;
    let d: DVector<f64> = theta_of(lambda, grid) - theta_of(&oracle.slope, grid);
    let diff = (&x * d).add_scalar(a - oracle.intercept);
    let sq: Vec<f64> = diff.iter().map(|v| v * v).collect();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(scenario: Scenario) -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "scenario": scenario,
            "kernel": {"kind": "brownian_released"},
            "grid": {"n": 32},
            "oracle": {"kind": "spikes", "s": 2, "separation": 0.25},
            "noise_sd": 0.3,
            "n_list": [50, 100, 200],
            "epsilon_rule": "sparse",
            "d_sweep": [0.1, 0.5],
            "replicates": 3,
            "seed": 11
        }))
        .unwrap()
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let ns = [100.0, 200.0, 400.0, 800.0];
        let (s, e) = fit_rate_slope(&ns, &ns.map(|n| 3.0 / n)).unwrap();
        assert!((s + 1.0).abs() < 1e-6 && e < 1e-6);
        let (s, _) = fit_rate_slope(&ns, &ns.map(|n| 2.0 / n.sqrt())).unwrap();
        assert!((s + 0.5).abs() < 1e-6);
        assert!(fit_rate_slope(&ns[..2], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn spikes_are_centered_and_separated() {
        let grid = build_uniform_grid(257, [0.0, 1.0], MeasureKind::Lebesgue).unwrap();
        let idx = spike_positions(&grid, 4, 1.0 / 16.0, 0).unwrap();
        assert_eq!(idx, vec![104, 120, 136, 152]);
        assert!(spike_positions(&grid, 4, 0.5, 0).is_err());
        let g2 = build_uniform_grid_nd(12, [0.0, 1.0], 2, MeasureKind::Lebesgue).unwrap();
        let idx = spike_positions(&g2, 3, 0.3, 5).unwrap();
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn report_is_reproducible_and_complete() {
        let cfg = base(Scenario::RateSweep);
        let a = run_scenario(&cfg, Execution::Parallel).unwrap();
        let b = run_scenario(&cfg, Execution::Serial).unwrap();
        assert_eq!(a.rows.len(), 3 * 3 * 2);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.risk.to_bits(), y.risk.to_bits());
            assert_eq!(x.iters, y.iters);
        }
        assert!(a.rows.iter().all(|r| r.risk >= 0.0 && r.l1 >= 0.0 && r.leakage >= 0.0));
        assert_eq!(a.groups.len(), 1);
        assert!(a.groups[0].slope.is_some());
    }

    #[test]
    fn noiseless_interpolation() {
        let mut cfg = base(Scenario::RateSweep);
        cfg.noise_sd = 0.0;
        cfg.grid.n = 8;
        cfg.n_list = vec![200, 400, 800];
        cfg.epsilon_rule = EpsilonRule::Fixed;
        cfg.epsilons = vec![0.0];
        cfg.oracle = OracleConfig::Spikes {
            s: 2,
            separation: 0.5,
            magnitude: 1.0,
        };
        cfg.solver.tol = 1e-11;
        let rep = run_scenario(&cfg, Execution::Serial).unwrap();
        let med = median(rep.rows.iter().map(|r| r.risk).collect());
        assert!(med <= 1e-10, "median risk {med}");
    }

    #[test]
    fn intercept_only_rate() {
        let mut cfg = base(Scenario::RateSweep);
        cfg.oracle = OracleConfig::Zero;
        cfg.noise_sd = 1.0;
        cfg.grid.n = 16;
        cfg.n_list = vec![100, 400, 1600, 6400];
        cfg.replicates = 40;
        cfg.epsilon_rule = EpsilonRule::Fixed;
        cfg.epsilons = vec![10.0];
        let rep = run_scenario(&cfg, Execution::Parallel).unwrap();
        assert!(rep.rows.iter().all(|r| r.l1 == 0.0));
        let slope = rep.groups[0].slope.unwrap();
        assert!((slope + 1.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn exact_risk_matches_monte_carlo() {
        let cfg = base(Scenario::RateSweep);
        let model = cfg.build_model().unwrap();
        let oracle = cfg.build_oracle(&model, None).unwrap();
        for seed in 0..4u64 {
            let mut rng = rng_for(seed, &[9]);
            let lam =
                GridFunction::new((0..32).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect()).unwrap();
            let a = rng.sample::<f64, _>(StandardNormal);
            let exact = excess_risk(&lam, a, &model, &oracle).unwrap();
            let (mc, se) = mc_excess_risk(&lam, a, &model, &oracle, 100_000, seed, Execution::Parallel).unwrap();
            assert!((mc - exact).abs() <= 3.0 * se + 1e-12, "exact {exact} mc {mc} se {se}");
        }
    }

    #[test]
    fn verification_small() {
        let mut cfg = base(Scenario::VerifyApprox);
        cfg.grid.n = 8;
        cfg.candidates = 10;
        cfg.epsilon_rule = EpsilonRule::Fixed;
        cfg.epsilons = vec![0.1, 1.0];
        cfg.n_list = vec![];
        let rep = run_scenario(&cfg, Execution::Serial).unwrap();
        let v = rep.verification.unwrap();
        assert_eq!(v.cells, 20);
        assert_eq!(v.passed, 20);
    }

    #[test]
    fn spike_table_trends() {
        let mut cfg = base(Scenario::SpikeSeparation);
        cfg.grid.n = 128;
        cfg.separations = vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0];
        cfg.n_list = vec![100, 200, 400];
        cfg.replicates = 2;
        cfg.skip_alignment = true;
        let table = run_spike_separation(&cfg, Execution::Parallel).unwrap();
        assert_eq!(table.len(), 3);
        assert!(table.windows(2).all(|w| w[1].w_interp_norm < w[0].w_interp_norm));
        assert!(table.iter().all(|r| r.w_canonical_norm > r.w_interp_norm));
        assert!((table[1].separation - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn partition_scenario_runs() {
        let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
            "scenario": "partition",
            "kernel": {"kind": "block", "partition": [[0, 4], [4, 8], [8, 12]],
                       "inner": [{"kind": "brownian_released"}, {"kind": "brownian_released"}, {"kind": "brownian_released"}],
                       "cross_scale": 0.05},
            "grid": {"n": 12, "measure": "counting"},
            "oracle": {"kind": "values", "slope": [1.0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]},
            "noise_sd": 0.5,
            "n_list": [100, 200, 400],
            "epsilon_rule": "sparse",
            "replicates": 2,
            "seed": 3
        }))
        .unwrap();
        let rep = run_scenario(&cfg, Execution::Parallel).unwrap();
        let p = rep.partition.unwrap();
        assert!(p.approx_dim.value <= p.local_dims_sum);
        assert_eq!(p.diagnostics.j_lambda, vec![0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = base(Scenario::RateSweep);
        cfg.n_list = vec![100, 50];
        assert!(cfg.validate().is_err());
        let mut cfg = base(Scenario::RateSweep);
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let cfg = base(Scenario::SpikeSeparation);
        assert!(cfg.validate().is_err());
    }
}
