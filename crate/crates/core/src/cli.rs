//! Command-line front end. Exit codes: 0 success, 1 usage or input error,
//! 2 numerical failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::complexity::{
    approximate_dimension, complexity_estimates, partition_diagnostics, width_profile, ApproxDimension,
    PartitionDiagnostics,
};
use crate::covariance::{GramModel, KernelSpec};
use crate::error::{Error, Result};
use crate::exec::{init_threads, Execution};
use crate::experiments::{response_sd, run_scenario, ExperimentConfig, ModelConfig};
use crate::grid::{build_uniform_grid, canonical_subgradient, dominant_set, Grid, GridFunction, MeasureKind};
use crate::io::{self, FitSummary, RunManifest};
use crate::sampler::{simulate, RegressionSample};
use crate::solver::{LassoProblem, SolverOptions};
use crate::sparsity::{
    alignment_coefficient, discrete_sobolev_norm_bm, fourier_sobolev_norm, ou_rkhs_norm_closed, rkhs_norm,
    spike_subgradient, SpikeStyle,
};

#[derive(Parser, Debug)]
#[command(name = "funlasso", version, about = "Continuous LASSO for functional linear regression")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the covariance matrix of a configured model.
    Gram(GramArgs),
    /// Draw a regression sample.
    Simulate(SimulateArgs),
    /// Fit the empirical problem at one penalty level.
    Fit(FitArgs),
    /// Sparsity diagnostics for a fitted or given slope.
    Diagnose(DiagnoseArgs),
    /// Covering numbers, entropy integrals, widths and RIP constants.
    Complexity(ComplexityArgs),
    /// Run a harness scenario.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct GramArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the grid CSV here.
    #[arg(long)]
    grid_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Bin,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Sample size.
    #[arg(long)]
    n: usize,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; CSV writes `<out>.x.csv` and `<out>.y.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "bin")]
    format: Format,
    #[arg(long)]
    serial: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// `FLXS1` binary, or the `.x.csv` half of a CSV sample.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Grid CSV; defaults to the `<data>.grid.csv` sidecar, then to a uniform
    /// Lebesgue grid on [0, 1].
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Style {
    Canonical,
    Interpolating,
    Mollified,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    config: PathBuf,
    /// Slope CSV (`t_index,lambda_hat`); defaults to the config oracle.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Cone parameter; `inf` gives the RKHS norm.
    #[arg(long, default_value_t = 16.0)]
    b: f64,
    /// Sobolev exponent for stationary kernels.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, value_enum, default_value = "canonical")]
    style: Style,
    /// Mollifier radius for `--style mollified`.
    #[arg(long, default_value_t = 0.02)]
    r: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    l_const: f64,
    /// Sample size for the approximate dimension.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Largest width order to tabulate.
    #[arg(long, default_value_t = 64)]
    d_max: usize,
    /// Number of scales in the covering and entropy tables.
    #[arg(long, default_value_t = 40)]
    points: usize,
    #[arg(long, default_value_t = 2000)]
    search_budget: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    serial: bool,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FUNLASSO_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = init_threads(cli.threads) {
        eprintln!("error: {e}");
        return 1;
    }
    let outcome = match cli.command {
        Command::Gram(a) => gram(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Fit(a) => fit(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Complexity(a) => complexity(a),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, serde_json::Value)> {
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Ok((serde_json::from_value(value.clone())?, value))
}

fn finish(mut manifest: RunManifest, outputs: &[&Path], at: &Path) -> Result<()> {
    for p in outputs {
        manifest.record(p)?;
    }
    manifest.write(&io::manifest_path(at))
}

fn gram(a: GramArgs) -> Result<i32> {
    let (cfg, raw): (ModelConfig, _) = read_json(&a.config)?;
    let model = cfg.build_model()?;
    io::write_to_path(&a.out, |w| io::write_matrix_csv(w, model.k()))?;
    let mut outs = vec![a.out.as_path()];
    if let Some(g) = &a.grid_out {
        io::write_to_path(g, |w| io::write_grid_csv(w, model.grid(), None))?;
        outs.push(g);
    }
    log::info!("gram: N = {}, jitter = {:e}", model.len(), model.jitter());
    finish(RunManifest::new("gram", raw, None), &outs, &a.out)?;
    Ok(0)
}

fn sidecar(data: &Path, suffix: &str) -> PathBuf {
    let name = data.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".x.csv").unwrap_or(&name);
    data.with_file_name(format!("{stem}{suffix}"))
}

fn simulate_cmd(a: SimulateArgs) -> Result<i32> {
    let (mut cfg, raw): (ModelConfig, _) = read_json(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let model = cfg.build_model()?;
    let oracle = cfg.build_oracle(&model)?;
    let exec = if a.serial { Execution::Serial } else { Execution::Parallel };
    let sample = simulate(&model, &oracle, a.n, cfg.driver, cfg.seed, exec)?;
    let grid_path = sidecar(&a.out, ".grid.csv");
    io::write_to_path(&grid_path, |w| io::write_grid_csv(w, model.grid(), Some(&oracle.slope)))?;
    let mut outs = vec![grid_path.clone()];
    match a.format {
        Format::Bin => {
            io::write_to_path(&a.out, |w| io::write_sample_bin(w, &sample))?;
            outs.push(a.out.clone());
        }
        Format::Csv => {
            let xp = sidecar(&a.out, ".x.csv");
            let yp = sidecar(&a.out, ".y.csv");
            let mut xw = std::io::BufWriter::new(File::create(&xp)?);
            let mut yw = std::io::BufWriter::new(File::create(&yp)?);
            io::write_sample_csv(&mut xw, &mut yw, &sample, 0)?;
            drop((xw, yw));
            outs.push(xp);
            outs.push(yp);
        }
    }
    let refs: Vec<&Path> = outs.iter().map(|p| p.as_path()).collect();
    finish(RunManifest::new("simulate", raw, Some(cfg.seed)), &refs, &a.out)?;
    Ok(0)
}

fn load_sample(data: &Path) -> Result<RegressionSample> {
    let name = data.to_string_lossy();
    if name.ends_with(".csv") {
        let yp = sidecar(data, ".y.csv");
        io::read_sample_csv(File::open(data)?, File::open(yp)?, 0)
    } else {
        io::read_sample_bin(BufReader::new(File::open(data)?))
    }
}

fn fit(a: FitArgs) -> Result<i32> {
    let sample = load_sample(&a.data)?;
    let grid = match &a.grid {
        Some(p) => io::read_grid_csv(File::open(p)?)?.0,
        None => {
            let side = sidecar(&a.data, ".grid.csv");
            if side.exists() {
                io::read_grid_csv(File::open(&side)?)?.0
            } else {
                log::warn!("no grid given; using a uniform Lebesgue grid on [0, 1]");
                build_uniform_grid(sample.x.ncols(), [0.0, 1.0], MeasureKind::Lebesgue)?
            }
        }
    };
    let options = SolverOptions {
        tol: a.tol,
        max_iters: a.max_iters,
        ..SolverOptions::default()
    };
    let fit = LassoProblem::empirical(&sample, &grid, a.epsilon, options)?.solve(None)?;
    io::write_to_path(&a.out, |w| io::write_fit_csv(w, &fit))?;
    let summary = FitSummary::of(&fit, a.epsilon);
    println!("{}", serde_json::to_string(&summary)?);
    let config = serde_json::json!({
        "data": a.data, "epsilon": a.epsilon, "tol": a.tol, "max_iters": a.max_iters,
        "summary": summary,
    });
    finish(RunManifest::new("fit", config, None), &[&a.out], &a.out)?;
    if !fit.converged {
        eprintln!(
            "error: solver did not converge after {} iterations (kkt residual {:e}); output is partial",
            fit.iterations, fit.kkt_residual
        );
        return Ok(2);
    }
    Ok(0)
}

#[derive(Serialize)]
struct AlignmentReport {
    b: Option<f64>,
    value: Option<f64>,
    certificate: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct SobolevReport {
    p: Option<f64>,
    value: f64,
}

#[derive(Serialize)]
struct DiagnoseReport {
    rkhs_norm: Option<f64>,
    alignment: AlignmentReport,
    sobolev: Option<SobolevReport>,
    spike_subgradient_style: String,
    dominant_set_size: usize,
}

fn subgradient(grid: &Grid, lambda: &GridFunction, style: Style, r: f64) -> Result<GridFunction> {
    match style {
        Style::Canonical => canonical_subgradient(lambda, None),
        Style::Interpolating => spike_subgradient(grid, lambda, SpikeStyle::Interpolating),
        Style::Mollified => spike_subgradient(grid, lambda, SpikeStyle::Mollified { r }),
    }
}

fn sobolev_for(model: &GramModel, w: &GridFunction, p: Option<f64>) -> Result<Option<SobolevReport>> {
    let grid = model.grid();
    Ok(match model.spec() {
        Some(KernelSpec::BrownianReleased) => Some(SobolevReport {
            p: None,
            value: discrete_sobolev_norm_bm(grid, w)?,
        }),
        Some(KernelSpec::OrnsteinUhlenbeck { rate }) => Some(SobolevReport {
            p: None,
            value: ou_rkhs_norm_closed(grid, w, *rate)?,
        }),
        Some(KernelSpec::StationarySpectral { p: kp, .. }) => {
            let p = p.unwrap_or(*kp);
            Some(SobolevReport {
                p: Some(p),
                value: fourier_sobolev_norm(grid, w, p)?,
            })
        }
        _ => None,
    })
}

fn diagnose(a: DiagnoseArgs) -> Result<i32> {
    let (cfg, raw): (ModelConfig, _) = read_json(&a.config)?;
    let model = cfg.build_model()?;
    let lambda = match &a.fit {
        Some(p) => io::read_fit_csv(File::open(p)?)?,
        None => cfg.build_oracle(&model)?.slope,
    };
    crate::error::check_len(model.len(), lambda.len())?;
    let w = subgradient(model.grid(), &lambda, a.style, a.r)?;
    let rkhs = match rkhs_norm(&model, &w) {
        Ok(v) => Some(v),
        Err(Error::InfiniteRkhsNorm { .. }) => None,
        Err(e) => return Err(e),
    };
    let alignment = match alignment_coefficient(&model, &w, a.b, 1e-8) {
        Ok(r) => AlignmentReport {
            b: r.b_used,
            value: Some(r.value),
            certificate: Some(r.certificate),
            error: None,
        },
        Err(e @ Error::Infeasible(_)) => AlignmentReport {
            b: a.b.is_finite().then_some(a.b),
            value: None,
            certificate: None,
            error: Some(e.to_string()),
        },
        Err(e) => return Err(e),
    };
    let report = DiagnoseReport {
        rkhs_norm: rkhs,
        alignment,
        sobolev: sobolev_for(&model, &w, a.p)?,
        spike_subgradient_style: format!("{:?}", a.style).to_lowercase(),
        dominant_set_size: dominant_set(&w)?.len(),
    };
    io::write_to_path(&a.out, |f| {
        serde_json::to_writer_pretty(&mut *f, &report)?;
        Ok(())
    })?;
    finish(RunManifest::new("diagnose", raw, None), &[&a.out], &a.out)?;
    Ok(0)
}

#[derive(Serialize)]
struct ComplexitySummary {
    s_t: f64,
    l_const: f64,
    diameter: f64,
    d_w_lambda: Option<ApproxDimension>,
    delta_d: Vec<f64>,
    beta_bound: Option<f64>,
    partition: Option<PartitionDiagnostics>,
}

fn complexity(a: ComplexityArgs) -> Result<i32> {
    let (cfg, raw): (ModelConfig, _) = read_json(&a.config)?;
    let model = cfg.build_model()?;
    std::fs::create_dir_all(&a.out)?;
    let est = complexity_estimates(&model, a.l_const, a.points);
    let cov = a.out.join("covering.csv");
    io::write_to_path(&cov, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["epsilon", "covering"])?;
        for (e, n) in &est.covering_table {
            c.write_record([e.to_string(), n.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let g2 = a.out.join("gamma2.csv");
    io::write_to_path(&g2, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["delta", "gamma2"])?;
        for (d, g) in &est.gamma2_table {
            c.write_record([d.to_string(), g.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let all: Vec<usize> = (0..model.len()).collect();
    let widths = width_profile(&model, &all, a.d_max.min(model.len()), model.partition())?;
    let wp = a.out.join("width.csv");
    io::write_to_path(&wp, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["d", "width"])?;
        for (d, v) in widths.iter().enumerate() {
            c.write_record([d.to_string(), v.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let oracle = cfg.build_oracle(&model)?;
    let w = canonical_subgradient(&oracle.slope, None)?;
    let sigma_y = response_sd(&model, &oracle);
    let d_w_lambda = if sigma_y > 0.0 {
        Some(approximate_dimension(&w, &oracle.slope, sigma_y, a.n, &model)?)
    } else {
        None
    };
    let partition = match model.partition() {
        Some(p) if p.len() > 1 => Some(partition_diagnostics(
            &model,
            p,
            &oracle.slope,
            &w,
            16.0,
            a.search_budget,
            cfg.seed,
        )?),
        _ => None,
    };
    let summary = ComplexitySummary {
        s_t: est.s_t,
        l_const: a.l_const,
        diameter: est.diameter,
        d_w_lambda,
        delta_d: partition
            .as_ref()
            .map(|p| p.delta_d.iter().map(|e| e.delta).collect())
            .unwrap_or_default(),
        beta_bound: partition.as_ref().and_then(|p| p.beta_bound),
        partition,
    };
    let sp = a.out.join("summary.json");
    io::write_to_path(&sp, |f| {
        serde_json::to_writer_pretty(&mut *f, &summary)?;
        Ok(())
    })?;
    finish(
        RunManifest::new("complexity", raw, Some(cfg.seed)),
        &[&cov, &g2, &wp, &sp],
        &a.out,
    )?;
    Ok(0)
}

fn experiment(a: ExperimentArgs) -> Result<i32> {
    let (mut cfg, raw): (ExperimentConfig, _) = read_json(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&a.out)?;
    let exec = if a.serial { Execution::Serial } else { Execution::Parallel };
    let report = run_scenario(&cfg, exec)?;
    let rows = a.out.join("rows.csv");
    io::write_to_path(&rows, |w| io::write_rows_csv(w, &report.rows))?;
    let summary = a.out.join("summary.json");
    io::write_to_path(&summary, |f| {
        serde_json::to_writer_pretty(&mut *f, &report)?;
        Ok(())
    })?;
    let mut outs = vec![rows, summary];
    if !report.groups.is_empty() {
        let slopes = a.out.join("slopes.csv");
        io::write_to_path(&slopes, |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["scenario", "setting", "d", "slope", "stderr", "best"])?;
            for g in &report.groups {
                for s in &g.settings {
                    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    c.write_record([
                        g.label.clone(),
                        s.setting.to_string(),
                        opt(s.d),
                        opt(s.slope),
                        opt(s.stderr),
                        (s.setting == g.best_setting).to_string(),
                    ])?;
                }
            }
            c.flush()?;
            Ok(())
        })?;
        outs.push(slopes);
    }
    let refs: Vec<&Path> = outs.iter().map(|p| p.as_path()).collect();
    let mut manifest = RunManifest::new("experiment", raw, Some(cfg.seed));
    manifest.config["seed"] = serde_json::json!(cfg.seed);
    finish(manifest, &refs, &a.out)?;
    let nonconverged = report.rows.iter().filter(|r| !r.converged).count();
    if nonconverged > 0 {
        log::warn!("{nonconverged} fits did not converge; see the converged column of rows.csv");
    }
    Ok(0)
}
