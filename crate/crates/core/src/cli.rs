//! Batch command line: `solve`, `sweep` and `verify`.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or
//! assumption error, 3 solver error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::coefficients::{InitialLaw, ProbeGrid, ValidationReport};
use crate::config::RunConfig;
use crate::error::Error;
use crate::field::{limit_from_table, LevelSolution, ProbeTable};
use crate::grid::TimeGrid;
use crate::meanflow::BvpMethod;
use crate::riccati::BoundReport;
use crate::trajectory::{evaluate_costs, simulate_level, terminal_decay_fit, DecayFit, TrajectoryBundle};
use crate::verify::{evaluate, level_tag, prepare, simulate_ladder, Status, VerificationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lqmfg", version, about = "Penalized LQ mean field games with terminal constraint X_T = 0")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one penalty level and write level_<L>.csv / .json.
    Solve(SolveArgs),
    /// Solve the whole ladder and write ladder, limit and level files.
    Sweep(CommonArgs),
    /// Run the verification suite and write report.json.
    Verify(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Path to the TOML configuration.
    #[arg(long, env = "LQMFG_CONFIG")]
    pub config: PathBuf,
    /// Output directory (overrides [output] dir; default "out").
    #[arg(long, env = "LQMFG_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "LQMFG_THREADS")]
    pub threads: Option<usize>,
    /// Seed for sampled initial laws (overrides [law] seed).
    #[arg(long, env = "LQMFG_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Penalty level (default: the largest ladder level).
    #[arg(long, env = "LQMFG_LEVEL")]
    pub level: Option<f64>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        let message = e.to_string();
        let message = if message.starts_with("configuration error") {
            message
        } else {
            format!("configuration error: {message}")
        };
        Self { code: EXIT_CONFIG, message }
    }

    fn solver(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::config(e),
            other => Self { code: EXIT_SOLVER, message: format!("solver error: {other}") },
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: EXIT_SOLVER, message: format!("cannot write {}: {e}", path.display()) }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.message);
            f.code
        }
    }
}

struct Context {
    cfg: RunConfig,
    digest: String,
    law: InitialLaw,
    grid: TimeGrid,
    out: PathBuf,
}

fn setup(a: &CommonArgs) -> Result<Context, Failure> {
    if let Some(n) = a.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be positive"));
        }
        // A global pool may already exist when called repeatedly in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = RunConfig::load(&a.config).map_err(Failure::config)?;
    if let Some(seed) = a.seed {
        cfg.law = cfg.law.with_seed(seed);
    }
    let law = cfg.law.realize().map_err(Failure::config)?;
    let grid = cfg.time_grid().map_err(Failure::config)?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| Failure::io(&out, e))?;
    let digest = cfg.digest();
    Ok(Context { cfg, digest, law, grid, out })
}

fn validation(ctx: &Context) -> Result<ValidationReport, Failure> {
    let c = &ctx.cfg.model;
    c.validate(Some(&ctx.law), &ProbeGrid::default_for(c.horizon, Some(&ctx.law)))
        .map_err(Failure::solver)
}

fn require_assumptions(ctx: &Context) -> Result<(), Failure> {
    let v = validation(ctx)?;
    if v.passed {
        return Ok(());
    }
    let failed: Vec<String> = v
        .failed_clauses()
        .map(|c| match &c.worst {
            Some(w) => format!("\"{}\" (worst at t = {}{}, value {})", c.clause, w.t, w.x.map_or(String::new(), |x| format!(", x = {x}")), w.value),
            None => format!("\"{}\"", c.clause),
        })
        .collect();
    Err(Failure::config(format!("assumption violated: {}", failed.join("; "))))
}

/// Numbers are written with 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

struct Table {
    text: String,
}

impl Table {
    fn new(digest: &str, header: &[String]) -> Self {
        let mut text = format!("# config_digest: {digest}\n");
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text }
    }

    fn row(&mut self, values: impl IntoIterator<Item = f64>) {
        let cells: Vec<String> = values.into_iter().map(num).collect();
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    fn write(&self, path: &Path) -> Result<(), Failure> {
        fs::write(path, &self.text).map_err(|e| Failure::io(path, e))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

#[derive(Serialize)]
struct LevelSummary<'a> {
    config_digest: &'a str,
    level: f64,
    method: BvpMethod,
    iterations: usize,
    shooting_residual: f64,
    shooting_tolerance: f64,
    initial_residual: f64,
    riccati_envelope: &'a BoundReport,
    psi_envelope: &'a BoundReport,
    samples: usize,
    terminal_state_mean: f64,
    expected_cost: f64,
}

fn write_level(ctx: &Context, sol: &LevelSolution, bundle: &TrajectoryBundle, cost: f64) -> Result<(), Failure> {
    let tag = level_tag(sol.level());
    let per_sample = ctx.cfg.output.per_sample;
    let mut header: Vec<String> = ["t", "P", "nu", "m", "phi", "psi", "X_mean", "Y_mean", "alpha_mean"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if per_sample {
        header.extend((0..bundle.x.len()).map(|i| format!("X_{i}")));
    }
    let mut table = Table::new(&ctx.digest, &header);
    let mf = &sol.mean;
    for (k, &t) in ctx.grid.nodes().iter().enumerate() {
        let mut row = vec![
            t,
            sol.riccati.values()[k],
            mf.nu()[k],
            mf.m()[k],
            mf.phi()[k],
            mf.psi()[k],
            bundle.x_mean[k],
            bundle.y_mean[k],
            bundle.alpha_mean[k],
        ];
        if per_sample {
            row.extend(bundle.x.iter().map(|p| p[k]));
        }
        table.row(row);
    }
    table.write(&ctx.out.join(format!("level_{tag}.csv")))?;
    let xt = bundle.x_mean[bundle.x_mean.len() - 1];
    let summary = LevelSummary {
        config_digest: &ctx.digest,
        level: sol.level(),
        method: mf.method(),
        iterations: mf.iterations(),
        shooting_residual: mf.shooting_residual(),
        shooting_tolerance: mf.shooting_tolerance(),
        initial_residual: mf.initial_residual(),
        riccati_envelope: &sol.riccati_bounds,
        psi_envelope: &sol.psi_bounds,
        samples: bundle.x.len(),
        terminal_state_mean: xt,
        expected_cost: cost,
    };
    write_json(&ctx.out.join(format!("level_{tag}.json")), &summary)
}

pub fn cmd_solve(a: &SolveArgs) -> Result<i32, Failure> {
    let ctx = setup(&a.common)?;
    require_assumptions(&ctx)?;
    let level = a.level.unwrap_or_else(|| *ctx.cfg.ladder.levels.last().expect("validated ladder"));
    if !(level.is_finite() && level > 0.0) {
        return Err(Failure::config(format!("--level must be positive and finite, got {level}")));
    }
    let c = &ctx.cfg.model;
    let sol = LevelSolution::solve(c, level, ctx.law.mean(), &ctx.grid).map_err(Failure::solver)?;
    let bundle = simulate_level(c, &sol, &ctx.law, &ctx.grid).map_err(Failure::solver)?;
    let cost = evaluate_costs(&bundle, c, &sol.mean).map_err(Failure::solver)?;
    write_level(&ctx, &sol, &bundle, cost.expected)?;
    println!("solved L = {level}: P_0 = {}, mean X_T = {:e}, J = {}", sol.riccati.values()[0], bundle.x_mean[bundle.x_mean.len() - 1], cost.expected);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct LimitSummary<'a> {
    config_digest: &'a str,
    level: f64,
    previous_level: Option<f64>,
    trajectory_cauchy_gap: Option<f64>,
    field: Option<crate::field::LimitField>,
    field_note: Option<String>,
    terminal_states: &'a [f64],
    tol_terminal: &'a [f64],
    u_bounds: &'a [f64],
    decay_fit: Option<DecayFit>,
    ladder_costs: Vec<f64>,
    limit_cost: f64,
    warnings: &'a [String],
}

pub fn cmd_sweep(a: &CommonArgs) -> Result<i32, Failure> {
    let ctx = setup(a)?;
    require_assumptions(&ctx)?;
    let c = &ctx.cfg.model;
    let levels = &ctx.cfg.ladder.levels;
    let ladder = crate::field::run_ladder(c, levels, ctx.law.mean(), &ctx.grid).map_err(Failure::solver)?;
    let (bundles, costs, limit, limit_cost) = simulate_ladder(c, &ladder, &ctx.law).map_err(Failure::solver)?;
    for ((sol, b), cost) in ladder.solutions().iter().zip(&bundles).zip(&costs) {
        write_level(&ctx, sol, b, cost.expected)?;
    }

    let probes = ctx.cfg.field_probes(&ctx.grid);
    let table = ProbeTable::build(&ladder, &probes).map_err(Failure::solver)?;
    let mut header: Vec<String> = ["L", "X_T_mean", "J"].iter().map(|s| s.to_string()).collect();
    header.extend(table.points.iter().map(|(t, x, nu)| format!("u[t={t};x={x};nu={nu}]")));
    let mut lt = Table::new(&ctx.digest, &header);
    for (i, b) in bundles.iter().enumerate() {
        let mut row = vec![levels[i], b.x_mean[b.x_mean.len() - 1], costs[i].expected];
        row.extend(table.values[i].iter().copied());
        lt.row(row);
    }
    lt.write(&ctx.out.join("ladder.csv"))?;

    let lb = &limit.bundle;
    let mut header: Vec<String> = ["t", "X_mean", "Y_mean", "alpha_mean"].iter().map(|s| s.to_string()).collect();
    if ctx.cfg.output.per_sample {
        for i in 0..lb.x.len() {
            header.extend([format!("X_{i}"), format!("Y_{i}"), format!("alpha_{i}")]);
        }
    }
    let mut limt = Table::new(&ctx.digest, &header);
    for (k, &t) in ctx.grid.nodes().iter().enumerate() {
        let mut row = vec![t, lb.x_mean[k], lb.y_mean[k], lb.alpha_mean[k]];
        if ctx.cfg.output.per_sample {
            for i in 0..lb.x.len() {
                row.extend([lb.x[i][k], lb.y[i][k], lb.alpha[i][k]]);
            }
        }
        limt.row(row);
    }
    limt.write(&ctx.out.join("limit.csv"))?;

    let (field, field_note) = if ladder.len() >= 3 {
        match limit_from_table(&ladder, &table) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, Some(format!("field limit needs at least 3 levels, got {}", ladder.len())))
    };
    let xt: Vec<f64> = bundles.iter().map(|b| b.x_mean[b.x_mean.len() - 1]).collect();
    let summary = LimitSummary {
        config_digest: &ctx.digest,
        level: limit.level,
        previous_level: limit.previous_level,
        trajectory_cauchy_gap: limit.cauchy_gap,
        field,
        field_note,
        terminal_states: &limit.terminal_states,
        tol_terminal: &limit.tol_terminal,
        u_bounds: &limit.u_bounds,
        decay_fit: terminal_decay_fit(levels, &xt),
        ladder_costs: costs.iter().map(|c| c.expected).collect(),
        limit_cost: limit_cost.expected,
        warnings: &limit.warnings,
    };
    write_json(&ctx.out.join("limit.json"), &summary)?;
    for w in &limit.warnings {
        eprintln!("warning: {w}");
    }
    println!("swept {} levels; wrote {}", levels.len(), ctx.out.display());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config_digest: &'a str,
    #[serde(flatten)]
    report: &'a VerificationReport,
}

pub fn cmd_verify(a: &CommonArgs) -> Result<i32, Failure> {
    let ctx = setup(a)?;
    let cfg = &ctx.cfg;
    let probes = cfg.field_probes(&ctx.grid);
    let prepared = prepare(&cfg.model, &cfg.ladder.levels, &ctx.law, &cfg.grid, &probes, &cfg.tolerances)
        .map_err(Failure::solver)?;
    let report = evaluate(&prepared, &cfg.ladder.levels, &cfg.tolerances, cfg.fixture.corrupt);
    write_json(&ctx.out.join("report.json"), &ReportFile { config_digest: &ctx.digest, report: &report })?;
    let mut summary = String::new();
    for ch in &report.checks {
        let tag = match ch.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Skipped => "skip",
        };
        let _ = writeln!(summary, "{tag:4}  {}", ch.name);
    }
    print!("{summary}");
    Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY_FAILED })
}
