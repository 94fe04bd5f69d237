//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::bench::{benchmark, write_bench};
use crate::check::{compare_dense_oracle, CheckOptions, Thresholds};
use crate::config::{parse_config, parse_horizons, SimConfig, DEFAULTS_HELP};
use crate::sim::{run_closed_loop, steady_guess, write_trace};
use cfmpc_core::{InitialCondition, LinearAlgebra, ProblemDims, Solver};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_ORACLE: i32 = 4;

/// Largest problem the dense oracle is run on.
const ORACLE_MAX_N: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "cfmpc", version, about = "Matrix-free nonlinear MPC harness", after_help = DEFAULTS_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output file; defaults to the configured path, then stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Use the dense linear algebra path.
    #[arg(long, global = true)]
    dense: bool,
    /// Horizon override, `Np = Nu = N`; a list for `bench`.
    #[arg(long, global = true, value_name = "N[,N...]")]
    horizon: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Solve one MPC instance at the initial operating point.
    Solve,
    /// Closed-loop simulation, trace CSV.
    Simulate,
    /// Horizon sweep timing table CSV.
    Bench,
    /// Dense-oracle deviations; exit 4 on violation.
    Check {
        /// Number of random instances; overrides `check.instances`.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Print the effective configuration.
    ConfigDump,
}

/// Runs the harness with `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let Some(path) = &cli.config else {
        let _ = writeln!(err, "error: --config PATH is required");
        return EXIT_USAGE;
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: cannot read {}: {e}", path.display());
            return EXIT_PARSE;
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", path.display());
            return EXIT_PARSE;
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.dense {
        cfg.dense = true;
    }
    let horizons = match cli.horizon.as_deref().map(parse_horizons).transpose() {
        Ok(h) => h,
        Err(msg) => {
            let _ = writeln!(err, "error: --horizon: {msg}");
            return EXIT_USAGE;
        }
    };
    if let (Some(h), false) = (&horizons, matches!(cli.cmd, Cmd::Bench)) {
        cfg = cfg.with_horizon(h[0], h[0]);
    }

    let result = match cli.cmd {
        Cmd::ConfigDump => emit(&cli.out, None, out, |w| {
            w.write_all(cfg.to_text().as_bytes())
        })
        .map(|_| EXIT_OK)
        .map_err(Into::into),
        Cmd::Solve => cmd_solve(&cfg, out),
        Cmd::Simulate => cmd_simulate(&cfg, &cli.out, out),
        Cmd::Bench => cmd_bench(&cfg, horizons, &cli.out, out, err),
        Cmd::Check { instances } => cmd_check(&cfg, instances, out, err),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

type CmdResult = Result<i32, Box<dyn std::error::Error>>;

fn emit(
    cli_out: &Option<PathBuf>,
    cfg_out: Option<&String>,
    stdout: &mut dyn Write,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> std::io::Result<()> {
    match cli_out.clone().or_else(|| cfg_out.map(PathBuf::from)) {
        Some(p) => {
            let mut file = std::io::BufWriter::new(fs::File::create(p)?);
            f(&mut file)?;
            file.flush()
        }
        None => f(stdout),
    }
}

fn cmd_solve(cfg: &SimConfig, out: &mut dyn Write) -> CmdResult {
    let model = cfg.prediction_model();
    let mpc = cfg.mpc_config(0)?;
    let dims = *mpc.dims();
    let (y0, u0) = cfg.initial_point();
    let ic = InitialCondition::steady(&dims, &y0, &u0)?;
    let z0 = steady_guess(&dims, &y0, &u0);
    let linalg = if cfg.dense {
        LinearAlgebra::Dense
    } else {
        LinearAlgebra::Structured
    };
    let rep = Solver::new()
        .with_linalg(linalg)
        .solve(&z0, &ic, model.model.as_ref(), &mpc)?;
    writeln!(out, "status = {:?}", rep.status)?;
    writeln!(out, "converged = {}", rep.converged)?;
    writeln!(out, "phi = {:e}", rep.phi)?;
    writeln!(out, "iters = {}", rep.iters)?;
    writeln!(out, "bvls_changes = {}", rep.bvls_changes)?;
    writeln!(out, "ls_backtracks = {}", rep.ls_backtracks)?;
    writeln!(out, "last_alpha = {:e}", rep.last_alpha)?;
    writeln!(out, "kkt_violation = {:e}", rep.kkt_violation)?;
    writeln!(out, "h_inf = {:e}", rep.h_inf)?;
    writeln!(out, "solve_us = {}", rep.elapsed.as_micros())?;
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let u: Vec<f64> = (0..dims.inputs())
        .map(|c| rep.z_star[dims.u_pos(0, c)])
        .collect();
    writeln!(out, "u0 = {}", join(&u))?;
    writeln!(out, "z_star = {}", join(&rep.z_star))?;
    for (k, it) in rep.trace.iter().enumerate() {
        writeln!(
            out,
            "iter {} psi = {:e} phi = {:e} alpha = {:e} dtdz = {:e} backtracks = {}",
            k + 1,
            it.psi,
            it.phi,
            it.alpha,
            it.dtdz,
            it.backtracks
        )?;
    }
    Ok(if rep.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

fn cmd_simulate(cfg: &SimConfig, cli_out: &Option<PathBuf>, out: &mut dyn Write) -> CmdResult {
    let run = run_closed_loop(cfg)?;
    let md = cfg.model_dims();
    emit(cli_out, cfg.trace_path.as_ref(), out, |w| {
        write_trace(w, &run.rows, md.inputs, md.outputs)
    })?;
    Ok(EXIT_OK)
}

fn cmd_bench(
    cfg: &SimConfig,
    horizons: Option<Vec<usize>>,
    cli_out: &Option<PathBuf>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let hs = horizons.unwrap_or_else(|| cfg.bench_horizons.clone());
    let rows = benchmark(cfg, &hs)?;
    if let Some(bad) = rows.iter().find(|r| !r.agree) {
        writeln!(
            err,
            "error: structured and dense solutions differ by {:e} at Np = {}",
            bad.max_deviation, bad.horizon
        )?;
        return Ok(EXIT_ORACLE);
    }
    emit(cli_out, cfg.bench_path.as_ref(), out, |w| {
        write_bench(w, &rows)
    })?;
    Ok(EXIT_OK)
}

fn cmd_check(
    cfg: &SimConfig,
    instances: Option<usize>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let dims = ProblemDims::new(cfg.model_dims(), cfg.np, cfg.nu)?;
    if dims.n() > ORACLE_MAX_N {
        writeln!(
            err,
            "error: n = {} exceeds the dense oracle limit {ORACLE_MAX_N}",
            dims.n()
        )?;
        return Ok(EXIT_USAGE);
    }
    let count = instances.unwrap_or(cfg.check_instances);
    let opts = CheckOptions {
        solve_every: cfg.check_solve_every,
        ..CheckOptions::default()
    };
    let rep = compare_dense_oracle(dims, count, cfg.seed, opts);
    writeln!(out, "instances = {}", rep.instances)?;
    writeln!(out, "jix_rel = {:e}", rep.jix_rel)?;
    writeln!(out, "jtix_rel = {:e}", rep.jtix_rel)?;
    writeln!(out, "qr_q = {:e}", rep.qr_q)?;
    writeln!(out, "qr_r_rel = {:e}", rep.qr_r_rel)?;
    writeln!(out, "qr_orthogonality = {:e}", rep.qr_orthogonality)?;
    writeln!(
        out,
        "qr_structure_violations = {}",
        rep.qr_structure_violations
    )?;
    writeln!(out, "solve_instances = {}", rep.solve_instances)?;
    writeln!(out, "solve_inf = {:e}", rep.solve_inf)?;
    writeln!(out, "solve_failures = {}", rep.solve_failures)?;
    writeln!(out, "elapsed_ms = {}", rep.elapsed.as_millis())?;
    let bad = rep.violations(&Thresholds::default());
    if bad.is_empty() {
        Ok(EXIT_OK)
    } else {
        writeln!(err, "oracle violation: {}", bad.join(", "))?;
        Ok(EXIT_ORACLE)
    }
}
