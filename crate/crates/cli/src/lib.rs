//! Command implementations for the `distobs` binary.
//!
//! Every command returns a process exit code and writes only to the writers
//! it is given, so the commands can be driven from tests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use distobs::error_system;
use distobs::graph;
use distobs::io::{self, CertificateReport, GainsFile, Problem, SimulationSummary};
use distobs::simulator::{self, SimulationConfig};
use distobs::synthesis::{self, ObserverRealization};
use distobs::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CERTIFICATE: i32 = 4;

/// Rate-fit window used by `simulate`: the tail half of the trace.
const RATE_WINDOW: f64 = 0.5;
const SAMPLED_DIRECTIONS: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "distobs", version, about = "Reduced-order distributed observer design")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Design and certify observer gains for a problem file.
    Synthesize(SynthesizeArgs),
    /// Simulate the plant together with stored observer gains.
    Simulate(SimulateArgs),
    /// Re-run every certificate on stored gains.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct DesignFlags {
    #[arg(long)]
    pub rank_tol: Option<f64>,
    #[arg(long)]
    pub epsilon_fraction: Option<f64>,
    #[arg(long)]
    pub gamma_safety: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Problem JSON
    pub input: PathBuf,
    /// Where to write the gains JSON
    pub output: PathBuf,
    #[command(flatten)]
    pub design: DesignFlags,
    /// Print the report as JSON
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Gains JSON written by `synthesize`
    pub gains: PathBuf,
    /// Problem JSON the gains were designed for
    pub problem: PathBuf,
    /// Horizon; defaults to 10 / max(alpha, 0.5)
    #[arg(long)]
    pub tfinal: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Initial plant state, comma separated; random when omitted
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<String>,
    /// Initial observer states, nodes separated by ';', entries by ','; zero when omitted
    #[arg(long, allow_hyphen_values = true)]
    pub z0: Option<String>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
    /// Record every k-th integration step
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Seed for the random initial state
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub gains: PathBuf,
    pub problem: PathBuf,
    #[arg(long)]
    pub rank_tol: Option<f64>,
    /// Seed for the sampled Lyapunov cross-check
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Parse(_)
        | Error::Dimension(_)
        | Error::InvalidGraph(_)
        | Error::InvalidParameter(_) => EXIT_INPUT,
        Error::Certificate { .. } => EXIT_CERTIFICATE,
        Error::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_INFEASIBLE,
    }
}

fn report_error(err: &mut dyn Write, step: &str, message: &str) {
    let doc = serde_json::json!({ "error": { "step": step, "message": message } });
    let _ = writeln!(err, "{doc}");
}

fn fail(err: &mut dyn Write, e: &Error, default_step: &str) -> i32 {
    let step = e.step().map_or(default_step, |s| s.name());
    report_error(err, step, &e.root().to_string());
    exit_code(e)
}

fn load_problem(path: &Path) -> distobs::Result<Problem> {
    io::read_problem(path)
}

fn load_gains(path: &Path) -> distobs::Result<ObserverRealization> {
    io::read_json::<GainsFile>(path)?.to_realization()
}

fn write_json_to(out: &mut dyn Write, value: &impl Serialize) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    writeln!(out, "{text}")
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match cli.command {
        Command::Synthesize(a) => cmd_synthesize(&a, out, err),
        Command::Simulate(a) => cmd_simulate(&a, out, err),
        Command::Verify(a) => cmd_verify(&a, out, err),
    }
}

pub fn cmd_synthesize(args: &SynthesizeArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut problem = match load_problem(&args.input) {
        Ok(p) => p,
        Err(e) => return fail(err, &e, "input"),
    };
    let flags = &args.design;
    if let Some(x) = flags.rank_tol {
        problem.params.rank_tol = x;
    }
    if let Some(x) = flags.epsilon_fraction {
        problem.params.epsilon_fraction = x;
    }
    if let Some(x) = flags.gamma_safety {
        problem.params.gamma_safety = x;
    }
    let s = match synthesis::synthesize(&problem.plant, &problem.graph, &problem.params) {
        Ok(s) => s,
        Err(e) => return fail(err, &e, "validation"),
    };
    if let Err(e) = io::write_json(&args.output, &GainsFile::from_synthesis(&s)) {
        return fail(err, &e, "output");
    }
    let report = CertificateReport::from_synthesis(&s);
    let written = if args.json {
        write_json_to(out, &report)
    } else {
        out.write_all(report.render_text().as_bytes())
    };
    match written {
        Ok(()) => EXIT_OK,
        Err(e) => fail(err, &Error::Io(e), "output"),
    }
}

fn parse_vector(text: &str, what: &str) -> distobs::Result<DVector<f64>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let vals = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("{what}: cannot parse {s:?}")))
        })
        .collect::<distobs::Result<Vec<_>>>()?;
    Ok(DVector::from_vec(vals))
}

fn parse_z0(text: &str) -> distobs::Result<Vec<DVector<f64>>> {
    text.split(';').map(|part| parse_vector(part, "z0")).collect()
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let realization = match load_gains(&args.gains) {
        Ok(r) => r,
        Err(e) => return fail(err, &e, "input"),
    };
    let problem = match load_problem(&args.problem) {
        Ok(p) => p,
        Err(e) => return fail(err, &e, "input"),
    };
    let n = problem.plant.n();
    let x0 = match &args.x0 {
        Some(text) => match parse_vector(text, "x0") {
            Ok(v) => v,
            Err(e) => return fail(err, &e, "input"),
        },
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
        }
    };
    let z0 = match args.z0.as_deref().map(parse_z0).transpose() {
        Ok(z) => z,
        Err(e) => return fail(err, &e, "input"),
    };
    let t_final = args
        .tfinal
        .unwrap_or(10.0 / realization.alpha.max(0.5));
    let cfg = SimulationConfig {
        t_final,
        dt: args.dt,
        x0,
        z0,
        record_stride: args.stride,
    };
    let trace = match simulator::simulate(&realization, &problem.plant, &problem.graph, &cfg) {
        Ok(t) => t,
        Err(e) => return fail(err, &e, "simulation"),
    };

    if let Some(path) = &args.trace_out {
        let written = File::create(path)
            .map_err(Error::from)
            .and_then(|f| io::write_trace_csv(&trace, BufWriter::new(f)));
        if let Err(e) = written {
            return fail(err, &e, "output");
        }
    }

    let (alpha_hat, low_confidence) = match simulator::estimate_rate(&trace, RATE_WINDOW) {
        Ok(a) if a.is_finite() => (Some(a), false),
        Ok(_) => (None, false),
        Err(_) => (None, true),
    };
    let summary = SimulationSummary {
        alpha_hat,
        max_invariance_residual: simulator::check_invariance(&trace),
        final_error_norms: trace.final_error_norms(),
        low_confidence,
    };
    if let Some(path) = &args.summary_out {
        if let Err(e) = io::write_json(path, &summary) {
            return fail(err, &e, "output");
        }
    }
    if let Err(e) = write_json_to(out, &summary) {
        return fail(err, &Error::Io(e), "output");
    }

    // divergence: the quadratic error energy must not grow over the horizon
    let weight = error_system::lyapunov_weight(&realization);
    let energy = |k: usize| {
        let e = trace.stacked_error(k);
        e.dot(&(&weight * &e))
    };
    let (v0, v1) = (energy(0), energy(trace.len() - 1));
    if !v1.is_finite() || v1 > v0 * (1.0 + 1e-9) + f64::MIN_POSITIVE {
        report_error(
            err,
            "simulation",
            &format!("error energy grew from {v0:e} to {v1:e}"),
        );
        return EXIT_DIVERGED;
    }
    EXIT_OK
}

#[derive(Clone, Serialize)]
struct CheckRow {
    name: &'static str,
    value: Option<f64>,
    bound: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyDoc {
    pass: bool,
    checks: Vec<CheckRow>,
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let realization = match load_gains(&args.gains) {
        Ok(r) => r,
        Err(e) => return fail(err, &e, "input"),
    };
    let problem = match load_problem(&args.problem) {
        Ok(p) => p,
        Err(e) => return fail(err, &e, "input"),
    };
    let rank_tol = args.rank_tol.unwrap_or(problem.params.rank_tol);
    let report = match synthesis::verify_realization(
        &realization,
        &problem.plant,
        &problem.graph,
        problem.params.g_weights.as_deref(),
        rank_tol,
    ) {
        Ok(r) => r,
        Err(e) => {
            let code = match exit_code(&e) {
                EXIT_INPUT => EXIT_INPUT,
                _ => EXIT_CERTIFICATE,
            };
            fail(err, &e, "certification");
            return code;
        }
    };

    let mut rows: Vec<CheckRow> = report
        .checks
        .iter()
        .map(|c| CheckRow {
            name: c.name,
            value: c.value.is_finite().then_some(c.value),
            bound: c.bound,
            pass: c.pass,
        })
        .collect();
    if let Some(sampled) = sampled_lyapunov(&realization, &problem, args.seed) {
        rows.push(CheckRow {
            name: "lyapunov_sampled",
            value: sampled.is_finite().then_some(sampled),
            bound: 0.0,
            pass: sampled < 0.0,
        });
    }
    let pass = rows.iter().all(|r| r.pass);

    let written = if args.json {
        write_json_to(out, &VerifyDoc { pass, checks: rows.clone() })
    } else {
        let mut text = format!("{:<18} {:>14} {:>14}  result\n", "check", "value", "bound");
        for r in &rows {
            let value = r.value.map_or("-inf".to_string(), |v| format!("{v:.6e}"));
            text.push_str(&format!(
                "{:<18} {:>14} {:>14.6e}  {}\n",
                r.name,
                value,
                r.bound,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        out.write_all(text.as_bytes())
    };
    if let Err(e) = written {
        return fail(err, &Error::Io(e), "output");
    }
    match rows.iter().find(|r| !r.pass) {
        None => EXIT_OK,
        Some(r) => {
            report_error(err, "certification", &format!("{} check failed", r.name));
            EXIT_CERTIFICATE
        }
    }
}

/// Sampled `(V̇ + 2αV)/V` along random directions, as a cross-check of the
/// eigenvalue test. `None` when the error system cannot be built.
fn sampled_lyapunov(realization: &ObserverRealization, problem: &Problem, seed: u64) -> Option<f64> {
    let mut spectral = graph::spectral_data(&problem.graph).ok()?;
    spectral.r_diag = nalgebra::DMatrix::from_diagonal(&realization.r_vector);
    let sys = error_system::build_error_system(realization, &spectral).ok()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(error_system::lyapunov_decrease_check(
        &sys,
        realization,
        realization.alpha,
        SAMPLED_DIRECTIONS,
        &mut rng,
    ))
}
