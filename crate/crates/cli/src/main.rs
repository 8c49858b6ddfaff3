use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use streamexec_core::model::{self, ModelParams};
use streamexec_core::replay::{self, ReplayEnv, ReplayMode, ReplaySpec, DEFAULT_TOKEN_CHARS};
use streamexec_core::session::self_test;
use streamexec_core::{ClockKind, OnError, PipelineConfig, SimPlan};

const EXIT_PROGRAM_ERROR: u8 = 1;
const EXIT_INFRA: u8 = 2;
const EXIT_FIDELITY: u8 = 3;

/// Replays generated programs as paced token streams and executes them
/// statement by statement while they are still being generated.
#[derive(Parser)]
#[command(name = "streamexec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay one program at a fixed token rate.
    Replay(ReplayArgs),
    /// Replay every program matching a glob at several token rates.
    Sweep(SweepArgs),
    /// Evaluate the latency model for a parameter file.
    Model(ModelArgs),
    /// Check that chunking reconstructs a program under several fragmentations.
    Check(CheckArgs),
    /// Run protocol and persistence checks against a worker.
    WorkerSelftest(WorkerArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Worker,
    Simulated,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Serial,
    Parallel,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnErrorArg {
    Interrupt,
    Defer,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Virtual,
}

#[derive(Args, Clone)]
struct WorkerArgs {
    /// Worker command line, split on whitespace.
    #[arg(long, env = "STREAMEXEC_WORKER")]
    worker_cmd: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    startup_timeout_ms: u64,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "simulated")]
    env: EnvKind,
    #[command(flatten)]
    worker: WorkerArgs,
    /// Per-statement execution time of the simulated executor.
    #[arg(long, default_value_t = 10.0)]
    sim_exec_ms: f64,
    /// Per-call overhead of the simulated executor.
    #[arg(long, default_value_t = 1.0)]
    sim_setup_ms: f64,
    /// JSON timing plan for the simulated executor; overrides the two flags above.
    #[arg(long)]
    sim_plan: Option<PathBuf>,
    /// Clock for the simulated executor; the worker always uses the wall clock.
    #[arg(long, value_enum, default_value = "virtual")]
    clock: ClockArg,
    #[arg(long, default_value_t = DEFAULT_TOKEN_CHARS)]
    token_chars: usize,
    #[arg(long, default_value_t = 0.0)]
    tft_ms: f64,
    #[arg(long, value_enum, default_value = "interrupt")]
    on_error: OnErrorArg,
    #[arg(long)]
    no_batching: bool,
    #[arg(long)]
    no_gating: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    program: PathBuf,
    #[arg(long)]
    tps: f64,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[command(flatten)]
    run: RunArgs,
    /// Also write the report(s) here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    programs: String,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100,200")]
    tps_list: Vec<f64>,
    #[command(flatten)]
    run: RunArgs,
    /// Table path; per-run JSON lines go next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    params: PathBuf,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    program: PathBuf,
    #[arg(long)]
    show_chunks: bool,
    #[arg(long, default_value_t = 3)]
    fragmentations: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Replay(a) => cmd_replay(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Model(a) => cmd_model(a),
        Command::Check(a) => cmd_check(a),
        Command::WorkerSelftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INFRA)
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn worker_argv(args: &WorkerArgs) -> Result<Vec<String>> {
    let cmd = args
        .worker_cmd
        .as_deref()
        .ok_or_else(|| anyhow!("no worker command; pass --worker-cmd or set STREAMEXEC_WORKER"))?;
    let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
    if argv.is_empty() {
        bail!("empty worker command");
    }
    Ok(argv)
}

fn build_env(run: &RunArgs) -> Result<(ReplayEnv, PipelineConfig)> {
    let env = match run.env {
        EnvKind::Worker => ReplayEnv::Worker {
            argv: worker_argv(&run.worker)?,
            startup_timeout_ms: run.worker.startup_timeout_ms,
        },
        EnvKind::Simulated => {
            let plan = match &run.sim_plan {
                Some(path) => serde_json::from_str::<SimPlan>(&read(path)?)
                    .with_context(|| format!("parsing plan {}", path.display()))?,
                None => SimPlan::uniform(run.sim_exec_ms, run.sim_setup_ms),
            };
            let clock = match run.clock {
                ClockArg::Wall => ClockKind::Wall,
                ClockArg::Virtual => ClockKind::Virtual,
            };
            ReplayEnv::Simulated { plan, clock }
        }
    };
    let clock = match &env {
        ReplayEnv::Worker { .. } => ClockKind::Wall,
        ReplayEnv::Simulated { clock, .. } => *clock,
    };
    let mut cfg = PipelineConfig::new(clock);
    cfg.on_error = match run.on_error {
        OnErrorArg::Interrupt => OnError::Interrupt,
        OnErrorArg::Defer => OnError::Defer,
    };
    cfg.batching_enabled = !run.no_batching;
    cfg.gating_enabled = !run.no_gating;
    Ok((env, cfg))
}

fn spec_template(run: &RunArgs, program: String, tps: f64) -> ReplaySpec {
    ReplaySpec {
        program,
        tps,
        token_chars: run.token_chars,
        t_ft_ms: run.tft_ms,
    }
}

fn cmd_replay(a: ReplayArgs) -> Result<u8> {
    let (env, cfg) = build_env(&a.run)?;
    let spec = spec_template(&a.run, read(&a.program)?, a.tps);
    let mode = match a.mode {
        ModeArg::Serial => ReplayMode::Serial,
        ModeArg::Parallel => ReplayMode::Parallel,
        ModeArg::Both => ReplayMode::Both,
    };
    let outcome = replay::replay(&spec, mode, &env, &cfg)?;
    let json = serde_json::to_string_pretty(&outcome.metrics)?;
    println!("{json}");
    if let Some(out) = &a.out {
        std::fs::write(out, format!("{json}\n"))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    let failed = [&outcome.metrics.serial, &outcome.metrics.parallel]
        .into_iter()
        .flatten()
        .any(|r| r.error.is_some());
    for r in [&outcome.metrics.serial, &outcome.metrics.parallel]
        .into_iter()
        .flatten()
    {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
        if let Some(e) = &r.error {
            eprintln!("program error ({:?} run): {e}", r.mode);
        }
    }
    Ok(if failed && mode != ReplayMode::Both {
        EXIT_PROGRAM_ERROR
    } else {
        0
    })
}

fn cmd_sweep(a: SweepArgs) -> Result<u8> {
    let (env, cfg) = build_env(&a.run)?;
    let mut paths: Vec<PathBuf> = glob::glob(&a.programs)
        .with_context(|| format!("bad glob {:?}", a.programs))?
        .collect::<Result<_, _>>()?;
    paths.sort();
    if paths.is_empty() {
        bail!("no programs match {:?}", a.programs);
    }
    let programs = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), read(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let template = spec_template(&a.run, String::new(), 1.0);
    let result = replay::sweep(&programs, &a.tps_list, &template, &env, &cfg);
    let jsonl = replay::write_sweep(&result, &a.out)?;
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} rows ({failed} with errors) -> {} and {}",
        result.rows.len(),
        a.out.display(),
        jsonl.display()
    );
    Ok(0)
}

fn cmd_model(a: ModelArgs) -> Result<u8> {
    let params: ModelParams = serde_json::from_str(&read(&a.params)?)
        .with_context(|| format!("parsing {}", a.params.display()))?;
    let s = model::summarize(&params)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
        return Ok(0);
    }
    let list = |xs: &[f64]| {
        xs.iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("t_serial_ms        {}", s.t_serial);
    println!("t_g_ms             [{}]", list(&s.schedule.t_g));
    println!("t_d_ms             [{}]", list(&s.schedule.t_d));
    println!("t_e_ms             [{}]", list(&s.schedule.t_e));
    println!("t_parallel_ms      {}", s.schedule.parallel);
    println!("closed_form_ms     {}", s.closed_form);
    println!("upper_bound_ms     {}", s.upper_bound);
    println!("overhead_bound_ms  {}", s.overhead_bound);
    println!("gen_bound_ms       {}", s.lower_bound.gen_bound);
    println!("exec_bound_ms      {}", s.lower_bound.exec_bound);
    println!("lower_bound_ms     {}", s.lower_bound.composite);
    match s.speedup_upper_bound {
        Some(b) => println!("speedup_bound      {b:.4}"),
        None => println!("speedup_bound      undefined"),
    }
    println!("realized_speedup   {:.4}", s.realized_speedup);
    match &s.uniform {
        Some(u) => println!("regime             {:?} ({} ms)", u.regime, u.parallel),
        None => println!("regime             non-uniform"),
    }
    match s.n_star {
        Some(n) => println!("n_star             {n}"),
        None => println!("n_star             undefined (zero setup)"),
    }
    Ok(0)
}

fn cmd_check(a: CheckArgs) -> Result<u8> {
    let program = read(&a.program)?;
    let report = replay::fidelity_check(&program, a.fragmentations.max(1));
    for run in &report.runs {
        println!(
            "{:<10} {} chunks, {}",
            run.label,
            run.chunk_count,
            if run.reconstructed {
                "identical"
            } else {
                "MISMATCH"
            }
        );
    }
    if !report.consistent {
        println!("chunk boundaries differ between fragmentations");
    }
    if a.show_chunks {
        for c in &report.chunks {
            println!(
                "--- chunk {} [{}..{}]",
                c.index, c.byte_span.start, c.byte_span.end
            );
            print!("{}", c.text);
            if !c.text.ends_with('\n') {
                println!();
            }
        }
    }
    println!("fidelity: {}", if report.ok { "ok" } else { "VIOLATION" });
    Ok(if report.ok { 0 } else { EXIT_FIDELITY })
}

fn cmd_selftest(a: WorkerArgs) -> Result<u8> {
    let checks = self_test(&worker_argv(&a)?, a.startup_timeout_ms);
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(if checks.iter().all(|c| c.passed) {
        0
    } else {
        EXIT_INFRA
    })
}
