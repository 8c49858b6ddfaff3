//! Fixed-rate token replay, latency metrics and chunking fidelity checks.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{Chunk, Chunker, TokenEvent};
use crate::clock::{Clock, ClockKind};
use crate::pipeline::{
    run_parallel, run_serial, PipelineConfig, PipelineError, PipelineTrace, ReplaySource, RunMode,
    SimPlan, SimulatedExecutor,
};
use crate::session::{start_session, SessionError};

/// Default characters per mock token.
pub const DEFAULT_TOKEN_CHARS: usize = 4;

/// Below this interval the wall clock cannot pace tokens faithfully.
const MIN_WALL_INTERVAL_MS: f64 = 1.0;

/// Realized pacing error above which a wall-clock report carries a warning.
const PACING_WARN_P95_MS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid replay spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("cannot run a worker session on a virtual clock")]
    WorkerNeedsWallClock,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A program replayed as a paced mock token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySpec {
    pub program: String,
    pub tps: f64,
    pub token_chars: usize,
    pub t_ft_ms: f64,
}

impl ReplaySpec {
    pub fn new(program: impl Into<String>, tps: f64) -> Self {
        ReplaySpec {
            program: program.into(),
            tps,
            token_chars: DEFAULT_TOKEN_CHARS,
            t_ft_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        if !self.tps.is_finite() || self.tps <= 0.0 {
            return Err(ReplayError::InvalidSpec(format!(
                "tps must be positive, got {}",
                self.tps
            )));
        }
        if self.token_chars == 0 {
            return Err(ReplayError::InvalidSpec(
                "token_chars must be at least 1".into(),
            ));
        }
        if self.t_ft_ms.is_nan() || self.t_ft_ms < 0.0 {
            return Err(ReplayError::InvalidSpec(
                "t_ft_ms must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Interval between tokens in milliseconds.
    pub fn interval_ms(&self) -> f64 {
        1000.0 / self.tps
    }
}

/// Slices the program into `token_chars`-character tokens; token `k` (1-based)
/// is scheduled at `t_ft + k * 1000 / tps`.
pub fn tokenize_replay(spec: &ReplaySpec) -> Vec<TokenEvent> {
    let chars: Vec<char> = spec.program.chars().collect();
    chars
        .chunks(spec.token_chars.max(1))
        .enumerate()
        .map(|(k, piece)| TokenEvent {
            text: piece.iter().collect(),
            arrival_time: spec.t_ft_ms + (k + 1) as f64 * 1000.0 / spec.tps,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: RunMode,
    pub tps: f64,
    pub token_count: usize,
    pub gen_time_ms: f64,
    pub e2el_ms: f64,
    /// Execution time left exposed after generation; absent when interrupted.
    pub nel_ms: Option<f64>,
    pub nel_saving_pct: Option<f64>,
    pub e2el_saving_pct: Option<f64>,
    pub interrupted: bool,
    pub chunk_count: usize,
    pub batch_count: usize,
    pub measured_setup_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Reports for a serial and/or parallel run of the same program.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub serial: Option<LatencyReport>,
    pub parallel: Option<LatencyReport>,
}

/// Execution time of the trace falling after generation ended.
pub fn non_overlapped_ms(trace: &PipelineTrace) -> f64 {
    trace
        .exec_events
        .iter()
        .map(|e| (e.finish_at - e.dispatch_at.max(trace.gen_end_at)).max(0.0))
        .sum()
}

fn report_for(trace: &PipelineTrace, tps: f64) -> LatencyReport {
    let gen_time_ms = if trace.token_count == 0 {
        0.0
    } else {
        trace.gen_end_at - trace.first_token_at
    };
    let nel_ms = match trace.mode {
        RunMode::Serial => Some(
            trace
                .exec_events
                .iter()
                .map(|e| e.finish_at - e.dispatch_at)
                .sum(),
        ),
        RunMode::Parallel if trace.interrupted => None,
        RunMode::Parallel => Some(non_overlapped_ms(trace)),
    };
    let chunk_count = match trace.mode {
        RunMode::Serial => trace.exec_events.len(),
        RunMode::Parallel => trace.chunks.len(),
    };
    LatencyReport {
        mode: trace.mode,
        tps,
        token_count: trace.token_count,
        gen_time_ms,
        e2el_ms: trace.end_at() - trace.run_start,
        nel_ms,
        nel_saving_pct: None,
        e2el_saving_pct: None,
        interrupted: trace.interrupted,
        chunk_count,
        batch_count: trace.exec_events.len(),
        measured_setup_ms: trace.measured_setup_ms,
        error: trace.error.as_ref().map(|e| {
            format!(
                "{}: {}",
                e.exc_type.as_deref().unwrap_or("Timeout"),
                e.exc_message.as_deref().unwrap_or("")
            )
        }),
        warnings: Vec::new(),
    }
}

fn saving_pct(serial: Option<f64>, parallel: Option<f64>) -> Option<f64> {
    match (serial, parallel) {
        (Some(s), Some(p)) if s > 0.0 => Some(100.0 * (s - p) / s),
        _ => None,
    }
}

/// Derives NEL/E2EL reports; savings appear on the parallel report only when
/// both runs are given.
pub fn compute_metrics(
    serial: Option<&PipelineTrace>,
    parallel: Option<&PipelineTrace>,
    tps: f64,
) -> Metrics {
    let serial = serial.map(|t| report_for(t, tps));
    let mut parallel = parallel.map(|t| report_for(t, tps));
    if let (Some(s), Some(p)) = (&serial, &mut parallel) {
        p.nel_saving_pct = saving_pct(s.nel_ms, p.nel_ms);
        p.e2el_saving_pct = saving_pct(Some(s.e2el_ms), Some(p.e2el_ms));
    }
    Metrics { serial, parallel }
}

// ---------------------------------------------------------------------------
// Replay

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Serial,
    Parallel,
    Both,
}

impl ReplayMode {
    fn serial(self) -> bool {
        matches!(self, ReplayMode::Serial | ReplayMode::Both)
    }

    fn parallel(self) -> bool {
        matches!(self, ReplayMode::Parallel | ReplayMode::Both)
    }
}

/// Where blocks execute.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplayEnv {
    /// A persistent interpreter worker process; always on the wall clock.
    Worker {
        argv: Vec<String>,
        startup_timeout_ms: u64,
    },
    /// The simulated executor.
    Simulated { plan: SimPlan, clock: ClockKind },
}

impl ReplayEnv {
    fn clock_kind(&self) -> ClockKind {
        match self {
            ReplayEnv::Worker { .. } => ClockKind::Wall,
            ReplayEnv::Simulated { clock, .. } => *clock,
        }
    }

    fn fresh_clock(&self) -> Clock {
        match self.clock_kind() {
            ClockKind::Wall => Clock::wall(),
            ClockKind::Virtual => Clock::virtual_clock(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub metrics: Metrics,
    pub serial_trace: Option<PipelineTrace>,
    pub parallel_trace: Option<PipelineTrace>,
}

fn pacing_warnings(spec: &ReplaySpec, kind: ClockKind, trace: &PipelineTrace) -> Vec<String> {
    let mut warnings = Vec::new();
    if kind == ClockKind::Wall {
        if spec.interval_ms() < MIN_WALL_INTERVAL_MS {
            warnings.push(format!(
                "token interval {:.3} ms is below wall-clock pacing resolution",
                spec.interval_ms()
            ));
        }
        if let Some(p95) = trace.pacing_p95_ms {
            if p95 >= PACING_WARN_P95_MS {
                warnings.push(format!("token pacing p95 lateness {p95:.2} ms"));
            }
        }
    }
    warnings
}

/// One run of one mode on a fresh clock and executor.
fn run_once(
    spec: &ReplaySpec,
    mode: RunMode,
    env: &ReplayEnv,
    cfg: &PipelineConfig,
) -> Result<PipelineTrace, ReplayError> {
    let clock = env.fresh_clock();
    let events: Vec<TokenEvent> = tokenize_replay(spec)
        .into_iter()
        .map(|mut e| {
            e.arrival_time += clock.now_ms();
            e
        })
        .collect();
    let mut source = ReplaySource::new(events);
    let cfg = PipelineConfig {
        clock: clock.kind(),
        ..*cfg
    };
    let trace = match env {
        ReplayEnv::Worker {
            argv,
            startup_timeout_ms,
        } => {
            let mut session = start_session(argv, *startup_timeout_ms)?;
            let trace = match mode {
                RunMode::Serial => run_serial(&mut source, &mut session, &clock)?,
                RunMode::Parallel => run_parallel(&mut source, &mut session, &cfg, &clock)?,
            };
            session.shutdown()?;
            trace
        }
        ReplayEnv::Simulated { plan, .. } => {
            let mut exec = SimulatedExecutor::new(plan.clone(), clock.clone());
            match mode {
                RunMode::Serial => run_serial(&mut source, &mut exec, &clock)?,
                RunMode::Parallel => run_parallel(&mut source, &mut exec, &cfg, &clock)?,
            }
        }
    };
    Ok(trace)
}

/// Replays the program in the requested mode(s) and derives the reports.
pub fn replay(
    spec: &ReplaySpec,
    mode: ReplayMode,
    env: &ReplayEnv,
    cfg: &PipelineConfig,
) -> Result<ReplayOutcome, ReplayError> {
    spec.validate()?;
    if matches!(env, ReplayEnv::Worker { .. }) && cfg.clock == ClockKind::Virtual {
        return Err(ReplayError::WorkerNeedsWallClock);
    }
    let serial_trace = mode
        .serial()
        .then(|| run_once(spec, RunMode::Serial, env, cfg))
        .transpose()?;
    let parallel_trace = mode
        .parallel()
        .then(|| run_once(spec, RunMode::Parallel, env, cfg))
        .transpose()?;
    let mut metrics = compute_metrics(serial_trace.as_ref(), parallel_trace.as_ref(), spec.tps);
    let kind = env.clock_kind();
    if let (Some(r), Some(t)) = (metrics.serial.as_mut(), serial_trace.as_ref()) {
        r.warnings = pacing_warnings(spec, kind, t);
    }
    if let (Some(r), Some(t)) = (metrics.parallel.as_mut(), parallel_trace.as_ref()) {
        r.warnings = pacing_warnings(spec, kind, t);
    }
    Ok(ReplayOutcome {
        metrics,
        serial_trace,
        parallel_trace,
    })
}

// ---------------------------------------------------------------------------
// Fidelity

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FragmentationRun {
    pub label: String,
    pub chunk_count: usize,
    pub reconstructed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    /// Every fragmentation reconstructs the program and all agree on the chunks.
    pub ok: bool,
    pub consistent: bool,
    pub runs: Vec<FragmentationRun>,
    /// Chunks of the first fragmentation.
    pub chunks: Vec<Chunk>,
}

/// Splits `text` into fragments for fidelity run `n`: 1-char, 4-char, one
/// line per fragment, then deterministic pseudo-random sizes.
pub fn fragment(text: &str, n: usize) -> (String, Vec<String>) {
    let chars: Vec<char> = text.chars().collect();
    let fixed = |size: usize| chars.chunks(size).map(|c| c.iter().collect()).collect();
    match n {
        0 => ("1-char".into(), fixed(1)),
        1 => ("4-char".into(), fixed(4)),
        2 => (
            "line".into(),
            text.split_inclusive('\n').map(str::to_string).collect(),
        ),
        _ => {
            // splitmix64 seeded by the run number
            let mut state = n as u64;
            let mut next = || {
                state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
                z ^ (z >> 31)
            };
            let mut out = Vec::new();
            let mut i = 0;
            while i < chars.len() {
                let size = 1 + (next() % 12) as usize;
                let end = (i + size).min(chars.len());
                out.push(chars[i..end].iter().collect());
                i = end;
            }
            (format!("random-{n}"), out)
        }
    }
}

/// Runs the chunker over fragments and returns every chunk in order.
pub fn chunk_fragments(fragments: &[String]) -> Vec<Chunk> {
    let mut chunker = Chunker::new();
    let mut chunks = Vec::new();
    for (k, f) in fragments.iter().enumerate().filter(|(_, f)| !f.is_empty()) {
        chunks.extend(chunker.feed(&TokenEvent::new(f.clone(), k as f64)));
    }
    chunks.extend(chunker.finish());
    chunks
}

/// Checks lossless reconstruction and fragmentation independence.
pub fn fidelity_check(program: &str, fragmentations: usize) -> FidelityReport {
    let mut runs = Vec::new();
    let mut reference: Option<Vec<Chunk>> = None;
    let mut consistent = true;
    for n in 0..fragmentations.max(1) {
        let (label, fragments) = fragment(program, n);
        let chunks = chunk_fragments(&fragments);
        let rebuilt: String = chunks.iter().map(|c| c.text.as_str()).collect();
        let tiled = chunks.iter().try_fold(0, |at, c| {
            (c.byte_span.start == at).then_some(c.byte_span.end)
        }) == Some(program.len());
        runs.push(FragmentationRun {
            label,
            chunk_count: chunks.len(),
            reconstructed: rebuilt == program && tiled,
        });
        match &reference {
            None => reference = Some(chunks),
            Some(r) => {
                let same = r.len() == chunks.len()
                    && r.iter()
                        .zip(&chunks)
                        .all(|(a, b)| a.text == b.text && a.byte_span == b.byte_span);
                consistent &= same;
            }
        }
    }
    FidelityReport {
        ok: consistent && runs.iter().all(|r| r.reconstructed),
        consistent,
        runs,
        chunks: reference.unwrap_or_default(),
    }
}

// ---------------------------------------------------------------------------
// Sweeps

/// One (program, tps) pair of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub program: String,
    pub tps: f64,
    pub token_count: Option<usize>,
    pub chunk_count: Option<usize>,
    pub batch_count: Option<usize>,
    pub gen_time_ms: Option<f64>,
    pub serial_e2el_ms: Option<f64>,
    pub parallel_e2el_ms: Option<f64>,
    pub serial_nel_ms: Option<f64>,
    pub parallel_nel_ms: Option<f64>,
    pub nel_saving_pct: Option<f64>,
    pub e2el_saving_pct: Option<f64>,
    pub interrupted: Option<bool>,
    pub measured_setup_ms: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(program: &str, tps: f64, error: String) -> Self {
        SweepRow {
            program: program.to_string(),
            tps,
            token_count: None,
            chunk_count: None,
            batch_count: None,
            gen_time_ms: None,
            serial_e2el_ms: None,
            parallel_e2el_ms: None,
            serial_nel_ms: None,
            parallel_nel_ms: None,
            nel_saving_pct: None,
            e2el_saving_pct: None,
            interrupted: None,
            measured_setup_ms: None,
            error: Some(error),
        }
    }

    fn from_metrics(program: &str, tps: f64, m: &Metrics) -> Self {
        let (s, p) = (m.serial.as_ref(), m.parallel.as_ref());
        SweepRow {
            program: program.to_string(),
            tps,
            token_count: p.or(s).map(|r| r.token_count),
            chunk_count: p.map(|r| r.chunk_count),
            batch_count: p.map(|r| r.batch_count),
            gen_time_ms: p.or(s).map(|r| r.gen_time_ms),
            serial_e2el_ms: s.map(|r| r.e2el_ms),
            parallel_e2el_ms: p.map(|r| r.e2el_ms),
            serial_nel_ms: s.and_then(|r| r.nel_ms),
            parallel_nel_ms: p.and_then(|r| r.nel_ms),
            nel_saving_pct: p.and_then(|r| r.nel_saving_pct),
            e2el_saving_pct: p.and_then(|r| r.e2el_saving_pct),
            interrupted: p.map(|r| r.interrupted),
            measured_setup_ms: p.and_then(|r| r.measured_setup_ms),
            error: p.or(s).and_then(|r| r.error.clone()),
        }
    }
}

/// A per-run object of the machine-readable sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub program: String,
    #[serde(flatten)]
    pub report: LatencyReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunRecord>,
}

/// Replays every (program, tps) pair in both modes, sequentially. Failures are
/// recorded per row and the sweep continues.
pub fn sweep(
    programs: &[(String, String)],
    tps_list: &[f64],
    template: &ReplaySpec,
    env: &ReplayEnv,
    cfg: &PipelineConfig,
) -> SweepResult {
    let mut result = SweepResult::default();
    for (name, program) in programs {
        for &tps in tps_list {
            let spec = ReplaySpec {
                program: program.clone(),
                tps,
                ..template.clone()
            };
            match replay(&spec, ReplayMode::Both, env, cfg) {
                Ok(outcome) => {
                    result
                        .rows
                        .push(SweepRow::from_metrics(name, tps, &outcome.metrics));
                    for report in [outcome.metrics.serial, outcome.metrics.parallel]
                        .into_iter()
                        .flatten()
                    {
                        result.runs.push(RunRecord {
                            program: name.clone(),
                            report,
                        });
                    }
                }
                Err(e) => {
                    log::warn!("sweep row {name} @ {tps} TPS failed: {e}");
                    result.rows.push(SweepRow::failed(name, tps, e.to_string()));
                }
            }
        }
    }
    result
}

/// Path of the JSON-lines report written next to a table.
pub fn jsonl_path_for(table: &Path) -> PathBuf {
    table.with_extension("jsonl")
}

/// Writes the flat table to `table` and one JSON object per run next to it.
pub fn write_sweep(result: &SweepResult, table: &Path) -> Result<PathBuf, ReplayError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReplayError::Io { path, source }
    };
    let mut writer = csv::Writer::from_path(table)?;
    for row in &result.rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(io_err(table))?;

    let jsonl = jsonl_path_for(table);
    let mut file = std::fs::File::create(&jsonl).map_err(io_err(&jsonl))?;
    for run in &result.runs {
        let line = serde_json::to_string(run).expect("report serializes");
        writeln!(file, "{line}").map_err(io_err(&jsonl))?;
    }
    Ok(jsonl)
}
