//! Producer/consumer orchestration of generation, detection and execution.
//!
//! The producer consumes a token source, feeds the [`Chunker`] and pushes
//! confirmed chunks onto a [`PendingQueue`]. The consumer takes batches off the
//! queue whenever the executor is idle. Two drivers share those parts:
//!
//! * on a [`Clock::Virtual`] the run is a single-threaded discrete-event loop,
//!   deterministic to the bit;
//! * on a [`Clock::Wall`] the producer runs on its own thread and paces tokens
//!   to their scheduled arrival times.
//!
//! The resulting [`PipelineTrace`] realizes
//! `t_e,i = max(t_d,i, t_e,i-1) + T_setup + T_exe,i`.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::{self, Chunk, Chunker, Head, TokenEvent};
use crate::clock::{Clock, ClockKind};
use crate::session::{ExecResult, ExecStatus, SessionError, SessionHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnError {
    /// Cancel generation as soon as a block fails.
    Interrupt,
    /// Keep generating, execute nothing further, report at stream end.
    Defer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub on_error: OnError,
    pub gating_enabled: bool,
    pub batching_enabled: bool,
    pub clock: ClockKind,
}

impl PipelineConfig {
    pub fn new(clock: ClockKind) -> Self {
        PipelineConfig {
            on_error: OnError::Interrupt,
            gating_enabled: true,
            batching_enabled: true,
            clock,
        }
    }

    /// Plain one-chunk-per-call execution.
    pub fn unbatched(clock: ClockKind) -> Self {
        PipelineConfig {
            gating_enabled: false,
            batching_enabled: false,
            ..Self::new(clock)
        }
    }
}

/// Infrastructure failures. These never go through the `on_error` policy.
#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("simulated executor has no plan entry for statement #{ordinal}: {text:?}")]
    Unplanned { ordinal: usize, text: String },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("executor infrastructure failure: {0}")]
    Executor(#[from] ExecutorError),
    #[error("run configured for a {expected:?} clock but was given a {actual:?} clock")]
    ClockMismatch {
        expected: ClockKind,
        actual: ClockKind,
    },
    #[error("executor keeps time on a different clock than the run")]
    ForeignExecutorClock,
}

/// Executes blocks sequentially in one persistent state.
pub trait Executor {
    fn exec(&mut self, code: &str) -> Result<ExecResult, ExecutorError>;

    /// Current estimate of the per-call overhead.
    fn setup_overhead_ms(&self) -> Option<f64>;

    /// The clock this executor spends time on, if it consumes run time itself.
    /// Executors that return `None` are timed by the driver.
    fn clock(&self) -> Option<&Clock> {
        None
    }
}

impl<E: Executor + ?Sized> Executor for &mut E {
    fn exec(&mut self, code: &str) -> Result<ExecResult, ExecutorError> {
        (**self).exec(code)
    }

    fn setup_overhead_ms(&self) -> Option<f64> {
        (**self).setup_overhead_ms()
    }

    fn clock(&self) -> Option<&Clock> {
        (**self).clock()
    }
}

impl Executor for SessionHandle {
    fn exec(&mut self, code: &str) -> Result<ExecResult, ExecutorError> {
        let timeout = self.exec_timeout();
        Ok(self.exec_block(code, timeout)?)
    }

    fn setup_overhead_ms(&self) -> Option<f64> {
        self.measured_setup_ms()
    }
}

// ---------------------------------------------------------------------------
// Token sources

/// A stream of token events. Arrival times are the scheduled times; the wall
/// driver waits for them, the virtual driver jumps to them.
pub trait TokenSource {
    fn next_event(&mut self) -> Option<TokenEvent>;

    /// Called once when the consumer asks generation to stop.
    fn cancel(&mut self) {}
}

/// Replays a fixed list of events.
#[derive(Debug, Clone, Default)]
pub struct ReplaySource {
    events: VecDeque<TokenEvent>,
    cancelled: bool,
}

impl ReplaySource {
    pub fn new(events: Vec<TokenEvent>) -> Self {
        ReplaySource {
            events: events.into(),
            cancelled: false,
        }
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled
    }
}

impl TokenSource for ReplaySource {
    fn next_event(&mut self) -> Option<TokenEvent> {
        if self.cancelled {
            return None;
        }
        self.events.pop_front()
    }

    fn cancel(&mut self) {
        self.cancelled = true;
    }
}

// ---------------------------------------------------------------------------
// Gating and batching

/// True when every top-level statement of the chunk is a function or class
/// definition (decorators included). Unparseable chunks are never gated.
pub fn is_gated(chunk: &Chunk) -> bool {
    is_gated_text(&chunk.text)
}

pub fn is_gated_text(text: &str) -> bool {
    match chunker::top_level_heads(text) {
        Some(heads) => heads
            .iter()
            .all(|h| matches!(h, Head::Decorator | Head::Def | Head::Class)),
        None => false,
    }
}

/// Several consecutive chunks dispatched as one executor call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedChunk {
    pub member_indices: Vec<usize>,
    pub text: String,
    /// Latest `detected_at` among the members.
    pub ready_at: f64,
}

#[derive(Debug, Clone)]
struct QueuedChunk {
    chunk: Chunk,
    gated: bool,
}

/// Chunks confirmed but not yet dispatched.
#[derive(Debug, Clone)]
pub struct PendingQueue {
    items: VecDeque<QueuedChunk>,
    gating: bool,
    batching: bool,
    closed: bool,
}

impl PendingQueue {
    pub fn new(gating: bool, batching: bool) -> Self {
        PendingQueue {
            items: VecDeque::new(),
            gating,
            batching,
            closed: false,
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self::new(cfg.gating_enabled, cfg.batching_enabled)
    }

    pub fn push(&mut self, chunk: Chunk) {
        let gated = self.gating && is_gated(&chunk);
        self.items.push_back(QueuedChunk { chunk, gated });
    }

    /// Marks end of stream: gated residue becomes dispatchable.
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn is_dispatchable(&self) -> bool {
        !self.items.is_empty() && (self.closed || self.items.iter().any(|q| !q.gated))
    }

    /// Dequeues the next executor call. With batching every pending chunk is
    /// merged; without it, one chunk (plus any gated chunks ahead of it).
    pub fn take_batch(&mut self) -> Option<MergedChunk> {
        if !self.is_dispatchable() {
            return None;
        }
        let n = if self.batching {
            self.items.len()
        } else {
            self.items
                .iter()
                .position(|q| !q.gated)
                .map_or(self.items.len(), |p| p + 1)
        };
        let mut merged = MergedChunk {
            member_indices: Vec::with_capacity(n),
            text: String::new(),
            ready_at: f64::NEG_INFINITY,
        };
        for q in self.items.drain(..n) {
            merged.member_indices.push(q.chunk.index);
            merged.text.push_str(&q.chunk.text);
            merged.ready_at = merged.ready_at.max(q.chunk.detected_at);
        }
        Some(merged)
    }
}

// ---------------------------------------------------------------------------
// Simulated executor

/// Selects which statements a plan entry applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementMatch {
    /// 1-based ordinal among all statements executed in the session.
    Ordinal(usize),
    /// Statement text contains this substring.
    Contains(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedError {
    pub exc_type: String,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    #[serde(rename = "match")]
    pub matcher: StatementMatch,
    pub exec_ms: f64,
    #[serde(default)]
    pub error: Option<ScriptedError>,
}

/// Timing script for [`SimulatedExecutor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlan {
    /// Overhead charged once per executor call.
    pub setup_ms: f64,
    #[serde(default)]
    pub entries: Vec<PlanEntry>,
    /// Execution time of statements no entry matches; `None` makes them an error.
    #[serde(default)]
    pub fallback_exec_ms: Option<f64>,
}

impl SimPlan {
    pub fn uniform(exec_ms: f64, setup_ms: f64) -> Self {
        SimPlan {
            setup_ms,
            entries: Vec::new(),
            fallback_exec_ms: Some(exec_ms),
        }
    }

    pub fn with_entry(mut self, matcher: StatementMatch, exec_ms: f64) -> Self {
        self.entries.push(PlanEntry {
            matcher,
            exec_ms,
            error: None,
        });
        self
    }

    pub fn with_error(mut self, matcher: StatementMatch, exec_ms: f64, exc_type: &str) -> Self {
        self.entries.push(PlanEntry {
            matcher,
            exec_ms,
            error: Some(ScriptedError {
                exc_type: exc_type.to_string(),
                message: "scripted failure".to_string(),
            }),
        });
        self
    }
}

/// Deterministic stand-in for an interpreter: spends the planned time on the
/// run clock and records which statements it executed.
#[derive(Debug, Clone)]
pub struct SimulatedExecutor {
    plan: SimPlan,
    clock: Clock,
    executed: Vec<String>,
    next_request_id: u64,
}

impl SimulatedExecutor {
    pub fn new(plan: SimPlan, clock: Clock) -> Self {
        SimulatedExecutor {
            plan,
            clock,
            executed: Vec::new(),
            next_request_id: 1,
        }
    }

    /// Statements executed so far, in order.
    pub fn executed_statements(&self) -> &[String] {
        &self.executed
    }

    pub fn reset(&mut self) {
        self.executed.clear();
    }

    fn entry_for(&self, ordinal: usize, text: &str) -> Option<(f64, Option<&ScriptedError>)> {
        self.plan
            .entries
            .iter()
            .find(|e| match &e.matcher {
                StatementMatch::Ordinal(n) => *n == ordinal,
                StatementMatch::Contains(s) => text.contains(s.as_str()),
            })
            .map(|e| (e.exec_ms, e.error.as_ref()))
            .or_else(|| self.plan.fallback_exec_ms.map(|ms| (ms, None)))
    }
}

/// Whether a block contains any code at all.
fn has_statement(text: &str) -> bool {
    chunker::top_level_heads(text).is_none_or(|h| !h.is_empty())
}

/// Builds a simulated executor running `plan` on `clock`.
pub fn simulated_executor(plan: SimPlan, clock: Clock) -> SimulatedExecutor {
    SimulatedExecutor::new(plan, clock)
}

impl Executor for SimulatedExecutor {
    fn exec(&mut self, code: &str) -> Result<ExecResult, ExecutorError> {
        let id = self.next_request_id;
        self.next_request_id += 1;
        let mut total = 0.0;
        let mut failure = None;
        for stmt in chunker::split_statements(code) {
            if !has_statement(&stmt) {
                continue;
            }
            let ordinal = self.executed.len() + 1;
            let (ms, err) =
                self.entry_for(ordinal, &stmt)
                    .ok_or_else(|| ExecutorError::Unplanned {
                        ordinal,
                        text: stmt.clone(),
                    })?;
            let err = err.cloned();
            total += ms;
            self.executed.push(stmt);
            if let Some(err) = err {
                failure = Some(err);
                break;
            }
        }
        let setup = self.plan.setup_ms;
        self.clock.sleep_ms(setup + total);
        let mut result = ExecResult::ok(id, total, setup + total);
        if let Some(err) = failure {
            result.status = ExecStatus::Error;
            result.traceback = Some(format!("{}: {}\n", err.exc_type, err.message));
            result.exc_type = Some(err.exc_type);
            result.exc_message = Some(err.message);
        }
        Ok(result)
    }

    fn setup_overhead_ms(&self) -> Option<f64> {
        Some(self.plan.setup_ms)
    }

    fn clock(&self) -> Option<&Clock> {
        Some(&self.clock)
    }
}

// ---------------------------------------------------------------------------
// Traces

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Serial,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecEvent {
    pub batch: MergedChunk,
    pub dispatch_at: f64,
    pub setup_ms: f64,
    pub finish_at: f64,
    pub status: ExecStatus,
    pub result: ExecResult,
}

/// Event log of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub mode: RunMode,
    pub clock: ClockKind,
    pub run_start: f64,
    /// Realized time to first token.
    pub first_token_at: f64,
    /// Last token arrival, or the interruption time.
    pub gen_end_at: f64,
    pub token_count: usize,
    pub chunks: Vec<Chunk>,
    pub exec_events: Vec<ExecEvent>,
    pub interrupted: bool,
    pub error: Option<ExecResult>,
    /// Program text generated up to the failure; empty unless interrupted.
    pub partial_code: String,
    pub measured_setup_ms: Option<f64>,
    /// 95th percentile of token lateness against the schedule.
    pub pacing_p95_ms: Option<f64>,
}

impl PipelineTrace {
    /// Completion of the last event of the run.
    pub fn end_at(&self) -> f64 {
        self.exec_events
            .last()
            .map_or(self.gen_end_at, |e| e.finish_at.max(self.gen_end_at))
    }

    /// Concatenated stdout of every executor call.
    pub fn stdout(&self) -> String {
        self.exec_events
            .iter()
            .map(|e| e.result.stdout.as_str())
            .collect()
    }
}

fn check_clocks<E: Executor + ?Sized>(
    cfg: &PipelineConfig,
    clock: &Clock,
    exec: &E,
) -> Result<(), PipelineError> {
    if cfg.clock != clock.kind() {
        return Err(PipelineError::ClockMismatch {
            expected: cfg.clock,
            actual: clock.kind(),
        });
    }
    match exec.clock() {
        Some(c) if !c.same_source(clock) => Err(PipelineError::ForeignExecutorClock),
        _ => Ok(()),
    }
}

/// Runs one executor call and charges its time to the run clock.
fn dispatch<E: Executor + ?Sized>(
    exec: &mut E,
    clock: &Clock,
    batch: MergedChunk,
) -> Result<ExecEvent, ExecutorError> {
    let dispatch_at = clock.now_ms();
    let result = exec.exec(&batch.text)?;
    if exec.clock().is_none() {
        if let Clock::Virtual(v) = clock {
            v.advance(result.wall_ms);
        }
    }
    let finish_at = clock.now_ms();
    Ok(ExecEvent {
        setup_ms: result.setup_ms(),
        status: result.status,
        batch,
        dispatch_at,
        finish_at,
        result,
    })
}

// ---------------------------------------------------------------------------
// Drivers

/// Overlaps generation, detection and execution.
pub fn run_parallel<S, E>(
    source: &mut S,
    exec: &mut E,
    cfg: &PipelineConfig,
    clock: &Clock,
) -> Result<PipelineTrace, PipelineError>
where
    S: TokenSource + Send + ?Sized,
    E: Executor + ?Sized,
{
    check_clocks(cfg, clock, &*exec)?;
    match clock {
        Clock::Virtual(_) => run_parallel_virtual(source, exec, cfg, clock),
        Clock::Wall(_) => run_parallel_threaded(source, exec, cfg, clock),
    }
}

/// Producer-side state shared by both drivers.
struct Producer {
    chunker: Chunker,
    chunks: Vec<Chunk>,
    fed_text: String,
    token_count: usize,
    first_token_at: Option<f64>,
    last_arrival: Option<f64>,
    lateness: Vec<f64>,
}

impl Producer {
    fn new() -> Self {
        Producer {
            chunker: Chunker::new(),
            chunks: Vec::new(),
            fed_text: String::new(),
            token_count: 0,
            first_token_at: None,
            last_arrival: None,
            lateness: Vec::new(),
        }
    }

    fn feed(&mut self, ev: &TokenEvent, scheduled: f64) -> Vec<Chunk> {
        self.lateness.push((ev.arrival_time - scheduled).max(0.0));
        self.first_token_at.get_or_insert(ev.arrival_time);
        self.last_arrival = Some(ev.arrival_time);
        self.token_count += 1;
        self.fed_text.push_str(&ev.text);
        let out = self.chunker.feed(ev);
        self.chunks.extend(out.iter().cloned());
        out
    }

    fn finish(&mut self) -> Vec<Chunk> {
        let out = self.chunker.finish();
        self.chunks.extend(out.iter().cloned());
        out
    }
}

fn run_parallel_virtual<S, E>(
    source: &mut S,
    exec: &mut E,
    cfg: &PipelineConfig,
    clock: &Clock,
) -> Result<PipelineTrace, PipelineError>
where
    S: TokenSource + ?Sized,
    E: Executor + ?Sized,
{
    let run_start = clock.now_ms();
    let mut producer = Producer::new();
    let mut queue = PendingQueue::from_config(cfg);
    let mut next = source.next_event();
    let mut stream_done = false;
    let mut events: Vec<ExecEvent> = Vec::new();
    let mut failure: Option<ExecResult> = None;
    let mut interrupted_at: Option<f64> = None;

    // feeds every token that has arrived by `t`
    let feed_until = |t: f64,
                      next: &mut Option<TokenEvent>,
                      source: &mut S,
                      producer: &mut Producer,
                      queue: &mut PendingQueue,
                      accept: bool| {
        while let Some(ev) = next.take_if(|ev| ev.arrival_time <= t) {
            for chunk in producer.feed(&ev, ev.arrival_time) {
                if accept {
                    queue.push(chunk);
                }
            }
            *next = source.next_event();
        }
    };

    loop {
        let now = clock.now_ms();
        let accept = failure.is_none();
        feed_until(now, &mut next, source, &mut producer, &mut queue, accept);
        if next.is_none() && !stream_done {
            stream_done = true;
            for chunk in producer.finish() {
                if accept {
                    queue.push(chunk);
                }
            }
            queue.close();
        }

        if failure.is_none() {
            if let Some(batch) = queue.take_batch() {
                debug_assert!(batch.ready_at <= now);
                let event = dispatch(exec, clock, batch)?;
                let ok = event.status == ExecStatus::Ok;
                let finish_at = event.finish_at;
                if !ok {
                    failure = Some(event.result.clone());
                }
                events.push(event);
                if !ok {
                    queue.clear();
                    if cfg.on_error == OnError::Interrupt {
                        // tokens generated while the failing block ran
                        feed_until(
                            finish_at,
                            &mut next,
                            source,
                            &mut producer,
                            &mut queue,
                            false,
                        );
                        source.cancel();
                        interrupted_at = Some(finish_at);
                        break;
                    }
                }
                continue;
            }
        }

        match &next {
            Some(ev) => clock.sleep_until(ev.arrival_time),
            None => break,
        }
    }

    let interrupted = interrupted_at.is_some();
    let partial_code = if interrupted {
        producer.fed_text.clone()
    } else {
        String::new()
    };
    Ok(PipelineTrace {
        mode: RunMode::Parallel,
        clock: clock.kind(),
        run_start,
        first_token_at: producer.first_token_at.unwrap_or(run_start),
        gen_end_at: interrupted_at
            .or(producer.last_arrival)
            .unwrap_or(run_start),
        token_count: producer.token_count,
        chunks: producer.chunks,
        exec_events: events,
        interrupted,
        error: failure,
        partial_code,
        measured_setup_ms: exec.setup_overhead_ms(),
        pacing_p95_ms: p95(&producer.lateness),
    })
}

/// 95th percentile by nearest rank.
pub(crate) fn p95(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

struct Shared {
    queue: PendingQueue,
    /// Set by the consumer; the time generation was told to stop.
    cancel_at: Option<f64>,
    producer_done: bool,
}

fn run_parallel_threaded<S, E>(
    source: &mut S,
    exec: &mut E,
    cfg: &PipelineConfig,
    clock: &Clock,
) -> Result<PipelineTrace, PipelineError>
where
    S: TokenSource + Send + ?Sized,
    E: Executor + ?Sized,
{
    let run_start = clock.now_ms();
    let shared = Mutex::new(Shared {
        queue: PendingQueue::from_config(cfg),
        cancel_at: None,
        producer_done: false,
    });
    let signal = Condvar::new();
    let lock = || shared.lock().unwrap_or_else(|e| e.into_inner());

    std::thread::scope(|scope| {
        let producer = scope.spawn(|| {
            let mut producer = Producer::new();
            let mut cancelled = false;
            while let Some(ev) = source.next_event() {
                // wait for the scheduled arrival, waking early on cancellation
                let mut guard = lock();
                loop {
                    if guard.cancel_at.is_some() {
                        cancelled = true;
                        break;
                    }
                    let remaining = ev.arrival_time - clock.now_ms();
                    if remaining <= 0.0 {
                        break;
                    }
                    let wait = std::time::Duration::from_secs_f64(remaining / 1000.0);
                    guard = signal
                        .wait_timeout(guard, wait)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
                drop(guard);
                if cancelled {
                    break;
                }
                let realized = TokenEvent {
                    text: ev.text,
                    arrival_time: clock.now_ms(),
                };
                let chunks = producer.feed(&realized, ev.arrival_time);
                if !chunks.is_empty() {
                    let emitted_at = clock.now_ms();
                    let mut guard = lock();
                    for mut chunk in chunks {
                        chunk.detected_at = chunk.detected_at.max(emitted_at);
                        guard.queue.push(chunk);
                    }
                    drop(guard);
                    signal.notify_all();
                }
            }
            if cancelled {
                source.cancel();
            } else {
                let chunks = producer.finish();
                let emitted_at = clock.now_ms();
                let mut guard = lock();
                for mut chunk in chunks {
                    chunk.detected_at = chunk.detected_at.max(emitted_at);
                    guard.queue.push(chunk);
                }
                guard.queue.close();
            }
            lock().producer_done = true;
            signal.notify_all();
            producer
        });

        let mut events = Vec::new();
        let mut failure: Option<ExecResult> = None;
        let mut infra: Option<ExecutorError> = None;
        loop {
            let batch = {
                let mut guard = lock();
                loop {
                    if failure.is_none() && guard.queue.is_dispatchable() {
                        break guard.queue.take_batch();
                    }
                    if guard.producer_done && (failure.is_some() || guard.queue.is_empty()) {
                        guard.queue.clear();
                        break None;
                    }
                    guard = signal.wait(guard).unwrap_or_else(|e| e.into_inner());
                }
            };
            let Some(batch) = batch else { break };
            match dispatch(exec, clock, batch) {
                Ok(event) => {
                    let ok = event.status == ExecStatus::Ok;
                    let finish_at = event.finish_at;
                    if !ok {
                        failure = Some(event.result.clone());
                    }
                    events.push(event);
                    if !ok {
                        let mut guard = lock();
                        guard.queue.clear();
                        if cfg.on_error == OnError::Interrupt {
                            guard.cancel_at = Some(finish_at);
                            drop(guard);
                            signal.notify_all();
                            break;
                        }
                    }
                }
                Err(e) => {
                    infra = Some(e);
                    lock().cancel_at = Some(clock.now_ms());
                    signal.notify_all();
                    break;
                }
            }
        }

        let producer = producer.join().expect("producer thread panicked");
        if let Some(e) = infra {
            return Err(PipelineError::Executor(e));
        }
        let cancel_at = lock().cancel_at;
        let interrupted = cancel_at.is_some();
        Ok(PipelineTrace {
            mode: RunMode::Parallel,
            clock: clock.kind(),
            run_start,
            first_token_at: producer.first_token_at.unwrap_or(run_start),
            gen_end_at: cancel_at.or(producer.last_arrival).unwrap_or(run_start),
            token_count: producer.token_count,
            partial_code: if interrupted {
                producer.fed_text.clone()
            } else {
                String::new()
            },
            chunks: producer.chunks,
            exec_events: events,
            interrupted,
            error: failure,
            measured_setup_ms: exec.setup_overhead_ms(),
            pacing_p95_ms: p95(&producer.lateness),
        })
    })
}

/// Generates the whole program, then executes it as one block.
pub fn run_serial<S, E>(
    source: &mut S,
    exec: &mut E,
    clock: &Clock,
) -> Result<PipelineTrace, PipelineError>
where
    S: TokenSource + ?Sized,
    E: Executor + ?Sized,
{
    if let Some(c) = exec.clock() {
        if !c.same_source(clock) {
            return Err(PipelineError::ForeignExecutorClock);
        }
    }
    let run_start = clock.now_ms();
    let mut program = String::new();
    let mut first_token_at = None;
    let mut last_arrival = None;
    let mut token_count = 0;
    let mut lateness = Vec::new();
    while let Some(ev) = source.next_event() {
        clock.sleep_until(ev.arrival_time);
        let at = clock.now_ms();
        lateness.push((at - ev.arrival_time).max(0.0));
        first_token_at.get_or_insert(at);
        last_arrival = Some(at);
        token_count += 1;
        program.push_str(&ev.text);
    }
    let gen_end_at = last_arrival.unwrap_or(run_start);
    let batch = MergedChunk {
        member_indices: vec![1],
        text: program,
        ready_at: gen_end_at,
    };
    let event = dispatch(exec, clock, batch)?;
    let error = (event.status != ExecStatus::Ok).then(|| event.result.clone());
    Ok(PipelineTrace {
        mode: RunMode::Serial,
        clock: clock.kind(),
        run_start,
        first_token_at: first_token_at.unwrap_or(run_start),
        gen_end_at,
        token_count,
        chunks: Vec::new(),
        exec_events: vec![event],
        interrupted: false,
        error,
        partial_code: String::new(),
        measured_setup_ms: exec.setup_overhead_ms(),
        pacing_p95_ms: p95(&lateness),
    })
}

/// Serial run over a complete program text available at time zero.
pub fn run_serial_text<E: Executor + ?Sized>(
    program: &str,
    exec: &mut E,
    clock: &Clock,
) -> Result<PipelineTrace, PipelineError> {
    let now = clock.now_ms();
    let events = if program.is_empty() {
        Vec::new()
    } else {
        vec![TokenEvent::new(program, now)]
    };
    run_serial(&mut ReplaySource::new(events), exec, clock)
}
