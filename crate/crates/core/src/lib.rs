//! Streaming execution of generated Python code.
//!
//! Tokens are split into top-level statements as they arrive ([`chunker`]),
//! queued and run in a persistent interpreter ([`session`]) while generation
//! continues ([`pipeline`]). [`model`] gives the analytical latency model and
//! [`replay`] drives fixed-rate replays and computes latency metrics.

pub mod chunker;
pub mod clock;
pub mod model;
pub mod pipeline;
pub mod replay;
pub mod session;

pub use chunker::{split_statements, Chunk, Chunker, TokenEvent};
pub use clock::{Clock, ClockKind, VirtualClock, WallClock};
pub use model::{ModelError, ModelParams, ModelSummary, Regime};
pub use pipeline::{
    run_parallel, run_serial, run_serial_text, Executor, ExecutorError, OnError, PipelineConfig,
    PipelineError, PipelineTrace, ReplaySource, RunMode, SimPlan, SimulatedExecutor, TokenSource,
};
pub use replay::{
    compute_metrics, fidelity_check, replay, tokenize_replay, LatencyReport, Metrics, ReplayEnv,
    ReplayError, ReplayMode, ReplaySpec,
};
pub use session::{start_session, ExecResult, ExecStatus, SessionError, SessionHandle};
