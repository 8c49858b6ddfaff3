//! Client side of the persistent interpreter worker.
//!
//! The worker speaks newline-delimited JSON over its stdin/stdout. After spawn it
//! prints `{"ready": true, "protocol": 1}`; every request then gets exactly one
//! response line carrying the same `id`. Only one request is ever in flight.

use std::ffi::OsStr;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const PROTOCOL_VERSION: u64 = 1;

const SHUTDOWN_GRACE: Duration = Duration::from_millis(500);

const OVERHEAD_ROUNDS: usize = 3;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("failed to spawn worker `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("worker did not send its ready handshake within {0} ms")]
    HandshakeTimeout(u64),
    #[error("malformed handshake line: {0}")]
    MalformedHandshake(String),
    #[error("worker transport failed: {0}")]
    Transport(String),
    #[error("worker protocol violation: {0}")]
    Protocol(String),
    #[error("session was poisoned by a timed-out request and must be restarted")]
    Poisoned,
    #[error("session is shut down")]
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

/// Outcome of executing one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub request_id: u64,
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    pub exc_type: Option<String>,
    pub exc_message: Option<String>,
    pub traceback: Option<String>,
    /// Execution time measured by the worker around the code itself.
    pub duration_ms: f64,
    /// Round trip measured by the client.
    pub wall_ms: f64,
}

impl ExecResult {
    pub fn ok(request_id: u64, duration_ms: f64, wall_ms: f64) -> Self {
        ExecResult {
            request_id,
            status: ExecStatus::Ok,
            stdout: String::new(),
            stderr: String::new(),
            exc_type: None,
            exc_message: None,
            traceback: None,
            duration_ms,
            wall_ms,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    /// Per-call overhead implied by this result.
    pub fn setup_ms(&self) -> f64 {
        (self.wall_ms - self.duration_ms).max(0.0)
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    id: i64,
    status: String,
    #[serde(default)]
    stdout: String,
    #[serde(default)]
    stderr: String,
    exc_type: Option<String>,
    exc_message: Option<String>,
    traceback: Option<String>,
    #[serde(default)]
    duration_ms: f64,
}

#[derive(Debug, Deserialize)]
struct Handshake {
    ready: bool,
    protocol: u64,
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SetupStats {
    pub count: u64,
    pub mean_ms: f64,
    m2: f64,
    pub last_ms: f64,
}

impl SetupStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean_ms;
        self.mean_ms += d / self.count as f64;
        self.m2 += d * (x - self.mean_ms);
        self.last_ms = x;
    }

    pub fn std_dev_ms(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }
}

/// A live worker process.
pub struct SessionHandle {
    command: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_request_id: u64,
    setup: SetupStats,
    exec_timeout: Option<Duration>,
    poisoned: bool,
    closed: bool,
}

impl std::fmt::Debug for SessionHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionHandle")
            .field("command", &self.command)
            .field("next_request_id", &self.next_request_id)
            .field("setup", &self.setup)
            .field("poisoned", &self.poisoned)
            .field("closed", &self.closed)
            .finish()
    }
}

/// Spawns the worker and waits for its handshake.
pub fn start_session<S: AsRef<OsStr>>(
    argv: &[S],
    startup_timeout_ms: u64,
) -> Result<SessionHandle, SessionError> {
    let command = argv
        .iter()
        .map(|a| a.as_ref().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let (program, args) = argv.split_first().ok_or_else(|| SessionError::Spawn {
        command: command.clone(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty worker command"),
    })?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|source| SessionError::Spawn {
            command: command.clone(),
            source,
        })?;

    let stdout = child.stdout.take().expect("stdout is piped");
    let (tx, rx) = mpsc::channel();
    thread::Builder::new()
        .name("worker-stdout".into())
        .spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        })
        .map_err(|e| SessionError::Transport(e.to_string()))?;
    if let Some(stderr) = child.stderr.take() {
        let _ = thread::Builder::new()
            .name("worker-stderr".into())
            .spawn(move || {
                for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                    log::debug!("worker: {line}");
                }
            });
    }

    let stdin = child.stdin.take();
    let mut handle = SessionHandle {
        command,
        child,
        stdin,
        lines: rx,
        next_request_id: 1,
        setup: SetupStats::default(),
        exec_timeout: None,
        poisoned: false,
        closed: false,
    };

    let line = match handle
        .lines
        .recv_timeout(Duration::from_millis(startup_timeout_ms))
    {
        Ok(Ok(line)) => line,
        Ok(Err(e)) => {
            handle.kill();
            return Err(SessionError::Transport(e.to_string()));
        }
        Err(RecvTimeoutError::Timeout) => {
            handle.kill();
            return Err(SessionError::HandshakeTimeout(startup_timeout_ms));
        }
        Err(RecvTimeoutError::Disconnected) => {
            handle.kill();
            return Err(SessionError::MalformedHandshake(
                "worker exited before handshake".into(),
            ));
        }
    };
    match serde_json::from_str::<Handshake>(&line) {
        Ok(Handshake {
            ready: true,
            protocol: PROTOCOL_VERSION,
        }) => Ok(handle),
        _ => {
            handle.kill();
            Err(SessionError::MalformedHandshake(line))
        }
    }
}

impl SessionHandle {
    /// Per-request timeout applied when the handle is used as a pipeline executor.
    pub fn with_exec_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.exec_timeout = timeout;
        self
    }

    pub fn exec_timeout(&self) -> Option<Duration> {
        self.exec_timeout
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn next_request_id(&self) -> u64 {
        self.next_request_id
    }

    /// Mean per-call overhead so far; `None` before the first exec.
    pub fn measured_setup_ms(&self) -> Option<f64> {
        (self.setup.count > 0).then_some(self.setup.mean_ms)
    }

    pub fn setup_stats(&self) -> SetupStats {
        self.setup
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Executes one block in the shared namespace.
    pub fn exec_block(
        &mut self,
        code: &str,
        timeout: Option<Duration>,
    ) -> Result<ExecResult, SessionError> {
        let id = self.next_request_id;
        let started = Instant::now();
        let resp = match self.request(json!({"op": "exec", "id": id, "code": code}), timeout)? {
            Some(resp) => resp,
            None => {
                self.poisoned = true;
                let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
                return Ok(ExecResult {
                    status: ExecStatus::Timeout,
                    ..ExecResult::ok(id, 0.0, wall_ms)
                });
            }
        };
        let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
        let result = self.to_result(id, resp, wall_ms)?;
        self.setup.push(result.setup_ms());
        Ok(result)
    }

    pub fn ping(&mut self) -> Result<ExecResult, SessionError> {
        self.simple_op("ping")
    }

    /// Clears the worker namespace without restarting the process.
    pub fn reset(&mut self) -> Result<(), SessionError> {
        let r = self.simple_op("reset")?;
        match r.status {
            ExecStatus::Ok => Ok(()),
            _ => Err(SessionError::Protocol(format!(
                "reset failed: {}",
                r.exc_message.unwrap_or_default()
            ))),
        }
    }

    /// Asks the worker to exit, killing it after a grace period. Idempotent.
    pub fn shutdown(&mut self) -> Result<(), SessionError> {
        if self.closed {
            return Ok(());
        }
        if !self.poisoned {
            let id = self.next_request_id;
            // a dead worker makes this fail; that is fine
            let _ = self.request(json!({"op": "shutdown", "id": id}), Some(SHUTDOWN_GRACE));
        }
        self.stdin = None;
        let deadline = Instant::now() + SHUTDOWN_GRACE;
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                _ => {
                    self.kill();
                    break;
                }
            }
        }
        self.closed = true;
        Ok(())
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.closed = true;
    }

    fn simple_op(&mut self, op: &str) -> Result<ExecResult, SessionError> {
        let id = self.next_request_id;
        let started = Instant::now();
        let resp = self
            .request(json!({"op": op, "id": id}), None)?
            .expect("no timeout requested");
        let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
        self.to_result(id, resp, wall_ms)
    }

    /// Sends one request and waits for its response. `Ok(None)` means the timeout expired.
    fn request(
        &mut self,
        msg: Value,
        timeout: Option<Duration>,
    ) -> Result<Option<WireResponse>, SessionError> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        if self.poisoned {
            return Err(SessionError::Poisoned);
        }
        let id = self.next_request_id;
        self.next_request_id += 1;

        let stdin = self.stdin.as_mut().ok_or(SessionError::Closed)?;
        let mut line = serde_json::to_string(&msg).expect("request serializes");
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| SessionError::Transport(e.to_string()))?;

        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let received = match deadline {
                Some(deadline) => {
                    let left = deadline.saturating_duration_since(Instant::now());
                    match self.lines.recv_timeout(left) {
                        Ok(line) => line,
                        Err(RecvTimeoutError::Timeout) => return Ok(None),
                        Err(RecvTimeoutError::Disconnected) => {
                            return Err(SessionError::Transport("worker closed its stdout".into()))
                        }
                    }
                }
                None => self
                    .lines
                    .recv()
                    .map_err(|_| SessionError::Transport("worker closed its stdout".into()))?,
            };
            let line = received.map_err(|e| SessionError::Transport(e.to_string()))?;
            let resp: WireResponse = serde_json::from_str(&line).map_err(|e| {
                SessionError::Protocol(format!("unparseable response {line:?}: {e}"))
            })?;
            if resp.id == id as i64 {
                return Ok(Some(resp));
            }
            if resp.id == -1 {
                return Err(SessionError::Protocol(format!(
                    "worker rejected request: {}",
                    resp.exc_message.unwrap_or_default()
                )));
            }
            // stale response to an abandoned request; skip it
            log::warn!("discarding response for request {}", resp.id);
        }
    }

    fn to_result(
        &self,
        id: u64,
        resp: WireResponse,
        wall_ms: f64,
    ) -> Result<ExecResult, SessionError> {
        let status = match resp.status.as_str() {
            "ok" => ExecStatus::Ok,
            "error" => ExecStatus::Error,
            other => return Err(SessionError::Protocol(format!("unknown status {other:?}"))),
        };
        if status == ExecStatus::Error && resp.exc_type.is_none() {
            return Err(SessionError::Protocol(
                "error response without exc_type".into(),
            ));
        }
        // keep wall >= duration >= 0 despite clock granularity differences
        let duration_ms = resp.duration_ms.max(0.0).min(wall_ms);
        Ok(ExecResult {
            request_id: id,
            status,
            stdout: resp.stdout,
            stderr: resp.stderr,
            exc_type: resp.exc_type,
            exc_message: resp.exc_message,
            traceback: resp.traceback,
            duration_ms,
            wall_ms,
        })
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// One line of a worker self-test.
#[derive(Debug, Clone, Serialize)]
pub struct SelfTestCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Exercises handshake, persistence, error reporting, reset, block-split
/// equivalence and per-call overhead against a worker command.
pub fn self_test<S: AsRef<OsStr>>(argv: &[S], startup_timeout_ms: u64) -> Vec<SelfTestCheck> {
    let mut checks = Vec::new();
    let mut check = |name: &'static str, outcome: Result<String, String>| {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        checks.push(SelfTestCheck {
            name,
            passed,
            detail,
        });
    };

    let mut session = match start_session(argv, startup_timeout_ms) {
        Ok(s) => {
            check("handshake", Ok(s.command().to_string()));
            s
        }
        Err(e) => {
            check("handshake", Err(e.to_string()));
            return checks;
        }
    };

    check(
        "ping",
        session.ping().map_err(|e| e.to_string()).and_then(|r| {
            if r.is_ok() && r.stdout.is_empty() {
                Ok("ok".into())
            } else {
                Err(format!("{r:?}"))
            }
        }),
    );

    check(
        "persistence",
        (|| {
            session
                .exec_block("x = 41", None)
                .map_err(|e| e.to_string())?;
            let r = session
                .exec_block("print(x + 1)", None)
                .map_err(|e| e.to_string())?;
            if r.stdout == "42\n" {
                Ok("stdout 42".into())
            } else {
                Err(format!("stdout {:?}", r.stdout))
            }
        })(),
    );

    check(
        "runtime error",
        (|| {
            let r = session.exec_block("1/0", None).map_err(|e| e.to_string())?;
            match (&r.status, r.exc_type.as_deref(), &r.traceback) {
                (ExecStatus::Error, Some("ZeroDivisionError"), Some(tb)) if !tb.is_empty() => {
                    Ok("ZeroDivisionError".into())
                }
                _ => Err(format!("{r:?}")),
            }
        })(),
    );

    check(
        "syntax error",
        (|| {
            let r = session
                .exec_block("z = ", None)
                .map_err(|e| e.to_string())?;
            if r.exc_type.as_deref() == Some("SyntaxError") {
                Ok("SyntaxError".into())
            } else {
                Err(format!("{r:?}"))
            }
        })(),
    );

    check(
        "reset",
        (|| {
            session
                .exec_block("y = 1", None)
                .map_err(|e| e.to_string())?;
            session.reset().map_err(|e| e.to_string())?;
            let r = session
                .exec_block("print(y)", None)
                .map_err(|e| e.to_string())?;
            if r.exc_type.as_deref() == Some("NameError") {
                Ok("NameError after reset".into())
            } else {
                Err(format!("{r:?}"))
            }
        })(),
    );

    check(
        "block-split equivalence",
        (|| {
            let program = "import math\nvals = [math.sqrt(i) for i in range(5)]\ndef total(v):\n    return round(sum(v), 6)\nprint(total(vals))\nfor v in vals[:2]:\n    print(v)\n";
            session.reset().map_err(|e| e.to_string())?;
            let whole = session
                .exec_block(program, None)
                .map_err(|e| e.to_string())?
                .stdout;
            session.reset().map_err(|e| e.to_string())?;
            let mut split = String::new();
            for block in crate::chunker::split_statements(program) {
                split.push_str(
                    &session
                        .exec_block(&block, None)
                        .map_err(|e| e.to_string())?
                        .stdout,
                );
            }
            if whole == split && !whole.is_empty() {
                Ok(format!("{} bytes identical", whole.len()))
            } else {
                Err(format!("{whole:?} != {split:?}"))
            }
        })(),
    );

    check(
        "per-call overhead",
        (|| {
            for _ in 0..5 {
                session
                    .exec_block("pass", None)
                    .map_err(|e| e.to_string())?;
            }
            // first stable round wins
            let mut rounds = Vec::new();
            for _ in 0..OVERHEAD_ROUNDS {
                let mut stats = SetupStats::default();
                for _ in 0..100 {
                    let r = session
                        .exec_block("pass", None)
                        .map_err(|e| e.to_string())?;
                    stats.push(r.setup_ms());
                }
                let detail = format!(
                    "mean {:.3} ms, stddev {:.3} ms",
                    stats.mean_ms,
                    stats.std_dev_ms()
                );
                if stats.std_dev_ms() < stats.mean_ms {
                    return Ok(detail);
                }
                rounds.push(detail);
            }
            Err(rounds.join("; "))
        })(),
    );

    check(
        "shutdown",
        session
            .shutdown()
            .and_then(|_| session.shutdown())
            .map(|_| "clean".into())
            .map_err(|e| e.to_string()),
    );
    checks
}
