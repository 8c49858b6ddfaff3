mod common;

use std::time::Duration;

use streamexec_core::replay::{tokenize_replay, ReplaySpec};
use streamexec_core::session::{self_test, SessionError};
use streamexec_core::{
    run_parallel, split_statements, start_session, Clock, ClockKind, ExecStatus, PipelineConfig,
    ReplaySource,
};

fn session() -> streamexec_core::SessionHandle {
    start_session(&common::worker_argv(), 5000).expect("fixture worker starts")
}

fn sh(script: &str) -> Vec<String> {
    vec!["sh".into(), "-c".into(), script.into()]
}

#[test]
fn state_persists_across_calls() {
    let mut s = session();
    assert!(s.measured_setup_ms().is_none());
    assert!(s.exec_block("x = 41", None).unwrap().is_ok());
    let r = s.exec_block("print(x + 1)", None).unwrap();
    assert_eq!(r.stdout, "42\n");
    assert!(r.wall_ms >= r.duration_ms && r.duration_ms >= 0.0);
    assert!(s.measured_setup_ms().is_some());
    let r = s.exec_block("a = [i*i for i in range(3)]\n", None).unwrap();
    assert!(r.is_ok());
    assert_eq!(
        s.exec_block("print(a)", None).unwrap().stdout,
        "[0, 1, 4]\n"
    );
}

#[test]
fn errors_are_reported_not_fatal() {
    let mut s = session();
    let r = s.exec_block("1/0", None).unwrap();
    assert_eq!(r.status, ExecStatus::Error);
    assert_eq!(r.exc_type.as_deref(), Some("ZeroDivisionError"));
    let r = s.exec_block("z = ", None).unwrap();
    assert_eq!(r.exc_type.as_deref(), Some("SyntaxError"));
    let r = s.exec_block("raise ValueError(\"boom\")", None).unwrap();
    assert_eq!(r.exc_type.as_deref(), Some("ValueError"));
    assert_eq!(r.exc_message.as_deref(), Some("boom"));
    assert!(r.traceback.unwrap().contains("ValueError"));
    assert!(s.ping().unwrap().is_ok());
}

#[test]
fn request_ids_increase() {
    let mut s = session();
    let a = s.exec_block("pass", None).unwrap().request_id;
    s.ping().unwrap();
    let b = s.exec_block("pass", None).unwrap().request_id;
    assert!(b > a + 1);
}

#[test]
fn reset_and_shutdown() {
    let mut s = session();
    s.exec_block("x = 1", None).unwrap();
    s.reset().unwrap();
    let r = s.exec_block("print(x)", None).unwrap();
    assert_eq!(r.exc_type.as_deref(), Some("NameError"));
    assert!(s.exec_block("print(len([1]))", None).unwrap().is_ok());
    s.shutdown().unwrap();
    s.shutdown().unwrap();
    assert!(matches!(
        s.exec_block("pass", None),
        Err(SessionError::Closed)
    ));
}

#[test]
fn shutdown_tolerates_dead_worker() {
    let mut s = session();
    s.exec_block(
        "import os, signal; os.kill(os.getpid(), signal.SIGKILL)",
        None,
    )
    .expect_err("worker died mid-request");
    s.shutdown().unwrap();
}

#[test]
fn timeout_poisons_session() {
    let mut s = session();
    let r = s
        .exec_block(
            "import time; time.sleep(2)",
            Some(Duration::from_millis(100)),
        )
        .unwrap();
    assert_eq!(r.status, ExecStatus::Timeout);
    assert!(s.is_poisoned());
    assert!(matches!(
        s.exec_block("pass", None),
        Err(SessionError::Poisoned)
    ));
    s.shutdown().unwrap();
}

#[test]
fn spawn_failures() {
    let err = start_session(&["/nonexistent/worker-binary"], 1000).unwrap_err();
    assert!(matches!(err, SessionError::Spawn { .. }), "{err}");
    let err = start_session(&sh("sleep 5"), 200).unwrap_err();
    assert!(matches!(err, SessionError::HandshakeTimeout(200)), "{err}");
    let err = start_session(&sh("echo hello; sleep 5"), 2000).unwrap_err();
    assert!(matches!(err, SessionError::MalformedHandshake(_)), "{err}");
    let err = start_session(
        &sh("echo '{\"ready\": true, \"protocol\": 2}'; sleep 5"),
        2000,
    )
    .unwrap_err();
    assert!(matches!(err, SessionError::MalformedHandshake(_)), "{err}");
}

#[test]
fn block_split_equivalence_over_corpus() {
    let mut s = session();
    for (name, program) in common::corpus() {
        if name.contains("error") {
            continue;
        }
        s.reset().unwrap();
        let whole = s.exec_block(&program, None).unwrap();
        assert!(whole.is_ok(), "{name}: {whole:?}");
        s.reset().unwrap();
        let mut split = String::new();
        for block in split_statements(&program) {
            let r = s.exec_block(&block, None).unwrap();
            assert!(r.is_ok(), "{name}: {r:?}");
            split.push_str(&r.stdout);
        }
        assert_eq!(whole.stdout, split, "{name}");
    }
}

#[test]
fn worker_self_test_passes() {
    let checks = self_test(&common::worker_argv(), 5000);
    assert!(checks.len() >= 8);
    for c in &checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn pipeline_on_real_worker_matches_serial_output() {
    let program = "import math\nvals = [math.sqrt(i) for i in range(4)]\ndef total(v):\n    return round(sum(v), 4)\nprint(total(vals))\nfor v in vals[:2]:\n    print(v)\n";
    let clock = Clock::wall();
    let mut spec = ReplaySpec::new(program, 400.0);
    spec.t_ft_ms = clock.now_ms();
    let mut s = session();
    let trace = run_parallel(
        &mut ReplaySource::new(tokenize_replay(&spec)),
        &mut s,
        &PipelineConfig::new(ClockKind::Wall),
        &clock,
    )
    .unwrap();
    assert!(trace.error.is_none());
    let mut serial = session();
    assert_eq!(
        trace.stdout(),
        serial.exec_block(program, None).unwrap().stdout
    );
    assert!(trace.measured_setup_ms.is_some());
}
