mod common;

use streamexec_core::replay::{
    jsonl_path_for, replay, sweep, write_sweep, ReplayEnv, ReplayError, ReplayMode, ReplaySpec,
};
use streamexec_core::{ClockKind, PipelineConfig, RunMode, SimPlan};

fn sim_env() -> ReplayEnv {
    ReplayEnv::Simulated {
        plan: SimPlan::uniform(40.0, 1.0),
        clock: ClockKind::Virtual,
    }
}

#[test]
fn both_modes_report_savings_on_parallel_only() {
    let program = "a = 1\nb = a + 1\nprint(b)\n";
    let out = replay(
        &ReplaySpec::new(program, 20.0),
        ReplayMode::Both,
        &sim_env(),
        &PipelineConfig::new(ClockKind::Virtual),
    )
    .unwrap();
    let s = out.metrics.serial.unwrap();
    let p = out.metrics.parallel.unwrap();
    assert_eq!(s.mode, RunMode::Serial);
    assert!(s.nel_saving_pct.is_none() && s.e2el_saving_pct.is_none());
    assert!(p.nel_saving_pct.is_some() && p.e2el_saving_pct.is_some());
    assert_eq!(s.token_count, p.token_count);
    assert_eq!(s.nel_ms, Some(121.0));
    assert!(p.e2el_ms < s.e2el_ms);
    assert_eq!(p.chunk_count, 3);
}

#[test]
fn single_mode_has_no_savings() {
    let out = replay(
        &ReplaySpec::new("x = 1\n", 20.0),
        ReplayMode::Parallel,
        &sim_env(),
        &PipelineConfig::new(ClockKind::Virtual),
    )
    .unwrap();
    assert!(out.metrics.serial.is_none());
    assert!(out.metrics.parallel.unwrap().nel_saving_pct.is_none());
}

#[test]
fn invalid_specs_are_rejected() {
    let cfg = PipelineConfig::new(ClockKind::Virtual);
    let err = replay(
        &ReplaySpec::new("x = 1\n", 0.0),
        ReplayMode::Both,
        &sim_env(),
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, ReplayError::InvalidSpec(_)));
    let env = ReplayEnv::Worker {
        argv: common::worker_argv(),
        startup_timeout_ms: 5000,
    };
    let err = replay(
        &ReplaySpec::new("x = 1\n", 20.0),
        ReplayMode::Both,
        &env,
        &cfg,
    )
    .unwrap_err();
    assert!(matches!(err, ReplayError::WorkerNeedsWallClock));
}

#[test]
fn worker_replay_reports_measured_setup() {
    let env = ReplayEnv::Worker {
        argv: common::worker_argv(),
        startup_timeout_ms: 5000,
    };
    let out = replay(
        &ReplaySpec::new("x = 2\nprint(x * 21)\n", 200.0),
        ReplayMode::Both,
        &env,
        &PipelineConfig::new(ClockKind::Wall),
    )
    .unwrap();
    assert_eq!(out.parallel_trace.unwrap().stdout(), "42\n");
    assert!(out.metrics.parallel.unwrap().measured_setup_ms.is_some());
}

#[test]
fn sweep_writes_table_and_runs() {
    let programs = vec![
        ("ok".to_string(), "a = 1\nprint(a)\n".to_string()),
        ("assign".to_string(), "a = 1\n".to_string()),
    ];
    let plan = SimPlan {
        setup_ms: 1.0,
        entries: Vec::new(),
        fallback_exec_ms: None,
    }
    .with_entry(
        streamexec_core::pipeline::StatementMatch::Contains("print".into()),
        10.0,
    )
    .with_entry(streamexec_core::pipeline::StatementMatch::Ordinal(1), 5.0);
    let env = ReplayEnv::Simulated {
        plan,
        clock: ClockKind::Virtual,
    };
    let result = sweep(
        &programs,
        &[10.0, 50.0],
        &ReplaySpec::new("", 1.0),
        &env,
        &PipelineConfig::new(ClockKind::Virtual),
    );
    assert_eq!(result.rows.len(), 4);
    assert!(
        result.rows.iter().all(|r| r.error.is_none()),
        "{:?}",
        result.rows
    );
    assert_eq!(result.runs.len(), 8);

    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("sweep.csv");
    let jsonl = write_sweep(&result, &table).unwrap();
    assert_eq!(jsonl, jsonl_path_for(&table));
    let mut reader = csv::Reader::from_path(&table).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "nel_saving_pct"));
    assert_eq!(reader.records().count(), 4);
    let lines = std::fs::read_to_string(&jsonl).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in [
        "program",
        "mode",
        "tps",
        "e2el_ms",
        "nel_ms",
        "gen_time_ms",
        "chunk_count",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn sweep_records_failures_and_continues() {
    let programs = vec![
        ("unplanned".to_string(), "a = 1\n".to_string()),
        ("fine".to_string(), "".to_string()),
    ];
    let plan = SimPlan {
        setup_ms: 1.0,
        entries: Vec::new(),
        fallback_exec_ms: None,
    };
    let env = ReplayEnv::Simulated {
        plan,
        clock: ClockKind::Virtual,
    };
    let result = sweep(
        &programs,
        &[20.0],
        &ReplaySpec::new("", 1.0),
        &env,
        &PipelineConfig::new(ClockKind::Virtual),
    );
    assert_eq!(result.rows.len(), 2);
    assert!(result.rows[0].error.is_some());
    assert!(result.rows[1].error.is_none());
}

#[test]
fn p1_replay_report_identity() {
    let program: String = (0..4)
        .map(|i| {
            let head = format!("x{i} = \"");
            format!("{head}{}\"\n", "a".repeat(200 - head.len() - 2))
        })
        .collect();
    let mut spec = ReplaySpec::new(program, 20.0);
    spec.t_ft_ms = 500.0;
    let env = ReplayEnv::Simulated {
        plan: SimPlan::uniform(100.0, 1.0),
        clock: ClockKind::Virtual,
    };
    let out = replay(
        &spec,
        ReplayMode::Both,
        &env,
        &PipelineConfig::new(ClockKind::Virtual),
    )
    .unwrap();
    let (s, p) = (out.metrics.serial.unwrap(), out.metrics.parallel.unwrap());
    assert_eq!(s.e2el_ms, 10901.0);
    assert_eq!(p.e2el_ms, 10601.0);
    assert_eq!(p.nel_ms, Some(101.0));
    assert!((p.nel_saving_pct.unwrap() - 100.0 * 300.0 / 401.0).abs() < 1e-9);
    let trace = out.parallel_trace.unwrap();
    let ttft = trace.first_token_at - trace.run_start;
    assert_eq!(p.e2el_ms, ttft + p.gen_time_ms + p.nel_ms.unwrap());
}

#[test]
fn corpus_report_identity_holds_on_virtual_clock() {
    let cfg = PipelineConfig::new(ClockKind::Virtual);
    for (name, program) in common::corpus() {
        let out = replay(
            &ReplaySpec::new(program, 50.0),
            ReplayMode::Parallel,
            &sim_env(),
            &cfg,
        )
        .unwrap();
        let p = out.metrics.parallel.unwrap();
        let trace = out.parallel_trace.unwrap();
        if p.token_count == 0 {
            continue;
        }
        let ttft = trace.first_token_at - trace.run_start;
        let lhs = ttft + p.gen_time_ms + p.nel_ms.unwrap();
        assert!(
            (p.e2el_ms - lhs).abs() < 1e-9,
            "{name}: {} vs {lhs}",
            p.e2el_ms
        );
    }
}
