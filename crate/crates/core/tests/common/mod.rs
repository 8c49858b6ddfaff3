#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use streamexec_core::Chunk;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// (name, text) for every corpus program, sorted by name.
pub fn corpus() -> Vec<(String, String)> {
    let mut out: Vec<_> = std::fs::read_dir(fixtures().join("corpus"))
        .expect("corpus dir")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "py"))
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

pub fn worker_argv() -> Vec<String> {
    vec![
        "python3".into(),
        "-u".into(),
        fixtures().join("worker.py").to_string_lossy().into_owned(),
    ]
}

const AST_LINES: &str = r#"
import ast, json, sys
tree = ast.parse(sys.stdin.read())
out = []
for node in tree.body:
    start = min([node.lineno] + [d.lineno for d in getattr(node, "decorator_list", [])])
    out.append([start, node.end_lineno])
print(json.dumps(out))
"#;

/// Line ranges (1-based, inclusive) of the top-level statements per Python's `ast`.
pub fn ast_statement_lines(program: &str) -> Vec<(usize, usize)> {
    let mut child = Command::new("python3")
        .args(["-c", AST_LINES])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .expect("python3 is required for the statement oracle");
    child
        .stdin
        .take()
        .unwrap()
        .write_all(program.as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "ast.parse failed");
    serde_json::from_slice(&out.stdout).unwrap()
}

fn line_of(program: &str, byte: usize) -> usize {
    1 + program.as_bytes()[..byte]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
}

/// Checks that chunks and top-level statements line up: every statement lies
/// inside exactly one chunk, every chunk holds at least one statement (a
/// trivia-only tail excepted) and statements sharing a chunk share a line.
pub fn check_alignment(program: &str, chunks: &[Chunk]) -> Result<(), String> {
    let stmts = ast_statement_lines(program);
    let mut used = vec![false; stmts.len()];
    for (k, chunk) in chunks.iter().enumerate() {
        let first = line_of(program, chunk.byte_span.start);
        let last = line_of(program, chunk.byte_span.end - 1);
        let inside: Vec<usize> = (0..stmts.len())
            .filter(|&i| stmts[i].0 >= first && stmts[i].1 <= last)
            .collect();
        if inside.is_empty() {
            let trivia = chunk
                .text
                .lines()
                .all(|l| l.trim().is_empty() || l.trim_start().starts_with('#'));
            if !(trivia && k + 1 == chunks.len()) {
                return Err(format!(
                    "chunk {} ({:?}) holds no statement",
                    chunk.index, chunk.text
                ));
            }
        }
        if inside.iter().any(|&i| stmts[i].0 != stmts[inside[0]].0) {
            return Err(format!(
                "chunk {} ({:?}) holds several statements",
                chunk.index, chunk.text
            ));
        }
        for i in inside {
            if used[i] {
                return Err(format!("statement {i} in two chunks"));
            }
            used[i] = true;
        }
    }
    match used.iter().position(|u| !u) {
        Some(i) => Err(format!(
            "statement at lines {:?} split across chunks",
            stmts[i]
        )),
        None => Ok(()),
    }
}

use rand::Rng;
use streamexec_core::ModelParams;

/// Speeds for which 1000 / v is an integer, so generation times are exact.
pub const EXACT_SPEEDS: [f64; 12] = [
    1.0, 2.0, 4.0, 5.0, 8.0, 10.0, 20.0, 25.0, 40.0, 50.0, 100.0, 200.0,
];

/// Random parameters with N <= `n_max` and real-valued timings.
pub fn random_params<R: Rng>(rng: &mut R, n_max: usize) -> ModelParams {
    let n = rng.gen_range(1..=n_max);
    let chunk_tokens: Vec<f64> = (0..n).map(|_| rng.gen_range(1..200) as f64).collect();
    let exec: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..500.0)).collect();
    ModelParams {
        total_tokens: chunk_tokens.iter().sum(),
        v_gen: rng.gen_range(1.0..500.0),
        time_to_first_token: rng.gen_range(0.0..2000.0),
        chunk_count: n,
        delta: (0..n).map(|_| rng.gen_range(0.0..50.0)).collect(),
        setup: rng.gen_range(0.0..20.0),
        setup_full: rng.gen_range(0.0..20.0),
        exec_full: exec.iter().sum(),
        chunk_tokens,
        exec,
    }
}

/// Uniform instance with integer millisecond timings throughout.
pub fn random_uniform<R: Rng>(rng: &mut R) -> ModelParams {
    let n = rng.gen_range(1..=64);
    let l = rng.gen_range(1..100) as f64;
    let exec = rng.gen_range(0..400) as f64;
    let setup = rng.gen_range(0..20) as f64;
    ModelParams {
        total_tokens: l * n as f64,
        v_gen: EXACT_SPEEDS[rng.gen_range(0..EXACT_SPEEDS.len())],
        time_to_first_token: rng.gen_range(0..2000) as f64,
        chunk_count: n,
        chunk_tokens: vec![l; n],
        delta: vec![rng.gen_range(0..30) as f64; n],
        setup,
        exec: vec![exec; n],
        setup_full: setup,
        exec_full: exec * n as f64,
    }
}

/// Brute-force event simulation: a single executor that, at every step,
/// takes the next chunk once both it is ready and the executor is idle.
pub fn simulate(p: &ModelParams) -> Vec<f64> {
    let ms_per_token = 1000.0 / p.v_gen;
    let mut generated = 0.0;
    let mut idle_at = 0.0f64;
    let mut done = Vec::new();
    for i in 0..p.chunk_count {
        generated += p.chunk_tokens[i];
        let ready = p.time_to_first_token + generated * ms_per_token + p.delta[i];
        let start = if i == 0 { ready } else { ready.max(idle_at) };
        idle_at = start + p.setup + p.exec[i];
        done.push(idle_at);
    }
    done
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
