//! Workload generators shared by the benchmarks.

use streamexec_core::ModelParams;

/// A program mixing simple statements, functions, classes and comments,
/// repeated `blocks` times.
pub fn synthetic_program(blocks: usize) -> String {
    let mut out = String::new();
    for i in 0..blocks {
        out.push_str(&format!(
            "# block {i}\n\
             import math\n\
             values_{i} = [math.sqrt(k) for k in range({i} + 10)]\n\
             def total_{i}(xs):\n    \"\"\"Sum with a # inside.\"\"\"\n    return sum(xs)\n\n\
             class Box{i}:\n    def __init__(self, v):\n        self.v = v\n\n\
             if total_{i}(values_{i}) > 3:\n    print('big')\nelse:\n    print('small')\n\
             result_{i} = Box{i}(total_{i}(values_{i})); print(result_{i}.v)\n"
        ));
    }
    out
}

/// Splits text into fixed-size character tokens.
pub fn tokens(text: &str, chars: usize) -> Vec<String> {
    let cs: Vec<char> = text.chars().collect();
    cs.chunks(chars).map(|c| c.iter().collect()).collect()
}

/// Deterministic non-uniform parameters with `n` chunks.
pub fn model_params(n: usize) -> ModelParams {
    let chunk_tokens: Vec<f64> = (0..n).map(|i| 10.0 + (i * 7 % 13) as f64).collect();
    let exec: Vec<f64> = (0..n).map(|i| 20.0 + (i * 31 % 97) as f64).collect();
    ModelParams {
        total_tokens: chunk_tokens.iter().sum(),
        v_gen: 50.0,
        time_to_first_token: 300.0,
        chunk_count: n,
        chunk_tokens,
        delta: (0..n).map(|i| (i % 5) as f64).collect(),
        setup: 1.0,
        setup_full: 1.0,
        exec_full: exec.iter().sum(),
        exec,
    }
}
