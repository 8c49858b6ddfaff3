//! Closed-form latency model of serial versus overlapped execution.
//!
//! All times are milliseconds; generation speed is in tokens per second, so a
//! span of `n` tokens takes `n * 1000 / v_gen` ms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("generation speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("at least one chunk is required")]
    NoChunks,
    #[error("chunk count {n} disagrees with {field} length {len}")]
    LengthMismatch {
        n: usize,
        field: &'static str,
        len: usize,
    },
    #[error("chunk token counts sum to {sum}, expected {total}")]
    TokenSumMismatch { sum: f64, total: f64 },
    #[error("{0} must be finite and non-negative")]
    Negative(&'static str),
    #[error("critical chunk count is undefined without per-chunk setup cost")]
    ZeroSetup,
}

/// Inputs of the latency model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Total tokens.
    #[serde(rename = "L")]
    pub total_tokens: f64,
    /// Tokens per second.
    pub v_gen: f64,
    #[serde(rename = "T_FT")]
    pub time_to_first_token: f64,
    #[serde(rename = "N")]
    pub chunk_count: usize,
    /// Tokens per chunk.
    #[serde(rename = "l")]
    pub chunk_tokens: Vec<f64>,
    /// Residual detection delay per chunk.
    pub delta: Vec<f64>,
    #[serde(rename = "T_setup")]
    pub setup: f64,
    #[serde(rename = "T_exe")]
    pub exec: Vec<f64>,
    #[serde(rename = "T_setup_full")]
    pub setup_full: f64,
    #[serde(rename = "T_exe_full")]
    pub exec_full: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.v_gen.is_finite() || self.v_gen <= 0.0 {
            return Err(ModelError::NonPositiveSpeed(self.v_gen));
        }
        if self.chunk_count == 0 {
            return Err(ModelError::NoChunks);
        }
        let n = self.chunk_count;
        for (field, len) in [
            ("l", self.chunk_tokens.len()),
            ("delta", self.delta.len()),
            ("T_exe", self.exec.len()),
        ] {
            if len != n {
                return Err(ModelError::LengthMismatch { n, field, len });
            }
        }
        let non_neg = |x: f64| x.is_finite() && x >= 0.0;
        let scalars = [
            ("L", self.total_tokens),
            ("T_FT", self.time_to_first_token),
            ("T_setup", self.setup),
            ("T_setup_full", self.setup_full),
            ("T_exe_full", self.exec_full),
        ];
        for (name, x) in scalars {
            if !non_neg(x) {
                return Err(ModelError::Negative(name));
            }
        }
        for (name, xs) in [
            ("l", &self.chunk_tokens),
            ("delta", &self.delta),
            ("T_exe", &self.exec),
        ] {
            if !xs.iter().all(|&x| non_neg(x)) {
                return Err(ModelError::Negative(name));
            }
        }
        let sum: f64 = self.chunk_tokens.iter().sum();
        if (sum - self.total_tokens).abs() > 1e-9 * self.total_tokens.max(1.0) {
            return Err(ModelError::TokenSumMismatch {
                sum,
                total: self.total_tokens,
            });
        }
        Ok(())
    }

    /// Milliseconds to generate `tokens` tokens.
    pub fn gen_ms(&self, tokens: f64) -> f64 {
        tokens * 1000.0 / self.v_gen
    }

    /// Largest detection delay.
    pub fn max_delta(&self) -> f64 {
        self.delta.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_exec(&self) -> f64 {
        self.exec.iter().sum()
    }
}

/// Per-chunk event times of the overlapped pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Generation complete.
    pub t_g: Vec<f64>,
    /// Detected (ready to execute).
    pub t_d: Vec<f64>,
    /// Execution complete.
    pub t_e: Vec<f64>,
    #[serde(rename = "T_parallel")]
    pub parallel: f64,
}

/// Generate everything, then execute once.
pub fn t_serial(p: &ModelParams) -> Result<f64, ModelError> {
    p.validate()?;
    Ok(p.time_to_first_token + p.gen_ms(p.total_tokens) + p.setup_full + p.exec_full)
}

/// Walks the execution recurrence chunk by chunk.
pub fn parallel_schedule(p: &ModelParams) -> Result<Schedule, ModelError> {
    p.validate()?;
    let n = p.chunk_count;
    let (mut t_g, mut t_d, mut t_e) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut cum_tokens = 0.0;
    let mut prev_done = f64::NEG_INFINITY;
    for i in 0..n {
        cum_tokens += p.chunk_tokens[i];
        let g = p.time_to_first_token + p.gen_ms(cum_tokens);
        let d = g + p.delta[i];
        let e = d.max(prev_done) + p.setup + p.exec[i];
        t_g.push(g);
        t_d.push(d);
        t_e.push(e);
        prev_done = e;
    }
    Ok(Schedule {
        parallel: prev_done,
        t_g,
        t_d,
        t_e,
    })
}

/// The unrolled recurrence: the latest of "chunk i ready, then run every chunk
/// from i to N back to back".
pub fn parallel_closed_form(p: &ModelParams) -> Result<f64, ModelError> {
    p.validate()?;
    let n = p.chunk_count;
    // tail[i] = sum over j >= i of (T_setup + T_exe,j)
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + p.setup + p.exec[i];
    }
    let mut cum_tokens = 0.0;
    let mut best = f64::NEG_INFINITY;
    for (i, rest) in tail.iter().take(n).enumerate() {
        cum_tokens += p.chunk_tokens[i];
        let ready = p.time_to_first_token + p.gen_ms(cum_tokens) + p.delta[i];
        best = best.max(ready + rest);
    }
    Ok(best)
}

/// Zero-overlap bound: everything waits for full generation.
pub fn upper_bound(p: &ModelParams) -> Result<f64, ModelError> {
    p.validate()?;
    Ok(p.time_to_first_token
        + p.gen_ms(p.total_tokens)
        + p.max_delta()
        + p.chunk_count as f64 * p.setup
        + p.total_exec())
}

/// Worst-case extra latency of the overlapped pipeline over serial execution.
pub fn overhead_bound(p: &ModelParams) -> Result<f64, ModelError> {
    p.validate()?;
    Ok(p.max_delta() + p.chunk_count as f64 * p.setup - p.setup_full)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    /// The last chunk cannot finish before all tokens exist.
    pub gen_bound: f64,
    /// Every chunk runs in order after the first is ready.
    pub exec_bound: f64,
    pub composite: f64,
}

pub fn lower_bound(p: &ModelParams) -> Result<LowerBound, ModelError> {
    p.validate()?;
    let n = p.chunk_count;
    let gen_bound =
        p.time_to_first_token + p.gen_ms(p.total_tokens) + p.delta[n - 1] + p.setup + p.exec[n - 1];
    let exec_bound = p.time_to_first_token
        + p.gen_ms(p.chunk_tokens[0])
        + p.delta[0]
        + n as f64 * p.setup
        + p.total_exec();
    Ok(LowerBound {
        gen_bound,
        exec_bound,
        composite: gen_bound.max(exec_bound),
    })
}

/// Best achievable serial/parallel ratio: all execution hidden behind generation.
pub fn speedup_upper_bound(p: &ModelParams) -> Result<f64, ModelError> {
    let lb = lower_bound(p)?;
    if lb.gen_bound <= 0.0 {
        return Err(ModelError::Negative("generation lower bound"));
    }
    Ok(t_serial(p)? / lb.gen_bound)
}

/// Uniform-chunk parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformParams {
    #[serde(rename = "N")]
    pub chunk_count: usize,
    /// Per-chunk generation time.
    pub alpha: f64,
    /// Per-chunk setup plus execution time.
    pub beta: f64,
    pub delta: f64,
    #[serde(rename = "T_FT")]
    pub time_to_first_token: f64,
    /// Total generation time.
    #[serde(rename = "L_over_v")]
    pub gen_total: f64,
}

impl UniformParams {
    /// Uniform view of `p` when every chunk has the same length, delay and cost.
    pub fn from_params(p: &ModelParams) -> Result<Self, ModelError> {
        p.validate()?;
        let n = p.chunk_count as f64;
        Ok(UniformParams {
            chunk_count: p.chunk_count,
            alpha: p.gen_ms(p.total_tokens) / n,
            beta: p.setup + p.exec[0],
            delta: p.delta[0],
            time_to_first_token: p.time_to_first_token,
            gen_total: p.gen_ms(p.total_tokens),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Execution hides behind generation except the last chunk.
    #[serde(rename = "R1_generation_dominated")]
    GenerationDominated,
    /// Generation hides behind execution except the first chunk.
    #[serde(rename = "R2_execution_dominated")]
    ExecutionDominated,
    /// Perfectly paced.
    #[serde(rename = "R3_balanced")]
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformLatency {
    pub regime: Regime,
    #[serde(rename = "T_parallel")]
    pub parallel: f64,
}

/// Generation-dominated formula: only the last chunk's execution is exposed.
pub fn generation_dominated_latency(u: &UniformParams) -> f64 {
    u.time_to_first_token + u.gen_total + u.delta + u.beta
}

/// Execution-dominated formula: only the first chunk's generation is exposed.
pub fn execution_dominated_latency(u: &UniformParams) -> f64 {
    u.time_to_first_token + u.alpha + u.delta + u.chunk_count as f64 * u.beta
}

pub fn uniform_latency(u: &UniformParams) -> UniformLatency {
    if u.alpha > u.beta {
        UniformLatency {
            regime: Regime::GenerationDominated,
            parallel: generation_dominated_latency(u),
        }
    } else if u.alpha < u.beta {
        UniformLatency {
            regime: Regime::ExecutionDominated,
            parallel: execution_dominated_latency(u),
        }
    } else {
        UniformLatency {
            regime: Regime::Balanced,
            parallel: generation_dominated_latency(u),
        }
    }
}

/// Chunk count at which overlap gains and per-chunk setup cost balance.
/// Negative when execution outweighs generation.
pub fn n_star(gen_total: f64, exec_full: f64, setup: f64) -> Result<f64, ModelError> {
    if setup == 0.0 {
        return Err(ModelError::ZeroSetup);
    }
    Ok((gen_total - exec_full) / setup)
}

/// Every derived quantity for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub t_serial: f64,
    pub schedule: Schedule,
    pub closed_form: f64,
    pub upper_bound: f64,
    pub overhead_bound: f64,
    pub lower_bound: LowerBound,
    pub speedup_upper_bound: Option<f64>,
    pub realized_speedup: f64,
    /// Present when all chunks are identical.
    pub uniform: Option<UniformLatency>,
    pub n_star: Option<f64>,
}

fn is_uniform(p: &ModelParams) -> bool {
    let same = |xs: &[f64]| xs.windows(2).all(|w| w[0] == w[1]);
    same(&p.chunk_tokens) && same(&p.delta) && same(&p.exec)
}

pub fn summarize(p: &ModelParams) -> Result<ModelSummary, ModelError> {
    let t_serial = t_serial(p)?;
    let closed_form = parallel_closed_form(p)?;
    Ok(ModelSummary {
        t_serial,
        schedule: parallel_schedule(p)?,
        closed_form,
        upper_bound: upper_bound(p)?,
        overhead_bound: overhead_bound(p)?,
        lower_bound: lower_bound(p)?,
        speedup_upper_bound: speedup_upper_bound(p).ok(),
        realized_speedup: t_serial / closed_form,
        uniform: is_uniform(p)
            .then(|| UniformParams::from_params(p).map(|u| uniform_latency(&u)))
            .transpose()?,
        n_star: n_star(p.gen_ms(p.total_tokens), p.exec_full, p.setup).ok(),
    })
}
