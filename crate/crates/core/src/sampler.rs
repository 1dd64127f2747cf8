//! Decoding: temperature sampling, top-k, nucleus, penalized near-greedy,
//! and sliding-window generation past the model's context length.

use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ScoreModel};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler parameter: {0}")]
    InvalidParameter(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SamplerError::InvalidParameter(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `exp(x_i / (T·θ))` for penalized ids, whatever the sign of `x_i`.
    #[default]
    Literal,
    /// Positive scores divided by θ, negative scores multiplied by θ.
    SignAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    GeneratedOnly,
    #[default]
    PromptAndGenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub greedy: bool,
    pub temperature: f64,
    /// 0 disables.
    pub top_k: usize,
    /// 1 disables.
    pub nucleus_p: f64,
    pub theta: f64,
    pub penalty_mode: PenaltyMode,
    pub penalty_scope: PenaltyScope,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            greedy: true,
            temperature: 1.0,
            top_k: 0,
            nucleus_p: 1.0,
            theta: 1.2,
            penalty_mode: PenaltyMode::Literal,
            penalty_scope: PenaltyScope::PromptAndGenerated,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return invalid(format!("nucleus_p must be in (0, 1], got {}", self.nucleus_p));
        }
        if !(self.theta >= 1.0 && self.theta.is_finite()) {
            return invalid(format!("theta must be at least 1, got {}", self.theta));
        }
        if self.top_k > 0 && self.nucleus_p < 1.0 {
            return invalid("top_k and nucleus_p cannot both be active");
        }
        Ok(())
    }
}

fn softmax_of(exponents: Vec<f64>) -> Vec<f64> {
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = exponents.into_iter().map(|e| (e - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// `p_i = exp(x_i/T) / Σ_j exp(x_j/T)`, computed with the max subtracted.
pub fn temperature_probs(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    if scores.is_empty() {
        return invalid("empty score vector");
    }
    Ok(softmax_of(scores.iter().map(|&x| x / temperature).collect()))
}

/// Temperature softmax with the scores of `penalized` ids discounted by θ.
/// With θ = 1 the result is bitwise equal to [`temperature_probs`].
pub fn penalized_probs(
    scores: &[f64],
    temperature: f64,
    theta: f64,
    penalized: &[bool],
    mode: PenaltyMode,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    if !(theta >= 1.0) {
        return invalid(format!("theta must be at least 1, got {theta}"));
    }
    if scores.is_empty() || penalized.len() != scores.len() {
        return invalid("penalty mask does not match the score vector");
    }
    let exponents = scores
        .iter()
        .zip(penalized)
        .map(|(&x, &hit)| match (hit, mode) {
            (false, _) => x / temperature,
            (true, PenaltyMode::Literal) => x / (temperature * theta),
            (true, PenaltyMode::SignAware) if x >= 0.0 => x / theta / temperature,
            (true, PenaltyMode::SignAware) => x * theta / temperature,
        })
        .collect();
    Ok(softmax_of(exponents))
}

/// Ids ordered by descending probability, ties by ascending id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// Keep the `k` most probable ids (boundary ties go to the lower id), zero
/// the rest and renormalize. `k == 0` or `k >= V` leaves `probs` unchanged.
pub fn top_k_filter(probs: &[f64], k: usize) -> Vec<f64> {
    if k == 0 || k >= probs.len() {
        return probs.to_vec();
    }
    let keep = &ranked(probs)[..k];
    let z: f64 = keep.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in keep {
        out[i] = probs[i] / z;
    }
    out
}

/// Smallest `k` whose top-`k` cumulative probability is strictly greater
/// than `p`; `V` when no prefix exceeds it.
pub fn nucleus_k(probs: &[f64], p: f64) -> usize {
    let mut cum = 0.0;
    for (n, i) in ranked(probs).into_iter().enumerate() {
        cum += probs[i];
        if cum > p {
            return n + 1;
        }
    }
    probs.len()
}

/// Highest probability id, lowest id on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw for a uniform `u ∈ [0, 1)`, scanning ids in order. Falls
/// back to the last id with nonzero mass when rounding leaves `u` uncovered.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// The final distribution for one decoding step plus the size of its support.
pub fn step_distribution(scores: &[f64], penalized: &[bool], config: &SamplerConfig) -> Result<(Vec<f64>, usize)> {
    let probs = penalized_probs(scores, config.temperature, config.theta, penalized, config.penalty_mode)?;
    if config.greedy {
        let mut one_hot = vec![0.0; probs.len()];
        one_hot[argmax(&probs)] = 1.0;
        return Ok((one_hot, 1));
    }
    let k = if config.top_k > 0 {
        config.top_k.min(probs.len())
    } else if config.nucleus_p < 1.0 {
        nucleus_k(&probs, config.nucleus_p)
    } else {
        probs.len()
    };
    Ok((top_k_filter(&probs, k), k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub token: u32,
    /// Probability of `token` under plain temperature softmax.
    pub prob_before: f64,
    /// Probability of `token` in the distribution it was drawn from.
    pub prob_after: f64,
    pub active_k: usize,
    /// Whether `token` was in the penalty set.
    pub penalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// True if the window ever dropped history.
    pub truncated: bool,
}

impl Generation {
    /// Prompt followed by the generated tokens.
    pub fn ids(&self) -> Vec<u32> {
        let mut all = self.prompt.clone();
        all.extend_from_slice(&self.generated);
        all
    }
}

/// Generate up to `max_new` tokens after `[code] + prompt`. The forward
/// context is the code followed by the most recent `L − 1` tokens. The
/// penalty set is the window's tokens (generated ones only under
/// [`PenaltyScope::GeneratedOnly`]).
pub fn generate<M: ScoreModel + ?Sized>(
    model: &M,
    code: u32,
    prompt: &[u32],
    config: &SamplerConfig,
    max_new: usize,
) -> Result<Generation> {
    generate_with(model, code, prompt, config, max_new, |_| ControlFlow::Continue(()))
}

/// [`generate`] with a per-step callback; returning `Break` stops early.
pub fn generate_with<M, F>(
    model: &M,
    code: u32,
    prompt: &[u32],
    config: &SamplerConfig,
    max_new: usize,
    mut on_step: F,
) -> Result<Generation>
where
    M: ScoreModel + ?Sized,
    F: FnMut(&StepDiagnostics) -> ControlFlow<()>,
{
    config.validate()?;
    let vocab = model.vocab_size();
    let window = model.context_len().saturating_sub(1);
    if window == 0 {
        return invalid("model context must hold at least two tokens");
    }
    if let Some(&id) = std::iter::once(&code).chain(prompt).find(|&&id| id as usize >= vocab) {
        return Err(SamplerError::TokenOutOfRange { id, vocab });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = prompt.to_vec();
    let mut out = Generation {
        prompt: prompt.to_vec(),
        generated: Vec::with_capacity(max_new),
        diagnostics: Vec::with_capacity(max_new),
        truncated: false,
    };
    let mut context = Vec::with_capacity(window + 1);
    let mut penalized = vec![false; vocab];
    for _ in 0..max_new {
        let start = history.len().saturating_sub(window);
        out.truncated |= start > 0;
        context.clear();
        context.push(code);
        context.extend_from_slice(&history[start..]);

        penalized.iter_mut().for_each(|p| *p = false);
        let first_generated = prompt.len().max(start);
        let scope_start = match config.penalty_scope {
            PenaltyScope::GeneratedOnly => first_generated,
            PenaltyScope::PromptAndGenerated => start,
        };
        for &t in &history[scope_start..] {
            penalized[t as usize] = true;
        }

        let scores = model.scores(&context)?;
        let last = scores.row(scores.rows() - 1);
        let (probs, active_k) = step_distribution(last, &penalized, config)?;
        let token = if config.greedy {
            argmax(&probs)
        } else {
            sample_index(&probs, rng.random::<f64>())
        };
        let before = temperature_probs(last, config.temperature)?;
        let diag = StepDiagnostics {
            token: token as u32,
            prob_before: before[token],
            prob_after: probs[token],
            active_k,
            penalized: penalized[token],
        };
        history.push(token as u32);
        out.generated.push(token as u32);
        let flow = on_step(&diag);
        out.diagnostics.push(diag);
        if flow.is_break() {
            break;
        }
    }
    Ok(out)
}

/// Number of `n`-grams in `ids` that repeat an earlier one.
pub fn repeated_ngrams(ids: &[u32], n: usize) -> usize {
    if ids.len() < n || n == 0 {
        return 0;
    }
    let mut seen = std::collections::HashSet::new();
    ids.windows(n).filter(|w| !seen.insert(*w)).count()
}
