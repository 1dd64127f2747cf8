//! Request and response types shared by the HTTP service and `--json` CLI
//! output, and the operations behind them.

use std::ops::ControlFlow;

use ctrlkit::attribution::{attribute_ids, AttributionError, AttributionOptions, VERACITY_CAVEAT};
use ctrlkit::corpus::CodeKind;
use ctrlkit::sampler::{generate_with, PenaltyMode, PenaltyScope, SamplerConfig, SamplerError};
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, ModelInfo};

pub const MAX_NEW_TOKENS: usize = 2048;
pub const MAX_PROMPT_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidRequest,
    UnknownCode,
    NotFound,
    ModelNotLoaded,
    Busy,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    pub error: ErrorKind,
    pub message: String,
}

impl ApiError {
    pub fn invalid(message: impl Into<String>) -> Self {
        ApiError {
            error: ErrorKind::InvalidRequest,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError {
            error: ErrorKind::Internal,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ApiError {}

fn default_max_new() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_temperature() -> f64 {
    1.0
}
fn default_nucleus() -> f64 {
    1.0
}
fn default_theta() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub control_code: String,
    #[serde(default)]
    pub prompt: String,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "default_true")]
    pub greedy: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub top_k: usize,
    #[serde(default = "default_nucleus")]
    pub nucleus_p: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub penalty_mode: PenaltyMode,
    #[serde(default)]
    pub penalty_scope: PenaltyScope,
    #[serde(default)]
    pub seed: u64,
    /// Server-sent events, one per token.
    #[serde(default)]
    pub stream: bool,
}

impl GenerateRequest {
    pub fn new(control_code: &str, prompt: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "control_code": control_code, "prompt": prompt }))
            .expect("defaults")
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            greedy: self.greedy,
            temperature: self.temperature,
            top_k: self.top_k,
            nucleus_p: self.nucleus_p,
            theta: self.theta,
            penalty_mode: self.penalty_mode,
            penalty_scope: self.penalty_scope,
            seed: self.seed,
        }
    }
}

/// One decoding step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenEvent {
    pub index: usize,
    pub token_id: u32,
    pub text: String,
    /// Probability under plain temperature softmax.
    pub prob_before: f64,
    /// Probability in the penalized, filtered distribution it was drawn from.
    pub prob_after: f64,
    pub active_k: usize,
    pub penalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateResponse {
    pub control_code: String,
    pub prompt: String,
    pub prompt_token_ids: Vec<u32>,
    /// Generated text only; `decode(token_ids)`.
    pub text: String,
    pub token_ids: Vec<u32>,
    pub steps: Vec<TokenEvent>,
    /// True once the prompt plus output outgrew the model window.
    pub truncated: bool,
    pub sampler: SamplerConfig,
    pub model: ModelInfo,
}

/// A validated generation request, ready to run.
#[derive(Debug, Clone)]
pub struct PreparedGeneration {
    pub code: u32,
    pub prompt_ids: Vec<u32>,
    pub sampler: SamplerConfig,
    pub request: GenerateRequest,
}

pub fn prepare_generation(bundle: &Bundle, request: GenerateRequest) -> Result<PreparedGeneration, ApiError> {
    let registry = &bundle.assets.registry;
    let Some(entry) = registry.get(&request.control_code) else {
        return Err(ApiError {
            error: ErrorKind::UnknownCode,
            message: format!("unknown control code {:?}", request.control_code),
        });
    };
    if entry.kind != CodeKind::Domain {
        return Err(ApiError::invalid(format!(
            "{:?} is a secondary code; generation needs a domain code",
            request.control_code
        )));
    }
    if request.max_new_tokens > MAX_NEW_TOKENS {
        return Err(ApiError::invalid(format!("max_new_tokens must be at most {MAX_NEW_TOKENS}")));
    }
    if request.prompt.len() > MAX_PROMPT_BYTES {
        return Err(ApiError::invalid(format!("prompt must be at most {MAX_PROMPT_BYTES} bytes")));
    }
    let sampler = request.sampler();
    sampler.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
    Ok(PreparedGeneration {
        code: registry.id(&request.control_code).expect("registered"),
        prompt_ids: bundle.assets.tokenizer.encode(&request.prompt),
        sampler,
        request,
    })
}

/// Run a prepared request; `on_token` sees each step as it is produced and
/// may stop generation early.
pub fn run_generation(
    bundle: &Bundle,
    prepared: PreparedGeneration,
    mut on_token: impl FnMut(&TokenEvent) -> ControlFlow<()>,
) -> Result<GenerateResponse, ApiError> {
    let tokenizer = &bundle.assets.tokenizer;
    let mut steps = Vec::new();
    let generation = generate_with(
        &bundle.model,
        prepared.code,
        &prepared.prompt_ids,
        &prepared.sampler,
        prepared.request.max_new_tokens,
        |d| {
            let event = TokenEvent {
                index: steps.len(),
                token_id: d.token,
                text: tokenizer.decode(&[d.token]).unwrap_or_default(),
                prob_before: d.prob_before,
                prob_after: d.prob_after,
                active_k: d.active_k,
                penalized: d.penalized,
            };
            let flow = on_token(&event);
            steps.push(event);
            flow
        },
    )
    .map_err(|e| match e {
        SamplerError::InvalidParameter(m) => ApiError::invalid(m),
        other => ApiError::internal(other.to_string()),
    })?;
    let text = tokenizer
        .decode(&generation.generated)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(GenerateResponse {
        control_code: prepared.request.control_code,
        prompt: prepared.request.prompt,
        prompt_token_ids: prepared.prompt_ids,
        text,
        token_ids: generation.generated,
        steps,
        truncated: generation.truncated,
        sampler: prepared.sampler,
        model: bundle.info.clone(),
    })
}

pub fn generate(bundle: &Bundle, request: GenerateRequest) -> Result<GenerateResponse, ApiError> {
    let prepared = prepare_generation(bundle, request)?;
    run_generation(bundle, prepared, |_| ControlFlow::Continue(()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRequest {
    pub text: String,
    /// One positive weight per domain code, in registry order. Omit for the
    /// uniform prior.
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
    /// Rank by mean per-token log-likelihood instead of the sum.
    #[serde(default)]
    pub length_normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCode {
    pub code: String,
    pub loglik: f64,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeResponse {
    pub ranking: Vec<RankedCode>,
    pub query_token_ids: Vec<u32>,
    /// Forward windows used per code; above 1 the query exceeded the model
    /// context and was scored in overlapping windows.
    pub windows: usize,
    pub caveat: String,
    pub model: ModelInfo,
}

pub fn attribute(bundle: &Bundle, request: &AttributeRequest) -> Result<AttributeResponse, ApiError> {
    if request.text.len() > MAX_PROMPT_BYTES {
        return Err(ApiError::invalid(format!("text must be at most {MAX_PROMPT_BYTES} bytes")));
    }
    let ids = bundle.assets.tokenizer.encode(&request.text);
    let options = AttributionOptions {
        prior: request.prior.clone(),
        length_normalize: request.length_normalize,
    };
    let result = attribute_ids(&bundle.model, &bundle.assets.registry, &ids, &options).map_err(|e| match e {
        AttributionError::Model(m) => ApiError::internal(m.to_string()),
        other => ApiError::invalid(other.to_string()),
    })?;
    Ok(AttributeResponse {
        ranking: result
            .ranking
            .into_iter()
            .map(|r| RankedCode {
                code: r.code,
                loglik: r.loglik,
                posterior: r.posterior,
            })
            .collect(),
        query_token_ids: result.query,
        windows: result.windows,
        caveat: VERACITY_CAVEAT.to_string(),
        model: bundle.info.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodeEntry {
    pub name: String,
    pub id: u32,
    pub kind: CodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodesResponse {
    pub codes: Vec<CodeEntry>,
}

pub fn codes(bundle: &Bundle) -> CodesResponse {
    CodesResponse {
        codes: bundle
            .assets
            .registry
            .codes()
            .iter()
            .enumerate()
            .map(|(i, c)| CodeEntry {
                name: c.name.clone(),
                id: i as u32 + 1,
                kind: c.kind,
            })
            .collect(),
    }
}
