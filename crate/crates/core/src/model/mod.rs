//! Conditional transformer language model.
//!
//! Each layer is two pre-norm blocks whose residual connections add back the
//! *normalized* input:
//!
//! ```text
//! X̄ = LN(X)      H = MultiHead(X̄) + X̄
//! H̄ = LN(H)      X' = FF(H̄) + H̄        FF(x) = max(0, xU)V
//! Scores = LN(X_l) · Eᵀ                   (output projection tied to E)
//! ```
//!
//! Dropout follows each residual addition when training.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, OUTPUT_PROJECTION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Attention score scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// Divide by `√(d / heads)`.
    #[default]
    PerHead,
    /// Divide by `√d`.
    ModelDim,
}

/// Multiplier on token embeddings before the positional embedding is added.
/// The output projection always uses the unscaled table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedScale {
    #[default]
    None,
    /// Multiply by `√d`. At `d = 64` with 0.02 init, the unscaled sum is
    /// dominated by the unit-amplitude sinusoids and training stalls at the
    /// unigram solution.
    SqrtD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub attn_scale: AttnScale,
    #[serde(default)]
    pub embed_scale: EmbedScale,
}

impl ModelConfig {
    /// Desk-scale preset: d=64, f=256, 2 layers, 4 heads, context 64, with
    /// √d embedding scaling.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 256,
            n_layers: 2,
            n_heads: 4,
            vocab_size,
            context: 64,
            dropout: 0.1,
            attn_scale: AttnScale::PerHead,
            embed_scale: EmbedScale::SqrtD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("context", self.context),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(ModelError::InvalidConfig("vocab_size exceeds u32".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn attention_scale(&self) -> f64 {
        match self.attn_scale {
            AttnScale::PerHead => 1.0 / (self.d_head() as f64).sqrt(),
            AttnScale::ModelDim => 1.0 / (self.d_model as f64).sqrt(),
        }
    }

    /// Canonical little-endian encoding, as stored in checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(34);
        for v in [
            self.d_model,
            self.d_ff,
            self.n_layers,
            self.n_heads,
            self.vocab_size,
            self.context,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.dropout.to_le_bytes());
        out.push(match self.attn_scale {
            AttnScale::PerHead => 0,
            AttnScale::ModelDim => 1,
        });
        out.push(match self.embed_scale {
            EmbedScale::None => 0,
            EmbedScale::SqrtD => 1,
        });
        out
    }

    /// Hex SHA-256 of [`ModelConfig::to_bytes`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Closed-form parameter count; the tied output projection is counted once.
pub fn count_params(config: &ModelConfig) -> u64 {
    let (v, d, f, l) = (
        config.vocab_size as u64,
        config.d_model as u64,
        config.d_ff as u64,
        config.n_layers as u64,
    );
    let per_layer = 4 * d * d + 2 * d * f + 4 * d;
    v * d + l * per_layer + 2 * d
}

/// Sinusoidal position encoding: `pe[2i] = sin(p·ω_i)`, `pe[2i+1] = cos(p·ω_i)`
/// with `ω_i = 10000^(−2i/d)`.
pub fn positional_embedding(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position as f64 * 10000f64.powf(-2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    /// Query/key/value projections; head `j` owns columns `j·d_head..(j+1)·d_head`.
    pub w_query: Tensor<T>,
    pub w_key: Tensor<T>,
    pub w_value: Tensor<T>,
    pub w_out: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ff_in: Tensor<T>,
    pub ff_out: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    /// `[V×d]`; also the output projection (transposed).
    pub token_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// Normal(0, 0.02) weight matrices, unit layernorm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut weight = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                .collect();
            Tensor::new(vec![rows, cols], data)
        };
        let (d, f) = (config.d_model, config.d_ff);
        let token_embedding = weight(config.vocab_size, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                w_query: weight(d, d)?,
                w_key: weight(d, d)?,
                w_value: weight(d, d)?,
                w_out: weight(d, d)?,
                ln1_gain: Tensor::filled(vec![d], T::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                ff_in: weight(d, f)?,
                ff_out: weight(f, d)?,
                ln2_gain: Tensor::filled(vec![d], T::one()),
                ln2_bias: Tensor::zeros(vec![d]),
            });
        }
        Ok(ModelParams {
            token_embedding,
            layers,
            final_gain: Tensor::filled(vec![d], T::one()),
            final_bias: Tensor::zeros(vec![d]),
        })
    }

    /// The vocabulary projection; the same storage as the token embedding.
    pub fn output_projection(&self) -> &Tensor<T> {
        &self.token_embedding
    }

    /// Every stored tensor with its canonical name, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.extend([
                (format!("{p}.attn.w_query"), &l.w_query),
                (format!("{p}.attn.w_key"), &l.w_key),
                (format!("{p}.attn.w_value"), &l.w_value),
                (format!("{p}.attn.w_out"), &l.w_out),
                (format!("{p}.ln1.gain"), &l.ln1_gain),
                (format!("{p}.ln1.bias"), &l.ln1_bias),
                (format!("{p}.ff.w_in"), &l.ff_in),
                (format!("{p}.ff.w_out"), &l.ff_out),
                (format!("{p}.ln2.gain"), &l.ln2_gain),
                (format!("{p}.ln2.bias"), &l.ln2_bias),
            ]);
        }
        out.push(("final_ln.gain".to_string(), &self.final_gain));
        out.push(("final_ln.bias".to_string(), &self.final_bias));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.w_query,
                &mut l.w_key,
                &mut l.w_value,
                &mut l.w_out,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ff_in,
                &mut l.ff_out,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            token_embedding: self.token_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_query: l.w_query.cast(),
                    w_key: l.w_key.cast(),
                    w_value: l.w_value.cast(),
                    w_out: l.w_out.cast(),
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    ff_in: l.ff_in.cast(),
                    ff_out: l.ff_out.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
        }
    }

    fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        if self.layers.len() != config.n_layers {
            return Err(ModelError::InvalidConfig(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        let mut expected = vec![vec![v, d]];
        for _ in 0..config.n_layers {
            expected.extend([
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f, d],
                vec![d],
                vec![d],
            ]);
        }
        expected.extend([vec![d], vec![d]]);
        for ((name, t), want) in self.named().into_iter().zip(expected) {
            if t.shape() != want.as_slice() {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameter handles on a tape, in [`ModelParams::named`] order.
pub struct BoundParams {
    pub all: Vec<Var>,
}

impl BoundParams {
    fn embedding(&self) -> Var {
        self.all[0]
    }

    fn layer(&self, i: usize) -> &[Var] {
        &self.all[1 + i * 10..1 + (i + 1) * 10]
    }

    fn final_ln(&self) -> (Var, Var) {
        let n = self.all.len();
        (self.all[n - 2], self.all[n - 1])
    }
}

/// Forward-pass mode. Dropout masks in training are drawn from a generator
/// keyed by `(seed, step, layer, site)`, so any step can be replayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

fn dropout_rng(seed: u64, step: u64, layer: usize, site: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&(layer as u64).to_le_bytes());
    key[24..].copy_from_slice(&site.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: ModelParams<T>,
    positions: Tensor<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let pe: Vec<f64> = (0..config.context)
            .flat_map(|p| positional_embedding(p, config.d_model))
            .collect();
        let positions = Tensor::from_f64(vec![config.context, config.d_model], &pe)?;
        Ok(Model {
            config,
            params,
            positions,
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Mutable access for optimizers. Shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> BoundParams {
        BoundParams {
            all: self.params.tensors().into_iter().map(|t| tape.param(t)).collect(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.context {
            return Err(ModelError::ContextTooLong {
                len: ids.len(),
                max: self.config.context,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Record the forward pass for a batch of equal-length sequences.
    /// Returns scores `[batch·n × V]`, sequence-major.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        bound: &BoundParams,
        batch: &[&[u32]],
        mode: Mode,
    ) -> Result<Var> {
        let n = batch.first().ok_or(ModelError::EmptyInput)?.len();
        for seq in batch {
            if seq.len() != n {
                return Err(ModelError::InvalidConfig("batch sequences differ in length".into()));
            }
            self.check_ids(seq)?;
        }
        let cfg = &self.config;
        let (d, dh) = (cfg.d_model, cfg.d_head());
        let flat: Vec<u32> = batch.iter().flat_map(|s| s.iter().copied()).collect();

        let mut tokens = tape.embed(bound.embedding(), &flat)?;
        if cfg.embed_scale == EmbedScale::SqrtD {
            tokens = tape.scale(tokens, T::from_f64_lossy((d as f64).sqrt()));
        }
        let pe_rows = &self.positions.data()[..n * d];
        let pe: Vec<T> = pe_rows.iter().copied().cycle().take(flat.len() * d).collect();
        let pe = tape.constant(Tensor::new(vec![flat.len(), d], pe)?);
        let mut x = tape.add(tokens, pe)?;

        let eps = T::from_f64_lossy(LAYERNORM_EPS);
        let scale = T::from_f64_lossy(cfg.attention_scale());
        let (training, seed, step) = match mode {
            Mode::Eval => (false, 0, 0),
            Mode::Train { seed, step } => (true, seed, step),
        };

        for layer in 0..cfg.n_layers {
            let p = bound.layer(layer);
            let (wq, wk, wv, wo) = (p[0], p[1], p[2], p[3]);
            let (ln1_g, ln1_b, ff_in, ff_out, ln2_g, ln2_b) = (p[4], p[5], p[6], p[7], p[8], p[9]);

            let x_bar = tape.layernorm(x, ln1_g, ln1_b, eps)?;
            let q = tape.matmul(x_bar, wq)?;
            let k = tape.matmul(x_bar, wk)?;
            let v = tape.matmul(x_bar, wv)?;
            let mut seqs = Vec::with_capacity(batch.len());
            for b in 0..batch.len() {
                let rows = b * n..(b + 1) * n;
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for h in 0..cfg.n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = tape.slice(q, rows.clone(), cols.clone())?;
                    let kh = tape.slice(k, rows.clone(), cols.clone())?;
                    let vh = tape.slice(v, rows.clone(), cols)?;
                    let kt = tape.transpose(kh)?;
                    let logits = tape.matmul(qh, kt)?;
                    let masked = tape.causal_mask(logits)?;
                    let scaled = tape.scale(masked, scale);
                    let probs = tape.softmax_rows(scaled)?;
                    heads.push(tape.matmul(probs, vh)?);
                }
                seqs.push(tape.concat_cols(&heads)?);
            }
            let joined = if seqs.len() == 1 { seqs[0] } else { tape.concat_rows(&seqs)? };
            let attn = tape.matmul(joined, wo)?;
            let h = tape.add(attn, x_bar)?;
            let h = tape.dropout(h, cfg.dropout, training, &mut dropout_rng(seed, step, layer, 0))?;

            let h_bar = tape.layernorm(h, ln2_g, ln2_b, eps)?;
            let inner = tape.matmul(h_bar, ff_in)?;
            let inner = tape.relu(inner);
            let ff = tape.matmul(inner, ff_out)?;
            let out = tape.add(ff, h_bar)?;
            x = tape.dropout(out, cfg.dropout, training, &mut dropout_rng(seed, step, layer, 1))?;
        }

        let (fg, fb) = bound.final_ln();
        let normed = tape.layernorm(x, fg, fb, eps)?;
        let vocab_proj = tape.transpose(bound.embedding())?;
        Ok(tape.matmul(normed, vocab_proj)?)
    }

    /// Mean next-token cross-entropy over a batch of full records. Position 0
    /// (the domain code) is context only, never a target.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        bound: &BoundParams,
        records: &[&[u32]],
        mode: Mode,
    ) -> Result<Var> {
        let inputs: Vec<&[u32]> = records.iter().map(|r| &r[..r.len().saturating_sub(1)]).collect();
        let targets: Vec<u32> = records.iter().flat_map(|r| r[1..].iter().copied()).collect();
        if records.iter().any(|r| r.len() < 2) {
            return Err(ModelError::EmptyInput);
        }
        let scores = self.forward_on_tape(tape, bound, &inputs, mode)?;
        Ok(tape.cross_entropy(scores, &targets)?)
    }

    /// Scores `[n×V]` for one sequence.
    pub fn forward(&self, ids: &[u32], mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, &[ids], mode)?;
        Ok(tape.value(out).clone())
    }
}

/// Read-only scoring interface used by decoding and attribution.
pub trait ScoreModel {
    fn context_len(&self) -> usize;
    fn vocab_size(&self) -> usize;
    /// Eval-mode scores `[ids.len() × V]`.
    fn scores(&self, ids: &[u32]) -> Result<Tensor<f64>>;
}

impl<T: Real> ScoreModel for Model<T> {
    fn context_len(&self) -> usize {
        self.config.context
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn scores(&self, ids: &[u32]) -> Result<Tensor<f64>> {
        Ok(self.forward(ids, Mode::Eval)?.cast())
    }
}
