//! A loaded checkpoint plus the tokenizer and code registry stored beside it.

use std::path::{Path, PathBuf};

use ctrlkit::corpus::TextAssets;
use ctrlkit::model::{count_params, Checkpoint, Model, ModelConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("tokenizer assets in {dir}: {message}")]
    Assets { dir: PathBuf, message: String },
    #[error("model vocabulary is {model} but the tokenizer has {tokenizer} ids")]
    VocabMismatch { model: usize, tokenizer: usize },
}

/// Identifies the model behind every response.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub config: ModelConfig,
    pub config_hash: String,
    pub checkpoint_sha256: String,
    pub step: u64,
    pub parameters: u64,
}

pub struct Bundle {
    pub model: Model<f32>,
    pub assets: TextAssets,
    pub info: ModelInfo,
    pub path: PathBuf,
}

impl Bundle {
    /// Load `checkpoint` and the assets (`codes.tsv`, `merges.txt`,
    /// `vocab.tsv`) from the same directory.
    pub fn load(checkpoint: &Path) -> Result<Self, BundleError> {
        let bytes = std::fs::read(checkpoint).map_err(|source| BundleError::Io {
            path: checkpoint.to_path_buf(),
            source,
        })?;
        let ck = Checkpoint::<f32>::from_bytes(&bytes).map_err(|e| BundleError::Checkpoint {
            path: checkpoint.to_path_buf(),
            message: e.to_string(),
        })?;
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let assets = TextAssets::load_dir(dir).map_err(|e| BundleError::Assets {
            dir: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        if assets.tokenizer.vocab_size() != ck.config.vocab_size {
            return Err(BundleError::VocabMismatch {
                model: ck.config.vocab_size,
                tokenizer: assets.tokenizer.vocab_size(),
            });
        }
        let info = ModelInfo {
            config: ck.config,
            config_hash: ck.config.hash(),
            checkpoint_sha256: hex::encode(Sha256::digest(&bytes)),
            step: ck.step,
            parameters: count_params(&ck.config),
        };
        let model = Model::new(ck.config, ck.params).map_err(|e| BundleError::Checkpoint {
            path: checkpoint.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Bundle {
            model,
            assets,
            info,
            path: checkpoint.to_path_buf(),
        })
    }
}
