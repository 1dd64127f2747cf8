#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ctrlkit::corpus::{ControlCodeRegistry, TextAssets};
use ctrlkit::model::{Model, ModelConfig};
use ctrlkit::synthetic::{two_domain_documents, FORWARD_DOMAIN, REVERSED_DOMAIN};
use ctrlkit::tokenizer::Tokenizer;
use ctrlkit::trainer::{TrainConfig, Trainer};

pub const SECONDARY: &str = "Rating";

/// Tokenizer assets and an untrained checkpoint in `dir`; returns the
/// checkpoint path.
pub fn bundle_dir(dir: &Path) -> PathBuf {
    let docs = two_domain_documents(3, 6, 60);
    let mut registry = ControlCodeRegistry::new();
    registry.add_domain(FORWARD_DOMAIN).unwrap();
    registry.add_domain(REVERSED_DOMAIN).unwrap();
    registry.add_secondary(SECONDARY).unwrap();
    let tokenizer = Tokenizer::learn(docs.iter().map(|d| d.1.as_str()), &registry.names(), 60, 2).unwrap();
    let assets = TextAssets { tokenizer, registry };
    assets.save_dir(dir).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_layers: 1,
        n_heads: 2,
        context: 16,
        dropout: 0.0,
        ..ModelConfig::desk(assets.tokenizer.vocab_size())
    };
    let model = Model::<f32>::init(cfg, 7).unwrap();
    Trainer::new(model, TrainConfig::default()).unwrap().save_checkpoint(dir).unwrap()
}
