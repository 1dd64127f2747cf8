//! TOML run description for `ctrlkit train`.
//!
//! ```toml
//! assets = "assets"              # codes.tsv, merges.txt, vocab.tsv
//! train_records = "corpus/train.rec"
//! valid_records = "corpus/valid.rec"   # optional
//! out_dir = "run"
//! init_seed = 0
//!
//! [model]        # any subset; the rest comes from the desk preset
//! d_model = 64
//!
//! [train]        # any subset of TrainConfig
//! lr = 0.02
//! total_steps = 2000
//! ```
//!
//! Relative paths resolve against the config file's directory. The model's
//! `vocab_size` defaults to the tokenizer's.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctrlkit::model::ModelConfig;
use ctrlkit::trainer::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    assets: PathBuf,
    train_records: PathBuf,
    valid_records: Option<PathBuf>,
    out_dir: PathBuf,
    #[serde(default)]
    init_seed: u64,
    resume: Option<PathBuf>,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub assets: PathBuf,
    pub train_records: PathBuf,
    pub valid_records: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub init_seed: u64,
    /// Continue from this checkpoint instead of a fresh init.
    pub resume: Option<PathBuf>,
    /// Overrides on top of the desk preset; resolved once the vocabulary
    /// size is known.
    model: toml::Table,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: Raw = toml::from_str(text)?;
        raw.train.validate()?;
        let at = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        Ok(RunConfig {
            assets: at(raw.assets),
            train_records: at(raw.train_records),
            valid_records: raw.valid_records.map(at),
            out_dir: at(raw.out_dir),
            init_seed: raw.init_seed,
            resume: raw.resume.map(at),
            model: raw.model,
            train: raw.train,
        })
    }

    /// The desk preset for `vocab_size`, with the `[model]` table applied.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut table = toml::Table::try_from(ModelConfig::desk(vocab_size))?;
        for (k, v) in &self.model {
            table.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = table.try_into().context("[model]")?;
        if cfg.vocab_size != vocab_size {
            bail!(
                "[model] vocab_size = {} but the tokenizer has {vocab_size} ids",
                cfg.vocab_size
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_and_paths() {
        let cfg = RunConfig::parse(
            "assets = \"a\"\ntrain_records = \"/abs/t.rec\"\nout_dir = \"run\"\n\
             [model]\nd_model = 32\nd_ff = 64\n[train]\nlr = 0.02\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.assets, Path::new("/base/a"));
        assert_eq!(cfg.train_records, Path::new("/abs/t.rec"));
        assert_eq!(cfg.train.lr, 0.02);
        assert_eq!(cfg.train.total_steps, TrainConfig::default().total_steps);
        let m = cfg.model_config(100).unwrap();
        assert_eq!((m.d_model, m.d_ff, m.vocab_size), (32, 64, 100));
        assert_eq!(m.n_layers, ModelConfig::desk(100).n_layers);
    }

    #[test]
    fn typos_are_rejected() {
        let base = Path::new(".");
        assert!(RunConfig::parse("assets=\"a\"\ntrain_records=\"t\"\nout_dir=\"o\"\nlearning_rate=1\n", base).is_err());
        let cfg = RunConfig::parse("assets=\"a\"\ntrain_records=\"t\"\nout_dir=\"o\"\n[model]\nd_modle=3\n", base).unwrap();
        assert!(cfg.model_config(10).is_err());
        let cfg = RunConfig::parse("assets=\"a\"\ntrain_records=\"t\"\nout_dir=\"o\"\n[model]\nvocab_size=3\n", base).unwrap();
        assert!(cfg.model_config(10).is_err());
    }
}
