use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctrlkit::attribution::AttributionOptions;
use ctrlkit::corpus::{
    build_from_manifest, parse_manifest, read_records_file, write_records_file, ControlCodeRegistry, TextAssets,
    CODES_FILE,
};
use ctrlkit::model::{Checkpoint, Model};
use ctrlkit::sampler::{PenaltyMode, PenaltyScope};
use ctrlkit::synthetic::{two_domain_documents, FORWARD_DOMAIN, REVERSED_DOMAIN};
use ctrlkit::tokenizer::Tokenizer;
use ctrlkit::trainer::{RunOutputs, Trainer};
use ctrlkit_cli::api::{self, AttributeRequest, GenerateRequest};
use ctrlkit_cli::bundle::Bundle;
use ctrlkit_cli::server::{self, AppState, DEFAULT_MAX_IN_FLIGHT, DEFAULT_PORT};
use ctrlkit_cli::train_config::RunConfig;
use serde::Serialize;

/// Control-code conditioned language models at desk scale.
#[derive(Parser)]
#[command(name = "ctrlkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges and write tokenizer assets.
    BpeLearn(BpeLearn),
    /// Tokenize manifest documents into train/valid record files.
    CorpusBuild(CorpusBuild),
    /// Train or resume a model from a TOML run config.
    Train(Train),
    /// Generate text from a checkpoint.
    Generate(Generate),
    /// Rank domain codes for a text.
    Attribute(Attribute),
    /// Serve the JSON API (and optionally static UI assets).
    Serve(Serve),
    /// Write the synthetic two-domain demo corpus with its manifest.
    DemoCorpus(DemoCorpus),
}

#[derive(Args)]
struct BpeLearn {
    /// Code registry, `kind<TAB>name` lines (kind is domain or secondary).
    #[arg(long)]
    codes: PathBuf,
    /// Number of merges to learn.
    #[arg(long, conflicts_with = "vocab_size", required_unless_present = "vocab_size")]
    merges: Option<usize>,
    /// Target vocabulary size; merges fill what reserved ids and characters leave.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Pairs seen fewer times than this are never merged.
    #[arg(long, default_value_t = 2)]
    min_count: usize,
    /// Output directory for codes.tsv, merges.txt and vocab.tsv.
    #[arg(long)]
    out: PathBuf,
    /// Training text files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CorpusBuild {
    /// Directory written by bpe-learn.
    #[arg(long)]
    assets: PathBuf,
    /// `domain<TAB>path[<TAB>code@offset,...]` lines.
    #[arg(long)]
    manifest: PathBuf,
    /// Record length L, counting the domain code.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(2..))]
    context: u32,
    /// Output directory for train.rec and valid.rec.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Train {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint file; tokenizer assets are read from its directory.
    #[arg(long, env = "CTRLKIT_CHECKPOINT")]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Literal,
    SignAware,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    GeneratedOnly,
    PromptAndGenerated,
}

#[derive(Args)]
struct Generate {
    #[command(flatten)]
    model: ModelArg,
    /// Domain control code to condition on.
    #[arg(long)]
    code: String,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    /// Greedy decoding (the default).
    #[arg(long, conflicts_with = "sample")]
    greedy: bool,
    /// Sample instead of decoding greedily.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Keep the k most probable tokens; 0 disables.
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    /// Nucleus threshold; 1 disables.
    #[arg(long, default_value_t = 1.0)]
    nucleus_p: f64,
    /// Repetition penalty; 1 disables.
    #[arg(long, default_value_t = 1.2)]
    theta: f64,
    #[arg(long, value_enum, default_value = "literal")]
    penalty_mode: ModeArg,
    #[arg(long, value_enum, default_value = "prompt-and-generated")]
    penalty_scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Attribute {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    text: String,
    /// Comma-separated weight per domain code, in registry order.
    #[arg(long, value_delimiter = ',')]
    prior: Option<Vec<f64>>,
    /// Rank by mean per-token log-likelihood.
    #[arg(long)]
    length_normalize: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Serve {
    /// Without a checkpoint the model routes answer 503.
    #[arg(long, env = "CTRLKIT_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "CTRLKIT_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Served at `/` for any path outside `/v1`.
    #[arg(long, env = "CTRLKIT_STATIC_DIR")]
    static_dir: Option<PathBuf>,
    /// Requests beyond this many concurrent model calls get 429.
    #[arg(long, default_value_t = DEFAULT_MAX_IN_FLIGHT)]
    max_in_flight: usize,
}

#[derive(Args)]
struct DemoCorpus {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    documents: usize,
    #[arg(long, default_value_t = 1800)]
    sentences: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer_pretty(&mut out, value)?;
        writeln!(out)?;
    } else {
        write!(out, "{}", text())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BpeSummary {
    out_dir: PathBuf,
    vocab_size: usize,
    merges: usize,
    codes: usize,
}

fn bpe_learn(a: BpeLearn) -> Result<()> {
    let registry = ControlCodeRegistry::load(&a.codes).with_context(|| format!("reading {}", a.codes.display()))?;
    let texts = a
        .inputs
        .iter()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merges = match (a.merges, a.vocab_size) {
        (Some(m), _) => m,
        (None, Some(v)) => {
            let chars: BTreeSet<char> = texts.iter().flat_map(|t| t.chars()).collect();
            let base = 1 + registry.len() + chars.len();
            if v < base {
                bail!("--vocab-size {v} is below the {base} reserved and character ids");
            }
            v - base
        }
        (None, None) => unreachable!("clap requires one"),
    };
    let tokenizer = Tokenizer::learn(texts.iter().map(String::as_str), &registry.names(), merges, a.min_count)?;
    let assets = TextAssets { tokenizer, registry };
    assets.save_dir(&a.out)?;
    let summary = BpeSummary {
        out_dir: a.out.clone(),
        vocab_size: assets.tokenizer.vocab_size(),
        merges: assets.tokenizer.merges().len(),
        codes: assets.registry.len(),
    };
    emit(a.json, &summary, || {
        format!(
            "learned {} merges; vocabulary {} ids ({} codes); wrote {}\n",
            summary.merges,
            summary.vocab_size,
            summary.codes,
            a.out.display()
        )
    })
}

#[derive(Serialize)]
struct CorpusSummary {
    context: usize,
    train: usize,
    valid: usize,
    train_file: PathBuf,
    valid_file: PathBuf,
    domains: std::collections::BTreeMap<String, ctrlkit::corpus::DomainStats>,
}

fn corpus_build(a: CorpusBuild) -> Result<()> {
    let assets = TextAssets::load_dir(&a.assets).with_context(|| format!("loading assets from {}", a.assets.display()))?;
    let text = fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let manifest = parse_manifest(&text, base, &assets.registry)?;
    let build = build_from_manifest(&assets, &manifest, a.context as usize)?;
    fs::create_dir_all(&a.out)?;
    let (train_file, valid_file) = (a.out.join("train.rec"), a.out.join("valid.rec"));
    write_records_file(&train_file, build.context, &build.train)?;
    write_records_file(&valid_file, build.context, &build.valid)?;
    let summary = CorpusSummary {
        context: build.context,
        train: build.train.len(),
        valid: build.valid.len(),
        train_file,
        valid_file,
        domains: build.stats,
    };
    emit(a.json, &summary, || {
        let mut s = format!(
            "{} train and {} valid records of length {}\n",
            summary.train, summary.valid, summary.context
        );
        for (d, st) in &summary.domains {
            s.push_str(&format!(
                "  {d}: {} documents, {} tokens, {} records ({} filtered)\n",
                st.documents, st.stream_tokens, st.records, st.filtered
            ));
        }
        s
    })
}

#[derive(Serialize)]
struct TrainSummaryOut {
    checkpoint: PathBuf,
    step: u64,
    config_hash: String,
    last_train_loss: Option<f64>,
    last_valid_nll: Option<f64>,
}

fn train(a: Train) -> Result<()> {
    let run = RunConfig::load(&a.config)?;
    let assets = TextAssets::load_dir(&run.assets).with_context(|| format!("loading assets from {}", run.assets.display()))?;
    let (context, train) = read_records_file(&run.train_records)
        .with_context(|| format!("reading {}", run.train_records.display()))?;
    let valid = match &run.valid_records {
        Some(p) => {
            let (c, v) = read_records_file(p).with_context(|| format!("reading {}", p.display()))?;
            if c != context {
                bail!("valid records have length {c}, train records {context}");
            }
            v
        }
        None => Vec::new(),
    };
    let mut trainer = match &run.resume {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::from_checkpoint(ck, run.train.clone())?
        }
        None => {
            let cfg = run.model_config(assets.tokenizer.vocab_size())?;
            Trainer::new(Model::<f32>::init(cfg, run.init_seed)?, run.train.clone())?
        }
    };
    let cfg = *trainer.model().config();
    if cfg.context != context {
        bail!("model context is {} but records have length {context}", cfg.context);
    }
    if cfg.vocab_size != assets.tokenizer.vocab_size() {
        bail!("model vocabulary {} differs from the tokenizer's {}", cfg.vocab_size, assets.tokenizer.vocab_size());
    }

    fs::create_dir_all(&run.out_dir)?;
    assets.save_dir(&run.out_dir)?;
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run.out_dir.join("metrics.tsv"))?;
    let mut tee = Tee {
        file: &mut metrics,
        echo: !a.json,
    };
    let summary = trainer.run(
        &train,
        &valid,
        RunOutputs {
            metrics: Some(&mut tee),
            checkpoint_dir: Some(run.out_dir.clone()),
        },
    )?;
    let checkpoint = match summary.checkpoints.last() {
        Some(p) if p.ends_with(ctrlkit::trainer::checkpoint_name(trainer.step())) => p.clone(),
        _ => trainer.save_checkpoint(&run.out_dir)?,
    };
    let out = TrainSummaryOut {
        checkpoint,
        step: trainer.step(),
        config_hash: cfg.hash(),
        last_train_loss: summary.history.last().map(|h| h.loss),
        last_valid_nll: summary.metrics.iter().rev().find(|m| m.split == "valid").map(|m| m.nll),
    };
    emit(a.json, &out, || {
        format!(
            "trained to step {}; checkpoint {} (config {})\n",
            out.step,
            out.checkpoint.display(),
            &out.config_hash[..12]
        )
    })
}

/// Metrics go to the file and, for human output, to stderr.
struct Tee<'f> {
    file: &'f mut fs::File,
    echo: bool,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if self.echo {
            std::io::stderr().write_all(buf)?;
        }
        self.file.write_all(buf)?;
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

fn load_bundle(m: &ModelArg) -> Result<Bundle> {
    Ok(Bundle::load(&m.checkpoint)?)
}

fn generate(a: Generate) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let request = GenerateRequest {
        control_code: a.code,
        prompt: a.prompt,
        max_new_tokens: a.max_new,
        greedy: !a.sample,
        temperature: a.temperature,
        top_k: a.top_k,
        nucleus_p: a.nucleus_p,
        theta: a.theta,
        penalty_mode: match a.penalty_mode {
            ModeArg::Literal => PenaltyMode::Literal,
            ModeArg::SignAware => PenaltyMode::SignAware,
        },
        penalty_scope: match a.penalty_scope {
            ScopeArg::GeneratedOnly => PenaltyScope::GeneratedOnly,
            ScopeArg::PromptAndGenerated => PenaltyScope::PromptAndGenerated,
        },
        seed: a.seed,
        stream: false,
    };
    let response = api::generate(&bundle, request)?;
    emit(a.json, &response, || format!("{}{}\n", response.prompt, response.text))
}

fn attribute(a: Attribute) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    if a.json {
        let request = AttributeRequest {
            text: a.text,
            prior: a.prior,
            length_normalize: a.length_normalize,
        };
        let response = api::attribute(&bundle, &request)?;
        return emit(true, &response, String::new);
    }
    let options = AttributionOptions {
        prior: a.prior,
        length_normalize: a.length_normalize,
    };
    let result = ctrlkit::attribution::attribute(&bundle.model, &bundle.assets, &a.text, &options)?;
    print!("{}", result.to_table());
    Ok(())
}

fn serve(a: Serve) -> Result<()> {
    let bundle = a.checkpoint.as_deref().map(Bundle::load).transpose()?;
    match &bundle {
        Some(b) => eprintln!("loaded {} (step {}, config {})", b.path.display(), b.info.step, &b.info.config_hash[..12]),
        None => eprintln!("no checkpoint configured; model routes will answer 503"),
    }
    let state = AppState::new(bundle, a.max_in_flight);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(server::serve(state, a.static_dir, a.port))?;
    Ok(())
}

fn demo_corpus(a: DemoCorpus) -> Result<()> {
    let docs_dir = a.out.join("docs");
    fs::create_dir_all(&docs_dir)?;
    let mut registry = ControlCodeRegistry::new();
    registry.add_domain(FORWARD_DOMAIN)?;
    registry.add_domain(REVERSED_DOMAIN)?;
    registry.save(&a.out.join(CODES_FILE))?;
    let mut manifest = String::from("# domain\tdocument\n");
    for (i, (domain, text)) in two_domain_documents(a.seed, a.documents, a.sentences).iter().enumerate() {
        let name = format!("docs/{i:04}.txt");
        fs::write(a.out.join(&name), text)?;
        manifest.push_str(&format!("{domain}\t{name}\n"));
    }
    fs::write(a.out.join("manifest.tsv"), manifest)?;
    println!("wrote {} documents, manifest.tsv and {CODES_FILE} to {}", a.documents, a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BpeLearn(a) => bpe_learn(a),
        Command::CorpusBuild(a) => corpus_build(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Attribute(a) => attribute(a),
        Command::Serve(a) => serve(a),
        Command::DemoCorpus(a) => demo_corpus(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
