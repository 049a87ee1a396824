//! Command-line surface for training, generation, filtering, evaluation,
//! and the full regenerate-and-retrain pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Identical flags
//! and seed produce byte-identical primary outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use nligen_core::checkpoint::{self, ModelRef};
use nligen_core::data::{
    load_corpus, load_embeddings, read_generated_jsonl, write_generated_jsonl, EmbeddingMatrix,
    Example, Vocab,
};
use nligen_core::generation::GenerationConfig;
use nligen_core::metrics::{self, MetricReport};
use nligen_core::models::GeneratorKind;
use nligen_core::numerics::sub_seed;
use nligen_core::pipeline::{self, FilterConfig, PipelineConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "nligen",
    about = "Train generative NLI models, construct datasets from them, and evaluate dataset quality",
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the mLSTM classifier with early stopping on dev loss
    TrainClassifier(TrainClassifierArgs),
    /// Train a hypothesis generator for a fixed number of epochs
    TrainGenerator(TrainGeneratorArgs),
    /// Generate a dataset from a source split with a trained generator
    Generate(GenerateArgs),
    /// Keep examples whose judge label probability exceeds a threshold
    Filter(FilterArgs),
    /// Evaluate a dataset: judge accuracy, Jaccard, ROUGE-L, METEOR, NLL
    Evaluate(EvaluateArgs),
    /// Train a discriminator on original-vs-generated hypotheses and report
    /// its error rate on held-out pairs
    Discriminate(DiscriminateArgs),
    /// Full run: train judge and generator, regenerate, filter at each
    /// threshold, retrain classifiers, and report
    Pipeline(PipelineArgs),
}

/// Hyperparameter flags shared by the training subcommands. A config file
/// (--config) overrides the built-in defaults; explicit flags override the
/// config file.
#[derive(Args, Clone)]
struct HyperArgs {
    /// JSON config file with any of the hyperparameter fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hidden dimension d [default: 150]
    #[arg(long)]
    dim: Option<usize>,
    /// Latent dimension z [default: 8]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Word-embedding dimension e [default: 50]
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Generator training epochs [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Classifier epoch cap [default: 100]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 3]
    #[arg(long)]
    patience: Option<usize>,
    /// Batch size [default: 64]
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Run seed; every random draw derives from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dim: Option<usize>,
    latent_dim: Option<usize>,
    embedding_dim: Option<usize>,
    epochs: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    thresholds: Option<Vec<f64>>,
    oversample: Option<f64>,
    beam: Option<usize>,
    models: Option<String>,
}

impl HyperArgs {
    fn resolve(&self) -> Result<(TrainConfig, FileConfig), nligen_core::Error> {
        let file: FileConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| nligen_core::Error::io(path, e))?;
                serde_json::from_str(&text)?
            }
            None => FileConfig::default(),
        };
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            seed: self.seed.or(file.seed).unwrap_or(0),
            d: self.dim.or(file.dim).unwrap_or(defaults.d),
            z: self.latent_dim.or(file.latent_dim).unwrap_or(defaults.z),
            e: self.embedding_dim.or(file.embedding_dim).unwrap_or(defaults.e),
            batch_size: self.batch.or(file.batch).unwrap_or(defaults.batch_size),
            generator_epochs: self.epochs.or(file.epochs).unwrap_or(defaults.generator_epochs),
            classifier_max_epochs: self
                .max_epochs
                .or(file.max_epochs)
                .unwrap_or(defaults.classifier_max_epochs),
            patience: self.patience.or(file.patience).unwrap_or(defaults.patience),
            learning_rate: self.lr.or(file.lr).unwrap_or(defaults.learning_rate),
            clip_norm: defaults.clip_norm,
        };
        Ok((cfg, file))
    }
}

#[derive(Args)]
struct TrainClassifierArgs {
    /// Training corpus (SNLI-format JSONL)
    #[arg(long)]
    train: PathBuf,
    /// Development corpus for early stopping
    #[arg(long)]
    dev: PathBuf,
    /// Vocabulary file; built from the training corpus when omitted
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained embedding file (GloVe text format); random when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Store checkpoint tensors in 32 bits
    #[arg(long)]
    f32: bool,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainGeneratorArgs {
    /// Training corpus (SNLI-format JSONL)
    #[arg(long)]
    train: PathBuf,
    /// Generator kind: att-embed, base-embed, encdec, vae-encdec [default: att-embed]
    #[arg(long)]
    model: Option<String>,
    /// Vocabulary file; built from the training corpus when omitted
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained embedding file; random when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Store checkpoint tensors in 32 bits
    #[arg(long)]
    f32: bool,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained generator checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source corpus providing premises and labels
    #[arg(long)]
    source: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the checkpoint
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained embedding file; random when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Beam width [default: 1]
    #[arg(long)]
    beam: Option<usize>,
    /// Latent sampling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Copies of the source to generate (fractional allowed) [default: 1.0]
    #[arg(long)]
    oversample: Option<f64>,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct FilterArgs {
    /// Generated dataset to filter
    #[arg(long)]
    dataset: PathBuf,
    /// Judge classifier checkpoint
    #[arg(long)]
    judge: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the judge
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained embedding file; random when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Keep examples with judge probability strictly above this [default: 0.6]
    #[arg(long)]
    threshold: Option<f64>,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset to evaluate (generated or plain SNLI-format JSONL)
    #[arg(long)]
    dataset: PathBuf,
    /// Judge classifier checkpoint
    #[arg(long)]
    judge: PathBuf,
    /// Reference corpus for ROUGE/METEOR/NLL (matched by origin index)
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Generator checkpoint for the NLL column
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Vocabulary file; defaults to vocab.txt next to the judge
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained embedding file; random when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Seed for evaluation-time latent draws [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct DiscriminateArgs {
    /// Corpus of original examples
    #[arg(long)]
    original: PathBuf,
    /// Corpus of generated examples
    #[arg(long)]
    generated: PathBuf,
    /// Vocabulary file
    #[arg(long)]
    vocab: PathBuf,
    /// Pretrained embedding file; random when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Fraction of pairs held out for the error rate [default: 0.2]
    #[arg(long)]
    holdout: Option<f64>,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Training corpus (SNLI-format JSONL)
    #[arg(long)]
    train: PathBuf,
    /// Development corpus
    #[arg(long)]
    dev: PathBuf,
    /// Test corpus
    #[arg(long)]
    test: PathBuf,
    /// Generator kinds, comma separated [default: att-embed]
    #[arg(long)]
    model: Option<String>,
    /// Pretrained embedding file; random when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Filtering thresholds, comma separated [default: 0.0,0.3,0.6,0.9]
    #[arg(long)]
    thresholds: Option<String>,
    /// Generation oversampling factor [default: 3.0]
    #[arg(long)]
    oversample: Option<f64>,
    /// Beam width [default: 1]
    #[arg(long)]
    beam: Option<usize>,
    /// Run directory for checkpoints, datasets, and reports
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn set_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Locate the vocab file: explicit flag, else vocab.txt beside the
/// checkpoint, else in its parent directory (pipeline run layout).
fn find_vocab(explicit: &Option<PathBuf>, near: &Path) -> Result<Vocab, nligen_core::Error> {
    if let Some(path) = explicit {
        return Vocab::load(path);
    }
    for dir in [near.parent(), near.parent().and_then(Path::parent)].into_iter().flatten() {
        let candidate = dir.join("vocab.txt");
        if candidate.exists() {
            return Vocab::load(&candidate);
        }
    }
    Err(nligen_core::Error::Config(format!(
        "no --vocab given and no vocab.txt found near {}",
        near.display()
    )))
}

fn build_embeddings(
    file: &Option<PathBuf>,
    vocab: &Vocab,
    e: usize,
    seed: u64,
) -> Result<EmbeddingMatrix, nligen_core::Error> {
    match file {
        Some(path) => load_embeddings(path, vocab, e, seed),
        None => Ok(EmbeddingMatrix::random(vocab, e, seed)),
    }
}

fn load_split(path: &Path, vocab: &Vocab) -> Result<Vec<Example>, nligen_core::Error> {
    let (examples, _, stats) = load_corpus(path, Some(vocab))?;
    eprintln!(
        "loaded {}: {} examples kept ({} no-consensus, {} too long, retention {:.1}%)",
        path.display(),
        stats.kept,
        stats.no_consensus,
        stats.too_long,
        stats.retention() * 100.0
    );
    Ok(examples)
}

fn parse_kinds(spec: &Option<String>, file: &FileConfig) -> Result<Vec<GeneratorKind>, nligen_core::Error> {
    let raw = spec.clone().or_else(|| file.models.clone()).unwrap_or_else(|| "att-embed".into());
    raw.split(',').map(|s| GeneratorKind::parse(s.trim())).collect()
}

fn parse_thresholds(spec: &Option<String>, file: &FileConfig) -> Result<Vec<f64>, nligen_core::Error> {
    let ts: Vec<f64> = match (spec, &file.thresholds) {
        (Some(s), _) => s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| nligen_core::Error::Config(format!("bad threshold {v:?}: {e}")))
            })
            .collect::<Result<_, _>>()?,
        (None, Some(ts)) => ts.clone(),
        (None, None) => vec![0.0, 0.3, 0.6, 0.9],
    };
    for &t in &ts {
        FilterConfig::new(t, "judge")?;
    }
    Ok(ts)
}

fn run(cli: Cli) -> Result<(), nligen_core::Error> {
    match cli.command {
        Command::TrainClassifier(args) => {
            set_workers(args.workers);
            let (cfg, _) = args.hyper.resolve()?;
            let vocab = match &args.vocab {
                Some(path) => Vocab::load(path)?,
                None => {
                    let (_, vocab, _) = load_corpus(&args.train, None)?;
                    let path = args.out.with_extension("vocab.txt");
                    vocab.save(&path)?;
                    eprintln!("vocab built from training corpus: {}", path.display());
                    vocab
                }
            };
            let emb = build_embeddings(&args.embeddings, &vocab, cfg.e, cfg.seed)?;
            let train = load_split(&args.train, &vocab)?;
            let dev = load_split(&args.dev, &vocab)?;
            let trained = pipeline::train_classifier("classifier", &train, &dev, &emb, &cfg)?;
            checkpoint::save_checkpoint(
                &args.out,
                ModelRef::Classifier(&trained.model),
                vocab.hash(),
                cfg.seed,
                trained.best_epoch,
                args.f32,
            )?;
            for rec in &trained.history {
                eprintln!(
                    "epoch {}: train loss {:.4}, dev loss {:.4}",
                    rec.epoch,
                    rec.train_loss,
                    rec.dev_loss.unwrap_or(f64::NAN)
                );
            }
            println!("saved {} (best epoch {})", args.out.display(), trained.best_epoch);
            Ok(())
        }
        Command::TrainGenerator(args) => {
            set_workers(args.workers);
            let (cfg, file) = args.hyper.resolve()?;
            let kind = parse_kinds(&args.model, &file)?
                .first()
                .copied()
                .ok_or_else(|| nligen_core::Error::Config("no generator kind given".into()))?;
            let vocab = match &args.vocab {
                Some(path) => Vocab::load(path)?,
                None => {
                    let (_, vocab, _) = load_corpus(&args.train, None)?;
                    let path = args.out.with_extension("vocab.txt");
                    vocab.save(&path)?;
                    eprintln!("vocab built from training corpus: {}", path.display());
                    vocab
                }
            };
            let emb = build_embeddings(&args.embeddings, &vocab, cfg.e, cfg.seed)?;
            let train = load_split(&args.train, &vocab)?;
            let trained = pipeline::train_generator("generator", kind, &train, &emb, &cfg)?;
            checkpoint::save_checkpoint(
                &args.out,
                ModelRef::Generator(&trained.model),
                vocab.hash(),
                cfg.seed,
                cfg.generator_epochs,
                args.f32,
            )?;
            for rec in &trained.history {
                eprintln!("epoch {}: train nll/token {:.4}", rec.epoch, rec.train_loss);
            }
            println!("saved {}", args.out.display());
            Ok(())
        }
        Command::Generate(args) => {
            set_workers(args.workers);
            let vocab = find_vocab(&args.vocab, &args.checkpoint)?;
            let (model, meta) = checkpoint::load_checkpoint(&args.checkpoint, Some(vocab.hash()))?;
            let generator = model.into_generator()?;
            let emb = build_embeddings(&args.embeddings, &vocab, meta.e, meta.seed)?;
            let source = load_split(&args.source, &vocab)?;
            let seed = args.seed.unwrap_or(0);
            let mut gen_cfg = GenerationConfig::for_generator(
                &generator,
                args.beam.unwrap_or(1),
                sub_seed(seed, "generate"),
            )?;
            gen_cfg.mask_oov = vocab.oov_count() == 0;
            let out = pipeline::generate_dataset(
                &generator,
                &emb,
                &source,
                &gen_cfg,
                args.oversample.unwrap_or(1.0),
            )?;
            write_generated_jsonl(&args.out, &out, &vocab)?;
            println!("wrote {} examples to {}", out.len(), args.out.display());
            Ok(())
        }
        Command::Filter(args) => {
            set_workers(args.workers);
            let vocab = find_vocab(&args.vocab, &args.judge)?;
            let (model, meta) = checkpoint::load_checkpoint(&args.judge, Some(vocab.hash()))?;
            let judge = model.into_classifier()?;
            let emb = build_embeddings(&args.embeddings, &vocab, meta.e, meta.seed)?;
            let dataset = read_generated_jsonl(&args.dataset, &vocab)?;
            let threshold = args.threshold.unwrap_or(0.6);
            let fcfg = FilterConfig::new(threshold, args.judge.display().to_string())?;
            let (kept, _) = pipeline::filter_dataset(&dataset, &judge, &emb, &fcfg)?;
            write_generated_jsonl(&args.out, &kept, &vocab)?;
            println!(
                "kept {} of {} examples at threshold {} -> {}",
                kept.len(),
                dataset.len(),
                threshold,
                args.out.display()
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            set_workers(args.workers);
            let vocab = find_vocab(&args.vocab, &args.judge)?;
            let (model, meta) = checkpoint::load_checkpoint(&args.judge, Some(vocab.hash()))?;
            let judge = model.into_classifier()?;
            let emb = build_embeddings(&args.embeddings, &vocab, meta.e, meta.seed)?;
            let dataset = read_generated_jsonl(&args.dataset, &vocab)?;
            if dataset.is_empty() {
                return Err(nligen_core::Error::Config("empty dataset".into()));
            }
            let generator = match &args.generator {
                Some(path) => {
                    let (model, _) = checkpoint::load_checkpoint(path, Some(vocab.hash()))?;
                    Some(model.into_generator()?)
                }
                None => None,
            };
            let seed = args.seed.unwrap_or(0);
            let report: MetricReport = match &args.reference {
                Some(reference_path) => {
                    let reference = load_split(reference_path, &vocab)?;
                    let gen_cfg = match &generator {
                        Some(g) => {
                            let mut c = GenerationConfig::for_generator(g, 1, sub_seed(seed, "nll"))?;
                            c.mask_oov = vocab.oov_count() == 0;
                            c
                        }
                        None => GenerationConfig::default(),
                    };
                    metrics::evaluate_generated(
                        &metrics::GeneratedEval {
                            name: &args.dataset.display().to_string(),
                            generated: &dataset,
                            source: &reference,
                            judge: &judge,
                            generator: generator.as_ref(),
                            disc_error: None,
                        },
                        &emb,
                        &gen_cfg,
                    )?
                }
                None => {
                    // Without a reference the dataset scores against itself:
                    // judge accuracy and premise-hypothesis distance only.
                    let examples: Vec<Example> =
                        dataset.iter().map(|g| g.example.clone()).collect();
                    let (accuracy, per_label_accuracy, per_label_counts) =
                        metrics::dataset_label_accuracy(&examples, &judge, &emb)?;
                    let mean_jaccard = examples
                        .iter()
                        .map(|ex| metrics::jaccard_distance(&ex.premise, &ex.hypothesis))
                        .sum::<f64>()
                        / examples.len() as f64;
                    MetricReport {
                        dataset: args.dataset.display().to_string(),
                        examples: examples.len(),
                        accuracy,
                        per_label_accuracy,
                        per_label_counts,
                        mean_jaccard,
                        mean_rouge_l: 0.0,
                        mean_meteor: 0.0,
                        mean_token_nll: None,
                        discriminator_error_rate: None,
                    }
                }
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Discriminate(args) => {
            set_workers(args.workers);
            let (cfg, _) = args.hyper.resolve()?;
            let vocab = Vocab::load(&args.vocab)?;
            let emb = build_embeddings(&args.embeddings, &vocab, cfg.e, cfg.seed)?;
            let original = load_split(&args.original, &vocab)?;
            let generated: Vec<Example> = read_generated_jsonl(&args.generated, &vocab)?
                .into_iter()
                .map(|g| g.example)
                .collect();
            let n = original.len().min(generated.len());
            let holdout = args.holdout.unwrap_or(0.2).clamp(0.05, 0.9);
            let split = ((n as f64) * (1.0 - holdout)) as usize;
            if split == 0 || split == n {
                return Err(nligen_core::Error::Config(format!(
                    "not enough pairs ({n}) for a {holdout} holdout"
                )));
            }
            let disc = pipeline::train_discriminator(
                "discriminator",
                &original[..split],
                &generated[..split],
                &original[split..n],
                &generated[split..n],
                &emb,
                &cfg,
            )?;
            let error_rate = metrics::discriminator_error_rate(
                &disc,
                &original[split..n],
                &generated[split..n],
                &emb,
                sub_seed(cfg.seed, "disc-pairing"),
            )?;
            println!(
                "{}",
                serde_json::json!({
                    "error_rate": error_rate,
                    "pairs_trained": split,
                    "pairs_evaluated": n - split,
                })
            );
            Ok(())
        }
        Command::Pipeline(args) => {
            set_workers(args.workers);
            let (train_cfg, file) = args.hyper.resolve()?;
            let kinds = parse_kinds(&args.model, &file)?;
            let thresholds = parse_thresholds(&args.thresholds, &file)?;
            let cfg = PipelineConfig {
                train: train_cfg,
                kinds,
                thresholds,
                oversample: args.oversample.or(file.oversample).unwrap_or(3.0),
                beam_k: args.beam.or(file.beam).unwrap_or(1),
            };
            let (train, vocab, stats) = load_corpus(&args.train, None)?;
            eprintln!(
                "train corpus: {} examples, vocab {} tokens, retention {:.1}%",
                train.len(),
                vocab.size(),
                stats.retention() * 100.0
            );
            let dev = load_split(&args.dev, &vocab)?;
            let test = load_split(&args.test, &vocab)?;
            let emb = build_embeddings(&args.embeddings, &vocab, cfg.train.e, cfg.train.seed)?;
            let report =
                pipeline::run_full_pipeline(&train, &dev, &test, &vocab, &emb, &cfg, &args.out)?;
            print!("{}", pipeline::render_report(&report));
            println!("artifacts in {}", args.out.display());
            Ok(())
        }
    }
}
