//! End-to-end orchestration: train the reference classifier, train a
//! generator, regenerate the dataset, filter by judge probability, balance
//! and trim, retrain classifiers, and report every metric.
//!
//! Every random draw flows from the run seed through named sub-seeds, so a
//! full run is one-seed reproducible and any stage can be resumed from its
//! persisted artifact without changing downstream numbers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, hash_to_hex, ModelRef};
use crate::data::{
    read_generated_jsonl, write_generated_jsonl, EmbeddingMatrix, Example, GeneratedExample, Vocab,
};
use crate::generation::{generate_for_example, GenerationConfig};
use crate::metrics::{
    dataset_label_accuracy, discriminator_error_rate, evaluate_generated, render_table,
    GeneratedEval, MetricReport,
};
use crate::models::{
    Classifier, Discriminator, GenDims, Generator, GeneratorKind, LatentSource,
};
use crate::numerics::{
    adam_step, clip_grad_norm, fnv1a64, seeded_rng, sub_seed, AdamConfig, ParamStore,
};
use crate::{Error, Result};

/// Training hyperparameters shared by every model in a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub d: usize,
    pub z: usize,
    pub e: usize,
    pub batch_size: usize,
    pub generator_epochs: usize,
    pub classifier_max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            d: 150,
            z: 8,
            e: 50,
            batch_size: 64,
            generator_epochs: 20,
            classifier_max_epochs: 100,
            patience: 3,
            learning_rate: 0.001,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0
            || self.z == 0
            || self.e == 0
            || self.batch_size == 0
            || self.generator_epochs == 0
            || self.classifier_max_epochs == 0
            || self.patience == 0
        {
            return Err(Error::Config(format!("train config fields must be positive: {self:?}")));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

/// Judge threshold for dataset filtering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    pub threshold: f64,
    /// Checkpoint reference of the judge (path or content hash), recorded in
    /// reports.
    pub judge_ref: String,
}

impl FilterConfig {
    pub fn new(threshold: f64, judge_ref: impl Into<String>) -> Result<FilterConfig> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1), got {threshold}")));
        }
        Ok(FilterConfig { threshold, judge_ref: judge_ref.into() })
    }
}

/// Early-stopping bookkeeping: stop after `patience` consecutive epochs
/// without strict improvement; the best epoch's snapshot is what survives.
struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    fn new(patience: usize) -> EarlyStopper {
        EarlyStopper { patience, best: None, best_epoch: 0, since_best: 0 }
    }

    /// Returns (improved, should_stop).
    fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| loss < b);
        if improved {
            self.best = Some(loss);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
}

pub struct TrainedClassifier {
    pub model: Classifier,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Train the mLSTM classifier with early stopping on dev loss. The returned
/// model carries the best-epoch parameters, not the last.
pub fn train_classifier(
    name: &str,
    train: &[Example],
    dev: &[Example],
    emb: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config(format!("{name}: empty train or dev set")));
    }
    let mut model = Classifier::new(cfg.e, cfg.d, sub_seed(cfg.seed, &format!("{name}-init")));
    let adam = cfg.adam();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_store: Option<ParamStore> = None;
    let mut history = Vec::new();

    for epoch in 1..=cfg.classifier_max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, &format!("{name}-shuffle-{epoch}")));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                loss_sum += model.loss_and_grad(emb, &train[i], scale)?;
            }
            clip_grad_norm(&mut model.store, cfg.clip_norm);
            adam_step(&mut model.store, &adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let dev_losses: Vec<f64> =
            dev.par_iter().map(|ex| model.loss(emb, ex)).collect::<Result<_>>()?;
        let dev_loss = dev_losses.iter().sum::<f64>() / dev.len() as f64;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochRecord { epoch, train_loss, dev_loss: Some(dev_loss) });

        let (improved, stop) = stopper.update(epoch, dev_loss);
        if improved {
            best_store = Some(model.store.clone());
        }
        if stop {
            break;
        }
    }
    model.store = best_store.expect("at least one epoch ran");
    Ok(TrainedClassifier { model, history, best_epoch: stopper.best_epoch })
}

pub struct TrainedGenerator {
    pub model: Generator,
    pub history: Vec<EpochRecord>,
}

/// Train a generator for a fixed number of epochs (no early stopping; the
/// final snapshot is returned). Embed kinds update their latent rows with
/// per-row Adam; encoder kinds get their sampling sigma computed afterwards.
pub fn train_generator(
    name: &str,
    kind: GeneratorKind,
    train: &[Example],
    emb: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<TrainedGenerator> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config(format!("{name}: empty training set")));
    }
    let dims = GenDims { e: cfg.e, d: cfg.d, z: cfg.z };
    let mut model = Generator::new(
        kind,
        dims,
        emb.vocab_size(),
        train.len(),
        sub_seed(cfg.seed, &format!("{name}-init")),
    )?;
    let adam = cfg.adam();
    let mut history = Vec::new();

    for epoch in 1..=cfg.generator_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded_rng(cfg.seed, &format!("{name}-shuffle-{epoch}")));
        let mut nll_sum = 0.0;
        let mut token_sum = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut row_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let eps;
                let source = match kind {
                    GeneratorKind::AttEmbed | GeneratorKind::BaseEmbed => LatentSource::TableRow(i),
                    GeneratorKind::EncDec => LatentSource::Encode,
                    GeneratorKind::VaeEncDec => {
                        let mut rng =
                            seeded_rng(cfg.seed, &format!("{name}-eps-{epoch}-{i}"));
                        eps = crate::models::sample_epsilon(cfg.z, &mut rng);
                        LatentSource::VaeEncode(&eps)
                    }
                };
                let (loss, z_grad) = model.loss_and_grad(emb, &train[i], source, scale)?;
                nll_sum += loss.nll;
                token_sum += loss.tokens;
                if let Some(zg) = z_grad {
                    row_grads.insert(i, zg);
                }
            }
            // Global-norm clip over theta and the touched latent rows.
            let row_sq: f64 =
                row_grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
            let norm = (model.store.grad_norm().powi(2) + row_sq).sqrt();
            if norm > cfg.clip_norm {
                let factor = cfg.clip_norm / norm;
                model.store.scale_grads(factor);
                for g in row_grads.values_mut() {
                    g.iter_mut().for_each(|x| *x *= factor);
                }
            }
            adam_step(&mut model.store, &adam)?;
            if let Some(table) = model.latent.as_mut() {
                for (i, grad) in &row_grads {
                    table.adam_row(*i, grad, &adam)?;
                }
            }
        }
        let train_nll = nll_sum / token_sum as f64;
        if !train_nll.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(EpochRecord { epoch, train_loss: train_nll, dev_loss: None });
    }

    // Empirical latent spread for generation-time sampling.
    match kind {
        GeneratorKind::EncDec => {
            let zs: Vec<Vec<f64>> =
                train.par_iter().map(|ex| model.encode_latent(emb, ex)).collect::<Result<_>>()?;
            let n = zs.len() as f64;
            let mut sigma = vec![0.0; cfg.z];
            for k in 0..cfg.z {
                let mean = zs.iter().map(|z| z[k]).sum::<f64>() / n;
                let var = zs.iter().map(|z| (z[k] - mean) * (z[k] - mean)).sum::<f64>() / n;
                sigma[k] = var.sqrt();
            }
            model.gen_sigma = Some(sigma);
        }
        GeneratorKind::VaeEncDec => {
            model.gen_sigma = Some(vec![1.0; cfg.z]);
        }
        _ => {}
    }
    Ok(TrainedGenerator { model, history })
}

/// Train the discriminator on original-vs-generated hypothesis pairs with
/// early stopping on dev pairs.
pub fn train_discriminator(
    name: &str,
    train_original: &[Example],
    train_generated: &[Example],
    dev_original: &[Example],
    dev_generated: &[Example],
    emb: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<Discriminator> {
    cfg.validate()?;
    let n = train_original.len().min(train_generated.len());
    let n_dev = dev_original.len().min(dev_generated.len());
    if n == 0 || n_dev == 0 {
        return Err(Error::Config(format!("{name}: empty discriminator training or dev pairs")));
    }
    let mut model = Discriminator::new(cfg.e, cfg.d, sub_seed(cfg.seed, &format!("{name}-init")));
    let adam = cfg.adam();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_store: Option<ParamStore> = None;

    let mut dev_order: Vec<usize> = (0..n_dev).collect();
    dev_order.shuffle(&mut seeded_rng(cfg.seed, &format!("{name}-dev-pairing")));

    for epoch in 1..=cfg.classifier_max_epochs {
        let mut orig_order: Vec<usize> = (0..n).collect();
        let mut gen_order: Vec<usize> = (0..n).collect();
        orig_order.shuffle(&mut seeded_rng(cfg.seed, &format!("{name}-orig-{epoch}")));
        gen_order.shuffle(&mut seeded_rng(cfg.seed, &format!("{name}-gen-{epoch}")));
        let pairs: Vec<(usize, usize)> = orig_order.into_iter().zip(gen_order).collect();
        for batch in pairs.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &(oi, gi) in batch {
                model.pair_loss_and_grad(
                    emb,
                    &train_original[oi].hypothesis,
                    &train_generated[gi].hypothesis,
                    scale,
                )?;
            }
            clip_grad_norm(&mut model.store, cfg.clip_norm);
            adam_step(&mut model.store, &adam)?;
        }
        let dev_losses: Vec<f64> = dev_order
            .par_iter()
            .zip(dev_order.par_iter().rev())
            .map(|(&oi, &gi)| {
                model.pair_loss(emb, &dev_original[oi].hypothesis, &dev_generated[gi].hypothesis)
            })
            .collect::<Result<_>>()?;
        let dev_loss = dev_losses.iter().sum::<f64>() / dev_losses.len() as f64;
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let (improved, stop) = stopper.update(epoch, dev_loss);
        if improved {
            best_store = Some(model.store.clone());
        }
        if stop {
            break;
        }
    }
    model.store = best_store.expect("at least one epoch ran");
    Ok(model)
}

/// Regenerate a dataset from source premises and labels. The source is
/// cycled until ceil(oversample * len) examples exist, each with a fresh
/// latent drawn from a per-(cycle, index) stream, so worker count and
/// scheduling cannot change the output.
pub fn generate_dataset(
    generator: &Generator,
    emb: &EmbeddingMatrix,
    source: &[Example],
    cfg: &GenerationConfig,
    oversample: f64,
) -> Result<Vec<GeneratedExample>> {
    if oversample < 1.0 {
        return Err(Error::Config(format!("oversample must be >= 1, got {oversample}")));
    }
    if source.is_empty() {
        return Err(Error::Config("generate_dataset: empty source".into()));
    }
    let total = (oversample * source.len() as f64).ceil() as usize;
    (0..total)
        .into_par_iter()
        .map(|idx| {
            let cycle = idx / source.len();
            let pos = idx % source.len();
            let mut rng = seeded_rng(cfg.seed, &format!("gen-z-{cycle}-{pos}"));
            generate_for_example(generator, emb, &source[pos], pos, cfg, &mut rng)
        })
        .collect()
}

/// Judge probability of each example's own label.
pub fn judge_probs(
    dataset: &[GeneratedExample],
    judge: &Classifier,
    emb: &EmbeddingMatrix,
) -> Result<Vec<f64>> {
    dataset
        .par_iter()
        .map(|g| Ok(judge.forward(emb, &g.example)?[g.example.label.index()]))
        .collect()
}

/// Keep examples whose judge probability strictly exceeds the threshold.
/// Returns the kept examples and the probabilities of every input example.
pub fn filter_dataset(
    dataset: &[GeneratedExample],
    judge: &Classifier,
    emb: &EmbeddingMatrix,
    cfg: &FilterConfig,
) -> Result<(Vec<GeneratedExample>, Vec<f64>)> {
    let probs = judge_probs(dataset, judge, emb)?;
    let kept = filter_with_probs(dataset, &probs, cfg.threshold);
    Ok((kept, probs))
}

/// Threshold filtering against precomputed judge probabilities.
pub fn filter_with_probs(
    dataset: &[GeneratedExample],
    probs: &[f64],
    threshold: f64,
) -> Vec<GeneratedExample> {
    dataset
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > threshold)
        .map(|(g, _)| g.clone())
        .collect()
}

/// Uniform label histogram: the first target/3 examples of each label in
/// original order, re-interleaved in original relative order. The target is
/// rounded down to a multiple of three.
pub fn balance_and_trim(
    dataset: &[GeneratedExample],
    target_size: usize,
) -> Result<Vec<GeneratedExample>> {
    let target = target_size - target_size % 3;
    let per_label = target / 3;
    let mut counts = [0usize; 3];
    for g in dataset {
        counts[g.example.label.index()] += 1;
    }
    if counts.iter().any(|&c| c < per_label) {
        return Err(Error::Insufficient { target, counts });
    }
    let mut taken = [0usize; 3];
    let mut out = Vec::with_capacity(target);
    for g in dataset {
        let label = g.example.label.index();
        if taken[label] < per_label {
            taken[label] += 1;
            out.push(g.clone());
        }
    }
    Ok(out)
}

/// Concatenate two datasets that share a vocabulary.
pub fn merge_datasets(
    a: &[Example],
    b: &[Example],
    vocab_hash_a: u64,
    vocab_hash_b: u64,
) -> Result<Vec<Example>> {
    if vocab_hash_a != vocab_hash_b {
        return Err(Error::VocabHashMismatch {
            expected: hash_to_hex(vocab_hash_a),
            found: hash_to_hex(vocab_hash_b),
        });
    }
    let mut out = a.to_vec();
    out.extend_from_slice(b);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Resolved configuration of one full run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub kinds: Vec<GeneratorKind>,
    pub thresholds: Vec<f64>,
    pub oversample: f64,
    pub beam_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            kinds: vec![GeneratorKind::AttEmbed],
            thresholds: vec![0.0, 0.3, 0.6, 0.9],
            oversample: 3.0,
            beam_k: 1,
        }
    }
}

/// One (kind, threshold) row of the comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub kind: String,
    pub z: usize,
    pub threshold: f64,
    /// Test accuracy of the classifier trained on the filtered dataset.
    pub acc_at_t: f64,
    /// Accuracy of that classifier on its own generated (identically
    /// filtered) development set.
    pub gen_dev_accuracy: f64,
    pub filtered_train_size: usize,
    pub classifier_epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: String,
    pub metrics: MetricReport,
    pub rows: Vec<RunRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub vocab_hash: String,
    /// Content hash of the judge checkpoint used for filtering and
    /// dataset-accuracy metrics.
    pub judge_checkpoint_hash: String,
    pub orig_test_accuracy: f64,
    pub orig_classifier_epochs: usize,
    /// The generated dev sets are filtered with the same threshold as the
    /// train sets before the Fig.-5-style evaluation.
    pub kinds: Vec<KindReport>,
}

struct RunLog {
    path: PathBuf,
    start: std::time::Instant,
}

impl RunLog {
    fn new(dir: &Path) -> RunLog {
        RunLog { path: dir.join("log.txt"), start: std::time::Instant::now() }
    }

    fn line(&self, msg: &str) {
        let elapsed = self.start.elapsed().as_secs_f64();
        if let Ok(mut f) =
            std::fs::OpenOptions::new().create(true).append(true).open(&self.path)
        {
            let _ = writeln!(f, "[{elapsed:10.3}s] {msg}");
        }
    }
}

fn stage<T>(log: &RunLog, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log.line(&format!("stage {name}: start"));
    match f() {
        Ok(v) => {
            log.line(&format!("stage {name}: done"));
            Ok(v)
        }
        Err(e) => {
            log.line(&format!("stage {name}: FAILED: {e}"));
            Err(e.in_stage(name))
        }
    }
}

fn file_hash(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn threshold_tag(t: f64) -> String {
    format!("{t:.2}")
}

/// Train (or resume) the judge, regenerate datasets with each configured
/// generator kind, filter at each threshold, retrain classifiers, and
/// evaluate everything on the original test split.
///
/// Artifacts land under `out_dir` (config.json, vocab.txt, checkpoints/,
/// datasets/, reports/, log.txt); existing artifacts are loaded instead of
/// recomputed, which reproduces the same downstream numbers because all
/// randomness is keyed by stage name.
pub fn run_full_pipeline(
    train: &[Example],
    dev: &[Example],
    test: &[Example],
    vocab: &Vocab,
    emb: &EmbeddingMatrix,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineReport> {
    cfg.train.validate()?;
    for &t in &cfg.thresholds {
        FilterConfig::new(t, "judge")?;
    }
    if train.is_empty() || dev.is_empty() || test.is_empty() {
        return Err(Error::Config("pipeline requires non-empty train/dev/test splits".into()));
    }
    let ckpt_dir = out_dir.join("checkpoints");
    let data_dir = out_dir.join("datasets");
    let report_dir = out_dir.join("reports");
    for dir in [out_dir, &ckpt_dir, &data_dir, &report_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log = RunLog::new(out_dir);
    let seed = cfg.train.seed;
    let vocab_hash = vocab.hash();

    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(out_dir.join("config.json"), e))?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    // Reference classifier, trained once and reused everywhere.
    let judge_path = ckpt_dir.join("origclass.nlig");
    let (judge, judge_epochs) = stage(&log, "train-origclass", || {
        if judge_path.exists() {
            let (model, meta) = checkpoint::load_checkpoint(&judge_path, Some(vocab_hash))?;
            return Ok((model.into_classifier()?, meta.epochs_trained));
        }
        let trained = train_classifier("origclass", train, dev, emb, &cfg.train)?;
        checkpoint::save_checkpoint(
            &judge_path,
            ModelRef::Classifier(&trained.model),
            vocab_hash,
            seed,
            trained.best_epoch,
            false,
        )?;
        Ok((trained.model, trained.best_epoch))
    })?;
    let judge_hash = hash_to_hex(file_hash(&judge_path)?);

    let (orig_test_accuracy, _, _) = stage(&log, "evaluate-origclass", || {
        dataset_label_accuracy(test, &judge, emb)
    })?;
    log.line(&format!("origclass test accuracy: {orig_test_accuracy:.4}"));

    let mut kind_reports = Vec::new();
    for &kind in &cfg.kinds {
        let kname = kind.as_str();

        // Generator.
        let gen_path = ckpt_dir.join(format!("gen-{kname}.nlig"));
        let generator = stage(&log, &format!("train-generator-{kname}"), || {
            if gen_path.exists() {
                let (model, _) = checkpoint::load_checkpoint(&gen_path, Some(vocab_hash))?;
                return model.into_generator();
            }
            let trained = train_generator(&format!("gen-{kname}"), kind, train, emb, &cfg.train)?;
            for rec in &trained.history {
                log.line(&format!("gen-{kname} epoch {}: train nll/token {:.4}", rec.epoch, rec.train_loss));
            }
            checkpoint::save_checkpoint(
                &gen_path,
                ModelRef::Generator(&trained.model),
                vocab_hash,
                seed,
                cfg.train.generator_epochs,
                false,
            )?;
            Ok(trained.model)
        })?;

        let mask_oov = vocab.oov_count() == 0;
        let mut gen_cfg_train =
            GenerationConfig::for_generator(&generator, cfg.beam_k, sub_seed(seed, &format!("gen-train-{kname}")))?;
        gen_cfg_train.mask_oov = mask_oov;
        let mut gen_cfg_dev =
            GenerationConfig::for_generator(&generator, cfg.beam_k, sub_seed(seed, &format!("gen-dev-{kname}")))?;
        gen_cfg_dev.mask_oov = mask_oov;

        // Regenerated training and development datasets.
        let gen_train_path = data_dir.join(format!("gen-train-{kname}.jsonl"));
        let gen_train = stage(&log, &format!("generate-train-{kname}"), || {
            if gen_train_path.exists() {
                return read_generated_jsonl(&gen_train_path, vocab);
            }
            let out = generate_dataset(&generator, emb, train, &gen_cfg_train, cfg.oversample)?;
            write_generated_jsonl(&gen_train_path, &out, vocab)?;
            Ok(out)
        })?;
        let gen_dev_path = data_dir.join(format!("gen-dev-{kname}.jsonl"));
        let gen_dev = stage(&log, &format!("generate-dev-{kname}"), || {
            if gen_dev_path.exists() {
                return read_generated_jsonl(&gen_dev_path, vocab);
            }
            let out = generate_dataset(&generator, emb, dev, &gen_cfg_dev, 1.0)?;
            write_generated_jsonl(&gen_dev_path, &out, vocab)?;
            Ok(out)
        })?;

        // Discriminator on train hypotheses, error rate on dev pairs.
        let disc_path = ckpt_dir.join(format!("disc-{kname}.nlig"));
        let disc = stage(&log, &format!("train-discriminator-{kname}"), || {
            if disc_path.exists() {
                let (model, _) = checkpoint::load_checkpoint(&disc_path, Some(vocab_hash))?;
                return model.into_discriminator();
            }
            let gen_train_examples: Vec<Example> =
                gen_train.iter().take(train.len()).map(|g| g.example.clone()).collect();
            let gen_dev_examples: Vec<Example> =
                gen_dev.iter().map(|g| g.example.clone()).collect();
            let model = train_discriminator(
                &format!("disc-{kname}"),
                train,
                &gen_train_examples,
                dev,
                &gen_dev_examples,
                emb,
                &cfg.train,
            )?;
            checkpoint::save_checkpoint(
                &disc_path,
                ModelRef::Discriminator(&model),
                vocab_hash,
                seed,
                0,
                false,
            )?;
            Ok(model)
        })?;
        let disc_er = stage(&log, &format!("discriminator-error-{kname}"), || {
            let gen_dev_examples: Vec<Example> =
                gen_dev.iter().map(|g| g.example.clone()).collect();
            discriminator_error_rate(
                &disc,
                dev,
                &gen_dev_examples,
                emb,
                sub_seed(seed, &format!("disc-pairing-{kname}")),
            )
        })?;

        // Unfiltered generated-dev metrics (the comparison-figure numbers).
        let mut nll_cfg = gen_cfg_dev.clone();
        nll_cfg.seed = sub_seed(seed, &format!("nll-{kname}"));
        let metrics = stage(&log, &format!("metrics-{kname}"), || {
            evaluate_generated(
                &GeneratedEval {
                    name: &format!("gen-dev-{kname}"),
                    generated: &gen_dev,
                    source: dev,
                    judge: &judge,
                    generator: Some(&generator),
                    disc_error: Some(disc_er),
                },
                emb,
                &nll_cfg,
            )
        })?;

        // Filter, balance, retrain, evaluate per threshold.
        let train_probs = stage(&log, &format!("judge-probs-{kname}"), || {
            judge_probs(&gen_train, &judge, emb)
        })?;
        let dev_probs = stage(&log, &format!("judge-probs-dev-{kname}"), || {
            judge_probs(&gen_dev, &judge, emb)
        })?;

        let mut rows = Vec::new();
        for &t in &cfg.thresholds {
            let tag = threshold_tag(t);
            let row = stage(&log, &format!("retrain-{kname}-t{tag}"), || {
                let filtered = filter_with_probs(&gen_train, &train_probs, t);
                let balanced = balance_and_trim(&filtered, train.len())?;
                let filtered_dev = filter_with_probs(&gen_dev, &dev_probs, t);
                write_generated_jsonl(
                    &data_dir.join(format!("filtered-{kname}-t{tag}.jsonl")),
                    &balanced,
                    vocab,
                )?;
                let new_train: Vec<Example> =
                    balanced.iter().map(|g| g.example.clone()).collect();
                let new_dev: Vec<Example> =
                    filtered_dev.iter().map(|g| g.example.clone()).collect();
                if new_dev.is_empty() {
                    return Err(Error::Config(format!(
                        "threshold {t} leaves no generated dev examples for early stopping"
                    )));
                }
                let ckpt = ckpt_dir.join(format!("newclass-{kname}-t{tag}.nlig"));
                let (new_clf, epochs) = if ckpt.exists() {
                    let (model, meta) = checkpoint::load_checkpoint(&ckpt, Some(vocab_hash))?;
                    (model.into_classifier()?, meta.epochs_trained)
                } else {
                    let trained = train_classifier(
                        &format!("newclass-{kname}-t{tag}"),
                        &new_train,
                        &new_dev,
                        emb,
                        &cfg.train,
                    )?;
                    checkpoint::save_checkpoint(
                        &ckpt,
                        ModelRef::Classifier(&trained.model),
                        vocab_hash,
                        seed,
                        trained.best_epoch,
                        false,
                    )?;
                    (trained.model, trained.best_epoch)
                };
                let (acc_at_t, _, _) = dataset_label_accuracy(test, &new_clf, emb)?;
                let (gen_dev_accuracy, _, _) = dataset_label_accuracy(&new_dev, &new_clf, emb)?;
                log.line(&format!(
                    "{kname} t={t}: filtered {} -> {} examples, acc@t {:.4}, gen-dev acc {:.4}",
                    filtered.len(),
                    new_train.len(),
                    acc_at_t,
                    gen_dev_accuracy
                ));
                Ok(RunRow {
                    kind: kname.to_string(),
                    z: cfg.train.z,
                    threshold: t,
                    acc_at_t,
                    gen_dev_accuracy,
                    filtered_train_size: new_train.len(),
                    classifier_epochs: epochs,
                })
            })?;
            rows.push(row);
        }
        kind_reports.push(KindReport { kind: kname.to_string(), metrics, rows });
    }

    let report = PipelineReport {
        seed,
        vocab_hash: hash_to_hex(vocab_hash),
        judge_checkpoint_hash: judge_hash,
        orig_test_accuracy,
        orig_classifier_epochs: judge_epochs,
        kinds: kind_reports,
    };
    std::fs::write(report_dir.join("report.json"), serde_json::to_string_pretty(&report)?)
        .map_err(|e| Error::io(report_dir.join("report.json"), e))?;
    std::fs::write(report_dir.join("report.txt"), render_report(&report))
        .map_err(|e| Error::io(report_dir.join("report.txt"), e))?;
    Ok(report)
}

/// Aligned text rendering: one comparison row per (kind, threshold) plus the
/// per-kind metric table.
pub fn render_report(report: &PipelineReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "seed {}  vocab {}  judge {}\n",
        report.seed, report.vocab_hash, report.judge_checkpoint_hash
    ));
    out.push_str(&format!(
        "original classifier: test accuracy {:.4} (best epoch {})\n\n",
        report.orig_test_accuracy, report.orig_classifier_epochs
    ));
    out.push_str(&format!(
        "{:<12} {:>4} {:>6} {:>8} {:>12} {:>10} {:>7}\n",
        "model", "z", "t", "acc@t", "gen-dev-acc", "train-size", "epochs"
    ));
    for k in &report.kinds {
        for row in &k.rows {
            out.push_str(&format!(
                "{:<12} {:>4} {:>6.2} {:>8.4} {:>12.4} {:>10} {:>7}\n",
                row.kind,
                row.z,
                row.threshold,
                row.acc_at_t,
                row.gen_dev_accuracy,
                row.filtered_train_size,
                row.classifier_epochs
            ));
        }
    }
    out.push('\n');
    let metric_reports: Vec<MetricReport> = report.kinds.iter().map(|k| k.metrics.clone()).collect();
    out.push_str(&render_table(&metric_reports));
    out
}
