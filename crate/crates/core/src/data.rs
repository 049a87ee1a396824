//! Corpus ingestion in the SNLI JSONL format, tokenization, vocabulary
//! construction, fixed-length padding, and pretrained-embedding loading.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::{fnv1a64, seeded_rng, Tensor};
use crate::{Error, Result};

/// Padded premise length (tokens).
pub const PREMISE_LEN: usize = 25;
/// Padded hypothesis length (tokens).
pub const HYPOTHESIS_LEN: usize = 15;
/// Reserved id of the padding token.
pub const NULL_ID: u32 = 0;
/// Reserved id of the out-of-vocabulary token.
pub const OOV_ID: u32 = 1;

pub const NULL_TOKEN: &str = "<null>";
pub const OOV_TOKEN: &str = "<oov>";

/// The three NLI labels, in encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Entailment,
    Contradiction,
    Neutral,
}

pub const ALL_LABELS: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

impl Label {
    pub fn parse(s: &str) -> Result<Label> {
        match s {
            "entailment" => Ok(Label::Entailment),
            "contradiction" => Ok(Label::Contradiction),
            "neutral" => Ok(Label::Neutral),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Label::Entailment => 0,
            Label::Contradiction => 1,
            Label::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Label {
        ALL_LABELS[i]
    }

    pub fn one_hot(&self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }
}

/// One padded NLI example: token ids for premise and hypothesis plus label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub premise: Vec<u32>,
    pub hypothesis: Vec<u32>,
    pub label: Label,
}

impl Example {
    pub fn new(premise: Vec<u32>, hypothesis: Vec<u32>, label: Label) -> Result<Example> {
        let ex = Example { premise, hypothesis, label };
        ex.validate()?;
        Ok(ex)
    }

    /// Length and padding invariants: fixed sizes, null only as suffix.
    pub fn validate(&self) -> Result<()> {
        let check = |ids: &[u32], want: usize, what: &str| -> Result<()> {
            if ids.len() != want {
                return Err(Error::Shape {
                    op: "Example::validate".into(),
                    expected: format!("{what} of {want} tokens"),
                    got: format!("{}", ids.len()),
                });
            }
            let mut seen_null = false;
            for &id in ids {
                if id == NULL_ID {
                    seen_null = true;
                } else if seen_null {
                    return Err(Error::Config(format!("{what}: padding token inside sentence")));
                }
            }
            Ok(())
        };
        check(&self.premise, PREMISE_LEN, "premise")?;
        check(&self.hypothesis, HYPOTHESIS_LEN, "hypothesis")
    }

    pub fn premise_tokens(&self) -> &[u32] {
        strip_padding(&self.premise)
    }

    pub fn hypothesis_tokens(&self) -> &[u32] {
        strip_padding(&self.hypothesis)
    }
}

/// Drop the trailing null padding.
pub fn strip_padding(ids: &[u32]) -> &[u32] {
    let end = ids.iter().rposition(|&id| id != NULL_ID).map_or(0, |p| p + 1);
    &ids[..end]
}

/// Right-pad with nulls to a fixed length.
pub fn pad_to(ids: &[u32], len: usize) -> Vec<u32> {
    let mut out = ids.to_vec();
    out.resize(len, NULL_ID);
    out
}

/// Lowercase, split on whitespace, and split the punctuation characters
/// `.`, `,`, `!`, `?`, `;`, `:`, `"`, `(`, `)` into their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    const PUNCT: [char; 9] = ['.', ',', '!', '?', ';', ':', '"', '(', ')'];
    let lower = text.to_lowercase();
    let mut spaced = String::with_capacity(lower.len() + 8);
    for c in lower.chars() {
        if PUNCT.contains(&c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// A tokenized example before vocabulary encoding.
#[derive(Debug, Clone)]
pub struct RawExample {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LoadStats {
    pub lines: usize,
    pub no_consensus: usize,
    pub too_long: usize,
    pub kept: usize,
}

impl LoadStats {
    /// Fraction of labelled (non `-`) examples that survive the length filter.
    pub fn retention(&self) -> f64 {
        let labelled = self.lines - self.no_consensus;
        if labelled == 0 {
            0.0
        } else {
            self.kept as f64 / labelled as f64
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    gold_label: String,
    sentence1: String,
    sentence2: String,
}

/// Parse a SNLI-format JSONL file into tokenized raw examples.
///
/// Records labelled `-` are dropped, as are examples whose premise exceeds
/// 25 or hypothesis exceeds 15 tokens.
pub fn load_raw(path: &Path) -> Result<(Vec<RawExample>, LoadStats)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut stats = LoadStats::default();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if rec.gold_label == "-" {
            stats.no_consensus += 1;
            continue;
        }
        let label = Label::parse(&rec.gold_label).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let premise = tokenize(&rec.sentence1);
        let hypothesis = tokenize(&rec.sentence2);
        if premise.len() > PREMISE_LEN || hypothesis.len() > HYPOTHESIS_LEN {
            stats.too_long += 1;
            continue;
        }
        stats.kept += 1;
        out.push(RawExample { premise, hypothesis, label });
    }
    Ok((out, stats))
}

/// Vocabulary: token index = id; ids 0 and 1 are reserved for `<null>` and
/// `<oov>`; the rest are sorted by descending corpus frequency, ties broken
/// lexicographically.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, counts, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn oov_count(&self) -> u64 {
        self.counts[OOV_ID as usize]
    }

    /// Canonical file form: one token per line, line number = id.
    pub fn file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in &self.tokens {
            out.extend_from_slice(t.as_bytes());
            out.push(b'\n');
        }
        out
    }

    /// FNV-1a 64 hash of the canonical file bytes.
    pub fn hash(&self) -> u64 {
        fnv1a64(&self.file_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.file_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != NULL_TOKEN || tokens[1] != OOV_TOKEN {
            return Err(Error::Config(format!(
                "vocab file {} must start with {NULL_TOKEN} and {OOV_TOKEN} lines",
                path.display()
            )));
        }
        let counts = vec![0; tokens.len()];
        Ok(Vocab::from_parts(tokens, counts))
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        strip_padding(ids)
            .iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Build a vocabulary from tokenized examples, dropping tokens seen fewer
/// than `min_count` times.
pub fn build_vocab(examples: &[RawExample], min_count: u64) -> Vocab {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for ex in examples {
        for t in ex.premise.iter().chain(&ex.hypothesis) {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(&str, u64)> =
        freq.iter().filter(|(_, &c)| c >= min_count).map(|(&t, &c)| (t, c)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let oov_count: u64 = freq.values().filter(|&&c| c < min_count).sum();
    let mut tokens = vec![NULL_TOKEN.to_string(), OOV_TOKEN.to_string()];
    let mut counts = vec![0, oov_count];
    for (t, c) in entries {
        tokens.push(t.to_string());
        counts.push(c);
    }
    Vocab::from_parts(tokens, counts)
}

/// Encode a raw example against a vocabulary and pad to the fixed lengths.
pub fn encode_example(raw: &RawExample, vocab: &Vocab) -> Example {
    Example {
        premise: pad_to(&vocab.encode(&raw.premise), PREMISE_LEN),
        hypothesis: pad_to(&vocab.encode(&raw.hypothesis), HYPOTHESIS_LEN),
        label: raw.label,
    }
}

/// Load a corpus file. When `vocab` is `None` a vocabulary is built from the
/// file itself; otherwise the supplied one is used for encoding.
pub fn load_corpus(path: &Path, vocab: Option<&Vocab>) -> Result<(Vec<Example>, Vocab, LoadStats)> {
    let (raw, stats) = load_raw(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(&raw, 1),
    };
    let examples: Vec<Example> = raw.iter().map(|r| encode_example(r, &vocab)).collect();
    for ex in &examples {
        ex.validate()?;
    }
    Ok((examples, vocab, stats))
}

/// Frozen word-embedding matrix, one row per vocab id. Row 0 (`<null>`) is
/// all zeros and no row ever receives a gradient.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    values: Tensor,
    dim: usize,
}

impl EmbeddingMatrix {
    /// Wrap a [V x e] tensor as a frozen embedding table.
    pub fn from_tensor(values: Tensor) -> Result<EmbeddingMatrix> {
        if values.dims().len() != 2 {
            return Err(Error::Shape {
                op: "EmbeddingMatrix::from_tensor".into(),
                expected: "rank-2 tensor".into(),
                got: format!("{:?}", values.dims()),
            });
        }
        let dim = values.dims()[1];
        Ok(EmbeddingMatrix { values, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn row(&self, id: u32) -> &[f64] {
        self.values.row(id as usize)
    }

    /// Fully synthetic embedding table for runs without a pretrained vector
    /// file: every row except the zero null row is drawn from N(0, 0.4),
    /// the component scale of typical 50-dimensional GloVe vectors.
    pub fn random(vocab: &Vocab, dim: usize, seed: u64) -> EmbeddingMatrix {
        let v = vocab.size();
        let mut values = Tensor::zeros(&[v, dim]);
        let normal = Normal::new(0.0, 0.4).unwrap();
        let mut rng = seeded_rng(seed, "embeddings");
        for id in 1..v {
            let row = &mut values.values_mut()[id * dim..(id + 1) * dim];
            for x in row {
                *x = normal.sample(&mut rng);
            }
        }
        EmbeddingMatrix { values, dim }
    }
}

/// Load pretrained vectors in the GloVe text format (`word v1 ... v<dim>`).
/// Vocab words missing from the file get N(0, 0.1) draws with the given seed;
/// the `<null>` row stays zero.
pub fn load_embeddings(path: &Path, vocab: &Vocab, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut by_word: HashMap<String, Vec<f64>> = HashMap::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = match parts.next() {
            Some(w) => w.to_string(),
            None => continue,
        };
        if !vocab.index.contains_key(&word) {
            continue;
        }
        let vec: Vec<f64> = parts.map(|p| p.parse::<f64>().unwrap_or(f64::NAN)).collect();
        if vec.len() != dim || vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::EmbeddingWidth {
                path: path.to_path_buf(),
                word,
                expected: dim,
                got: vec.len(),
            });
        }
        by_word.insert(word, vec);
    }

    let v = vocab.size();
    let mut values = Tensor::zeros(&[v, dim]);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut rng = seeded_rng(seed, "embeddings");
    // Missing rows draw from one stream in vocab-id order, so two loads with
    // the same seed and vocab are identical.
    for id in 1..v {
        let token = vocab.token(id as u32);
        let row = &mut values.values_mut()[id * dim..(id + 1) * dim];
        match by_word.get(token) {
            Some(vec) => row.copy_from_slice(vec),
            None => {
                for x in row.iter_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
    }
    Ok(EmbeddingMatrix { values, dim })
}

/// One record of a generated dataset: a regular example plus the index of the
/// source example it was generated from and the decoder's joint log-prob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedExample {
    pub example: Example,
    pub origin_index: usize,
    pub gen_logprob: f64,
}

#[derive(Serialize, Deserialize)]
struct GeneratedRecord {
    gold_label: String,
    sentence1: String,
    sentence2: String,
    #[serde(default)]
    origin_index: Option<usize>,
    #[serde(default)]
    gen_logprob: Option<f64>,
}

/// Write a generated dataset as JSONL (SNLI fields plus origin/log-prob).
pub fn write_generated_jsonl(
    path: &Path,
    examples: &[GeneratedExample],
    vocab: &Vocab,
) -> Result<()> {
    let mut out = String::new();
    for g in examples {
        let rec = GeneratedRecord {
            gold_label: g.example.label.as_str().to_string(),
            sentence1: vocab.decode(&g.example.premise),
            sentence2: vocab.decode(&g.example.hypothesis),
            origin_index: Some(g.origin_index),
            gen_logprob: Some(g.gen_logprob),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a generated dataset back (inverse of [`write_generated_jsonl`]).
/// Plain SNLI-format files also load; missing origin indices default to the
/// record's position.
pub fn read_generated_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<GeneratedExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GeneratedRecord = serde_json::from_str(&line).map_err(|e| Error::Corpus {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let label = Label::parse(&rec.gold_label)?;
        let example = Example::new(
            pad_to(&vocab.encode(&tokenize(&rec.sentence1)), PREMISE_LEN),
            pad_to(&vocab.encode(&tokenize(&rec.sentence2)), HYPOTHESIS_LEN),
            label,
        )?;
        out.push(GeneratedExample {
            example,
            origin_index: rec.origin_index.unwrap_or(out.len()),
            gen_logprob: rec.gen_logprob.unwrap_or(0.0),
        });
    }
    Ok(out)
}

/// Write plain examples in the SNLI JSONL format.
pub fn write_corpus_jsonl(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    #[derive(Serialize)]
    struct Rec<'a> {
        gold_label: &'a str,
        sentence1: String,
        sentence2: String,
    }
    let mut out = String::new();
    for ex in examples {
        let rec = Rec {
            gold_label: ex.label.as_str(),
            sentence1: vocab.decode(&ex.premise),
            sentence2: vocab.decode(&ex.hypothesis),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
