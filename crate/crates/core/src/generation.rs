//! Hypothesis generation from a trained model: latent sampling, greedy
//! decoding, and k-best beam search.
//!
//! Decoding starts from the null token, appends one token per step, and
//! stops on a null emission or at the length cap. Joint log-probability
//! includes the terminal null when a sequence finishes with one.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{pad_to, EmbeddingMatrix, Example, GeneratedExample, HYPOTHESIS_LEN, NULL_ID, OOV_ID};
use crate::models::{DecodeCursor, Generator, GeneratorKind, LatentSource};
use crate::{Error, Result};

/// Everything generation needs besides the model: beam width, stop length,
/// the latent sampling scale, and masking of the out-of-vocabulary token.
#[derive(Debug, Clone)]
pub struct GenerationConfig {
    pub beam_k: usize,
    pub max_len: usize,
    /// Per-dimension std of the latent prior; empty means not yet computed.
    pub latent_sigma: Vec<f64>,
    /// Collapse the sigma vector to a single pooled value.
    pub scalar_sigma: bool,
    /// Refuse to emit the reserved out-of-vocabulary id.
    pub mask_oov: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam_k: 1,
            max_len: HYPOTHESIS_LEN,
            latent_sigma: Vec::new(),
            scalar_sigma: false,
            mask_oov: true,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    /// Derive the latent sampling std from a trained generator: the
    /// per-dimension std of the latent table for embed kinds, the stored
    /// empirical encoder std for the plain encoder-decoder, and the unit
    /// prior for the VAE.
    pub fn for_generator(generator: &Generator, beam_k: usize, seed: u64) -> Result<GenerationConfig> {
        let latent_sigma = match generator.kind {
            GeneratorKind::AttEmbed | GeneratorKind::BaseEmbed => generator
                .latent
                .as_ref()
                .ok_or_else(|| Error::Config("generator has no latent table".into()))?
                .per_dim_std(),
            GeneratorKind::EncDec => generator.gen_sigma.clone().ok_or_else(|| {
                Error::Config("encoder-decoder sigma not computed; train the model first".into())
            })?,
            GeneratorKind::VaeEncDec => vec![1.0; generator.dims.z],
        };
        Ok(GenerationConfig { beam_k, latent_sigma, seed, ..GenerationConfig::default() })
    }

    fn effective_sigma(&self) -> Result<Vec<f64>> {
        if self.latent_sigma.is_empty() {
            return Err(Error::Config("latent sigma not computed".into()));
        }
        if self.scalar_sigma {
            let pooled = (self.latent_sigma.iter().map(|s| s * s).sum::<f64>()
                / self.latent_sigma.len() as f64)
                .sqrt();
            Ok(vec![pooled; self.latent_sigma.len()])
        } else {
            Ok(self.latent_sigma.clone())
        }
    }
}

/// Draw a latent vector with element j distributed N(0, sigma_j).
pub fn sample_latent(cfg: &GenerationConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let sigma = cfg.effective_sigma()?;
    sigma
        .iter()
        .map(|&s| {
            if s == 0.0 {
                Ok(0.0)
            } else {
                let normal = Normal::new(0.0, s)
                    .map_err(|e| Error::Config(format!("invalid latent sigma {s}: {e}")))?;
                Ok(normal.sample(rng))
            }
        })
        .collect()
}

/// One beam hypothesis: tokens so far and their joint log-probability.
#[derive(Debug, Clone)]
pub struct BeamEntry {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

fn pick_argmax(logp: &[f64], mask_oov: bool) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in logp.iter().enumerate() {
        if mask_oov && i == OOV_ID as usize {
            continue;
        }
        if best == usize::MAX || v > logp[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: argmax token per step (lowest index wins ties), stopping
/// on null or at `max_len`. Returns the tokens (start and terminal null
/// excluded) and the joint log-probability.
pub fn greedy_generate(
    generator: &Generator,
    emb: &EmbeddingMatrix,
    premise: &[u32],
    label: crate::data::Label,
    z: &[f64],
    cfg: &GenerationConfig,
) -> Result<(Vec<u32>, f64)> {
    let (session, mut cursor) = generator.begin_decode(emb, premise, label, z)?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    let mut prev = NULL_ID;
    for _ in 0..cfg.max_len {
        let (next_cursor, logp) = session.step(&cursor, prev)?;
        let best = pick_argmax(&logp, cfg.mask_oov);
        logprob += logp[best];
        if best as u32 == NULL_ID {
            return Ok((tokens, logprob));
        }
        tokens.push(best as u32);
        cursor = next_cursor;
        prev = best as u32;
    }
    Ok((tokens, logprob))
}

struct BeamSlot {
    entry: BeamEntry,
    cursor: Option<DecodeCursor>, // None once finished
}

/// k-best beam search. Live entries are expanded by every vocabulary word;
/// finished entries compete unchanged; the k best candidates by joint
/// log-probability survive each round. The search stops when every surviving
/// entry is finished or the length cap is reached. Returns the best finalist
/// plus all finalists in log-probability order.
pub fn beam_generate(
    generator: &Generator,
    emb: &EmbeddingMatrix,
    premise: &[u32],
    label: crate::data::Label,
    z: &[f64],
    cfg: &GenerationConfig,
) -> Result<(BeamEntry, Vec<BeamEntry>)> {
    if cfg.beam_k == 0 {
        return Err(Error::Config("beam_k must be at least 1".into()));
    }
    let (session, cursor) = generator.begin_decode(emb, premise, label, z)?;

    let mut beam: Vec<BeamSlot> = vec![BeamSlot {
        entry: BeamEntry { tokens: Vec::new(), logprob: 0.0, finished: false },
        cursor: Some(cursor),
    }];

    for _ in 0..cfg.max_len {
        if beam.iter().all(|s| s.entry.finished) {
            break;
        }
        // One model step per live entry.
        let mut expansions: Vec<Option<(DecodeCursor, Vec<f64>)>> = Vec::with_capacity(beam.len());
        for slot in &beam {
            expansions.push(match &slot.cursor {
                Some(cursor) => {
                    let prev = slot.entry.tokens.last().copied().unwrap_or(NULL_ID);
                    Some(session.step(cursor, prev)?)
                }
                None => None,
            });
        }
        // Candidates: finished entries carry over; live entries expand by
        // every word. Token = None marks a carried-over entry.
        let mut candidates: Vec<(f64, usize, Option<u32>)> = Vec::new();
        for (parent, expansion) in expansions.iter().enumerate() {
            match expansion {
                None => candidates.push((beam[parent].entry.logprob, parent, None)),
                Some((_, logp)) => {
                    let base = beam[parent].entry.logprob;
                    for (w, lp) in logp.iter().enumerate() {
                        if cfg.mask_oov && w == OOV_ID as usize {
                            continue;
                        }
                        candidates.push((base + lp, parent, Some(w as u32)));
                    }
                }
            }
        }
        // Deterministic order: log-prob descending, then parent, then token,
        // so ties resolve to the lowest token index like greedy argmax.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(cfg.beam_k);

        beam = candidates
            .into_iter()
            .map(|(logprob, parent, token)| match token {
                None => BeamSlot {
                    entry: beam[parent].entry.clone(),
                    cursor: None,
                },
                Some(NULL_ID) => BeamSlot {
                    entry: BeamEntry {
                        tokens: beam[parent].entry.tokens.clone(),
                        logprob,
                        finished: true,
                    },
                    cursor: None,
                },
                Some(w) => {
                    let mut tokens = beam[parent].entry.tokens.clone();
                    tokens.push(w);
                    BeamSlot {
                        entry: BeamEntry { tokens, logprob, finished: false },
                        cursor: Some(expansions[parent].as_ref().unwrap().0.clone()),
                    }
                }
            })
            .collect();
    }

    // Length-capped live entries become finalists with their running score.
    let mut finalists: Vec<BeamEntry> = beam.into_iter().map(|s| s.entry).collect();
    finalists.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then(a.tokens.cmp(&b.tokens)));
    let best = finalists.first().cloned().ok_or_else(|| Error::Config("empty beam".into()))?;
    Ok((best, finalists))
}

/// Generate one example: sample a latent, decode, and pair the hypothesis
/// with the source premise and label.
pub fn generate_for_example(
    generator: &Generator,
    emb: &EmbeddingMatrix,
    source: &Example,
    origin_index: usize,
    cfg: &GenerationConfig,
    rng: &mut impl Rng,
) -> Result<GeneratedExample> {
    let z = sample_latent(cfg, rng)?;
    let (tokens, logprob) = if cfg.beam_k <= 1 {
        greedy_generate(generator, emb, &source.premise, source.label, &z, cfg)?
    } else {
        let (best, _) = beam_generate(generator, emb, &source.premise, source.label, &z, cfg)?;
        (best.tokens, best.logprob)
    };
    let example = Example::new(source.premise.clone(), pad_to(&tokens, HYPOTHESIS_LEN), source.label)?;
    Ok(GeneratedExample { example, origin_index, gen_logprob: logprob })
}

/// Per-token negative log-likelihood of a gold hypothesis under the model,
/// with the latent chosen the way evaluation requires: sampled for embed
/// kinds (unseen data has no table row), encoded for encoder kinds, and
/// reparameterized with seeded noise for the VAE.
pub fn eval_token_nll(
    generator: &Generator,
    emb: &EmbeddingMatrix,
    ex: &Example,
    cfg: &GenerationConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let loss = match generator.kind {
        GeneratorKind::AttEmbed | GeneratorKind::BaseEmbed => {
            let z = sample_latent(cfg, rng)?;
            generator.loss(emb, ex, LatentSource::Given(&z))?
        }
        GeneratorKind::EncDec => generator.loss(emb, ex, LatentSource::Encode)?,
        GeneratorKind::VaeEncDec => {
            let eps = crate::models::sample_epsilon(generator.dims.z, rng);
            generator.loss(emb, ex, LatentSource::VaeEncode(&eps))?
        }
    };
    Ok(loss.per_token_nll())
}
