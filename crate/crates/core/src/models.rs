//! The model zoo: the mLSTM classifier, the four hypothesis generators
//! (attention and plain embed-decoders, encoder-decoder, variational
//! encoder-decoder), and the original-vs-generated discriminator.
//!
//! Forward passes take the example plus a frozen embedding matrix; training
//! entry points compute per-example losses and accumulate hand-derived
//! gradients into the model's [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingMatrix, Example, Label, HYPOTHESIS_LEN, NULL_ID, PREMISE_LEN};
use crate::layers::{Dense, HierSoftmax, Lstm, LstmCache, LstmState, MatchLstm, MlstmCache};
use crate::numerics::{adam_update_slice, softmax, sub_seed, AdamConfig, ParamStore, Tensor};
use crate::{Error, Result};

fn embed_rows(emb: &EmbeddingMatrix, ids: &[u32]) -> Vec<Vec<f64>> {
    ids.iter().map(|&id| emb.row(id).to_vec()).collect()
}

fn check_padded(ex: &Example) -> Result<()> {
    if ex.premise.len() != PREMISE_LEN || ex.hypothesis.len() != HYPOTHESIS_LEN {
        return Err(Error::Shape {
            op: "model forward".into(),
            expected: format!("padded example ({PREMISE_LEN}/{HYPOTHESIS_LEN} tokens)"),
            got: format!("{}/{}", ex.premise.len(), ex.hypothesis.len()),
        });
    }
    Ok(())
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// mLSTM NLI classifier: premise and hypothesis LSTMs, match LSTM over their
/// states, and a 3-way dense softmax head on the final match state.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub e: usize,
    pub d: usize,
    pub store: ParamStore,
    p_lstm: Lstm,
    h_lstm: Lstm,
    mlstm: MatchLstm,
    out: Dense,
}

impl Classifier {
    fn layers(e: usize, d: usize) -> (Lstm, Lstm, MatchLstm, Dense) {
        (
            Lstm::new("p_lstm", e, d),
            Lstm::new("h_lstm", e, d),
            MatchLstm::new("mlstm", d),
            Dense::new("out", d, 3),
        )
    }

    pub fn new(e: usize, d: usize, seed: u64) -> Classifier {
        let (p_lstm, h_lstm, mlstm, out) = Self::layers(e, d);
        let mut store = ParamStore::new();
        p_lstm.init(&mut store, seed);
        h_lstm.init(&mut store, seed);
        mlstm.init(&mut store, seed);
        out.init(&mut store, seed);
        Classifier { e, d, store, p_lstm, h_lstm, mlstm, out }
    }

    pub fn from_store(e: usize, d: usize, store: ParamStore) -> Classifier {
        let (p_lstm, h_lstm, mlstm, out) = Self::layers(e, d);
        Classifier { e, d, store, p_lstm, h_lstm, mlstm, out }
    }

    /// Label probabilities for a padded example.
    pub fn forward(&self, emb: &EmbeddingMatrix, ex: &Example) -> Result<[f64; 3]> {
        self.forward_in(&self.store, emb, ex)
    }

    pub fn forward_in(
        &self,
        store: &ParamStore,
        emb: &EmbeddingMatrix,
        ex: &Example,
    ) -> Result<[f64; 3]> {
        check_padded(ex)?;
        let (p_states, _) =
            self.p_lstm.forward(store, &embed_rows(emb, &ex.premise), &self.p_lstm.zero_state())?;
        let (h_states, _) =
            self.h_lstm.forward(store, &embed_rows(emb, &ex.hypothesis), &self.h_lstm.zero_state())?;
        let h_p: Vec<Vec<f64>> = p_states.into_iter().map(|s| s.h).collect();
        let h_h: Vec<Vec<f64>> = h_states.into_iter().map(|s| s.h).collect();
        let (m_states, _) = self.mlstm.forward(store, &h_p, &h_h, &vec![0.0; self.d])?;
        let logits = self.out.forward(store, &m_states.last().unwrap().h);
        let p = softmax(&logits)?;
        Ok([p[0], p[1], p[2]])
    }

    pub fn predict(&self, emb: &EmbeddingMatrix, ex: &Example) -> Result<(Label, [f64; 3])> {
        let p = self.forward(emb, ex)?;
        Ok((Label::from_index(argmax(&p)), p))
    }

    /// Cross-entropy of the gold label.
    pub fn loss(&self, emb: &EmbeddingMatrix, ex: &Example) -> Result<f64> {
        self.loss_in(&self.store, emb, ex)
    }

    pub fn loss_in(&self, store: &ParamStore, emb: &EmbeddingMatrix, ex: &Example) -> Result<f64> {
        let p = self.forward_in(store, emb, ex)?;
        Ok(-p[ex.label.index()].max(1e-300).ln())
    }

    /// Cross-entropy plus gradient accumulation, scaled by `scale`.
    pub fn loss_and_grad(&mut self, emb: &EmbeddingMatrix, ex: &Example, scale: f64) -> Result<f64> {
        check_padded(ex)?;
        let store = &mut self.store;
        let (p_states, p_cache) =
            self.p_lstm.forward(store, &embed_rows(emb, &ex.premise), &self.p_lstm.zero_state())?;
        let (h_states, h_cache) =
            self.h_lstm.forward(store, &embed_rows(emb, &ex.hypothesis), &self.h_lstm.zero_state())?;
        let h_p: Vec<Vec<f64>> = p_states.into_iter().map(|s| s.h).collect();
        let h_h: Vec<Vec<f64>> = h_states.into_iter().map(|s| s.h).collect();
        let (m_states, m_cache) = self.mlstm.forward(store, &h_p, &h_h, &vec![0.0; self.d])?;
        let last = m_states.last().unwrap().h.clone();
        let logits = self.out.forward(store, &last);
        let p = softmax(&logits)?;
        let loss = -p[ex.label.index()].max(1e-300).ln();

        // Softmax + cross-entropy collapse to p - onehot.
        let mut d_logits = p;
        d_logits[ex.label.index()] -= 1.0;
        d_logits.iter_mut().for_each(|v| *v *= scale);

        let d_last = self.out.backward(store, &last, &d_logits);
        let mut d_m = vec![vec![0.0; self.d]; HYPOTHESIS_LEN];
        *d_m.last_mut().unwrap() = d_last;
        let m_back = self.mlstm.backward(store, &m_cache, &d_m);
        self.h_lstm.backward(store, &h_cache, &m_back.d_h_h, None);
        self.p_lstm.backward(store, &p_cache, &m_back.d_h_p, None);
        Ok(loss)
    }
}

// ---------------------------------------------------------------------------
// Latent table
// ---------------------------------------------------------------------------

/// Per-training-example latent mapping embeddings: an n x z matrix where row i
/// belongs to example i. Rows carry their own Adam moments and step counts so
/// a training step touches exactly the rows of the batch it saw.
#[derive(Debug, Clone)]
pub struct LatentTable {
    n: usize,
    z: usize,
    values: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: Vec<u64>,
}

impl LatentTable {
    pub fn new(n: usize, z: usize, seed: u64) -> LatentTable {
        let t = Tensor::randn(&[n, z], 0.05, sub_seed(seed, "latent.table"));
        LatentTable {
            n,
            z,
            values: t.values().to_vec(),
            m: vec![0.0; n * z],
            v: vec![0.0; n * z],
            step: vec![0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.z
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.z..(i + 1) * self.z]
    }

    #[cfg(test)]
    pub(crate) fn set(&mut self, i: usize, k: usize, v: f64) {
        self.values[i * self.z + k] = v;
    }

    /// Adam update restricted to one row; other rows are untouched by
    /// construction.
    pub fn adam_row(&mut self, i: usize, grad: &[f64], cfg: &AdamConfig) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad { name: format!("latent.table[{i}]") });
        }
        self.step[i] += 1;
        let t = self.step[i];
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let range = i * self.z..(i + 1) * self.z;
        adam_update_slice(
            &mut self.values[range.clone()],
            grad,
            &mut self.m[range.clone()],
            &mut self.v[range],
            cfg,
            bc1,
            bc2,
        );
        Ok(())
    }

    /// Per-dimension population standard deviation over rows.
    pub fn per_dim_std(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.z];
        for (k, slot) in out.iter_mut().enumerate() {
            let mean =
                (0..self.n).map(|i| self.values[i * self.z + k]).sum::<f64>() / self.n as f64;
            let var = (0..self.n)
                .map(|i| {
                    let d = self.values[i * self.z + k] - mean;
                    d * d
                })
                .sum::<f64>()
                / self.n as f64;
            *slot = var.sqrt();
        }
        out
    }

    /// Single standard deviation over every element.
    pub fn scalar_std(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        (self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_values(&[self.n, self.z], self.values.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> LatentTable {
        let (n, z) = (t.dims()[0], t.dims()[1]);
        LatentTable {
            n,
            z,
            values: t.values().to_vec(),
            m: vec![0.0; n * z],
            v: vec![0.0; n * z],
            step: vec![0; n],
        }
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeneratorKind {
    AttEmbed,
    BaseEmbed,
    EncDec,
    VaeEncDec,
}

pub const ALL_GENERATOR_KINDS: [GeneratorKind; 4] = [
    GeneratorKind::AttEmbed,
    GeneratorKind::BaseEmbed,
    GeneratorKind::EncDec,
    GeneratorKind::VaeEncDec,
];

impl GeneratorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GeneratorKind::AttEmbed => "att-embed",
            GeneratorKind::BaseEmbed => "base-embed",
            GeneratorKind::EncDec => "encdec",
            GeneratorKind::VaeEncDec => "vae-encdec",
        }
    }

    pub fn parse(s: &str) -> Result<GeneratorKind> {
        match s {
            "att-embed" => Ok(GeneratorKind::AttEmbed),
            "base-embed" => Ok(GeneratorKind::BaseEmbed),
            "encdec" => Ok(GeneratorKind::EncDec),
            "vae-encdec" => Ok(GeneratorKind::VaeEncDec),
            other => Err(Error::Config(format!(
                "unknown generator kind {other:?} (expected att-embed, base-embed, encdec, vae-encdec)"
            ))),
        }
    }

    pub fn uses_latent_table(&self) -> bool {
        matches!(self, GeneratorKind::AttEmbed | GeneratorKind::BaseEmbed)
    }

    pub fn uses_encoder(&self) -> bool {
        matches!(self, GeneratorKind::EncDec | GeneratorKind::VaeEncDec)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenDims {
    pub e: usize,
    pub d: usize,
    pub z: usize,
}

impl GenDims {
    /// Decoder state width of the attention-free model: z + 3 + d, the sum of
    /// the latent, label, and premise-state sizes.
    pub fn d_prime(&self) -> usize {
        self.z + 3 + self.d
    }
}

#[derive(Debug, Clone)]
struct EncoderParts {
    p_lstm: Lstm,
    h_lstm: Lstm,
    mlstm: MatchLstm,
    c0: Dense,
    z_head: Dense,
    logvar_head: Option<Dense>,
}

/// Where a generator's latent vector comes from for one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub enum LatentSource<'a> {
    /// Trainable per-example embedding row (embed-decoder kinds).
    TableRow(usize),
    /// Externally supplied vector (generation, NLL on unseen data).
    Given(&'a [f64]),
    /// Deterministic encoder output (plain encoder-decoder).
    Encode,
    /// Reparameterized encoder sample with injected noise (VAE).
    VaeEncode(&'a [f64]),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenLoss {
    /// Sum of token negative log-likelihoods (real tokens + terminal null).
    pub nll: f64,
    /// KL regularizer (zero for non-VAE kinds).
    pub kl: f64,
    /// Number of scored positions.
    pub tokens: usize,
}

impl GenLoss {
    pub fn total(&self) -> f64 {
        self.nll + self.kl
    }

    pub fn per_token_nll(&self) -> f64 {
        self.nll / self.tokens as f64
    }
}

/// One of the four hypothesis generators.
///
/// All kinds decode the null-started, teacher-forced hypothesis and score it
/// with a hierarchical softmax; they differ in where the latent vector comes
/// from and how it is injected into the decoder's initial cell state.
#[derive(Debug, Clone)]
pub struct Generator {
    pub kind: GeneratorKind,
    pub dims: GenDims,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub latent: Option<LatentTable>,
    /// Sampling std for generation (set after training for encoder kinds).
    pub gen_sigma: Option<Vec<f64>>,
    p_lstm: Lstm,
    h_lstm: Lstm,
    mlstm: Option<MatchLstm>,
    c0: Dense,
    hsm: HierSoftmax,
    encoder: Option<EncoderParts>,
}

type DecoderLayers = (Lstm, Lstm, Option<MatchLstm>, Dense, HierSoftmax, Option<EncoderParts>);

impl Generator {
    fn decoder_width(kind: GeneratorKind, dims: &GenDims) -> usize {
        match kind {
            GeneratorKind::BaseEmbed => dims.d_prime(),
            _ => dims.d,
        }
    }

    fn build_layers(kind: GeneratorKind, dims: &GenDims, vocab_size: usize) -> Result<DecoderLayers> {
        let width = Self::decoder_width(kind, dims);
        let p_lstm = Lstm::new("dec.p", dims.e, dims.d);
        let (h_lstm, mlstm, c0) = match kind {
            GeneratorKind::BaseEmbed => (
                Lstm::new("dec.h", dims.e, width),
                None,
                Dense::new("dec.c0", dims.z + 3 + dims.d, width),
            ),
            _ => (
                Lstm::new("dec.h", dims.e, dims.d),
                Some(MatchLstm::new("dec.m", dims.d)),
                Dense::new("dec.c0", dims.z + 3, dims.d),
            ),
        };
        let hsm = HierSoftmax::new("dec.hsm", width, vocab_size)?;
        let encoder = kind.uses_encoder().then(|| EncoderParts {
            p_lstm: Lstm::new("enc.p", dims.e, dims.d),
            h_lstm: Lstm::new("enc.h", dims.e, dims.d),
            mlstm: MatchLstm::new("enc.m", dims.d),
            c0: Dense::new("enc.c0", 3, dims.d),
            z_head: Dense::new(
                if kind == GeneratorKind::VaeEncDec { "enc.z_mu" } else { "enc.z" },
                dims.d,
                dims.z,
            ),
            logvar_head: (kind == GeneratorKind::VaeEncDec)
                .then(|| Dense::new("enc.z_logvar", dims.d, dims.z)),
        });
        Ok((p_lstm, h_lstm, mlstm, c0, hsm, encoder))
    }

    /// Fresh generator. `train_examples` sizes the latent table for the
    /// embed-decoder kinds; encoder kinds ignore it.
    pub fn new(
        kind: GeneratorKind,
        dims: GenDims,
        vocab_size: usize,
        train_examples: usize,
        seed: u64,
    ) -> Result<Generator> {
        if dims.z == 0 {
            return Err(Error::Config("latent dimension z must be positive".into()));
        }
        let (p_lstm, h_lstm, mlstm, c0, hsm, encoder) = Self::build_layers(kind, &dims, vocab_size)?;
        let mut store = ParamStore::new();
        p_lstm.init(&mut store, seed);
        h_lstm.init(&mut store, seed);
        if let Some(m) = &mlstm {
            m.init(&mut store, seed);
        }
        c0.init(&mut store, seed);
        hsm.init(&mut store, seed);
        if let Some(enc) = &encoder {
            enc.p_lstm.init(&mut store, seed);
            enc.h_lstm.init(&mut store, seed);
            enc.mlstm.init(&mut store, seed);
            enc.c0.init(&mut store, seed);
            enc.z_head.init(&mut store, seed);
            if let Some(lv) = &enc.logvar_head {
                lv.init(&mut store, seed);
            }
        }
        let latent =
            kind.uses_latent_table().then(|| LatentTable::new(train_examples.max(1), dims.z, seed));
        Ok(Generator {
            kind,
            dims,
            vocab_size,
            store,
            latent,
            gen_sigma: None,
            p_lstm,
            h_lstm,
            mlstm,
            c0,
            hsm,
            encoder,
        })
    }

    /// Rebuild from checkpoint parts.
    pub fn from_store(
        kind: GeneratorKind,
        dims: GenDims,
        vocab_size: usize,
        store: ParamStore,
        latent: Option<LatentTable>,
        gen_sigma: Option<Vec<f64>>,
    ) -> Result<Generator> {
        let (p_lstm, h_lstm, mlstm, c0, hsm, encoder) = Self::build_layers(kind, &dims, vocab_size)?;
        Ok(Generator {
            kind,
            dims,
            vocab_size,
            store,
            latent,
            gen_sigma,
            p_lstm,
            h_lstm,
            mlstm,
            c0,
            hsm,
            encoder,
        })
    }

    /// Shifted decoder input ids (null-started) and targets (gold tokens plus
    /// one terminal null).
    fn teacher_io(ex: &Example) -> (Vec<u32>, Vec<u32>) {
        let real = ex.hypothesis_tokens();
        let mut input = Vec::with_capacity(real.len() + 1);
        input.push(NULL_ID);
        input.extend_from_slice(real);
        let mut targets = real.to_vec();
        targets.push(NULL_ID);
        (input, targets)
    }

    fn encoder_forward(
        &self,
        store: &ParamStore,
        emb: &EmbeddingMatrix,
        ex: &Example,
        eps: Option<&[f64]>,
    ) -> Result<EncForward> {
        let enc = self
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no encoder", self.kind.as_str())))?;
        let (p_states, p_cache) =
            enc.p_lstm.forward(store, &embed_rows(emb, &ex.premise), &enc.p_lstm.zero_state())?;
        let (h_states, h_cache) =
            enc.h_lstm.forward(store, &embed_rows(emb, &ex.hypothesis), &enc.h_lstm.zero_state())?;
        let h_p: Vec<Vec<f64>> = p_states.into_iter().map(|s| s.h).collect();
        let h_h: Vec<Vec<f64>> = h_states.into_iter().map(|s| s.h).collect();
        let label = ex.label.one_hot().to_vec();
        let c0 = enc.c0.forward(store, &label);
        let (m_states, m_cache) = enc.mlstm.forward(store, &h_p, &h_h, &c0)?;
        let h_last = m_states.last().unwrap().h.clone();

        let (z, mu, logvar, kl) = match (&enc.logvar_head, eps) {
            (None, _) => (enc.z_head.forward(store, &h_last), Vec::new(), Vec::new(), 0.0),
            (Some(lv_head), Some(eps)) => {
                let mu = enc.z_head.forward(store, &h_last);
                let logvar = lv_head.forward(store, &h_last);
                if eps.len() != mu.len() {
                    return Err(Error::Shape {
                        op: "vae_latent".into(),
                        expected: format!("epsilon of dim {}", mu.len()),
                        got: format!("{}", eps.len()),
                    });
                }
                let z: Vec<f64> = mu
                    .iter()
                    .zip(&logvar)
                    .zip(eps)
                    .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                    .collect();
                let kl = -0.5
                    * mu.iter()
                        .zip(&logvar)
                        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
                        .sum::<f64>();
                (z, mu, logvar, kl)
            }
            (Some(_), None) => {
                return Err(Error::Config("VAE latent requires injected epsilon".into()))
            }
        };
        Ok(EncForward { p_cache, h_cache, m_cache, label, h_last, z, mu, logvar, kl })
    }

    /// Deterministic encoder latent (plain encoder-decoder).
    pub fn encode_latent(&self, emb: &EmbeddingMatrix, ex: &Example) -> Result<Vec<f64>> {
        check_padded(ex)?;
        Ok(self.encoder_forward(&self.store, emb, ex, None)?.z)
    }

    /// Reparameterized VAE latent and its KL term.
    pub fn vae_latent(
        &self,
        emb: &EmbeddingMatrix,
        ex: &Example,
        eps: &[f64],
    ) -> Result<(Vec<f64>, f64)> {
        check_padded(ex)?;
        let fwd = self.encoder_forward(&self.store, emb, ex, Some(eps))?;
        Ok((fwd.z, fwd.kl))
    }

    fn resolve_latent(
        &self,
        store: &ParamStore,
        emb: &EmbeddingMatrix,
        ex: &Example,
        source: LatentSource<'_>,
    ) -> Result<(Vec<f64>, f64, Option<EncForward>)> {
        match source {
            LatentSource::TableRow(i) => {
                let table = self.latent.as_ref().ok_or_else(|| {
                    Error::Config(format!("{} has no latent table", self.kind.as_str()))
                })?;
                if i >= table.rows() {
                    return Err(Error::Config(format!(
                        "latent table row {i} out of range (n={})",
                        table.rows()
                    )));
                }
                Ok((table.row(i).to_vec(), 0.0, None))
            }
            LatentSource::Given(z) => Ok((z.to_vec(), 0.0, None)),
            LatentSource::Encode => {
                let fwd = self.encoder_forward(store, emb, ex, None)?;
                Ok((fwd.z.clone(), 0.0, Some(fwd)))
            }
            LatentSource::VaeEncode(eps) => {
                let fwd = self.encoder_forward(store, emb, ex, Some(eps))?;
                Ok((fwd.z.clone(), fwd.kl, Some(fwd)))
            }
        }
    }

    fn decode_forward(
        &self,
        store: &ParamStore,
        emb: &EmbeddingMatrix,
        ex: &Example,
        z: &[f64],
    ) -> Result<DecForward> {
        check_padded(ex)?;
        if z.len() != self.dims.z {
            return Err(Error::Shape {
                op: "decode".into(),
                expected: format!("latent of dim {}", self.dims.z),
                got: format!("{}", z.len()),
            });
        }
        let (input_ids, targets) = Self::teacher_io(ex);
        let (p_states, p_cache) =
            self.p_lstm.forward(store, &embed_rows(emb, &ex.premise), &self.p_lstm.zero_state())?;

        let mut c0_input: Vec<f64> = z.to_vec();
        c0_input.extend_from_slice(&ex.label.one_hot());
        if self.kind == GeneratorKind::BaseEmbed {
            c0_input.extend_from_slice(&p_states.last().unwrap().h);
        }
        let c0 = self.c0.forward(store, &c0_input);

        let hyp_xs = embed_rows(emb, &input_ids);
        match &self.mlstm {
            Some(mlstm) => {
                let (h_states, h_cache) =
                    self.h_lstm.forward(store, &hyp_xs, &self.h_lstm.zero_state())?;
                let h_p: Vec<Vec<f64>> = p_states.iter().map(|s| s.h.clone()).collect();
                let h_h: Vec<Vec<f64>> = h_states.iter().map(|s| s.h.clone()).collect();
                let (m_states, m_cache) = mlstm.forward(store, &h_p, &h_h, &c0)?;
                let out_states = m_states.into_iter().map(|s| s.h).collect();
                Ok(DecForward {
                    p_cache,
                    h_cache,
                    m_cache: Some(m_cache),
                    c0_input,
                    out_states,
                    targets,
                })
            }
            None => {
                let init = LstmState { h: vec![0.0; self.dims.d_prime()], c: c0 };
                let (h_states, h_cache) = self.h_lstm.forward(store, &hyp_xs, &init)?;
                let out_states = h_states.into_iter().map(|s| s.h).collect();
                Ok(DecForward { p_cache, h_cache, m_cache: None, c0_input, out_states, targets })
            }
        }
    }

    /// Loss parts for one example without touching gradients.
    pub fn loss(
        &self,
        emb: &EmbeddingMatrix,
        ex: &Example,
        source: LatentSource<'_>,
    ) -> Result<GenLoss> {
        self.loss_in(&self.store, emb, ex, source)
    }

    pub fn loss_in(
        &self,
        store: &ParamStore,
        emb: &EmbeddingMatrix,
        ex: &Example,
        source: LatentSource<'_>,
    ) -> Result<GenLoss> {
        let (z, kl, _) = self.resolve_latent(store, emb, ex, source)?;
        let fwd = self.decode_forward(store, emb, ex, &z)?;
        let mut nll = 0.0;
        for (h, &target) in fwd.out_states.iter().zip(&fwd.targets) {
            nll -= self.hsm.log_prob(store, h, target)?;
        }
        Ok(GenLoss { nll, kl, tokens: fwd.targets.len() })
    }

    /// Teacher-forced loss with full gradient accumulation (scaled by
    /// `scale`). Returns the unscaled loss parts and, for table-backed kinds,
    /// the scaled gradient of the example's latent row.
    pub fn loss_and_grad(
        &mut self,
        emb: &EmbeddingMatrix,
        ex: &Example,
        source: LatentSource<'_>,
        scale: f64,
    ) -> Result<(GenLoss, Option<Vec<f64>>)> {
        let (z, kl, enc_fwd) = self.resolve_latent(&self.store, emb, ex, source)?;
        let fwd = self.decode_forward(&self.store, emb, ex, &z)?;
        let store = &mut self.store;

        let mut nll = 0.0;
        let mut d_out = Vec::with_capacity(fwd.out_states.len());
        for (h, &target) in fwd.out_states.iter().zip(&fwd.targets) {
            let (step_nll, dh) = self.hsm.nll_backward(store, h, target, scale)?;
            nll += step_nll;
            d_out.push(dh);
        }

        // Decoder backward down to the latent injection. Decoder token inputs
        // are frozen embeddings, so their gradients are dropped.
        let d_c0_input = match (&self.mlstm, &fwd.m_cache) {
            (Some(mlstm), Some(m_cache)) => {
                let m_back = mlstm.backward(store, m_cache, &d_out);
                self.h_lstm.backward(store, &fwd.h_cache, &m_back.d_h_h, None);
                let d_c0_input = self.c0.backward(store, &fwd.c0_input, &m_back.d_c0);
                self.p_lstm.backward(store, &fwd.p_cache, &m_back.d_h_p, None);
                d_c0_input
            }
            _ => {
                let back = self.h_lstm.backward(store, &fwd.h_cache, &d_out, None);
                let d_c0_input = self.c0.backward(store, &fwd.c0_input, &back.d_c0);
                // The premise feeds in only through the tail of the C0 input.
                let mut d_h_p = vec![vec![0.0; self.dims.d]; PREMISE_LEN];
                *d_h_p.last_mut().unwrap() = d_c0_input[self.dims.z + 3..].to_vec();
                self.p_lstm.backward(store, &fwd.p_cache, &d_h_p, None);
                d_c0_input
            }
        };
        let dz = d_c0_input[..self.dims.z].to_vec();

        let z_grad = match (self.kind.uses_latent_table(), enc_fwd) {
            (true, _) => Some(dz),
            (false, Some(enc_fwd)) => {
                self.encoder_backward(&enc_fwd, &dz, scale);
                None
            }
            (false, None) => None,
        };
        Ok((GenLoss { nll, kl, tokens: fwd.targets.len() }, z_grad))
    }

    fn encoder_backward(&mut self, fwd: &EncForward, dz: &[f64], scale: f64) {
        let enc = self.encoder.as_ref().unwrap().clone();
        let store = &mut self.store;
        let d_h_last = match &enc.logvar_head {
            None => enc.z_head.backward(store, &fwd.h_last, dz),
            Some(lv_head) => {
                // Reparameterization: z = mu + exp(logvar/2) * eps, so
                // dz/dlogvar = (z - mu) / 2. The KL term adds d/dmu = mu and
                // d/dlogvar = (exp(logvar) - 1) / 2, scaled like the nll path.
                let d_mu: Vec<f64> =
                    dz.iter().zip(&fwd.mu).map(|(dzk, mu)| dzk + scale * mu).collect();
                let d_logvar: Vec<f64> = dz
                    .iter()
                    .zip(fwd.z.iter().zip(&fwd.mu))
                    .zip(&fwd.logvar)
                    .map(|((dzk, (zk, muk)), lv)| {
                        dzk * (zk - muk) * 0.5 + scale * 0.5 * (lv.exp() - 1.0)
                    })
                    .collect();
                let mut dh = enc.z_head.backward(store, &fwd.h_last, &d_mu);
                for (a, b) in dh.iter_mut().zip(lv_head.backward(store, &fwd.h_last, &d_logvar)) {
                    *a += b;
                }
                dh
            }
        };
        let mut d_m = vec![vec![0.0; self.dims.d]; fwd.m_cache.len()];
        *d_m.last_mut().unwrap() = d_h_last;
        let m_back = enc.mlstm.backward(store, &fwd.m_cache, &d_m);
        enc.c0.backward(store, &fwd.label, &m_back.d_c0);
        enc.h_lstm.backward(store, &fwd.h_cache, &m_back.d_h_h, None);
        enc.p_lstm.backward(store, &fwd.p_cache, &m_back.d_h_p, None);
    }

    // --- incremental decoding ------------------------------------------------

    /// Fix the premise, label, and latent; returns the reusable context and
    /// the initial cursor for step-by-step decoding.
    pub fn begin_decode<'a>(
        &'a self,
        emb: &'a EmbeddingMatrix,
        premise: &[u32],
        label: Label,
        z: &[f64],
    ) -> Result<(DecodeSession<'a>, DecodeCursor)> {
        if premise.len() != PREMISE_LEN {
            return Err(Error::Shape {
                op: "begin_decode".into(),
                expected: format!("padded premise of {PREMISE_LEN}"),
                got: format!("{}", premise.len()),
            });
        }
        let (p_states, _) =
            self.p_lstm.forward(&self.store, &embed_rows(emb, premise), &self.p_lstm.zero_state())?;
        let mut c0_input: Vec<f64> = z.to_vec();
        c0_input.extend_from_slice(&label.one_hot());
        if self.kind == GeneratorKind::BaseEmbed {
            c0_input.extend_from_slice(&p_states.last().unwrap().h);
        }
        let c0 = self.c0.forward(&self.store, &c0_input);

        let (h_p, p_proj, cursor) = match &self.mlstm {
            Some(mlstm) => {
                let h_p: Vec<Vec<f64>> = p_states.into_iter().map(|s| s.h).collect();
                let p_proj = mlstm.project_premise(&self.store, &h_p);
                let cursor = DecodeCursor {
                    lstm: self.h_lstm.zero_state(),
                    mlstm: Some(LstmState { h: vec![0.0; self.dims.d], c: c0 }),
                };
                (h_p, p_proj, cursor)
            }
            None => {
                let cursor = DecodeCursor {
                    lstm: LstmState { h: vec![0.0; self.dims.d_prime()], c: c0 },
                    mlstm: None,
                };
                (Vec::new(), Vec::new(), cursor)
            }
        };
        Ok((DecodeSession { generator: self, emb, h_p, p_proj }, cursor))
    }
}

/// Immutable per-(premise, label, latent) decoding context.
pub struct DecodeSession<'a> {
    generator: &'a Generator,
    emb: &'a EmbeddingMatrix,
    h_p: Vec<Vec<f64>>,
    p_proj: Vec<Vec<f64>>,
}

/// Mutable recurrent state of one decode thread; cheap to clone for beams.
#[derive(Debug, Clone)]
pub struct DecodeCursor {
    lstm: LstmState,
    mlstm: Option<LstmState>,
}

impl DecodeSession<'_> {
    pub fn vocab_size(&self) -> usize {
        self.generator.vocab_size
    }

    /// Feed one token; returns the advanced cursor and the log-probability
    /// vector for the next output position.
    pub fn step(&self, cursor: &DecodeCursor, token: u32) -> Result<(DecodeCursor, Vec<f64>)> {
        let gen = self.generator;
        let store = &gen.store;
        let x = self.emb.row(token);
        let (lstm_state, _) = gen.h_lstm.step(store, x, &cursor.lstm);
        match (&gen.mlstm, &cursor.mlstm) {
            (Some(mlstm), Some(m_prev)) => {
                let m_state = mlstm.decode_step(store, &self.p_proj, &self.h_p, &lstm_state.h, m_prev);
                let logp = gen.hsm.log_distribution(store, &m_state.h)?;
                Ok((DecodeCursor { lstm: lstm_state, mlstm: Some(m_state) }, logp))
            }
            _ => {
                let logp = gen.hsm.log_distribution(store, &lstm_state.h)?;
                Ok((DecodeCursor { lstm: lstm_state, mlstm: None }, logp))
            }
        }
    }
}

struct DecForward {
    p_cache: LstmCache,
    h_cache: LstmCache,
    m_cache: Option<MlstmCache>,
    c0_input: Vec<f64>,
    out_states: Vec<Vec<f64>>,
    targets: Vec<u32>,
}

struct EncForward {
    p_cache: LstmCache,
    h_cache: LstmCache,
    m_cache: MlstmCache,
    label: Vec<f64>,
    h_last: Vec<f64>,
    z: Vec<f64>,
    mu: Vec<f64>,
    logvar: Vec<f64>,
    kl: f64,
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Scores a hypothesis with sigmoid(dense(LSTM(x))); trained to score
/// original hypotheses above generated ones.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub e: usize,
    pub d: usize,
    pub store: ParamStore,
    lstm: Lstm,
    out: Dense,
}

impl Discriminator {
    pub fn new(e: usize, d: usize, seed: u64) -> Discriminator {
        let lstm = Lstm::new("lstm", e, d);
        let out = Dense::new("out", d, 1);
        let mut store = ParamStore::new();
        lstm.init(&mut store, seed);
        out.init(&mut store, seed);
        Discriminator { e, d, store, lstm, out }
    }

    pub fn from_store(e: usize, d: usize, store: ParamStore) -> Discriminator {
        let lstm = Lstm::new("lstm", e, d);
        let out = Dense::new("out", d, 1);
        Discriminator { e, d, store, lstm, out }
    }

    fn raw_score(&self, store: &ParamStore, emb: &EmbeddingMatrix, hyp: &[u32]) -> Result<f64> {
        if hyp.len() != HYPOTHESIS_LEN {
            return Err(Error::Shape {
                op: "discriminator_score".into(),
                expected: format!("padded hypothesis of {HYPOTHESIS_LEN}"),
                got: format!("{}", hyp.len()),
            });
        }
        let (states, _) = self.lstm.forward(store, &embed_rows(emb, hyp), &self.lstm.zero_state())?;
        Ok(self.out.forward(store, &states.last().unwrap().h)[0])
    }

    /// Probability-like score in (0, 1).
    pub fn score(&self, emb: &EmbeddingMatrix, hyp: &[u32]) -> Result<f64> {
        self.score_in(&self.store, emb, hyp)
    }

    pub fn score_in(&self, store: &ParamStore, emb: &EmbeddingMatrix, hyp: &[u32]) -> Result<f64> {
        Ok(crate::numerics::sigmoid(self.raw_score(store, emb, hyp)?))
    }

    /// -[log D(original) + log(1 - D(generated))], clamped away from 0 and 1.
    pub fn pair_loss(&self, emb: &EmbeddingMatrix, original: &[u32], generated: &[u32]) -> Result<f64> {
        self.pair_loss_in(&self.store, emb, original, generated)
    }

    pub fn pair_loss_in(
        &self,
        store: &ParamStore,
        emb: &EmbeddingMatrix,
        original: &[u32],
        generated: &[u32],
    ) -> Result<f64> {
        let d_orig = self.score_in(store, emb, original)?.clamp(1e-12, 1.0 - 1e-12);
        let d_gen = self.score_in(store, emb, generated)?.clamp(1e-12, 1.0 - 1e-12);
        Ok(-(d_orig.ln() + (1.0 - d_gen).ln()))
    }

    /// Pair loss with gradients, scaled by `scale`.
    pub fn pair_loss_and_grad(
        &mut self,
        emb: &EmbeddingMatrix,
        original: &[u32],
        generated: &[u32],
        scale: f64,
    ) -> Result<f64> {
        let loss = self.pair_loss(emb, original, generated)?;
        // d(-log sigma(s))/ds = sigma(s) - 1; d(-log(1 - sigma(s)))/ds = sigma(s).
        for (hyp, is_original) in [(original, true), (generated, false)] {
            let store = &mut self.store;
            let (states, cache) =
                self.lstm.forward(store, &embed_rows(emb, hyp), &self.lstm.zero_state())?;
            let last = states.last().unwrap().h.clone();
            let s = self.out.forward(store, &last)[0];
            let sig = crate::numerics::sigmoid(s);
            let d_score = if is_original { sig - 1.0 } else { sig } * scale;
            let d_last = self.out.backward(store, &last, &[d_score]);
            let mut d_h = vec![vec![0.0; self.d]; states.len()];
            *d_h.last_mut().unwrap() = d_last;
            self.lstm.backward(store, &cache, &d_h, None);
        }
        Ok(loss)
    }
}

/// Draw a standard-normal epsilon vector for the VAE reparameterization.
pub fn sample_epsilon(z: usize, rng: &mut impl Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..z).map(|_| StandardNormal.sample(rng)).collect()
}
