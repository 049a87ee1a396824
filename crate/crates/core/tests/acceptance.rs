//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them).
//!
//! The heavyweight criteria share one lazily built desk-scale world: a
//! rule-generated corpus, a reference classifier, a trained attention
//! embed-decoder, and its regenerated datasets.

use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;

use nligen_core::data::{
    build_vocab, encode_example, pad_to, EmbeddingMatrix, Example, GeneratedExample, Label,
    RawExample, Vocab, HYPOTHESIS_LEN, PREMISE_LEN,
};
use nligen_core::generation::{beam_generate, greedy_generate, sample_latent, GenerationConfig};
use nligen_core::metrics::{
    dataset_label_accuracy, discriminator_error_rate, jaccard_distance, meteor_lite, rouge_l,
};
use nligen_core::models::{
    sample_epsilon, Classifier, Discriminator, GenDims, Generator, GeneratorKind, LatentSource,
};
use nligen_core::numerics::{finite_diff_grad, seeded_rng, softmax, ParamStore};
use nligen_core::pipeline::{
    balance_and_trim, filter_with_probs, judge_probs, run_full_pipeline, train_classifier,
    train_discriminator, train_generator, PipelineConfig, TrainConfig,
};
use nligen_core::synth::{toy_corpus, ToyCorpusConfig};

fn pass(line: &str) {
    println!("criterion {line}: PASS");
}

// ---------------------------------------------------------------------------
// Shared gradient-check harness
// ---------------------------------------------------------------------------

fn grad_close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-6 + 1e-4 * analytic.abs().max(fd.abs())
}

fn assert_grads_match<F>(what: &str, store: &mut ParamStore, loss_fn: F)
where
    F: Fn(&ParamStore) -> f64,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let fd = finite_diff_grad(&loss_fn, store, &name, 1e-4).unwrap();
        let analytic = store.grad(&name).clone();
        for (idx, (&a, &f)) in analytic.values().iter().zip(fd.values()).enumerate() {
            assert!(
                grad_close(a, f),
                "{what}: gradient mismatch in {name}[{idx}]: analytic={a}, finite-diff={f}"
            );
        }
    }
}

fn toy_vocab_embeddings(vocab_size: usize, e: usize, seed: u64) -> EmbeddingMatrix {
    let tokens: Vec<String> = (2..vocab_size).map(|i| format!("w{i:03}")).collect();
    let raw = RawExample { premise: tokens, hypothesis: vec![], label: Label::Neutral };
    let vocab = build_vocab(&[raw], 1);
    assert_eq!(vocab.size(), vocab_size);
    EmbeddingMatrix::random(&vocab, e, seed)
}

fn random_padded_example(vocab_size: usize, rng: &mut impl Rng) -> Example {
    let p_len = rng.gen_range(2..6);
    let h_len = rng.gen_range(2..5);
    let premise: Vec<u32> = (0..p_len).map(|_| rng.gen_range(2..vocab_size as u32)).collect();
    let hypothesis: Vec<u32> = (0..h_len).map(|_| rng.gen_range(2..vocab_size as u32)).collect();
    Example::new(
        pad_to(&premise, PREMISE_LEN),
        pad_to(&hypothesis, HYPOTHESIS_LEN),
        Label::from_index(rng.gen_range(0..3)),
    )
    .unwrap()
}

/// Criterion 1: analytic gradients of every layer and every model loss match
/// central finite differences on randomized small shapes.
#[test]
fn criterion_1_gradient_correctness() {
    use nligen_core::layers::{Dense, HierSoftmax, Lstm, MatchLstm};
    let mut rng = seeded_rng(101, "shapes");

    // Layers on three random shapes each.
    for round in 0..3u64 {
        let (e, d) = (rng.gen_range(2..=6), rng.gen_range(2..=8));

        // Dense with the input wrapped as a parameter so d_x is checked too.
        let dense = Dense::new("d", e, d);
        let mut store = ParamStore::new();
        dense.init(&mut store, round);
        let x: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let readout: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.insert("input.x", nligen_core::numerics::Tensor::from_values(&[e], x).unwrap());
        let dense_c = dense.clone();
        let readout_c = readout.clone();
        store.zero_grads();
        let xs = store.param("input.x").values().to_vec();
        let dx = dense.backward(&mut store, &xs, &readout);
        store.grad_mut("input.x").add_slice(&dx);
        assert_grads_match("dense", &mut store, move |s: &ParamStore| {
            dense_c
                .forward(s, s.param("input.x").values())
                .iter()
                .zip(&readout_c)
                .map(|(a, b)| a * b)
                .sum()
        });

        // LSTM over a short sequence (covers the single-step case at t=0).
        let lstm = Lstm::new("l", e, d);
        let mut store = ParamStore::new();
        lstm.init(&mut store, 100 + round);
        let xs: Vec<Vec<f64>> =
            (0..4).map(|_| (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let readout: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.zero_grads();
        let (states, cache) = lstm.forward(&store, &xs, &lstm.zero_state()).unwrap();
        let d_h: Vec<Vec<f64>> = states.iter().map(|_| readout.clone()).collect();
        lstm.backward(&mut store, &cache, &d_h, None);
        let (lstm_c, xs_c, readout_c) = (lstm.clone(), xs.clone(), readout.clone());
        assert_grads_match("lstm", &mut store, move |s: &ParamStore| {
            let (states, _) = lstm_c.forward(s, &xs_c, &lstm_c.zero_state()).unwrap();
            states
                .iter()
                .map(|st| st.h.iter().zip(&readout_c).map(|(h, w)| h * w).sum::<f64>())
                .sum()
        });

        // Match LSTM with attention, injected initial cell state.
        let mlstm = MatchLstm::new("m", d);
        let mut store = ParamStore::new();
        mlstm.init(&mut store, 200 + round);
        let h_p: Vec<Vec<f64>> =
            (0..4).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let h_h: Vec<Vec<f64>> =
            (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let init_c: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let readout: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.zero_grads();
        let (states, cache) = mlstm.forward(&store, &h_p, &h_h, &init_c).unwrap();
        let d_out: Vec<Vec<f64>> = states.iter().map(|_| readout.clone()).collect();
        mlstm.backward(&mut store, &cache, &d_out);
        let (mlstm_c, h_p_c, h_h_c, init_c_c, readout_c) =
            (mlstm.clone(), h_p.clone(), h_h.clone(), init_c.clone(), readout.clone());
        assert_grads_match("mlstm", &mut store, move |s: &ParamStore| {
            let (states, _) = mlstm_c.forward(s, &h_p_c, &h_h_c, &init_c_c).unwrap();
            states
                .iter()
                .map(|st| st.h.iter().zip(&readout_c).map(|(h, w)| h * w).sum::<f64>())
                .sum()
        });

        // Hierarchical softmax single-token loss.
        let v = rng.gen_range(4..=10);
        let hsm = HierSoftmax::new("h", d, v).unwrap();
        let mut store = ParamStore::new();
        hsm.init(&mut store, 300 + round);
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target = rng.gen_range(0..v as u32);
        store.insert("input.h", nligen_core::numerics::Tensor::from_values(&[d], h).unwrap());
        store.zero_grads();
        let hv = store.param("input.h").values().to_vec();
        let (_, dh) = hsm.nll_backward(&mut store, &hv, target, 1.0).unwrap();
        store.grad_mut("input.h").add_slice(&dh);
        let hsm_c = hsm.clone();
        assert_grads_match("hsoftmax", &mut store, move |s: &ParamStore| {
            -hsm_c.log_prob(s, s.param("input.h").values(), target).unwrap()
        });
    }

    // Model losses at randomized small dims (d <= 8, V <= 10).
    for round in 0..2u64 {
        let e = rng.gen_range(2..=4);
        let d = rng.gen_range(3..=8);
        let z = rng.gen_range(1..=4);
        let v = rng.gen_range(6..=10);
        let emb = toy_vocab_embeddings(v, e, 400 + round);
        let ex = random_padded_example(v, &mut rng);

        // Classifier cross-entropy.
        let mut clf = Classifier::new(e, d, 500 + round);
        let (snapshot, emb_c, ex_c) = (clf.clone(), emb.clone(), ex.clone());
        clf.store.zero_grads();
        clf.loss_and_grad(&emb, &ex, 1.0).unwrap();
        assert_grads_match("classifier", &mut clf.store, move |s: &ParamStore| {
            snapshot.loss_in(s, &emb_c, &ex_c).unwrap()
        });

        // All four generator losses (the VAE path includes its KL term).
        for kind in [
            GeneratorKind::AttEmbed,
            GeneratorKind::BaseEmbed,
            GeneratorKind::EncDec,
            GeneratorKind::VaeEncDec,
        ] {
            let mut generator =
                Generator::new(kind, GenDims { e, d, z }, v, 4, 600 + round).unwrap();
            let eps: Vec<f64> = (0..z).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let source = match kind {
                GeneratorKind::AttEmbed | GeneratorKind::BaseEmbed => LatentSource::TableRow(1),
                GeneratorKind::EncDec => LatentSource::Encode,
                GeneratorKind::VaeEncDec => LatentSource::VaeEncode(&eps),
            };
            generator.store.zero_grads();
            generator.loss_and_grad(&emb, &ex, source, 1.0).unwrap();
            let (snapshot, emb_c, ex_c, eps_c) = (generator.clone(), emb.clone(), ex.clone(), eps);
            assert_grads_match(kind.as_str(), &mut generator.store, move |s: &ParamStore| {
                let source = match kind {
                    GeneratorKind::AttEmbed | GeneratorKind::BaseEmbed => LatentSource::TableRow(1),
                    GeneratorKind::EncDec => LatentSource::Encode,
                    GeneratorKind::VaeEncDec => LatentSource::VaeEncode(&eps_c),
                };
                snapshot.loss_in(s, &emb_c, &ex_c, source).unwrap().total()
            });
        }

        // Discriminator pair loss.
        let mut disc = Discriminator::new(e, d, 700 + round);
        let orig = random_padded_example(v, &mut rng).hypothesis;
        let generated = random_padded_example(v, &mut rng).hypothesis;
        disc.store.zero_grads();
        disc.pair_loss_and_grad(&emb, &orig, &generated, 1.0).unwrap();
        let (snapshot, emb_c) = (disc.clone(), emb.clone());
        assert_grads_match("discriminator", &mut disc.store, move |s: &ParamStore| {
            snapshot.pair_loss_in(s, &emb_c, &orig, &generated).unwrap()
        });
    }
    pass("1 (gradient correctness: dense, lstm, mlstm, hsoftmax, classifier, 4 generator losses, discriminator)");
}

/// Criterion 2: distributions behave: hierarchical softmax sums to one for
/// V in {4, 50, 1000}, softmax is shift-invariant, classifier output lies on
/// the simplex.
#[test]
fn criterion_2_distribution_sanity() {
    use nligen_core::layers::HierSoftmax;
    let mut rng = seeded_rng(202, "dist");
    for v in [4usize, 50, 1000] {
        let d = 6;
        let hsm = HierSoftmax::new("h", d, v).unwrap();
        let mut store = ParamStore::new();
        hsm.init(&mut store, v as u64);
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = hsm.distribution(&store, &h).unwrap();
        assert_eq!(p.len(), v);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-10, "V={v}");
        assert!(p.iter().all(|&x| x > 0.0));
    }
    for c in [-75.0, 0.0, 42.0] {
        let a = softmax(&[c + 1.0, c - 1.0, c]).unwrap();
        let b = softmax(&[1.0, -1.0, 0.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let emb = toy_vocab_embeddings(10, 4, 9);
    let clf = Classifier::new(4, 6, 10);
    for _ in 0..20 {
        let ex = random_padded_example(10, &mut rng);
        let p = clf.forward(&emb, &ex).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
    pass("2 (distribution sanity: hsoftmax sums, softmax shift invariance, classifier simplex)");
}

/// Criterion 3: beam search equals exhaustive enumeration at full width,
/// the best log-prob is non-decreasing in k, and k=1 equals greedy.
#[test]
fn criterion_3_decoding_oracle() {
    fn enumerate_best(
        generator: &Generator,
        emb: &EmbeddingMatrix,
        premise: &[u32],
        z: &[f64],
        max_len: usize,
    ) -> (Vec<u32>, f64) {
        fn recurse(
            session: &nligen_core::models::DecodeSession<'_>,
            cursor: &nligen_core::models::DecodeCursor,
            prev: u32,
            prefix: &mut Vec<u32>,
            logprob: f64,
            max_len: usize,
            best: &mut (Vec<u32>, f64),
        ) {
            if prefix.len() == max_len {
                if logprob > best.1 {
                    *best = (prefix.clone(), logprob);
                }
                return;
            }
            let (next, logp) = session.step(cursor, prev).unwrap();
            for w in 0..logp.len() as u32 {
                let lp = logprob + logp[w as usize];
                if w == 0 {
                    if lp > best.1 {
                        *best = (prefix.clone(), lp);
                    }
                } else {
                    prefix.push(w);
                    recurse(session, &next, w, prefix, lp, max_len, best);
                    prefix.pop();
                }
            }
        }
        let (session, cursor) =
            generator.begin_decode(emb, premise, Label::Neutral, z).unwrap();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        recurse(&session, &cursor, 0, &mut Vec::new(), 0.0, max_len, &mut best);
        best
    }

    let cfg_base = GenerationConfig {
        latent_sigma: vec![0.5, 0.5],
        mask_oov: false,
        ..GenerationConfig::default()
    };

    // Exhaustive oracle: vocab 3, max_len 4, k = 3^4 = 81.
    for seed in 0..10u64 {
        let generator =
            Generator::new(GeneratorKind::AttEmbed, GenDims { e: 3, d: 4, z: 2 }, 3, 4, 9000 + seed)
                .unwrap();
        let emb = toy_vocab_embeddings(3, 3, 9100 + seed);
        let premise = pad_to(&[2, 2], PREMISE_LEN);
        let z = sample_latent(&cfg_base, &mut seeded_rng(seed, "oracle-z")).unwrap();
        let mut cfg = cfg_base.clone();
        cfg.beam_k = 81;
        cfg.max_len = 4;
        let (oracle_tokens, oracle_lp) = enumerate_best(&generator, &emb, &premise, &z, 4);
        let (best, _) =
            beam_generate(&generator, &emb, &premise, Label::Neutral, &z, &cfg).unwrap();
        assert_eq!(best.tokens, oracle_tokens, "seed {seed}");
        assert!((best.logprob - oracle_lp).abs() < 1e-12, "seed {seed}");
    }

    // Monotone in k over {1, 2, 4, 8}.
    for seed in 0..20u64 {
        let generator =
            Generator::new(GeneratorKind::AttEmbed, GenDims { e: 3, d: 4, z: 2 }, 6, 4, 9300 + seed)
                .unwrap();
        let emb = toy_vocab_embeddings(6, 3, 9400 + seed);
        let premise = pad_to(&[2, 3], PREMISE_LEN);
        let z = sample_latent(&cfg_base, &mut seeded_rng(seed, "mono-z")).unwrap();
        let mut last = f64::NEG_INFINITY;
        for k in [1usize, 2, 4, 8] {
            let mut cfg = cfg_base.clone();
            cfg.beam_k = k;
            cfg.max_len = 6;
            let (best, _) =
                beam_generate(&generator, &emb, &premise, Label::Neutral, &z, &cfg).unwrap();
            assert!(best.logprob >= last - 1e-12, "seed {seed}, k={k}");
            last = best.logprob;
        }
    }

    // k = 1 equals greedy on 100 random models.
    for seed in 0..100u64 {
        let generator =
            Generator::new(GeneratorKind::AttEmbed, GenDims { e: 3, d: 4, z: 2 }, 6, 4, 9600 + seed)
                .unwrap();
        let emb = toy_vocab_embeddings(6, 3, 9700 + seed);
        let premise = pad_to(&[2, 3], PREMISE_LEN);
        let z = sample_latent(&cfg_base, &mut seeded_rng(seed, "k1-z")).unwrap();
        let (greedy_tokens, greedy_lp) =
            greedy_generate(&generator, &emb, &premise, Label::Entailment, &z, &cfg_base).unwrap();
        let (best, _) =
            beam_generate(&generator, &emb, &premise, Label::Entailment, &z, &cfg_base).unwrap();
        assert_eq!(greedy_tokens, best.tokens, "seed {seed}");
        assert!((greedy_lp - best.logprob).abs() < 1e-12, "seed {seed}");
    }
    pass("3 (decoding oracle: exhaustive equality at k=81, monotone in k, k=1 = greedy on 100 models)");
}

/// Criterion 4: one embed-decoder training step updates exactly one latent
/// row; a single-token hierarchical-softmax loss touches only the class
/// layer and the target's block.
#[test]
fn criterion_4_sparsity_laws() {
    // One training step on example i.
    let v = 10;
    let emb = toy_vocab_embeddings(v, 3, 41);
    let mut rng = seeded_rng(42, "sparse");
    let train: Vec<Example> = (0..6).map(|_| random_padded_example(v, &mut rng)).collect();
    let mut generator =
        Generator::new(GeneratorKind::AttEmbed, GenDims { e: 3, d: 4, z: 3 }, v, train.len(), 43)
            .unwrap();
    let before: Vec<Vec<f64>> =
        (0..6).map(|i| generator.latent.as_ref().unwrap().row(i).to_vec()).collect();
    let (_, z_grad) = generator
        .loss_and_grad(&emb, &train[2], LatentSource::TableRow(2), 1.0)
        .unwrap();
    nligen_core::numerics::adam_step(&mut generator.store, &Default::default()).unwrap();
    generator
        .latent
        .as_mut()
        .unwrap()
        .adam_row(2, &z_grad.unwrap(), &Default::default())
        .unwrap();
    for (i, row_before) in before.iter().enumerate() {
        let row_after = generator.latent.as_ref().unwrap().row(i);
        if i == 2 {
            assert_ne!(row_before.as_slice(), row_after, "trained row must move");
        } else {
            assert_eq!(row_before.as_slice(), row_after, "row {i} must be untouched");
        }
    }

    // Hierarchical softmax gradient sparsity.
    use nligen_core::layers::HierSoftmax;
    let v = 1000;
    let hsm = HierSoftmax::new("h", 5, v).unwrap();
    let mut store = ParamStore::new();
    hsm.init(&mut store, 44);
    let h: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = 321u32;
    let (target_class, _) = hsm.word_class(target);
    store.zero_grads();
    hsm.nll_backward(&mut store, &h, target, 1.0).unwrap();
    for (name, entry) in store.iter() {
        let nonzero = entry.grad.values().iter().filter(|&&g| g != 0.0).count();
        if name.starts_with("h.word_") && !name.ends_with(&format!("{target_class:04}")) {
            assert_eq!(nonzero, 0, "{name} must receive zero gradient");
        }
        if name.starts_with("h.class_") || name.ends_with(&format!("{target_class:04}")) {
            assert!(nonzero > 0, "{name} should receive gradient");
        }
    }
    pass("4 (sparsity: single latent row per step, hsoftmax touches class layer + one block)");
}

/// Criterion 5: filtering is monotone in the threshold and balance_and_trim
/// yields an exactly uniform histogram and is idempotent.
#[test]
fn criterion_5_pipeline_filtering_laws() {
    let mut rng = seeded_rng(51, "filter");
    let dataset: Vec<GeneratedExample> = (0..600)
        .map(|i| GeneratedExample {
            example: Example::new(
                pad_to(&[2, 3], PREMISE_LEN),
                pad_to(&[4, 5], HYPOTHESIS_LEN),
                Label::from_index(i % 3),
            )
            .unwrap(),
            origin_index: i,
            gen_logprob: -1.0,
        })
        .collect();
    let probs: Vec<f64> = (0..600).map(|_| rng.gen_range(0.0..1.0)).collect();
    let chain: Vec<Vec<usize>> = [0.0, 0.3, 0.6, 0.9]
        .iter()
        .map(|&t| filter_with_probs(&dataset, &probs, t).iter().map(|g| g.origin_index).collect())
        .collect();
    for pair in chain.windows(2) {
        let wider: std::collections::HashSet<_> = pair[0].iter().collect();
        assert!(pair[1].iter().all(|i| wider.contains(i)), "filtered(t2) must nest in filtered(t1)");
    }

    let balanced = balance_and_trim(&dataset, 300).unwrap();
    let mut counts = [0usize; 3];
    for g in &balanced {
        counts[g.example.label.index()] += 1;
    }
    assert_eq!(counts, [100, 100, 100], "histogram must be exactly uniform");
    let again = balance_and_trim(&balanced, 300).unwrap();
    assert_eq!(
        balanced.iter().map(|g| g.origin_index).collect::<Vec<_>>(),
        again.iter().map(|g| g.origin_index).collect::<Vec<_>>(),
        "balance_and_trim must be idempotent"
    );
    pass("5 (filtering monotonicity and balance_and_trim uniformity + idempotence)");
}

// ---------------------------------------------------------------------------
// Desk-scale world shared by criteria 6 and 7
// ---------------------------------------------------------------------------

const TOY_SEED: u64 = 71;

fn toy_train_config(seed: u64, z: usize) -> TrainConfig {
    TrainConfig {
        seed,
        d: 32,
        z,
        e: 50,
        batch_size: 32,
        generator_epochs: 20,
        classifier_max_epochs: 100,
        patience: 3,
        learning_rate: 0.003,
        clip_norm: 5.0,
    }
}

struct ToyWorld {
    vocab: Vocab,
    emb: EmbeddingMatrix,
    train: Vec<Example>,
    dev: Vec<Example>,
    test: Vec<Example>,
    judge: Classifier,
    judge_test_accuracy: f64,
    generator: Generator,
    gen_history: Vec<nligen_core::pipeline::EpochRecord>,
    gen_train: Vec<GeneratedExample>,
    gen_dev: Vec<GeneratedExample>,
}

static WORLD: OnceLock<ToyWorld> = OnceLock::new();

fn world() -> &'static ToyWorld {
    WORLD.get_or_init(|| {
        let corpus_cfg = ToyCorpusConfig { n_train: 3000, n_dev: 600, n_test: 600, seed: TOY_SEED, attribute_values: 3 };
        let (train_raw, dev_raw, test_raw) = toy_corpus(&corpus_cfg);
        let vocab = build_vocab(&train_raw, 1);
        assert!(vocab.size() <= 60, "toy vocab must stay small, got {}", vocab.size());
        let encode =
            |raw: &[RawExample]| raw.iter().map(|r| encode_example(r, &vocab)).collect::<Vec<_>>();
        let (train, dev, test) = (encode(&train_raw), encode(&dev_raw), encode(&test_raw));
        let emb = EmbeddingMatrix::random(&vocab, 50, TOY_SEED);

        let cfg = toy_train_config(TOY_SEED, 4);
        let judge = train_classifier("origclass-toy", &train, &dev, &emb, &cfg).unwrap();
        let (judge_test_accuracy, _, _) =
            dataset_label_accuracy(&test, &judge.model, &emb).unwrap();

        let generator =
            train_generator("gen-toy", GeneratorKind::AttEmbed, &train, &emb, &cfg).unwrap();
        let mut gen_cfg = GenerationConfig::for_generator(&generator.model, 1, TOY_SEED).unwrap();
        gen_cfg.mask_oov = vocab.oov_count() == 0;
        let gen_train = nligen_core::pipeline::generate_dataset(
            &generator.model,
            &emb,
            &train,
            &gen_cfg,
            4.0,
        )
        .unwrap();
        let mut dev_cfg = gen_cfg.clone();
        dev_cfg.seed = TOY_SEED + 1;
        let gen_dev =
            nligen_core::pipeline::generate_dataset(&generator.model, &emb, &dev, &dev_cfg, 1.0)
                .unwrap();

        ToyWorld {
            vocab,
            emb,
            train,
            dev,
            test,
            judge: judge.model,
            judge_test_accuracy,
            generator: generator.model,
            gen_history: generator.history,
            gen_train,
            gen_dev,
        }
    })
}

/// Criterion 6: desk-scale end-to-end run on the rule-generated corpus.
/// (a) the reference classifier reaches 0.85 test accuracy; (b) a classifier
/// retrained on the t=0.6-filtered regenerated dataset lands within 15
/// accuracy points of it; (c) generated-dataset label accuracy at z=2 beats
/// or ties z=16 for a majority of 5 seeds.
#[test]
fn criterion_6_desk_scale_end_to_end() {
    let w = world();

    // (a) reference classifier quality.
    assert!(
        w.judge_test_accuracy >= 0.85,
        "(a) OrigClass-toy test accuracy {:.4} < 0.85",
        w.judge_test_accuracy
    );

    // (b) retrain on the filtered regenerated dataset.
    let train_probs = judge_probs(&w.gen_train, &w.judge, &w.emb).unwrap();
    let dev_probs = judge_probs(&w.gen_dev, &w.judge, &w.emb).unwrap();
    let filtered = filter_with_probs(&w.gen_train, &train_probs, 0.6);
    let balanced = balance_and_trim(&filtered, w.train.len()).unwrap();
    let new_train: Vec<Example> = balanced.iter().map(|g| g.example.clone()).collect();
    let new_dev: Vec<Example> = filter_with_probs(&w.gen_dev, &dev_probs, 0.6)
        .iter()
        .map(|g| g.example.clone())
        .collect();
    assert!(!new_dev.is_empty(), "(b) filtered dev set must be non-empty");
    let cfg = toy_train_config(TOY_SEED + 2, 4);
    let new_clf = train_classifier("newclass-toy", &new_train, &new_dev, &w.emb, &cfg).unwrap();
    let (acc_at_06, _, _) = dataset_label_accuracy(&w.test, &new_clf.model, &w.emb).unwrap();
    assert!(
        acc_at_06 >= w.judge_test_accuracy - 0.15,
        "(b) acc@0.6 {:.4} more than 15 points below OrigClass-toy {:.4}",
        acc_at_06,
        w.judge_test_accuracy
    );

    // (c) latent dimension ordering, majority of 5 seeds.
    let seeds: Vec<u64> = (0..5).map(|i| TOY_SEED + 10 + i).collect();
    let wins: Vec<bool> = seeds
        .par_iter()
        .map(|&seed| {
            let acc_for_z = |z: usize| {
                let cfg = toy_train_config(seed, z);
                let generator =
                    train_generator("gen-z-cmp", GeneratorKind::AttEmbed, &w.train, &w.emb, &cfg)
                        .unwrap();
                let mut gen_cfg =
                    GenerationConfig::for_generator(&generator.model, 1, seed).unwrap();
                gen_cfg.mask_oov = w.vocab.oov_count() == 0;
                let gen_dev = nligen_core::pipeline::generate_dataset(
                    &generator.model,
                    &w.emb,
                    &w.dev,
                    &gen_cfg,
                    1.0,
                )
                .unwrap();
                let examples: Vec<Example> = gen_dev.into_iter().map(|g| g.example).collect();
                dataset_label_accuracy(&examples, &w.judge, &w.emb).unwrap().0
            };
            let (acc_z2, acc_z16) = (acc_for_z(2), acc_for_z(16));
            eprintln!("seed {seed}: acc-data z=2 {acc_z2:.4} vs z=16 {acc_z16:.4}");
            acc_z2 >= acc_z16
        })
        .collect();
    let majority = wins.iter().filter(|&&b| b).count();
    assert!(
        majority >= 3,
        "(c) z=2 >= z=16 ordering held for only {majority} of 5 seeds"
    );
    pass(&format!(
        "6 (desk-scale: OrigClass {:.3} >= 0.85; acc@0.6 {:.3} within 0.15; z-ordering {majority}/5)",
        w.judge_test_accuracy, acc_at_06
    ));
}

/// Criterion 7: the discriminator separates original from generated toy
/// hypotheses better than the tie baseline, and a copied set yields error
/// rate exactly 1 under the tie rule.
#[test]
fn criterion_7_discriminator() {
    let w = world();
    let cfg = toy_train_config(TOY_SEED + 3, 4);
    let gen_train_hyps: Vec<Example> =
        w.gen_train.iter().take(w.train.len()).map(|g| g.example.clone()).collect();
    let gen_dev_hyps: Vec<Example> = w.gen_dev.iter().map(|g| g.example.clone()).collect();
    let disc = train_discriminator(
        "disc-toy",
        &w.train,
        &gen_train_hyps,
        &w.dev,
        &gen_dev_hyps,
        &w.emb,
        &cfg,
    )
    .unwrap();
    let er = discriminator_error_rate(&disc, &w.dev, &gen_dev_hyps, &w.emb, TOY_SEED).unwrap();
    assert!(er < 0.5, "trained discriminator error rate {er:.4} not better than chance pairing");

    let er_copy = discriminator_error_rate(&disc, &w.dev, &w.dev, &w.emb, TOY_SEED).unwrap();
    assert_eq!(er_copy, 1.0, "identical sets must tie on every pair");
    pass(&format!("7 (discriminator: held-out error rate {er:.3} < 0.5; copy rule = 1.0)"));
}

/// Criterion 8: metric implementations match independent oracles.
#[test]
fn criterion_8_metrics_oracles() {
    // ROUGE-L against a memoized-recursion LCS oracle on 1000 random pairs.
    fn lcs_rec(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<i64>>) -> usize {
        if i == 0 || j == 0 {
            return 0;
        }
        if memo[i][j] >= 0 {
            return memo[i][j] as usize;
        }
        let v = if a[i - 1] == b[j - 1] {
            lcs_rec(a, b, i - 1, j - 1, memo) + 1
        } else {
            lcs_rec(a, b, i - 1, j, memo).max(lcs_rec(a, b, i, j - 1, memo))
        };
        memo[i][j] = v as i64;
        v
    }
    let mut rng = seeded_rng(81, "metrics");
    for _ in 0..1000 {
        let n = rng.gen_range(0..12);
        let m = rng.gen_range(0..12);
        let a: Vec<u32> = (0..n).map(|_| rng.gen_range(2..9)).collect();
        let b: Vec<u32> = (0..m).map(|_| rng.gen_range(2..9)).collect();
        let mut memo = vec![vec![-1i64; m + 1]; n + 1];
        let lcs = lcs_rec(&a, &b, n, m, &mut memo) as f64;
        let expected = if n == 0 || m == 0 || lcs == 0.0 {
            0.0
        } else {
            let p = lcs / n as f64;
            let r = lcs / m as f64;
            2.0 * p * r / (p + r)
        };
        assert!((rouge_l(&a, &b) - expected).abs() < 1e-12);
    }

    // Jaccard against direct set arithmetic on 500 random pairs.
    for _ in 0..500 {
        let n = rng.gen_range(0..10);
        let m = rng.gen_range(0..10);
        let a: Vec<u32> = (0..n).map(|_| rng.gen_range(2..9)).collect();
        let b: Vec<u32> = (0..m).map(|_| rng.gen_range(2..9)).collect();
        let sa: std::collections::HashSet<u32> = a.iter().copied().collect();
        let sb: std::collections::HashSet<u32> = b.iter().copied().collect();
        let expected = if sa.is_empty() && sb.is_empty() {
            0.0
        } else {
            1.0 - sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
        };
        assert!((jaccard_distance(&a, &b) - expected).abs() < 1e-12);
    }

    // METEOR against 20 hand-evaluated fixed cases. Each expected value is
    // derived by hand from (m, chunks) under the documented in-order
    // alignment rule, then run through the formula.
    let f = |m: f64, chunks: f64, nc: f64, nr: f64| -> f64 {
        let p = m / nc;
        let r = m / nr;
        (p * r / (0.9 * p + 0.1 * r)) * (1.0 - 0.5 * (chunks / m).powi(3))
    };
    let cases: Vec<(Vec<u32>, Vec<u32>, f64)> = vec![
        (vec![5], vec![5], f(1.0, 1.0, 1.0, 1.0)),                      // single match
        (vec![5], vec![6], 0.0),                                        // no match
        (vec![], vec![5], 0.0),                                         // empty candidate
        (vec![5], vec![], 0.0),                                         // empty reference
        (vec![7, 8], vec![7, 8], f(2.0, 1.0, 2.0, 2.0)),                // "the cat"
        (vec![2, 3, 4], vec![2, 3, 4], f(3.0, 1.0, 3.0, 3.0)),          // one block of 3
        (vec![2, 3], vec![3, 2], f(2.0, 2.0, 2.0, 2.0)),                // swapped pair
        (vec![2, 9, 3], vec![2, 3], f(2.0, 2.0, 3.0, 2.0)),             // gap in candidate
        (vec![2, 3], vec![2, 9, 3], f(2.0, 2.0, 2.0, 3.0)),             // gap in reference
        (vec![2, 3, 4, 5], vec![2, 3, 9, 5], f(3.0, 2.0, 4.0, 4.0)),    // 2-run + single
        (vec![2, 3, 4], vec![4, 3, 2], f(3.0, 3.0, 3.0, 3.0)),          // full reversal
        (vec![2, 2], vec![2], f(1.0, 1.0, 2.0, 1.0)),                   // duplicate candidate
        (vec![2], vec![2, 2], f(1.0, 1.0, 1.0, 2.0)),                   // duplicate reference
        (vec![2, 2], vec![2, 2], f(2.0, 1.0, 2.0, 2.0)),                // duplicates both
        (vec![2, 3, 4, 5, 6], vec![2, 3, 4, 5, 6], f(5.0, 1.0, 5.0, 5.0)), // long block
        (vec![2, 9, 9, 9, 3], vec![2, 3], f(2.0, 2.0, 5.0, 2.0)),       // sparse candidate
        (vec![6, 2, 3], vec![2, 3, 7], f(2.0, 1.0, 3.0, 3.0)),          // shared middle run
        (vec![2, 3, 9], vec![2, 3], f(2.0, 1.0, 3.0, 2.0)),             // trailing junk
        (vec![9, 2, 3], vec![2, 3], f(2.0, 1.0, 3.0, 2.0)),             // leading junk
        (vec![4, 5, 2, 3], vec![2, 3, 4, 5], f(4.0, 2.0, 4.0, 4.0)),    // two swapped runs
    ];
    assert_eq!(cases.len(), 20);
    for (i, (cand, reference, expected)) in cases.iter().enumerate() {
        let got = meteor_lite(cand, reference);
        assert!(
            (got - expected).abs() < 1e-12,
            "meteor case {i}: got {got}, expected {expected}"
        );
    }
    pass("8 (metrics oracles: rouge-l vs LCS recursion x1000, jaccard x500, meteor 20 fixed cases)");
}

/// Criterion 9: the full toy pipeline run twice with one seed produces
/// byte-identical datasets, reports, and checkpoints; a different seed
/// produces different hypotheses.
#[test]
fn criterion_9_reproducibility() {
    let corpus_cfg = ToyCorpusConfig { n_train: 450, n_dev: 120, n_test: 120, seed: 91, attribute_values: 3 };
    let (train_raw, dev_raw, test_raw) = toy_corpus(&corpus_cfg);
    let vocab = build_vocab(&train_raw, 1);
    let encode =
        |raw: &[RawExample]| raw.iter().map(|r| encode_example(r, &vocab)).collect::<Vec<_>>();
    let (train, dev, test) = (encode(&train_raw), encode(&dev_raw), encode(&test_raw));
    let emb = EmbeddingMatrix::random(&vocab, 50, 91);
    let cfg = PipelineConfig {
        train: TrainConfig {
            seed: 92,
            d: 16,
            z: 3,
            e: 50,
            batch_size: 32,
            generator_epochs: 5,
            classifier_max_epochs: 6,
            patience: 3,
            learning_rate: 0.003,
            clip_norm: 5.0,
        },
        kinds: vec![GeneratorKind::AttEmbed],
        thresholds: vec![0.0, 0.3],
        oversample: 2.0,
        beam_k: 1,
    };

    let run = |dir: &std::path::Path, cfg: &PipelineConfig| {
        run_full_pipeline(&train, &dev, &test, &vocab, &emb, cfg, dir).unwrap();
        let mut artifacts: Vec<(String, Vec<u8>)> = Vec::new();
        for sub in ["checkpoints", "datasets", "reports"] {
            let mut paths: Vec<_> =
                std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
            paths.sort();
            for p in paths {
                artifacts.push((
                    format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
        artifacts
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (a, b) = (run(dir_a.path(), &cfg), run(dir_b.path(), &cfg));
    assert_eq!(a.len(), b.len());
    for ((name_a, bytes_a), (_, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between identical-seed runs");
    }

    let mut cfg2 = cfg.clone();
    cfg2.train.seed = 93;
    let dir_c = tempfile::tempdir().unwrap();
    let c = run(dir_c.path(), &cfg2);
    let gen_a = a.iter().find(|(n, _)| n.contains("gen-dev")).unwrap();
    let gen_c = c.iter().find(|(n, _)| n.contains("gen-dev")).unwrap();
    assert_ne!(gen_a.1, gen_c.1, "a different seed must change generated hypotheses");
    pass("9 (reproducibility: byte-identical artifacts on same seed, live randomness across seeds)");
}

/// Criterion 10: real-SNLI loader retention, skipped (not failed) when the
/// distribution file is absent.
#[test]
fn criterion_10_snli_retention() {
    let candidates: Vec<std::path::PathBuf> = std::env::var("SNLI_TRAIN_PATH")
        .map(|p| vec![p.into()])
        .unwrap_or_else(|_| {
            vec![
                std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
                    .join("../../data/snli_1.0_train.jsonl"),
                "/data/snli_1.0_train.jsonl".into(),
            ]
        });
    let Some(path) = candidates.iter().find(|p| p.exists()) else {
        println!("criterion 10 (SNLI retention): SKIPPED (no SNLI file found; set SNLI_TRAIN_PATH)");
        return;
    };
    let (_, stats) = nligen_core::data::load_raw(path).unwrap();
    let retention = stats.retention();
    assert!(
        (retention - 0.925).abs() <= 0.005,
        "retention {retention:.4} outside 92.5% +/- 0.5%"
    );
    pass(&format!("10 (SNLI retention {:.2}% within 92.5 +/- 0.5)", retention * 100.0));
}

/// VAE epsilon helper is exercised here so the generation-side sampling in
/// the acceptance path matches training-time draws.
#[test]
fn epsilon_sampling_is_seeded() {
    let a = sample_epsilon(4, &mut seeded_rng(1, "eps"));
    let b = sample_epsilon(4, &mut seeded_rng(1, "eps"));
    assert_eq!(a, b);
}

/// Monitored toy run: per-token training NLL is non-increasing in at least
/// 15 of the 19 epoch transitions, and the trained generator assigns the
/// training set a lower NLL than a fresh one.
#[test]
fn generator_training_nll_mostly_decreases() {
    let w = world();
    assert_eq!(w.gen_history.len(), 20);
    let drops = w
        .gen_history
        .windows(2)
        .filter(|pair| pair[1].train_loss <= pair[0].train_loss + 1e-12)
        .count();
    assert!(drops >= 15, "only {drops} of 19 transitions were non-increasing");
    let first = w.gen_history.first().unwrap().train_loss;
    let last = w.gen_history.last().unwrap().train_loss;
    assert!(last < first, "training NLL should fall overall: {first} -> {last}");
    // The trained model beats the uniform bound log V on its training data.
    assert!(last < (w.vocab.size() as f64).ln());
    let _ = &w.generator;
}
