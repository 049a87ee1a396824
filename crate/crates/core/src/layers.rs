//! Network layers with hand-derived backward passes: dense, LSTM,
//! attention-based match LSTM, and a two-level hierarchical softmax.
//!
//! Layers do not own their weights; they hold parameter names and read them
//! from a [`ParamStore`]. Forward passes return a cache, backward passes
//! consume it and accumulate gradients into the store. All layers are pure
//! functions of (inputs, params), so concurrent forward calls on a shared
//! store are safe.

use crate::numerics::{log_softmax, sigmoid, softmax, sub_seed, ParamStore, Tensor};
use crate::{Error, Result};

/// Fully connected layer y = Wx + b.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Dense {
        Dense { w: format!("{prefix}.w"), b: format!("{prefix}.b"), in_dim, out_dim }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        store.insert(&self.w, Tensor::glorot(&[self.out_dim, self.in_dim], sub_seed(seed, &self.w)));
        store.insert(&self.b, Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut out = store.param(&self.w).matvec(x);
        for (o, b) in out.iter_mut().zip(store.param(&self.b).values()) {
            *o += b;
        }
        out
    }

    /// Accumulates dW and db; returns dx.
    pub fn backward(&self, store: &mut ParamStore, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let dx = store.param(&self.w).matvec_t(dy);
        store.grad_mut(&self.w).add_outer(dy, x);
        store.grad_mut(&self.b).add_slice(dy);
        dx
    }
}

/// Hidden and cell state of an LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(d: usize) -> LstmState {
        LstmState { h: vec![0.0; d], c: vec![0.0; d] }
    }
}

const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// LSTM cell and sequence runner.
///
/// Per step: gates i, f, o = sigmoid(Wx + Uh + b), candidate g = tanh(...),
/// C_t = f * C_{t-1} + i * g, h_t = o * tanh(C_t). The initial state is
/// normally zero but callers may inject a cell state produced by other layers.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Per-step intermediates retained for backprop.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct LstmCache {
    steps: Vec<LstmStepCache>,
}

/// Gradients returned by a sequence backward pass.
pub struct LstmBackward {
    pub d_xs: Vec<Vec<f64>>,
    pub d_h0: Vec<f64>,
    pub d_c0: Vec<f64>,
}

struct LstmParamRefs<'a> {
    w: [&'a Tensor; 4],
    u: [&'a Tensor; 4],
    b: [&'a Tensor; 4],
}

/// Local gradient accumulators for one LSTM's parameters, applied to the
/// store in one shot after the backward sweep.
pub(crate) struct LstmLocalGrads {
    dw: Vec<Tensor>,
    du: Vec<Tensor>,
    db: Vec<Tensor>,
}

impl Lstm {
    pub fn new(prefix: &str, in_dim: usize, hidden: usize) -> Lstm {
        Lstm { prefix: prefix.to_string(), in_dim, hidden }
    }

    fn name(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}_{gate}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for gate in GATES {
            let w = self.name("w", gate);
            let u = self.name("u", gate);
            let b = self.name("b", gate);
            store.insert(&w, Tensor::glorot(&[self.hidden, self.in_dim], sub_seed(seed, &w)));
            store.insert(&u, Tensor::glorot(&[self.hidden, self.hidden], sub_seed(seed, &u)));
            let mut bias = Tensor::zeros(&[self.hidden]);
            if gate == "f" {
                bias.fill(1.0); // forget-gate bias starts open
            }
            store.insert(&b, bias);
        }
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState::zeros(self.hidden)
    }

    fn params<'a>(&self, store: &'a ParamStore) -> LstmParamRefs<'a> {
        let get = |kind: &str| -> [&'a Tensor; 4] {
            [
                store.param(&self.name(kind, "i")),
                store.param(&self.name(kind, "f")),
                store.param(&self.name(kind, "o")),
                store.param(&self.name(kind, "c")),
            ]
        };
        LstmParamRefs { w: get("w"), u: get("u"), b: get("b") }
    }

    pub(crate) fn zero_local_grads(&self) -> LstmLocalGrads {
        LstmLocalGrads {
            dw: (0..4).map(|_| Tensor::zeros(&[self.hidden, self.in_dim])).collect(),
            du: (0..4).map(|_| Tensor::zeros(&[self.hidden, self.hidden])).collect(),
            db: (0..4).map(|_| Tensor::zeros(&[self.hidden])).collect(),
        }
    }

    pub(crate) fn apply_local_grads(&self, store: &mut ParamStore, grads: &LstmLocalGrads) {
        for (gi, gate) in GATES.iter().enumerate() {
            store.grad_mut(&self.name("w", gate)).add_slice(grads.dw[gi].values());
            store.grad_mut(&self.name("u", gate)).add_slice(grads.du[gi].values());
            store.grad_mut(&self.name("b", gate)).add_slice(grads.db[gi].values());
        }
    }

    fn step_with(
        &self,
        p: &LstmParamRefs<'_>,
        x: &[f64],
        prev: &LstmState,
    ) -> (LstmState, LstmStepCache) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(prev.h.len(), self.hidden);
        let d = self.hidden;
        let pre = |k: usize| -> Vec<f64> {
            let mut v = p.w[k].matvec(x);
            let uh = p.u[k].matvec(&prev.h);
            for ((vi, ui), bi) in v.iter_mut().zip(uh).zip(p.b[k].values()) {
                *vi += ui + bi;
            }
            v
        };
        let i: Vec<f64> = pre(0).into_iter().map(sigmoid).collect();
        let f: Vec<f64> = pre(1).into_iter().map(sigmoid).collect();
        let o: Vec<f64> = pre(2).into_iter().map(sigmoid).collect();
        let g: Vec<f64> = pre(3).into_iter().map(f64::tanh).collect();
        let mut c = vec![0.0; d];
        let mut tanh_c = vec![0.0; d];
        let mut h = vec![0.0; d];
        for k in 0..d {
            c[k] = f[k] * prev.c[k] + i[k] * g[k];
            tanh_c[k] = c[k].tanh();
            h[k] = o[k] * tanh_c[k];
        }
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            i,
            f,
            o,
            g,
            tanh_c,
        };
        (LstmState { h, c }, cache)
    }

    /// One step; `prev` defaults to zeros at the start of a sequence.
    pub fn step(&self, store: &ParamStore, x: &[f64], prev: &LstmState) -> (LstmState, LstmStepCache) {
        let p = self.params(store);
        self.step_with(&p, x, prev)
    }

    /// Run the cell over a sequence, folding the state.
    pub fn forward(
        &self,
        store: &ParamStore,
        xs: &[Vec<f64>],
        init: &LstmState,
    ) -> Result<(Vec<LstmState>, LstmCache)> {
        if xs.is_empty() {
            return Err(Error::Config(format!("lstm {}: empty input sequence", self.prefix)));
        }
        let p = self.params(store);
        let mut states = Vec::with_capacity(xs.len());
        let mut cache = LstmCache::default();
        let mut prev = init.clone();
        for x in xs {
            let (next, step_cache) = self.step_with(&p, x, &prev);
            cache.steps.push(step_cache);
            states.push(next.clone());
            prev = next;
        }
        Ok((states, cache))
    }

    /// Backward through one cached step. `dh` is the total gradient on h_t,
    /// `dc_in` the recurrent gradient on C_t. Returns (dx, dh_prev, dc_prev).
    fn step_backward_with(
        &self,
        p: &LstmParamRefs<'_>,
        cache: &LstmStepCache,
        dh: &[f64],
        dc_in: &[f64],
        grads: &mut LstmLocalGrads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.hidden;
        let mut dpre = vec![vec![0.0; d]; 4]; // i, f, o, g pre-activation grads
        let mut dc_prev = vec![0.0; d];
        for k in 0..d {
            let (i, f, o, g) = (cache.i[k], cache.f[k], cache.o[k], cache.g[k]);
            let tc = cache.tanh_c[k];
            let d_o = dh[k] * tc;
            let dc = dc_in[k] + dh[k] * o * (1.0 - tc * tc);
            let d_i = dc * g;
            let d_f = dc * cache.c_prev[k];
            let d_g = dc * i;
            dc_prev[k] = dc * f;
            dpre[0][k] = d_i * i * (1.0 - i);
            dpre[1][k] = d_f * f * (1.0 - f);
            dpre[2][k] = d_o * o * (1.0 - o);
            dpre[3][k] = d_g * (1.0 - g * g);
        }
        let mut dx = vec![0.0; self.in_dim];
        let mut dh_prev = vec![0.0; d];
        for (k, dpre_k) in dpre.iter().enumerate() {
            grads.dw[k].add_outer(dpre_k, &cache.x);
            grads.du[k].add_outer(dpre_k, &cache.h_prev);
            grads.db[k].add_slice(dpre_k);
            for (a, b) in dx.iter_mut().zip(p.w[k].matvec_t(dpre_k)) {
                *a += b;
            }
            for (a, b) in dh_prev.iter_mut().zip(p.u[k].matvec_t(dpre_k)) {
                *a += b;
            }
        }
        (dx, dh_prev, dc_prev)
    }

    /// Backpropagation through time over a cached sequence.
    ///
    /// `d_h[t]` is the upstream gradient on the step-t output (zeros where a
    /// state is unused); `d_c_last` is an optional gradient on the final cell
    /// state. Parameter gradients are accumulated into the store.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LstmCache,
        d_h: &[Vec<f64>],
        d_c_last: Option<&[f64]>,
    ) -> LstmBackward {
        assert_eq!(cache.steps.len(), d_h.len());
        let mut grads = self.zero_local_grads();
        let mut d_xs = vec![Vec::new(); cache.steps.len()];
        let mut dh_next = vec![0.0; self.hidden];
        let mut dc_next = d_c_last.map_or_else(|| vec![0.0; self.hidden], <[f64]>::to_vec);
        {
            let p = self.params(store);
            for t in (0..cache.steps.len()).rev() {
                let mut dh = d_h[t].clone();
                for (a, b) in dh.iter_mut().zip(&dh_next) {
                    *a += b;
                }
                let (dx, dh_prev, dc_prev) =
                    self.step_backward_with(&p, &cache.steps[t], &dh, &dc_next, &mut grads);
                d_xs[t] = dx;
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
        }
        self.apply_local_grads(store, &grads);
        LstmBackward { d_xs, d_h0: dh_next, d_c0: dc_next }
    }
}

/// Attention-based match LSTM over a premise/hypothesis state pair.
///
/// At hypothesis step t the premise states are scored against the current
/// hypothesis state and the previous match state,
/// e_tj = w_e . tanh(W_s h_p_j + W_t h_h_t + W_m h_m_{t-1}),
/// softmax over j gives attention weights whose convex combination of the
/// premise states is concatenated with h_h_t and fed to an inner LSTM.
#[derive(Debug, Clone)]
pub struct MatchLstm {
    pub prefix: String,
    pub d: usize,
    pub inner: Lstm,
    w_s: String,
    w_t: String,
    w_m: String,
    w_e: String,
}

pub struct MlstmStep {
    alpha: Vec<f64>,
    u: Vec<Vec<f64>>, // tanh'd score inputs per premise position
    h_h: Vec<f64>,
    h_m_prev: Vec<f64>,
    inner: LstmStepCache,
}

pub struct MlstmCache {
    h_p: Vec<Vec<f64>>,
    steps: Vec<MlstmStep>,
}

impl MlstmCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub struct MlstmBackward {
    pub d_h_p: Vec<Vec<f64>>,
    pub d_h_h: Vec<Vec<f64>>,
    pub d_c0: Vec<f64>,
}

impl MatchLstm {
    pub fn new(prefix: &str, d: usize) -> MatchLstm {
        MatchLstm {
            prefix: prefix.to_string(),
            d,
            inner: Lstm::new(&format!("{prefix}.lstm"), 2 * d, d),
            w_s: format!("{prefix}.w_s"),
            w_t: format!("{prefix}.w_t"),
            w_m: format!("{prefix}.w_m"),
            w_e: format!("{prefix}.w_e"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.inner.init(store, seed);
        for name in [&self.w_s, &self.w_t, &self.w_m] {
            store.insert(name, Tensor::glorot(&[self.d, self.d], sub_seed(seed, name)));
        }
        store.insert(&self.w_e, Tensor::glorot(&[self.d], sub_seed(seed, &self.w_e)));
    }

    /// Attention weights and context for one step (also used in decoding).
    fn attend(
        &self,
        store: &ParamStore,
        p_proj: &[Vec<f64>], // precomputed W_s h_p_j
        h_p: &[Vec<f64>],
        h_h_t: &[f64],
        h_m_prev: &[f64],
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let q = store.param(&self.w_t).matvec(h_h_t);
        let r = store.param(&self.w_m).matvec(h_m_prev);
        let w_e = store.param(&self.w_e).values();
        let mut scores = Vec::with_capacity(h_p.len());
        let mut us = Vec::with_capacity(h_p.len());
        for pj in p_proj {
            let u: Vec<f64> = pj
                .iter()
                .zip(&q)
                .zip(&r)
                .map(|((a, b), c)| (a + b + c).tanh())
                .collect();
            scores.push(u.iter().zip(w_e).map(|(ui, wi)| ui * wi).sum());
            us.push(u);
        }
        let alpha = softmax(&scores).expect("premise is non-empty");
        let mut a = vec![0.0; self.d];
        for (w, hp) in alpha.iter().zip(h_p) {
            for (ak, hk) in a.iter_mut().zip(hp) {
                *ak += w * hk;
            }
        }
        (alpha, us, a)
    }

    pub fn project_premise(&self, store: &ParamStore, h_p: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w_s = store.param(&self.w_s);
        h_p.iter().map(|h| w_s.matvec(h)).collect()
    }

    /// Single decoding step on externally held state.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        p_proj: &[Vec<f64>],
        h_p: &[Vec<f64>],
        h_h_t: &[f64],
        prev: &LstmState,
    ) -> LstmState {
        let (_, _, a) = self.attend(store, p_proj, h_p, h_h_t, &prev.h);
        let mut x = a;
        x.extend_from_slice(h_h_t);
        self.inner.step(store, &x, prev).0
    }

    /// Run over all hypothesis states with an injected initial cell state.
    pub fn forward(
        &self,
        store: &ParamStore,
        h_p: &[Vec<f64>],
        h_h: &[Vec<f64>],
        init_c: &[f64],
    ) -> Result<(Vec<LstmState>, MlstmCache)> {
        if h_p.is_empty() || h_h.is_empty() {
            return Err(Error::Config(format!("mlstm {}: empty sequence", self.prefix)));
        }
        let p_proj = self.project_premise(store, h_p);
        let mut state = LstmState { h: vec![0.0; self.d], c: init_c.to_vec() };
        let mut states = Vec::with_capacity(h_h.len());
        let mut steps = Vec::with_capacity(h_h.len());
        for h_h_t in h_h {
            let (alpha, u, a) = self.attend(store, &p_proj, h_p, h_h_t, &state.h);
            let mut x = a;
            x.extend_from_slice(h_h_t);
            let (next, inner_cache) = self.inner.step(store, &x, &state);
            steps.push(MlstmStep {
                alpha,
                u,
                h_h: h_h_t.clone(),
                h_m_prev: state.h.clone(),
                inner: inner_cache,
            });
            states.push(next.clone());
            state = next;
        }
        Ok((states, MlstmCache { h_p: h_p.to_vec(), steps }))
    }

    /// Backward through attention and the inner LSTM.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlstmCache,
        d_out: &[Vec<f64>],
    ) -> MlstmBackward {
        let d = self.d;
        let m = cache.h_p.len();
        let n = cache.steps.len();
        assert_eq!(n, d_out.len());

        let mut inner_grads = self.inner.zero_local_grads();
        let mut d_h_p = vec![vec![0.0; d]; m];
        let mut d_h_h = vec![vec![0.0; d]; n];
        let mut d_s_sum = vec![vec![0.0; d]; m]; // sum over steps of score-input grads per j
        let mut dw_e = vec![0.0; d];
        let mut dw_t = Tensor::zeros(&[d, d]);
        let mut dw_m = Tensor::zeros(&[d, d]);

        let mut dh_next = vec![0.0; d];
        let mut dc_next = vec![0.0; d];
        {
            let inner_params = self.inner.params(store);
            let w_e = store.param(&self.w_e).values();
            let w_t = store.param(&self.w_t);
            let w_m = store.param(&self.w_m);
            for t in (0..n).rev() {
                let step = &cache.steps[t];
                let mut dh = d_out[t].clone();
                for (a, b) in dh.iter_mut().zip(&dh_next) {
                    *a += b;
                }
                let (dx, dh_prev_lstm, dc_prev) = self.inner.step_backward_with(
                    &inner_params,
                    &step.inner,
                    &dh,
                    &dc_next,
                    &mut inner_grads,
                );
                let (da, dhh_direct) = dx.split_at(d);
                for (a, b) in d_h_h[t].iter_mut().zip(dhh_direct) {
                    *a += b;
                }

                // Context a_t = sum_j alpha_j h_p_j.
                let mut d_alpha = vec![0.0; m];
                for j in 0..m {
                    d_alpha[j] = da.iter().zip(&cache.h_p[j]).map(|(x, y)| x * y).sum();
                    for (g, x) in d_h_p[j].iter_mut().zip(da) {
                        *g += step.alpha[j] * x;
                    }
                }
                // Softmax backward.
                let dot: f64 = step.alpha.iter().zip(&d_alpha).map(|(a, b)| a * b).sum();
                let mut ds_t_sum = vec![0.0; d];
                for j in 0..m {
                    let de = step.alpha[j] * (d_alpha[j] - dot);
                    let u = &step.u[j];
                    for k in 0..d {
                        dw_e[k] += de * u[k];
                        let ds = de * w_e[k] * (1.0 - u[k] * u[k]);
                        d_s_sum[j][k] += ds;
                        ds_t_sum[k] += ds;
                    }
                }
                dw_t.add_outer(&ds_t_sum, &step.h_h);
                dw_m.add_outer(&ds_t_sum, &step.h_m_prev);
                for (a, b) in d_h_h[t].iter_mut().zip(w_t.matvec_t(&ds_t_sum)) {
                    *a += b;
                }
                let dh_m_att = w_m.matvec_t(&ds_t_sum);

                dh_next = dh_prev_lstm;
                for (a, b) in dh_next.iter_mut().zip(dh_m_att) {
                    *a += b;
                }
                dc_next = dc_prev;
            }
        }

        // W_s h_p_j is shared across steps; fold the summed score grads once.
        let mut dw_s = Tensor::zeros(&[d, d]);
        {
            let w_s = store.param(&self.w_s);
            for j in 0..m {
                dw_s.add_outer(&d_s_sum[j], &cache.h_p[j]);
                for (a, b) in d_h_p[j].iter_mut().zip(w_s.matvec_t(&d_s_sum[j])) {
                    *a += b;
                }
            }
        }

        self.inner.apply_local_grads(store, &inner_grads);
        store.grad_mut(&self.w_s).add_slice(dw_s.values());
        store.grad_mut(&self.w_t).add_slice(dw_t.values());
        store.grad_mut(&self.w_m).add_slice(dw_m.values());
        store.grad_mut(&self.w_e).add_slice(&dw_e);

        MlstmBackward { d_h_p, d_h_h, d_c0: dc_next }
    }
}

/// Two-level hierarchical softmax: p(word) = p(class | h) * p(word | class, h).
///
/// Vocab ids are already frequency-ordered, so classes are the ceil(sqrt(V))
/// contiguous blocks of that ordering. A single-token loss touches only the
/// class layer and the target word's block.
#[derive(Debug, Clone)]
pub struct HierSoftmax {
    pub prefix: String,
    pub d_in: usize,
    pub vocab_size: usize,
    pub class_count: usize,
    pub block_size: usize,
}

impl HierSoftmax {
    pub fn new(prefix: &str, d_in: usize, vocab_size: usize) -> Result<HierSoftmax> {
        if vocab_size < 2 {
            return Err(Error::Config(format!("hierarchical softmax needs V >= 2, got {vocab_size}")));
        }
        let class_count = (vocab_size as f64).sqrt().ceil() as usize;
        let block_size = vocab_size.div_ceil(class_count);
        let hsm = HierSoftmax { prefix: prefix.to_string(), d_in, vocab_size, class_count, block_size };
        for c in 0..class_count {
            assert!(hsm.class_size(c) > 0, "empty hierarchical softmax class {c} for V={vocab_size}");
        }
        Ok(hsm)
    }

    pub fn word_class(&self, word: u32) -> (usize, usize) {
        let w = word as usize;
        (w / self.block_size, w % self.block_size)
    }

    pub fn class_size(&self, class: usize) -> usize {
        let start = class * self.block_size;
        self.block_size.min(self.vocab_size - start)
    }

    fn class_w(&self) -> String {
        format!("{}.class_w", self.prefix)
    }

    fn class_b(&self) -> String {
        format!("{}.class_b", self.prefix)
    }

    fn word_w(&self, class: usize) -> String {
        format!("{}.word_w.{class:04}", self.prefix)
    }

    fn word_b(&self, class: usize) -> String {
        format!("{}.word_b.{class:04}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let cw = self.class_w();
        store.insert(&cw, Tensor::glorot(&[self.class_count, self.d_in], sub_seed(seed, &cw)));
        store.insert(&self.class_b(), Tensor::zeros(&[self.class_count]));
        for c in 0..self.class_count {
            let ww = self.word_w(c);
            let size = self.class_size(c);
            store.insert(&ww, Tensor::glorot(&[size, self.d_in], sub_seed(seed, &ww)));
            store.insert(&self.word_b(c), Tensor::zeros(&[size]));
        }
    }

    fn class_logits(&self, store: &ParamStore, h: &[f64]) -> Vec<f64> {
        let mut l = store.param(&self.class_w()).matvec(h);
        for (a, b) in l.iter_mut().zip(store.param(&self.class_b()).values()) {
            *a += b;
        }
        l
    }

    fn word_logits(&self, store: &ParamStore, class: usize, h: &[f64]) -> Vec<f64> {
        let mut l = store.param(&self.word_w(class)).matvec(h);
        for (a, b) in l.iter_mut().zip(store.param(&self.word_b(class)).values()) {
            *a += b;
        }
        l
    }

    /// Full probability vector over the vocabulary.
    pub fn distribution(&self, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
        let pc = softmax(&self.class_logits(store, h))?;
        let mut out = Vec::with_capacity(self.vocab_size);
        for (c, &class_p) in pc.iter().enumerate() {
            let pw = softmax(&self.word_logits(store, c, h))?;
            out.extend(pw.into_iter().map(|p| p * class_p));
        }
        Ok(out)
    }

    /// Full log-probability vector over the vocabulary.
    pub fn log_distribution(&self, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
        let lc = log_softmax(&self.class_logits(store, h))?;
        let mut out = Vec::with_capacity(self.vocab_size);
        for (c, &class_lp) in lc.iter().enumerate() {
            let lw = log_softmax(&self.word_logits(store, c, h))?;
            out.extend(lw.into_iter().map(|lp| lp + class_lp));
        }
        Ok(out)
    }

    /// Log-probability of one target word, touching only the class layer and
    /// the target's block.
    pub fn log_prob(&self, store: &ParamStore, h: &[f64], target: u32) -> Result<f64> {
        if target as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "hsoftmax target {target} out of vocab (V={})",
                self.vocab_size
            )));
        }
        let (class, within) = self.word_class(target);
        let lc = log_softmax(&self.class_logits(store, h))?;
        let lw = log_softmax(&self.word_logits(store, class, h))?;
        Ok(lc[class] + lw[within])
    }

    /// Negative log-likelihood of the target plus its gradient. Accumulates
    /// parameter gradients scaled by `scale`; returns (nll, d_h * scale).
    pub fn nll_backward(
        &self,
        store: &mut ParamStore,
        h: &[f64],
        target: u32,
        scale: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if target as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "hsoftmax target {target} out of vocab (V={})",
                self.vocab_size
            )));
        }
        let (class, within) = self.word_class(target);
        let mut pc = softmax(&self.class_logits(store, h))?;
        let mut pw = softmax(&self.word_logits(store, class, h))?;
        let nll = -(pc[class].ln() + pw[within].ln());

        // d(nll)/d(logits) = p - onehot, then scale.
        pc[class] -= 1.0;
        pw[within] -= 1.0;
        pc.iter_mut().for_each(|v| *v *= scale);
        pw.iter_mut().for_each(|v| *v *= scale);

        let mut dh = store.param(&self.class_w()).matvec_t(&pc);
        for (a, b) in dh.iter_mut().zip(store.param(&self.word_w(class)).matvec_t(&pw)) {
            *a += b;
        }
        store.grad_mut(&self.class_w()).add_outer(&pc, h);
        store.grad_mut(&self.class_b()).add_slice(&pc);
        store.grad_mut(&self.word_w(class)).add_outer(&pw, h);
        store.grad_mut(&self.word_b(class)).add_slice(&pw);
        Ok((nll, dh))
    }
}
