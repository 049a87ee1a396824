//! Dense f64 math, named parameter storage with gradient slots, the Adam
//! optimizer, and finite-difference gradient checking.
//!
//! Everything trainable in this crate lives in a [`ParamStore`]; layers hold
//! parameter names and fetch tensors by name. Gradients are hand-derived per
//! layer, so the store doubles as the accumulation target for backprop.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n: usize = dims.iter().product();
        Tensor { dims: dims.to_vec(), values: vec![0.0; n] }
    }

    pub fn from_values(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() || dims.contains(&0) {
            return Err(Error::Shape {
                op: "Tensor::from_values".into(),
                expected: format!("{:?} ({} values)", dims, n),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Tensor { dims: dims.to_vec(), values })
    }

    /// Filled with draws from N(0, std), seeded.
    pub fn randn(dims: &[usize], std: f64, seed: u64) -> Self {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let values = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor { dims: dims.to_vec(), values }
    }

    /// Glorot-uniform init: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
    /// For matrices dims = [out, in]; for vectors fan_out = 1.
    pub fn glorot(dims: &[usize], seed: u64) -> Self {
        let (fan_out, fan_in) = match dims {
            [o, i] => (*o, *i),
            [i] => (1, *i),
            _ => panic!("glorot init expects rank 1 or 2, got {:?}", dims),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor { dims: dims.to_vec(), values }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Matrix (rank 2) times vector: out[i] = sum_j self[i][j] * x[j].
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.dims[0], self.dims[1]);
        debug_assert_eq!(cols, x.len());
        let mut out = vec![0.0; rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.values[i * cols..(i + 1) * cols];
            *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
        out
    }

    /// Transposed matvec: out[j] = sum_i self[i][j] * y[i].
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let (rows, cols) = (self.dims[0], self.dims[1]);
        debug_assert_eq!(rows, y.len());
        let mut out = vec![0.0; cols];
        for (i, &yi) in y.iter().enumerate().take(rows) {
            let row = &self.values[i * cols..(i + 1) * cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        out
    }

    /// Rank-1 update: self[i][j] += y[i] * x[j] (gradient outer product).
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        let cols = self.dims[1];
        debug_assert_eq!(self.dims[0], y.len());
        debug_assert_eq!(cols, x.len());
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let row = &mut self.values[i * cols..(i + 1) * cols];
            for (w, &xj) in row.iter_mut().zip(x) {
                *w += yi * xj;
            }
        }
    }

    pub fn add_slice(&mut self, x: &[f64]) {
        debug_assert_eq!(self.values.len(), x.len());
        for (v, &d) in self.values.iter_mut().zip(x) {
            *v += d;
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.dims[1];
        &self.values[i * cols..(i + 1) * cols]
    }
}

/// Adam hyperparameters. Defaults follow the usual suggested values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam config: {:?}", self)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub param: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

/// Named store of all trainable weights of one model, with matching gradient
/// and Adam-moment slots. Iteration is ordered by name so every pass over the
/// store is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, param: Tensor) {
        assert!(!self.entries.contains_key(name), "duplicate parameter name {name}");
        let dims = param.dims().to_vec();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                param,
                grad: Tensor::zeros(&dims),
                adam_m: Tensor::zeros(&dims),
                adam_v: Tensor::zeros(&dims),
            },
        );
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).param
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).param
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.param.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.fill(0.0);
        }
    }

    /// Add `other`'s gradients into this store's gradient slots. Both stores
    /// must hold the same parameters; used to reduce per-example gradients
    /// computed in parallel back into the training store.
    pub fn accumulate_grads(&mut self, other: &ParamStore) {
        for (name, entry) in &other.entries {
            let slot = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("grad accumulate: unknown parameter {name}"));
            slot.grad.add_slice(entry.grad.values());
        }
    }

    /// Copy parameter values from a snapshot (dims must match). Adam moments
    /// and step count are left untouched.
    pub fn load_params(&mut self, snapshot: &ParamStore) {
        for (name, entry) in &snapshot.entries {
            let slot = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("load_params: unknown parameter {name}"));
            slot.param = entry.param.clone();
        }
    }

    /// L2 norm over all gradient slots.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.grad.values().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients by a factor (used for global-norm clipping).
    pub fn scale_grads(&mut self, factor: f64) {
        for entry in self.entries.values_mut() {
            entry.grad.values_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }
}

/// Fully connected layer forward: out = weights * input + bias.
pub fn dense_forward(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    if weights.dims().len() != 2 || weights.dims()[1] != input.len() || weights.dims()[0] != bias.len()
    {
        return Err(Error::Shape {
            op: "dense_forward".into(),
            expected: format!("weights [out x {}], bias [out]", input.len()),
            got: format!("weights {:?}, bias [{}]", weights.dims(), bias.len()),
        });
    }
    let mut out = weights.matvec(input);
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
    Ok(out)
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Config("softmax of empty input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Log-softmax, same stabilization.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Config("log_softmax of empty input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&l| l - max - log_sum).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One Adam step with bias correction over every entry in the store.
/// Gradients are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for (name, entry) in &store.entries {
        if !entry.grad.is_finite() {
            return Err(Error::NonFiniteGrad { name: name.clone() });
        }
    }
    store.step_count += 1;
    let t = store.step_count;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for entry in store.entries.values_mut() {
        adam_update_slice(
            entry.param.values_mut(),
            entry.grad.values(),
            entry.adam_m.values_mut(),
            entry.adam_v.values_mut(),
            cfg,
            bc1,
            bc2,
        );
        entry.grad.fill(0.0);
    }
    Ok(())
}

/// Shared Adam update kernel; also used by the per-row latent-table updates.
pub(crate) fn adam_update_slice(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    bias_corr1: f64,
    bias_corr2: f64,
) {
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bias_corr1;
        let v_hat = v[i] / bias_corr2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Clip the global gradient norm to `max_norm`, returning the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
    norm
}

/// Central-difference gradient of `loss_fn` w.r.t. one named parameter.
///
/// `loss_fn` must be deterministic; it is evaluated at the unperturbed point
/// before and after the sweep and the two values must agree bit-exactly.
pub fn finite_diff_grad<F>(
    loss_fn: F,
    store: &mut ParamStore,
    param_name: &str,
    h: f64,
) -> Result<Tensor>
where
    F: Fn(&ParamStore) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite_diff_grad: h must be positive, got {h}")));
    }
    if !store.contains(param_name) {
        return Err(Error::Config(format!("finite_diff_grad: unknown parameter {param_name}")));
    }
    let baseline = loss_fn(store);
    let dims = store.param(param_name).dims().to_vec();
    let n = store.param(param_name).len();
    let mut grad = Tensor::zeros(&dims);
    for i in 0..n {
        let orig = store.param(param_name).values()[i];
        store.param_mut(param_name).values_mut()[i] = orig + h;
        let plus = loss_fn(store);
        store.param_mut(param_name).values_mut()[i] = orig - h;
        let minus = loss_fn(store);
        store.param_mut(param_name).values_mut()[i] = orig;
        grad.values_mut()[i] = (plus - minus) / (2.0 * h);
    }
    let check = loss_fn(store);
    if check.to_bits() != baseline.to_bits() {
        return Err(Error::Config(format!(
            "finite_diff_grad: loss_fn is non-deterministic ({baseline} vs {check})"
        )));
    }
    Ok(grad)
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Derive a named sub-seed from a run seed. Every random draw in the crate
/// flows from one run seed through these, so stage order and worker counts
/// never change the streams.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(name.as_bytes());
    fnv1a64(&bytes)
}

pub fn seeded_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, name))
}
