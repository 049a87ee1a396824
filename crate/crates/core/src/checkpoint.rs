//! Bit-exact model persistence.
//!
//! File layout: magic `NLIGEN01`; u32 LE tensor count; per tensor a u16 LE
//! name length, the UTF-8 name, a u8 dtype (0 = f32, 1 = f64), a u8 rank,
//! rank u32 LE dims, then row-major little-endian values; finally a u32 LE
//! metadata length and a UTF-8 JSON object with kind, dims, vocab hash,
//! seed, and epochs trained. Writes are atomic (temp file + rename).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::{Classifier, Discriminator, GenDims, Generator, GeneratorKind, LatentTable};
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

const MAGIC_PREFIX: &[u8; 6] = b"NLIGEN";
const VERSION: &[u8; 2] = b"01";

/// Non-tensor state recorded alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub d: usize,
    pub z: usize,
    pub e: usize,
    pub vocab_hash: String,
    pub seed: u64,
    pub epochs_trained: usize,
}

pub fn hash_to_hex(hash: u64) -> String {
    format!("{hash:016x}")
}

// Tensor names reserved for non-parameter state.
const LATENT_TABLE: &str = "latent.table";
const GEN_SIGMA: &str = "gen.sigma";

/// Serialize named tensors plus metadata. With `f32_downcast` the values are
/// stored in 32 bits (lossy); otherwise bit-exact 64-bit.
pub fn save_raw(
    path: &Path,
    tensors: &[(String, Tensor)],
    meta: &CheckpointMeta,
    f32_downcast: bool,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC_PREFIX);
    buf.extend_from_slice(VERSION);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(if f32_downcast { 0 } else { 1 });
        buf.push(tensor.dims().len() as u8);
        for &dim in tensor.dims() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.values() {
            if f32_downcast {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let meta_json = serde_json::to_string(meta)?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_json.as_bytes());

    let tmp = path.with_extension("nlig.tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated { offset: self.offset as u64 });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read back every tensor and the metadata.
pub fn load_raw(path: &Path) -> Result<(Vec<(String, Tensor)>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..6] != MAGIC_PREFIX {
        return Err(Error::NotACheckpoint);
    }
    if &bytes[6..8] != VERSION {
        return Err(Error::CheckpointVersion {
            expected: String::from_utf8_lossy(VERSION).into_owned(),
            found: String::from_utf8_lossy(&bytes[6..8]).into_owned(),
        });
    }
    let mut r = Reader { bytes: &bytes, offset: 8 };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::CheckpointFormat(format!("tensor name not UTF-8: {e}")))?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let values: Vec<f64> = match dtype {
            0 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            1 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(Error::CheckpointFormat(format!("unknown dtype {other}"))),
        };
        tensors.push((name, Tensor::from_values(&dims, values)?));
    }
    let meta_len = r.u32()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)?;
    Ok((tensors, meta))
}

/// Any persistable model.
pub enum ModelRef<'a> {
    Classifier(&'a Classifier),
    Generator(&'a Generator),
    Discriminator(&'a Discriminator),
}

// Constructed once per load; variant size spread is irrelevant here.
#[allow(clippy::large_enum_variant)]
pub enum LoadedModel {
    Classifier(Classifier),
    Generator(Generator),
    Discriminator(Discriminator),
}

impl LoadedModel {
    pub fn into_classifier(self) -> Result<Classifier> {
        match self {
            LoadedModel::Classifier(c) => Ok(c),
            _ => Err(Error::CheckpointFormat("checkpoint does not hold a classifier".into())),
        }
    }

    pub fn into_generator(self) -> Result<Generator> {
        match self {
            LoadedModel::Generator(g) => Ok(g),
            _ => Err(Error::CheckpointFormat("checkpoint does not hold a generator".into())),
        }
    }

    pub fn into_discriminator(self) -> Result<Discriminator> {
        match self {
            LoadedModel::Discriminator(d) => Ok(d),
            _ => Err(Error::CheckpointFormat("checkpoint does not hold a discriminator".into())),
        }
    }
}

/// Persist a model with its metadata.
pub fn save_checkpoint(
    path: &Path,
    model: ModelRef<'_>,
    vocab_hash: u64,
    seed: u64,
    epochs_trained: usize,
    f32_downcast: bool,
) -> Result<()> {
    let (store, kind, d, z, e) = match &model {
        ModelRef::Classifier(c) => (&c.store, "classifier", c.d, 0, c.e),
        ModelRef::Generator(g) => (&g.store, g.kind.as_str(), g.dims.d, g.dims.z, g.dims.e),
        ModelRef::Discriminator(dm) => (&dm.store, "discriminator", dm.d, 0, dm.e),
    };
    let mut tensors: Vec<(String, Tensor)> =
        store.iter().map(|(name, entry)| (name.to_string(), entry.param.clone())).collect();
    if let ModelRef::Generator(g) = &model {
        if let Some(table) = &g.latent {
            tensors.push((LATENT_TABLE.to_string(), table.to_tensor()));
        }
        if let Some(sigma) = &g.gen_sigma {
            tensors.push((GEN_SIGMA.to_string(), Tensor::from_values(&[sigma.len()], sigma.clone())?));
        }
    }
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        d,
        z,
        e,
        vocab_hash: hash_to_hex(vocab_hash),
        seed,
        epochs_trained,
    };
    save_raw(path, &tensors, &meta, f32_downcast)
}

/// Load a model, verifying the recorded vocab hash when one is supplied.
pub fn load_checkpoint(
    path: &Path,
    expected_vocab_hash: Option<u64>,
) -> Result<(LoadedModel, CheckpointMeta)> {
    let (tensors, meta) = load_raw(path)?;
    if let Some(expected) = expected_vocab_hash {
        let expected_hex = hash_to_hex(expected);
        if meta.vocab_hash != expected_hex {
            return Err(Error::VocabHashMismatch {
                expected: meta.vocab_hash.clone(),
                found: expected_hex,
            });
        }
    }

    let mut latent: Option<LatentTable> = None;
    let mut gen_sigma: Option<Vec<f64>> = None;
    let mut store = ParamStore::new();
    let mut vocab_size = 0usize;
    for (name, tensor) in tensors {
        match name.as_str() {
            LATENT_TABLE => latent = Some(LatentTable::from_tensor(&tensor)),
            GEN_SIGMA => gen_sigma = Some(tensor.values().to_vec()),
            _ => {
                if name.starts_with("dec.hsm.word_b.") {
                    vocab_size += tensor.len();
                }
                store.insert(&name, tensor);
            }
        }
    }

    let model = match meta.kind.as_str() {
        "classifier" => LoadedModel::Classifier(Classifier::from_store(meta.e, meta.d, store)),
        "discriminator" => {
            LoadedModel::Discriminator(Discriminator::from_store(meta.e, meta.d, store))
        }
        kind => {
            let kind = GeneratorKind::parse(kind)?;
            let dims = GenDims { e: meta.e, d: meta.d, z: meta.z };
            if vocab_size < 2 {
                return Err(Error::CheckpointFormat(
                    "generator checkpoint has no hierarchical softmax blocks".into(),
                ));
            }
            LoadedModel::Generator(Generator::from_store(
                kind, dims, vocab_size, store, latent, gen_sigma,
            )?)
        }
    };
    Ok((model, meta))
}
