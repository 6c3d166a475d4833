//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GRIDNER1"
//! u64 header length, then that many bytes of UTF-8 JSON (CheckpointHeader)
//! per parameter, in header order:
//!     u64 name length, name bytes (UTF-8)
//!     u64 element count
//!     element count × raw floats at the header's float_bits width
//! ```

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::diffcore::{Float, FLOAT_BITS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamGroup};

pub const MAGIC: &[u8; 8] = b"GRIDNER1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub float_bits: u32,
    pub model_config: ModelConfig,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub step: u64,
    pub dev_metric: Option<f64>,
    /// Parameter names and shapes in payload order.
    pub params: Vec<(String, Vec<usize>)>,
    /// Free-form run metadata, e.g. the training configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub dev_metric: Option<f64>,
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Flat values, aligned with `header.params`.
    pub tensors: Vec<Vec<Float>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocab, meta: &CheckpointMeta) -> Result<Self> {
        if vocab.len() != model.vocab_size {
            return Err(Error::contract(format!(
                "vocabulary of {} tokens for a model of {}",
                vocab.len(),
                model.vocab_size
            )));
        }
        let store = &model.params;
        Ok(Checkpoint {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                float_bits: FLOAT_BITS,
                model_config: model.config.clone(),
                vocab: vocab.clone(),
                vocab_hash: vocab.hash(),
                step: meta.step,
                dev_metric: meta.dev_metric,
                params: store
                    .ids()
                    .map(|id| (store.name(id).to_string(), store.tensor(id).shape.clone()))
                    .collect(),
                extra: meta.extra.clone(),
            },
            tensors: store.ids().map(|id| store.tensor(id).data.clone()).collect(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 16 + self.tensors.iter().map(Vec::len).sum::<usize>() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for ((name, _), data) in self.header.params.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let hlen = r.u64("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        if header.float_bits != FLOAT_BITS {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {}-bit floats but this build uses {FLOAT_BITS}-bit",
                header.float_bits
            )));
        }
        if header.vocab.hash() != header.vocab_hash {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        let width = std::mem::size_of::<Float>();
        let mut tensors = Vec::with_capacity(header.params.len());
        for (name, shape) in &header.params {
            let nlen = r.u64("name length")? as usize;
            let got = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::Checkpoint(format!("expected parameter '{name}', found '{got}'")));
            }
            let count = r.u64("element count")? as usize;
            if count != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has {count} elements for shape {shape:?}"
                )));
            }
            let raw = r.take(count.checked_mul(width).unwrap_or(usize::MAX), name)?;
            tensors.push(
                raw.chunks_exact(width)
                    .map(|c| Float::from_le_bytes(c.try_into().expect("chunk width")))
                    .collect(),
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Copies every tensor into `model` after checking that names and shapes
    /// match exactly. Nothing is written unless all of them match.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        let store = &model.params;
        let mut seen = HashSet::new();
        for (name, shape) in &self.header.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
            let want = &store.tensor(id).shape;
            if want != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {shape:?} in the checkpoint but {want:?} in the model"
                )));
            }
            seen.insert(name.as_str());
        }
        if let Some(id) = store.ids().find(|&id| !seen.contains(store.name(id))) {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' is missing from the checkpoint",
                store.name(id)
            )));
        }
        for ((name, shape), data) in self.header.params.iter().zip(&self.tensors) {
            model.params.set(name, shape, data.clone())?;
        }
        Ok(())
    }

    /// Copies only the encoder group (`encoder.*`) into `model`, leaving the
    /// heads as initialized. Returns the number of tensors copied. The
    /// vocabularies must agree, since token embeddings are part of the group.
    pub fn apply_encoder_to(&self, model: &mut Model) -> Result<usize> {
        if self.header.vocab.len() != model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint vocabulary has {} entries but the model has {}",
                self.header.vocab.len(),
                model.vocab_size
            )));
        }
        let stored: HashMap<&str, (&Vec<usize>, &Vec<Float>)> = self
            .header
            .params
            .iter()
            .zip(&self.tensors)
            .map(|((n, s), d)| (n.as_str(), (s, d)))
            .collect();
        let mut plan = Vec::new();
        for id in model.params.ids() {
            let name = model.params.name(id);
            if model.params.group(id) != ParamGroup::Encoder {
                continue;
            }
            let (shape, data) = stored
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter '{name}' is missing from the checkpoint")))?;
            let want = &model.params.tensor(id).shape;
            if want != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {shape:?} in the checkpoint but {want:?} in the model"
                )));
            }
            plan.push((name.to_string(), (*shape).clone(), (*data).clone()));
        }
        let n = plan.len();
        for (name, shape, data) in plan {
            model.params.set(&name, &shape, data)?;
        }
        Ok(n)
    }

    /// A model with the stored configuration and values.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::new(self.header.model_config.clone(), self.header.vocab.len(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("file truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocab, meta: &CheckpointMeta) -> Result<()> {
    let bytes = Checkpoint::from_model(model, vocab, meta)?.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
