//! Binary checkpoint: magic, JSON header, little-endian f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, TrainConfig};
use crate::autodiff::Tensor;
use crate::dataio::{DataSplit, PropertySchema};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::scalar::Scalar;
use crate::seqgen::TypeVocab;

pub const MAGIC: &[u8; 8] = b"SODADE01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    schema: PropertySchema,
    vocab: TypeVocab,
    split: Option<DataSplit>,
    history: Vec<EpochRecord>,
    seed: u64,
    epoch: usize,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub schema: PropertySchema,
    pub vocab: TypeVocab,
    pub split: Option<DataSplit>,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    /// Epoch whose weights are stored (0 = untrained).
    pub epoch: usize,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &Transformer<T>,
        schema: &PropertySchema,
        vocab: &TypeVocab,
        seed: u64,
        epoch: usize,
    ) -> Self {
        Self {
            model: model.config().clone(),
            train: None,
            schema: schema.clone(),
            vocab: vocab.clone(),
            split: None,
            history: Vec::new(),
            seed,
            epoch,
            tensors: model.named_tensors().map(|(n, t)| (n.to_string(), t.cast())).collect(),
        }
    }

    pub fn transformer<T: Scalar>(&self) -> Result<Transformer<T>> {
        let tensors = self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        Transformer::from_named(self.model.clone(), tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let manifest = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            schema: self.schema.clone(),
            vocab: self.vocab.clone(),
            split: self.split.clone(),
            history: self.history.clone(),
            seed: self.seed,
            epoch: self.epoch,
            manifest,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing SODADE01 magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.version)));
        }
        let payload = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.manifest.len());
        let mut expected = 0;
        for e in &header.manifest {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(Error::Checkpoint(format!("tensor `{}` at offset {} not {expected}", e.name, e.offset)));
            }
            let raw = payload
                .get(e.offset * 4..(e.offset + n) * 4)
                .ok_or_else(|| Error::Checkpoint(format!("payload truncated in `{}`", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected += n;
        }
        if payload.len() != expected * 4 {
            return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len() - expected * 4)));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            schema: header.schema,
            vocab: header.vocab,
            split: header.split,
            history: header.history,
            seed: header.seed,
            epoch: header.epoch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash identifying these weights.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
