//! Permutation-augmented, masked training sequences and their batches.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataio::{PropertySchema, SolventRecord, N_PROPS};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const UNK_TYPE: usize = 0;

/// Solvent-type tokens; index 0 is reserved for unknown types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeVocab {
    types: Vec<String>,
}

impl TypeVocab {
    pub fn new(mut types: Vec<String>) -> Self {
        types.sort();
        types.dedup();
        Self { types }
    }

    /// Vocabulary size including the unknown token.
    pub fn len(&self) -> usize {
        self.types.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, ty: &str) -> usize {
        self.types.binary_search_by(|t| t.as_str().cmp(ty)).map(|i| i + 1).unwrap_or(UNK_TYPE)
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolventSequence {
    pub type_token: usize,
    /// `(property index, normalized value)`; `None` marks a missing value.
    pub items: Vec<(usize, Option<f64>)>,
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = [false; N_PROPS];
    perm.len() == N_PROPS && perm.iter().all(|&p| p < N_PROPS && !std::mem::replace(&mut seen[p], true))
}

pub fn build_sequence(
    record: &SolventRecord,
    schema: &PropertySchema,
    vocab: &TypeVocab,
    perm: &[usize],
) -> Result<SolventSequence> {
    if !is_permutation(perm) {
        return Err(Error::Validation(format!("{perm:?} is not a permutation of 0..{N_PROPS}")));
    }
    let items = perm.iter().map(|&p| (p, record.props[p].map(|v| schema.normalize(p, v)))).collect();
    Ok(SolventSequence { type_token: vocab.index(&record.solvent_type), items })
}

/// One model-ready example: a sequence plus per-position flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedItem {
    pub type_token: usize,
    pub props: [usize; N_PROPS],
    /// Normalized inputs; zero wherever missing.
    pub values: [f64; N_PROPS],
    pub masked: [bool; N_PROPS],
    pub missing: [bool; N_PROPS],
    /// Regression targets; NaN wherever not masked.
    pub targets: [f64; N_PROPS],
}

impl MaskedItem {
    /// Unmasked item; positions listed in `mask` are hidden and become targets.
    pub fn from_sequence(seq: &SolventSequence, mask: &[bool; N_PROPS]) -> Result<Self> {
        if seq.items.len() != N_PROPS {
            return Err(Error::Shape(format!("sequence of {} items", seq.items.len())));
        }
        let mut item = MaskedItem {
            type_token: seq.type_token,
            props: [0; N_PROPS],
            values: [0.0; N_PROPS],
            masked: [false; N_PROPS],
            missing: [false; N_PROPS],
            targets: [f64::NAN; N_PROPS],
        };
        for (i, &(p, v)) in seq.items.iter().enumerate() {
            item.props[i] = p;
            match v {
                Some(z) => {
                    item.values[i] = z;
                    if mask[i] {
                        item.masked[i] = true;
                        item.targets[i] = z;
                    }
                }
                None => {
                    if mask[i] {
                        return Err(Error::Validation(format!("position {i} is both masked and missing")));
                    }
                    item.missing[i] = true;
                }
            }
        }
        Ok(item)
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Draw a random ordering and mask present properties independently with
/// probability `mask_rate`, masking one at random if none were chosen.
pub fn sample_training_item(
    record: &SolventRecord,
    schema: &PropertySchema,
    vocab: &TypeVocab,
    rng: &mut Rng,
    mask_rate: f64,
) -> Result<MaskedItem> {
    if record.present_count() < 2 {
        return Err(Error::Validation(format!(
            "solvent `{}` has {} present properties, need at least 2",
            record.name,
            record.present_count()
        )));
    }
    let mut perm: Vec<usize> = (0..N_PROPS).collect();
    perm.shuffle(rng);
    let seq = build_sequence(record, schema, vocab, &perm)?;
    let mut mask = [false; N_PROPS];
    let present: Vec<usize> = (0..N_PROPS).filter(|&i| seq.items[i].1.is_some()).collect();
    for &i in &present {
        mask[i] = rng.random::<f64>() < mask_rate;
    }
    if !mask.iter().any(|&m| m) {
        mask[present[rng.random_range(0..present.len())]] = true;
    }
    MaskedItem::from_sequence(&seq, &mask)
}

/// Dense `[B, 12]` arrays for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub size: usize,
    pub type_tokens: Vec<usize>,
    pub props: Vec<usize>,
    pub values: Vec<f64>,
    pub masked: Vec<bool>,
    pub missing: Vec<bool>,
    pub targets: Vec<f64>,
}

impl MaskedBatch {
    pub fn from_items(items: &[MaskedItem]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Validation("cannot collate an empty batch".into()));
        }
        let n = items.len() * N_PROPS;
        let mut b = MaskedBatch {
            size: items.len(),
            type_tokens: Vec::with_capacity(items.len()),
            props: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            masked: Vec::with_capacity(n),
            missing: Vec::with_capacity(n),
            targets: Vec::with_capacity(n),
        };
        for it in items {
            b.type_tokens.push(it.type_token);
            b.props.extend_from_slice(&it.props);
            b.values.extend_from_slice(&it.values);
            b.masked.extend_from_slice(&it.masked);
            b.missing.extend_from_slice(&it.missing);
            b.targets.extend_from_slice(&it.targets);
        }
        Ok(b)
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Split items, in order, into batches of at most `batch_size`.
pub fn collate(items: &[MaskedItem], batch_size: usize) -> Result<Vec<MaskedBatch>> {
    if items.is_empty() {
        return Err(Error::Validation("cannot collate zero items".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    items.chunks(batch_size).map(MaskedBatch::from_items).collect()
}

/// Canonical-order item with property `target` moved to the last position
/// and masked.
pub fn evaluation_item(
    record: &SolventRecord,
    schema: &PropertySchema,
    vocab: &TypeVocab,
    target: usize,
) -> Result<MaskedItem> {
    if record.props[target].is_none() {
        return Err(Error::Validation(format!("solvent `{}` lacks property `{}`", record.name, schema.names[target])));
    }
    let mut perm: Vec<usize> = (0..N_PROPS).filter(|&p| p != target).collect();
    perm.push(target);
    let seq = build_sequence(record, schema, vocab, &perm)?;
    let mut mask = [false; N_PROPS];
    mask[N_PROPS - 1] = true;
    MaskedItem::from_sequence(&seq, &mask)
}

/// Unmasked canonical-order item with missing properties moved to the front,
/// so the last position always carries a present value.
pub fn fingerprint_item(record: &SolventRecord, schema: &PropertySchema, vocab: &TypeVocab) -> Result<MaskedItem> {
    if record.present_count() == 0 {
        return Err(Error::Validation(format!("solvent `{}` has no present properties", record.name)));
    }
    let (mut perm, present): (Vec<usize>, Vec<usize>) = (0..N_PROPS).partition(|&p| record.props[p].is_none());
    perm.extend(present);
    let seq = build_sequence(record, schema, vocab, &perm)?;
    MaskedItem::from_sequence(&seq, &[false; N_PROPS])
}
