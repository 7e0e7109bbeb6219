//! Circular (Morgan-style) substructure fingerprints.

use super::graph::MolGraph;
use crate::error::{Error, Result};
use crate::rng::hash_words;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_NBITS: usize = 2048;

/// Fixed-length bitset packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitFingerprint {
    words: Vec<u64>,
    nbits: usize,
    radius: usize,
}

impl BitFingerprint {
    pub fn empty(nbits: usize, radius: usize) -> Self {
        Self { words: vec![0; nbits.div_ceil(64)], nbits, radius }
    }

    pub fn from_indices(nbits: usize, indices: &[usize]) -> Result<Self> {
        let mut fp = Self::empty(nbits, 0);
        for &i in indices {
            if i >= nbits {
                return Err(Error::Validation(format!("bit {i} out of range for length {nbits}")));
            }
            fp.set(i);
        }
        Ok(fp)
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Set bit positions in increasing order.
    pub fn ones(&self) -> Vec<usize> {
        (0..self.nbits).filter(|&i| self.get(i)).collect()
    }
}

/// Every environment identifier up to `radius`, iteration by iteration.
pub fn environment_ids(mol: &MolGraph, radius: usize) -> Vec<Vec<u64>> {
    let mut ids: Vec<u64> = mol
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            hash_words(&[
                a.atomic_number as u64,
                mol.degree(i) as u64,
                a.charge as i64 as u64,
                a.hydrogens as u64,
                a.aromatic as u64,
                a.in_ring as u64,
            ])
        })
        .collect();
    let mut out = vec![ids.clone()];
    for r in 1..=radius {
        ids = (0..mol.len())
            .map(|i| {
                let mut env: Vec<(u64, u64)> = mol.neighbors(i).map(|(j, o)| (o.code(), ids[j])).collect();
                env.sort_unstable();
                let mut words = vec![r as u64, ids[i]];
                words.extend(env.into_iter().flat_map(|(b, n)| [b, n]));
                hash_words(&words)
            })
            .collect();
        out.push(ids.clone());
    }
    out
}

pub fn ecfp(mol: &MolGraph, radius: usize, nbits: usize) -> Result<BitFingerprint> {
    if nbits == 0 || !nbits.is_power_of_two() {
        return Err(Error::Validation(format!("fingerprint length {nbits} is not a power of two")));
    }
    let mut fp = BitFingerprint::empty(nbits, radius);
    for id in environment_ids(mol, radius).into_iter().flatten() {
        fp.set((id % nbits as u64) as usize);
    }
    Ok(fp)
}

pub fn tanimoto(a: &BitFingerprint, b: &BitFingerprint) -> Result<f64> {
    if a.nbits != b.nbits {
        return Err(Error::Shape(format!("tanimoto on lengths {} and {}", a.nbits, b.nbits)));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
