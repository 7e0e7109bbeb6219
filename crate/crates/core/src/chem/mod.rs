//! Molecular graphs, SMILES parsing and circular fingerprints.

mod ecfp;
mod graph;
mod smiles;

pub use ecfp::{ecfp, environment_ids, tanimoto, BitFingerprint, DEFAULT_NBITS, DEFAULT_RADIUS};
pub use graph::{Atom, Bond, BondOrder, MolGraph};
pub use smiles::{parse_smiles, parse_smiles_verbose, write_smiles, ParsedSmiles};
