//! Generated stand-ins for the solvent and reaction tables.
//!
//! Solvent properties are noisy linear functions of three latent factors, so
//! any one property is predictable from the others. Reaction outcomes are
//! smooth functions of the same factors and the conditions.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{ReactionRecord, SolventRecord, SolventTable, N_PROPS};
use crate::error::Result;
use crate::rng::derived;

pub const LATENT_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub types: usize,
    /// Noise standard deviation relative to each property's signal scale.
    pub noise: f64,
    /// Probability that a cell of a non-complete row is empty.
    pub missing_rate: f64,
    /// Fraction of rows kept complete.
    pub complete_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { rows: 200, types: 12, noise: 0.05, missing_rate: 0.15, complete_fraction: 0.7, seed: 7 }
    }
}

/// Solvent table plus the latent factors behind each row.
#[derive(Debug, Clone)]
pub struct SynthTable {
    pub table: SolventTable,
    pub latents: Vec<[f64; LATENT_DIM]>,
}

fn normal(rng: &mut crate::rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Functional group attached to the alkyl chain of each type.
const GROUPS: [&str; 12] = ["", "O", "N", "Cl", "C(=O)O", "C#N", "OC", "C(=O)C", "S", "F", "c1ccccc1", "N(C)C"];

/// Distinct SMILES for row `i`: a chain whose length grows with the row,
/// capped by a type-specific group.
pub fn synth_smiles(i: usize, types: usize) -> String {
    let ty = i % types;
    let chain = i / types + 1;
    let group = GROUPS[ty % GROUPS.len()];
    let extra = "O".repeat(ty / GROUPS.len());
    format!("{}{group}{extra}", "C".repeat(chain))
}

pub fn type_name(k: usize) -> String {
    format!("class_{:02}", k)
}

pub fn synth_solvents(cfg: &SynthConfig) -> Result<SynthTable> {
    let mut rng = derived(cfg.seed, &[1]);
    let loadings: Vec<[f64; LATENT_DIM]> = (0..N_PROPS).map(|_| std::array::from_fn(|_| normal(&mut rng))).collect();
    let scale: Vec<f64> = (0..N_PROPS).map(|p| [0.5, 2.0, 10.0, 0.3][p % 4]).collect();
    let offset: Vec<f64> = (0..N_PROPS).map(|p| 5.0 * (p as f64 - 5.5)).collect();
    let type_centers: Vec<[f64; LATENT_DIM]> =
        (0..cfg.types).map(|_| std::array::from_fn(|_| normal(&mut rng))).collect();
    let mut records = Vec::with_capacity(cfg.rows);
    let mut latents = Vec::with_capacity(cfg.rows);
    for i in 0..cfg.rows {
        let ty = i % cfg.types;
        let z: [f64; LATENT_DIM] = std::array::from_fn(|k| type_centers[ty][k] + 0.7 * normal(&mut rng));
        let complete = rng.random::<f64>() < cfg.complete_fraction;
        let mut props = [None; N_PROPS];
        for (p, slot) in props.iter_mut().enumerate() {
            let signal: f64 = loadings[p].iter().zip(&z).map(|(a, b)| a * b).sum();
            let v = offset[p] + scale[p] * (signal + cfg.noise * normal(&mut rng));
            let drop = !complete && rng.random::<f64>() < cfg.missing_rate;
            if !drop {
                *slot = Some(v);
            }
        }
        records.push(SolventRecord {
            name: format!("synth-{i:03}"),
            solvent_type: type_name(ty),
            smiles: Some(synth_smiles(i, cfg.types)),
            props,
        });
        latents.push(z);
    }
    Ok(SynthTable { table: SolventTable::from_records(records)?, latents })
}

/// Reaction table over the first `solvents` rows: single-solvent runs at
/// several conditions plus binary mixtures of consecutive solvent pairs.
pub fn synth_reactions(synth: &SynthTable, solvents: usize, seed: u64) -> Vec<ReactionRecord> {
    let mut rng = derived(seed, &[2]);
    let n = solvents.min(synth.table.len());
    let recs = synth.table.records();
    let outcome = |z: &[f64; LATENT_DIM], t: f64, tau: f64, rng: &mut crate::rng::Rng| {
        let drive = 0.8 * z[0] - 0.5 * z[1] + 0.04 * (t - 175.0) + 0.15 * (tau - 10.0);
        let conv = 1.0 / (1.0 + (-drive).exp());
        let split = 1.0 / (1.0 + (-(0.9 * z[2] + 0.3 * z[0])).exp());
        let jitter = |rng: &mut crate::rng::Rng| 0.005 * normal(rng);
        let sm = (1.0 - conv + jitter(rng)).clamp(0.0, 1.0);
        let p2 = (0.9 * conv * split + jitter(rng)).clamp(0.0, 1.0);
        let p3 = (0.9 * conv * (1.0 - split) + jitter(rng)).clamp(0.0, 1.0);
        [sm, p2, p3]
    };
    let mut out = Vec::new();
    let conditions = [(150.0, 5.0), (165.0, 8.0), (175.0, 10.0), (185.0, 12.0), (200.0, 15.0)];
    for i in 0..n {
        for &(t, tau) in &conditions {
            let [sm, p2, p3] = outcome(&synth.latents[i], t, tau, &mut rng);
            out.push(ReactionRecord {
                solvent_a: recs[i].name.clone(),
                solvent_b: None,
                frac_a: 1.0,
                temperature: t,
                residence_time: tau,
                sm,
                p2,
                p3,
            });
        }
    }
    for i in (0..n.saturating_sub(1)).step_by(2) {
        for &w in &[0.2, 0.4, 0.6, 0.8] {
            let z: [f64; LATENT_DIM] =
                std::array::from_fn(|k| w * synth.latents[i][k] + (1.0 - w) * synth.latents[i + 1][k]);
            for &(t, tau) in &conditions[1..4] {
                let [sm, p2, p3] = outcome(&z, t, tau, &mut rng);
                out.push(ReactionRecord {
                    solvent_a: recs[i].name.clone(),
                    solvent_b: Some(recs[i + 1].name.clone()),
                    frac_a: w,
                    temperature: t,
                    residence_time: tau,
                    sm,
                    p2,
                    p3,
                });
            }
        }
    }
    out
}
