//! Learned solvent fingerprints, mixtures, PCA projection and embedding
//! trajectories.

use std::io::Write;

use rayon::prelude::*;

use crate::dataio::{PropertySchema, ReactionRecord, SolventRecord};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::model::Transformer;
use crate::pretrain::Checkpoint;
use crate::scalar::Scalar;
use crate::seqgen::{fingerprint_item, MaskedBatch, TypeVocab};

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub solvent: String,
    pub vector: Vec<f64>,
    /// Id of the checkpoint that produced the vector.
    pub source: String,
}

/// A trained backbone with the schema and vocabulary it was trained under.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub model: Transformer<T>,
    pub schema: PropertySchema,
    pub vocab: TypeVocab,
    pub source: String,
}

impl<T: Scalar> Encoder<T> {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self { model: ck.transformer()?, schema: ck.schema.clone(), vocab: ck.vocab.clone(), source: ck.id() })
    }

    pub fn dim(&self) -> usize {
        self.model.config().d_model
    }

    /// Final hidden state at the last position of the unmasked sequence.
    pub fn extract(&self, record: &SolventRecord) -> Result<Fingerprint> {
        let item = fingerprint_item(record, &self.schema, &self.vocab)?;
        let batch = MaskedBatch::from_items(&[item])?;
        let out = self.model.infer(&batch)?;
        let vector: Vec<f64> = out.last_hidden(self.model.config(), 0).iter().map(|x| x.as_f64()).collect();
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite fingerprint for `{}`", record.name)));
        }
        Ok(Fingerprint { solvent: record.name.clone(), vector, source: self.source.clone() })
    }

    pub fn extract_all(&self, records: &[&SolventRecord]) -> Result<Vec<Fingerprint>> {
        records.par_iter().map(|r| self.extract(r)).collect()
    }
}

/// `w·a + (1−w)·b`.
pub fn mix(a: &Fingerprint, b: &Fingerprint, w: f64) -> Result<Fingerprint> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Validation(format!("mixture weight {w} outside [0, 1]")));
    }
    if a.source != b.source {
        return Err(Error::Validation(format!("fingerprints from checkpoints {} and {}", a.source, b.source)));
    }
    if a.vector.len() != b.vector.len() {
        return Err(Error::Shape(format!("fingerprint lengths {} and {}", a.vector.len(), b.vector.len())));
    }
    let vector = a.vector.iter().zip(&b.vector).map(|(x, y)| w * x + (1.0 - w) * y).collect();
    Ok(Fingerprint { solvent: format!("{}|{}|{w}", a.solvent, b.solvent), vector, source: a.source.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// One unit-length row per component.
    pub components: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
}

impl PcaProjection {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((ci, xi), mi)| ci * (xi - mi)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &z) in self.components.iter().zip(coords) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += z * ci;
            }
        }
        out
    }
}

/// Principal axes of the centered rows, with each component's
/// largest-magnitude entry made positive. Returns the projection and the
/// coordinates of every row.
pub fn pca_fit_project(data: &[Vec<f64>], k: usize) -> Result<(PcaProjection, Vec<Vec<f64>>)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::Validation(format!("PCA needs at least 2 rows, got {n}")));
    }
    let d = data[0].len();
    if data.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("PCA rows differ in length".into()));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::Validation(format!("cannot take {k} components from {n} rows of width {d}")));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in data {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov, d)?;
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for (val, v) in vals.into_iter().zip(vecs.chunks(d)).take(k) {
        let mut v = v.to_vec();
        let lead = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(if total > 0.0 { (val.max(0.0) / total).min(1.0) } else { 0.0 });
    }
    let proj = PcaProjection { mean, components, explained };
    let coords = data.iter().map(|r| proj.project(r)).collect();
    Ok((proj, coords))
}

/// `(p2 + p3) / (p2 + p3 + sm)`.
pub fn conversion_efficiency(p2: f64, p3: f64, sm: f64) -> Result<f64> {
    if [p2, p3, sm].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!("quantities must be finite and non-negative: {p2}, {p3}, {sm}")));
    }
    let total = p2 + p3 + sm;
    if total == 0.0 {
        return Err(Error::Numeric("conversion efficiency undefined when all quantities are zero".into()));
    }
    Ok((p2 + p3) / total)
}

/// Efficiency from the largest product yields and smallest residual
/// starting material over a solvent's single-solvent runs.
pub fn solvent_efficiency(reactions: &[ReactionRecord], solvent: &str) -> Result<Option<f64>> {
    let runs: Vec<&ReactionRecord> = reactions.iter().filter(|r| r.is_single() && r.solvent_a == solvent).collect();
    if runs.is_empty() {
        return Ok(None);
    }
    let p2 = runs.iter().map(|r| r.p2).fold(f64::NEG_INFINITY, f64::max);
    let p3 = runs.iter().map(|r| r.p3).fold(f64::NEG_INFINITY, f64::max);
    let sm = runs.iter().map(|r| r.sm).fold(f64::INFINITY, f64::min);
    conversion_efficiency(p2, p3, sm).map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    /// Training epoch of the snapshot.
    pub snapshot: usize,
    pub solvent: String,
    pub pc1: f64,
    pub pc2: f64,
    pub efficiency: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub projection: PcaProjection,
    pub rows: Vec<TrajectoryRow>,
}

/// Fingerprints of `solvents` under every snapshot, projected onto one PCA
/// basis fitted to all of them together.
pub fn embedding_trajectory(
    snapshots: &[Checkpoint],
    solvents: &[&SolventRecord],
    reactions: &[ReactionRecord],
) -> Result<Trajectory> {
    if snapshots.is_empty() {
        return Err(Error::Validation("no snapshots".into()));
    }
    let mut pooled = Vec::with_capacity(snapshots.len() * solvents.len());
    for ck in snapshots {
        let enc = Encoder::<f32>::from_checkpoint(ck)?;
        pooled.extend(enc.extract_all(solvents)?.into_iter().map(|f| f.vector));
    }
    let (projection, coords) = pca_fit_project(&pooled, 2)?;
    let eff: Vec<Option<f64>> =
        solvents.iter().map(|s| solvent_efficiency(reactions, &s.name)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(coords.len());
    for (i, c) in coords.iter().enumerate() {
        let (k, s) = (i / solvents.len(), i % solvents.len());
        rows.push(TrajectoryRow {
            snapshot: snapshots[k].epoch,
            solvent: solvents[s].name.clone(),
            pc1: c[0],
            pc2: c[1],
            efficiency: eff[s],
        });
    }
    Ok(Trajectory { projection, rows })
}

pub fn write_trajectory<W: Write>(rows: &[TrajectoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["snapshot", "solvent", "pc1", "pc2", "efficiency"])?;
    for r in rows {
        let eff = r.efficiency.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([r.snapshot.to_string(), r.solvent.clone(), r.pc1.to_string(), r.pc2.to_string(), eff])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fingerprints<W: Write>(fps: &[Fingerprint], out: W) -> Result<()> {
    let dim = fps.first().map_or(0, |f| f.vector.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["solvent".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for f in fps {
        if f.vector.len() != dim {
            return Err(Error::Shape(format!("fingerprint `{}` has width {}", f.solvent, f.vector.len())));
        }
        let mut row = vec![f.solvent.clone()];
        row.extend(f.vector.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
