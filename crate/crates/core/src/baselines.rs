//! Reference predictors for held-out solvent properties: the training mean,
//! and exact Gaussian-process regression with a Tanimoto kernel over
//! circular fingerprints.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;

use crate::chem::{ecfp, parse_smiles, tanimoto, BitFingerprint, DEFAULT_NBITS, DEFAULT_RADIUS};
use crate::dataio::{DataSplit, PropertySchema, SolventRecord, SolventTable, N_PROPS};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_lower, solve_lower_transposed};
use crate::model::Transformer;
use crate::pretrain::{evaluate_test_table, PropertyError, TestTable};
use crate::scalar::Scalar;
use crate::seqgen::TypeVocab;

/// Candidate observation-noise variances.
pub const NOISE_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-4;

fn mse_row(name: &str, errs: &[f64]) -> PropertyError {
    PropertyError {
        property: name.to_string(),
        mse: if errs.is_empty() { f64::NAN } else { errs.iter().sum::<f64>() / errs.len() as f64 },
        count: errs.len(),
    }
}

/// Every test value predicted by the training mean, scored in original units.
pub fn avg_fit_predict(schema: &PropertySchema, test: &[&SolventRecord]) -> TestTable {
    let rows = (0..N_PROPS)
        .map(|p| {
            let errs: Vec<f64> = test.iter().filter_map(|r| r.props[p]).map(|v| (v - schema.mean[p]).powi(2)).collect();
            mse_row(&schema.names[p], &errs)
        })
        .collect();
    TestTable::from_rows(rows)
}

/// ECFP of a solvent's SMILES at the default radius and width.
pub fn solvent_fingerprint(record: &SolventRecord) -> Result<BitFingerprint> {
    let smiles = record
        .smiles
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("solvent `{}` has no SMILES", record.name)))?;
    ecfp(&parse_smiles(smiles)?, DEFAULT_RADIUS, DEFAULT_NBITS)
}

/// Row-major Tanimoto similarity matrix.
pub fn tanimoto_gram(fps: &[BitFingerprint]) -> Result<Vec<f64>> {
    let n = fps.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = tanimoto(&fps[i], &fps[j])?;
            k[i * n + j] = s;
            k[j * n + i] = s;
        }
    }
    Ok(k)
}

/// Exact GP posterior for one target vector at a fixed noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct GpFit {
    pub n: usize,
    pub noise: f64,
    /// Diagonal jitter needed for the factorization (0 if none).
    pub jitter: f64,
    /// Lower Cholesky factor of `K + (σ² + jitter)I`.
    pub chol: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lml: f64,
}

/// `−½yᵀα − Σ log L_ii − (n/2) log 2π`.
pub fn log_marginal_likelihood(chol: &[f64], n: usize, y: &[f64], alpha: &[f64]) -> f64 {
    let fit: f64 = y.iter().zip(alpha).map(|(a, b)| a * b).sum();
    let logdet: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
    -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * PI).ln()
}

impl GpFit {
    /// Factor `gram + σ²I`, escalating diagonal jitter tenfold from
    /// `JITTER_START` up to `JITTER_MAX` when needed.
    pub fn fit(gram: &[f64], n: usize, y: &[f64], noise: f64) -> Result<Self> {
        if n < 2 || gram.len() != n * n || y.len() != n {
            return Err(Error::Shape(format!("GP fit on {n} points with {} targets", y.len())));
        }
        let mut jitter = 0.0;
        loop {
            let mut a = gram.to_vec();
            for i in 0..n {
                a[i * n + i] += noise + jitter;
            }
            match cholesky(&a, n) {
                Ok(chol) => {
                    let alpha = solve_lower_transposed(&chol, n, &solve_lower(&chol, n, y));
                    let lml = log_marginal_likelihood(&chol, n, y, &alpha);
                    return Ok(Self { n, noise, jitter, chol, alpha, lml });
                }
                Err(e) if jitter >= JITTER_MAX => {
                    return Err(Error::Numeric(format!("GP kernel not positive definite at jitter {jitter:e}: {e}")))
                }
                Err(_) => jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 },
            }
        }
    }

    /// Posterior mean and variance given test-train similarities and the
    /// test self-similarity.
    pub fn predict(&self, k_star: &[f64], k_ss: f64) -> (f64, f64) {
        let mean = k_star.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = solve_lower(&self.chol, self.n, k_star);
        let var = k_ss - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var)
    }
}

/// Fit with the noise level of highest marginal likelihood.
pub fn fit_best_noise(gram: &[f64], n: usize, y: &[f64]) -> Result<GpFit> {
    let mut best: Option<GpFit> = None;
    for &noise in &NOISE_GRID {
        let f = GpFit::fit(gram, n, y, noise)?;
        if best.as_ref().is_none_or(|b| f.lml > b.lml) {
            best = Some(f);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[derive(Debug, Clone)]
pub struct GpProperty {
    /// Training rows with a present target.
    pub rows: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub fit: GpFit,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub train: Vec<BitFingerprint>,
    pub props: Vec<GpProperty>,
}

/// One GP per property over the rows where it is present; targets are
/// z-normalized with the statistics of those rows.
pub fn gp_fit(train: Vec<BitFingerprint>, targets: &[[Option<f64>; N_PROPS]]) -> Result<GpModel> {
    if train.len() != targets.len() {
        return Err(Error::Shape(format!("{} fingerprints for {} target rows", train.len(), targets.len())));
    }
    let gram = tanimoto_gram(&train)?;
    let n_all = train.len();
    let props = (0..N_PROPS)
        .into_par_iter()
        .map(|p| {
            let rows: Vec<usize> = (0..n_all).filter(|&i| targets[i][p].is_some()).collect();
            let n = rows.len();
            if n < 2 {
                return Err(Error::Validation(format!("property {p} has {n} training values; GP needs 2")));
            }
            let raw: Vec<f64> = rows.iter().map(|&i| targets[i][p].unwrap()).collect();
            let mean = raw.iter().sum::<f64>() / n as f64;
            let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            let y: Vec<f64> = raw.iter().map(|v| (v - mean) / std).collect();
            let gram = &gram;
            let sub: Vec<f64> = rows.iter().flat_map(|&i| rows.iter().map(move |&j| gram[i * n_all + j])).collect();
            Ok(GpProperty { rows, mean, std, fit: fit_best_noise(&sub, n, &y)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GpModel { train, props })
}

impl GpModel {
    /// Per-property posterior mean and variance in original units; the
    /// variance is clipped at zero.
    pub fn predict(&self, fp: &BitFingerprint) -> Result<Vec<(f64, f64)>> {
        let sims: Vec<f64> = self.train.iter().map(|t| tanimoto(fp, t)).collect::<Result<_>>()?;
        let k_ss = tanimoto(fp, fp)?;
        Ok(self
            .props
            .iter()
            .map(|g| {
                let k_star: Vec<f64> = g.rows.iter().map(|&i| sims[i]).collect();
                let (m, v) = g.fit.predict(&k_star, k_ss);
                (g.mean + g.std * m, v.max(0.0) * g.std * g.std)
            })
            .collect())
    }
}

/// GP trained on `train` records and scored on `test` in original units.
/// Training solvents without SMILES are skipped.
pub fn gp_fit_predict(train: &[&SolventRecord], test: &[&SolventRecord]) -> Result<TestTable> {
    let mut fps = Vec::new();
    let mut targets = Vec::new();
    for r in train {
        match solvent_fingerprint(r) {
            Ok(fp) => {
                fps.push(fp);
                targets.push(r.props);
            }
            Err(Error::Validation(m)) => log::warn!("GP skips training solvent: {m}"),
            Err(e) => return Err(e),
        }
    }
    let model = gp_fit(fps, &targets)?;
    let preds: Vec<Vec<(f64, f64)>> =
        test.iter().map(|r| model.predict(&solvent_fingerprint(r)?)).collect::<Result<_>>()?;
    let rows = (0..N_PROPS)
        .map(|p| {
            let errs: Vec<f64> =
                test.iter().zip(&preds).filter_map(|(r, pr)| r.props[p].map(|v| (v - pr[p].0).powi(2))).collect();
            mse_row(crate::dataio::PROPERTY_NAMES[p], &errs)
        })
        .collect();
    Ok(TestTable::from_rows(rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub avg: TestTable,
    pub gp: TestTable,
    pub model: TestTable,
}

/// Held-out property errors of the training mean, the GP (fitted on
/// training and validation solvents) and the pretrained model.
pub fn compare_on_test<T: Scalar>(
    table: &SolventTable,
    split: &DataSplit,
    model: &Transformer<T>,
    schema: &PropertySchema,
    vocab: &TypeVocab,
) -> Result<Comparison> {
    let test: Vec<&SolventRecord> = split.test_ids.iter().map(|id| table.require(id)).collect::<Result<_>>()?;
    let gp_train: Vec<&SolventRecord> =
        split.train_and_val(table).iter().map(|id| table.require(id)).collect::<Result<_>>()?;
    Ok(Comparison {
        avg: avg_fit_predict(schema, &test),
        gp: gp_fit_predict(&gp_train, &test)?,
        model: evaluate_test_table(model, schema, vocab, &test)?,
    })
}

pub fn write_comparison<W: Write>(c: &Comparison, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["property", "avg_mse", "gp_mse", "sodade_mse"])?;
    for ((a, g), m) in c.avg.rows.iter().zip(&c.gp.rows).zip(&c.model.rows) {
        w.write_record([a.property.clone(), a.mse.to_string(), g.mse.to_string(), m.mse.to_string()])?;
    }
    w.write_record([
        "Average MSE".to_string(),
        c.avg.average.to_string(),
        c.gp.average.to_string(),
        c.model.average.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
