use std::io::Write;

use rayon::prelude::*;

use crate::dataio::{PropertySchema, SolventRecord, N_PROPS};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::scalar::Scalar;
use crate::seqgen::{evaluation_item, MaskedBatch, TypeVocab};

/// Normalized prediction for every (solvent, property) pair under the
/// one-property-masked protocol; `None` where the property is missing.
fn one_masked_predictions<T: Scalar>(
    model: &Transformer<T>,
    schema: &PropertySchema,
    vocab: &TypeVocab,
    records: &[&SolventRecord],
) -> Result<Vec<[Option<(f64, f64)>; N_PROPS]>> {
    records
        .par_iter()
        .map(|r| {
            let mut items = Vec::new();
            let mut props = Vec::new();
            for p in 0..N_PROPS {
                if r.props[p].is_some() {
                    items.push(evaluation_item(r, schema, vocab, p)?);
                    props.push(p);
                }
            }
            let mut row = [None; N_PROPS];
            if items.is_empty() {
                return Ok(row);
            }
            let batch = MaskedBatch::from_items(&items)?;
            let out = model.infer(&batch)?;
            for (b, &p) in props.iter().enumerate() {
                let pred = out.item_prediction(model.config(), &batch, b, N_PROPS - 1);
                row[p] = Some((pred, batch.targets[b * N_PROPS + N_PROPS - 1]));
            }
            Ok(row)
        })
        .collect()
}

/// Mean squared normalized error over all (solvent, property) pairs of
/// complete solvents.
pub fn evaluate_validation<T: Scalar>(
    model: &Transformer<T>,
    schema: &PropertySchema,
    vocab: &TypeVocab,
    records: &[&SolventRecord],
) -> Result<f64> {
    if let Some(r) = records.iter().find(|r| !r.is_complete()) {
        return Err(Error::Validation(format!("validation solvent `{}` is incomplete", r.name)));
    }
    if records.is_empty() {
        return Err(Error::Validation("no validation solvents".into()));
    }
    let preds = one_masked_predictions(model, schema, vocab, records)?;
    let (mut acc, mut n) = (0.0, 0usize);
    for row in &preds {
        for (pred, target) in row.iter().flatten() {
            acc += (pred - target).powi(2);
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyError {
    pub property: String,
    /// Mean squared error in original units.
    pub mse: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestTable {
    pub rows: Vec<PropertyError>,
    /// Mean of the per-property errors.
    pub average: f64,
}

impl TestTable {
    /// Mean of present rows, skipping properties absent from every test solvent.
    pub fn from_rows(rows: Vec<PropertyError>) -> Self {
        let present: Vec<f64> = rows.iter().filter(|r| r.count > 0).map(|r| r.mse).collect();
        let average = present.iter().sum::<f64>() / present.len().max(1) as f64;
        Self { rows, average }
    }
}

/// Per-property test MSE in original units.
pub fn evaluate_test_table<T: Scalar>(
    model: &Transformer<T>,
    schema: &PropertySchema,
    vocab: &TypeVocab,
    records: &[&SolventRecord],
) -> Result<TestTable> {
    let preds = one_masked_predictions(model, schema, vocab, records)?;
    let rows = (0..N_PROPS)
        .map(|p| {
            let errs: Vec<f64> =
                preds.iter().filter_map(|row| row[p]).map(|(pr, tg)| ((pr - tg) * schema.std[p]).powi(2)).collect();
            PropertyError {
                property: schema.names[p].clone(),
                mse: if errs.is_empty() { f64::NAN } else { errs.iter().sum::<f64>() / errs.len() as f64 },
                count: errs.len(),
            }
        })
        .collect();
    Ok(TestTable::from_rows(rows))
}

pub fn write_test_table<W: Write>(table: &TestTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["property", "mse"])?;
    for r in &table.rows {
        w.write_record([r.property.clone(), r.mse.to_string()])?;
    }
    w.write_record(["Average MSE".to_string(), table.average.to_string()])?;
    w.flush()?;
    Ok(())
}
