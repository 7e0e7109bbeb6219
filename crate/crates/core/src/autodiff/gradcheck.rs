//! Central finite-difference verification of tape gradients.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Largest fragment the checker accepts.
pub const MAX_CHECK_VALUES: usize = 10_000;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
    pub failures: Vec<GradMismatch>,
    /// Conditioning notes from the tape. When present, mismatches are
    /// reported here rather than counted as failures.
    pub warnings: Vec<String>,
    pub conditioning: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare every parameter gradient of `loss_fn` against central differences
/// with step `h`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut loss_fn: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let n = store.num_values();
    if n >= MAX_CHECK_VALUES {
        return Err(Error::Shape(format!("grad_check on {n} values (limit {MAX_CHECK_VALUES})")));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = loss_fn(&mut tape, &bound)?;
    let warnings = tape.warnings().to_vec();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()]))
        .collect();
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        tolerance,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        warnings,
        conditioning: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for j in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()][j];
            let e = rel_error(a, numeric);
            report.checked += 1;
            let entry =
                || GradMismatch { param: store.get(id).name.clone(), index: j, analytic: a, numeric, rel_error: e };
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some(entry());
            }
            if e >= tolerance {
                if report.warnings.is_empty() {
                    report.failures.push(entry());
                } else {
                    report.conditioning.push(entry());
                }
            }
        }
    }
    Ok(report)
}
