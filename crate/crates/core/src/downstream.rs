//! Yield prediction heads on top of learned fingerprints, with
//! leave-one-solvent-out and leave-one-pair-out benchmarks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dataio::{ReactionRecord, SolventTable};
use crate::error::{Error, Result};
use crate::fingerprint::Encoder;
use crate::rng::{derived, Rng};
use crate::scalar::Scalar;
use crate::seqgen::{fingerprint_item, MaskedBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Fingerprint MLP widths, input first.
    pub mlp1: Vec<usize>,
    /// Output MLP widths; input is the fingerprint MLP output plus the two
    /// reaction conditions.
    pub mlp2: Vec<usize>,
    pub lr: f64,
    /// Backbone learning-rate multiplier when fine-tuning.
    pub backbone_lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Softmax the three outputs onto the simplex.
    pub simplex: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mlp1: vec![64, 64, 32],
            mlp2: vec![34, 32, 3],
            lr: 1e-3,
            backbone_lr_scale: 0.1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            simplex: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mlp1.len() < 2 || self.mlp2.len() < 2 {
            return bad("each MLP needs at least an input and an output width".into());
        }
        if self.mlp1.iter().chain(&self.mlp2).any(|&w| w == 0) {
            return bad("MLP widths must be positive".into());
        }
        if self.mlp2[0] != self.mlp1[self.mlp1.len() - 1] + 2 {
            return bad(format!("mlp2 input {} must equal mlp1 output + 2", self.mlp2[0]));
        }
        if self.mlp2[self.mlp2.len() - 1] != 3 {
            return bad("mlp2 must end in 3 outputs".into());
        }
        if !(self.lr > 0.0) || !(self.backbone_lr_scale >= 0.0) {
            return bad("learning rates must be non-negative and the head rate positive".into());
        }
        if self.batch_size == 0 {
            return bad("head batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Single,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Frozen,
    Finetuned,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Single => "single",
            Task::Full => "full",
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Frozen => "frozen",
            Mode::Finetuned => "finetuned",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Task::Single),
            "full" => Ok(Task::Full),
            _ => Err(Error::Config(format!("unknown task `{s}` (single|full)"))),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Mode::Frozen),
            "finetune" | "finetuned" => Ok(Mode::Finetuned),
            _ => Err(Error::Config(format!("unknown mode `{s}` (frozen|finetune)"))),
        }
    }
}

/// Two-stage MLP: fingerprint MLP, then conditions appended, then output MLP.
#[derive(Debug, Clone)]
pub struct Head<T> {
    pub config: HeadConfig,
    pub store: ParamStore<T>,
    mlp1: Vec<(ParamId, ParamId)>,
    mlp2: Vec<(ParamId, ParamId)>,
}

fn add_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    widths: &[usize],
    rng: &mut Rng,
) -> Vec<(ParamId, ParamId)> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let wt =
                store.add(format!("{prefix}.{i}.w"), Tensor::randn(&[w[0], w[1]], 1.0 / (w[0] as f64).sqrt(), rng));
            let b = store.add(format!("{prefix}.{i}.b"), Tensor::zeros(&[w[1]]));
            (wt, b)
        })
        .collect()
}

impl<T: Scalar> Head<T> {
    pub fn new(config: &HeadConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mlp1 = add_mlp(&mut store, "mlp1", &config.mlp1, rng);
        let mlp2 = add_mlp(&mut store, "mlp2", &config.mlp2, rng);
        Ok(Self { config: config.clone(), store, mlp1, mlp2 })
    }

    /// `fp[R, mlp1[0]]`, `cond[R, 2]` → `[R, 3]`.
    pub fn forward(&self, t: &mut Tape<T>, p: &Bound, fp: Var, cond: Var) -> Result<Var> {
        let mut h = fp;
        for &(w, b) in &self.mlp1 {
            h = t.linear(h, p.get(w), p.get(b))?;
            h = t.gelu(h);
        }
        h = t.concat(&[h, cond], 1)?;
        for (i, &(w, b)) in self.mlp2.iter().enumerate() {
            h = t.linear(h, p.get(w), p.get(b))?;
            if i + 1 < self.mlp2.len() {
                h = t.gelu(h);
            }
        }
        Ok(if self.config.simplex { t.softmax(h) } else { h })
    }

    /// Zero the last layer so every raw output is 0.
    pub fn zero_output(&mut self) {
        let &(w, b) = self.mlp2.last().expect("validated");
        for id in [w, b] {
            self.store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// z-scores for temperature and residence time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionScaler {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl ConditionScaler {
    pub fn fit(records: &[&ReactionRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("no reactions to fit condition scaling".into()));
        }
        let n = records.len() as f64;
        let cols = [|r: &ReactionRecord| r.temperature, |r: &ReactionRecord| r.residence_time];
        let mut mean = [0.0; 2];
        let mut std = [1.0; 2];
        for (k, f) in cols.iter().enumerate() {
            mean[k] = records.iter().map(|r| f(r)).sum::<f64>() / n;
            let var = records.iter().map(|r| (f(r) - mean[k]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                std[k] = var.sqrt();
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, r: &ReactionRecord) -> [f64; 2] {
        [(r.temperature - self.mean[0]) / self.std[0], (r.residence_time - self.mean[1]) / self.std[1]]
    }
}

/// Solvents of a reaction with their mixture weights.
fn components(r: &ReactionRecord) -> Vec<(&str, f64)> {
    match &r.solvent_b {
        None => vec![(r.solvent_a.as_str(), 1.0)],
        Some(b) => vec![(r.solvent_a.as_str(), r.frac_a), (b.as_str(), 1.0 - r.frac_a)],
    }
}

/// Batch tensors: mixed fingerprints `[R, d]` and scaled conditions `[R, 2]`.
/// Fingerprints come from the backbone on the tape when `live` is given,
/// otherwise from `cache`.
fn head_inputs<T: Scalar>(
    t: &mut Tape<T>,
    cache: &HashMap<String, Vec<f64>>,
    live: Option<(&Encoder<T>, &Bound, &SolventTable)>,
    recs: &[&ReactionRecord],
    scaler: &ConditionScaler,
) -> Result<(Var, Var)> {
    let names: Vec<&str> = recs
        .iter()
        .flat_map(|r| components(r).into_iter().map(|(n, _)| n))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col: HashMap<&str, usize> = names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut mixing = vec![0.0; recs.len() * names.len()];
    let mut cond = Vec::with_capacity(recs.len() * 2);
    for (i, r) in recs.iter().enumerate() {
        for (n, w) in components(r) {
            mixing[i * names.len() + col[n]] += w;
        }
        cond.extend(scaler.apply(r));
    }
    let fps = match live {
        Some((enc, bound, table)) => {
            let items = names
                .iter()
                .map(|n| fingerprint_item(table.require(n)?, &enc.schema, &enc.vocab))
                .collect::<Result<Vec<_>>>()?;
            let batch = MaskedBatch::from_items(&items)?;
            let fwd = enc.model.layout.forward(t, bound, &batch, None)?;
            let (l, d) = (enc.model.config().seq_len(), enc.model.config().d_model);
            let flat = t.reshape(fwd.hidden, &[names.len() * l, d])?;
            let rows: Vec<usize> = (0..names.len()).map(|s| s * l + l - 1).collect();
            t.gather_rows(flat, &rows)?
        }
        None => {
            let mut data = Vec::new();
            for n in &names {
                let v = cache.get(*n).ok_or_else(|| Error::Resolution(vec![n.to_string()]))?;
                data.extend_from_slice(v);
            }
            let d = data.len() / names.len();
            t.constant(Tensor::from_f64(&[names.len(), d], &data)?)
        }
    };
    let m = t.constant(Tensor::from_f64(&[recs.len(), names.len()], &mixing)?);
    let x = t.matmul(m, fps)?;
    let c = t.constant(Tensor::from_f64(&[recs.len(), 2], &cond)?);
    Ok((x, c))
}

/// Trained head plus the backbone that feeds it.
#[derive(Debug, Clone)]
pub struct YieldModel<T> {
    pub encoder: Encoder<T>,
    pub head: Head<T>,
    pub scaler: ConditionScaler,
}

impl<T: Scalar> YieldModel<T> {
    fn fingerprints(&self, table: &SolventTable, recs: &[&ReactionRecord]) -> Result<HashMap<String, Vec<f64>>> {
        let mut names: BTreeSet<&str> = BTreeSet::new();
        for r in recs {
            names.extend(components(r).into_iter().map(|(n, _)| n));
        }
        let missing: Vec<String> = names.iter().filter(|n| table.get(n).is_none()).map(|n| n.to_string()).collect();
        if !missing.is_empty() {
            return Err(Error::Resolution(missing));
        }
        let names: Vec<&str> = names.into_iter().collect();
        names.par_iter().map(|n| Ok((n.to_string(), self.encoder.extract(table.require(n)?)?.vector))).collect()
    }

    /// Unclamped outputs for each record.
    pub fn predict_raw(&self, table: &SolventTable, recs: &[&ReactionRecord]) -> Result<Vec<[f64; 3]>> {
        let cache = self.fingerprints(table, recs)?;
        self.predict_cached(&cache, recs)
    }

    fn predict_cached(&self, cache: &HashMap<String, Vec<f64>>, recs: &[&ReactionRecord]) -> Result<Vec<[f64; 3]>> {
        if recs.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::new();
        let p = self.head.store.bind(&mut t);
        let (x, c) = head_inputs::<T>(&mut t, cache, None, recs, &self.scaler)?;
        let out = self.head.forward(&mut t, &p, x, c)?;
        Ok(t.value(out).data().chunks(3).map(|o| [o[0].as_f64(), o[1].as_f64(), o[2].as_f64()]).collect())
    }

    /// Outputs clamped to `[0, 1]`.
    pub fn predict(&self, table: &SolventTable, recs: &[&ReactionRecord]) -> Result<Vec<[f64; 3]>> {
        Ok(self.predict_raw(table, recs)?.into_iter().map(|o| o.map(|v| v.clamp(0.0, 1.0))).collect())
    }
}

/// Single-record prediction, clamped for reporting.
pub fn predict_yield<T: Scalar>(
    model: &YieldModel<T>,
    table: &SolventTable,
    record: &ReactionRecord,
) -> Result<[f64; 3]> {
    Ok(model.predict(table, &[record])?[0])
}

const HEAD_STREAM: u64 = 0x48454144; // "HEAD"
const SHUFFLE_STREAM: u64 = 0x53485546; // "SHUF"

/// Train a head (and, when fine-tuning, the backbone) on `train`.
/// `fold` keys the seeded streams.
pub fn train_head<T: Scalar>(
    encoder: &Encoder<T>,
    table: &SolventTable,
    train: &[&ReactionRecord],
    cfg: &HeadConfig,
    mode: Mode,
    fold: u64,
) -> Result<YieldModel<T>> {
    cfg.validate()?;
    if cfg.mlp1[0] != encoder.dim() {
        return Err(Error::Config(format!(
            "mlp1 input {} must equal the fingerprint width {}",
            cfg.mlp1[0],
            encoder.dim()
        )));
    }
    if train.is_empty() {
        return Err(Error::Validation("no training reactions".into()));
    }
    let mut model = YieldModel {
        encoder: encoder.clone(),
        head: Head::new(cfg, &mut derived(cfg.seed, &[HEAD_STREAM, fold]))?,
        scaler: ConditionScaler::fit(train)?,
    };
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut head_adam = AdamState::new(&model.head.store, adam_cfg);
    let finetune = mode == Mode::Finetuned;
    let cache = if finetune { HashMap::new() } else { model.fingerprints(table, train)? };
    if finetune {
        model.encoder.model.store.set_trainable(true);
        model.encoder.model.store.set_lr_scale(cfg.backbone_lr_scale);
    }
    let mut bb_adam = AdamState::new(&model.encoder.model.store, adam_cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut derived(cfg.seed, &[SHUFFLE_STREAM, fold, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let recs: Vec<&ReactionRecord> = chunk.iter().map(|&i| train[i]).collect();
            let mut t = Tape::new();
            let hp = model.head.store.bind(&mut t);
            let bp = finetune.then(|| model.encoder.model.store.bind(&mut t));
            let live = bp.as_ref().map(|b| (&model.encoder, b, table));
            let (x, c) = head_inputs(&mut t, &cache, live, &recs, &model.scaler)?;
            let out = model.head.forward(&mut t, &hp, x, c)?;
            let target: Vec<T> = recs.iter().flat_map(|r| r.outcomes()).map(T::of).collect();
            let loss = t.masked_mse(out, &target, &vec![true; target.len()])?;
            if !t.scalar(loss).is_finite() {
                return Err(Error::Training(format!("non-finite head loss in fold {fold}, epoch {epoch}")));
            }
            t.backward(loss)?;
            model.head.store.zero_grad();
            model.head.store.collect_grads(&t, &hp);
            adam_step(&mut model.head.store, &mut head_adam)?;
            if let Some(bp) = &bp {
                model.encoder.model.store.zero_grad();
                model.encoder.model.store.collect_grads(&t, bp);
                adam_step(&mut model.encoder.model.store, &mut bb_adam)?;
            }
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub fold: usize,
    pub record: ReactionRecord,
    /// Clamped predictions of (sm, p2, p3).
    pub pred: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub key: String,
    pub mse: f64,
    pub rows: Vec<PredictionRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub task: Task,
    pub mode: Mode,
    pub folds: Vec<FoldResult>,
    /// Mean of the per-fold errors.
    pub mse: f64,
}

/// Held-out group of a record: the pure solvent, or the unordered pair.
pub fn fold_key(r: &ReactionRecord) -> String {
    match &r.solvent_b {
        None => r.solvent_a.clone(),
        Some(b) => {
            let (x, y) = if r.solvent_a <= *b { (&r.solvent_a, b) } else { (b, &r.solvent_a) };
            format!("{x} + {y}")
        }
    }
}

/// Records of the task grouped by held-out key, in key order.
pub fn make_folds(reactions: &[ReactionRecord], task: Task) -> BTreeMap<String, Vec<usize>> {
    let mut folds: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in reactions.iter().enumerate() {
        if task == Task::Single && !r.is_single() {
            continue;
        }
        folds.entry(fold_key(r)).or_default().push(i);
    }
    folds
}

fn squared_error(pred: &[f64; 3], r: &ReactionRecord) -> f64 {
    pred.iter().zip(r.outcomes()).map(|(p, y)| (p - y).powi(2)).sum()
}

/// Cross-validated yield error of heads trained on learned fingerprints.
pub fn run_benchmark<T: Scalar>(
    reactions: &[ReactionRecord],
    table: &SolventTable,
    encoder: &Encoder<T>,
    cfg: &HeadConfig,
    task: Task,
    mode: Mode,
) -> Result<BenchmarkResult> {
    let groups: Vec<(String, Vec<usize>)> = make_folds(reactions, task).into_iter().collect();
    if groups.len() < 2 {
        return Err(Error::Validation(format!("{task} task has {} fold(s); need at least 2", groups.len())));
    }
    let member: Vec<bool> = reactions.iter().map(|r| task == Task::Full || r.is_single()).collect();
    let folds = groups
        .par_iter()
        .enumerate()
        .map(|(k, (key, held))| {
            let held_set: BTreeSet<usize> = held.iter().copied().collect();
            let train: Vec<&ReactionRecord> =
                (0..reactions.len()).filter(|i| member[*i] && !held_set.contains(i)).map(|i| &reactions[i]).collect();
            let test: Vec<&ReactionRecord> = held.iter().map(|&i| &reactions[i]).collect();
            let model = train_head(encoder, table, &train, cfg, mode, k as u64)?;
            let preds = model.predict(table, &test)?;
            let mse = test.iter().zip(&preds).map(|(r, p)| squared_error(p, r)).sum::<f64>() / (3 * test.len()) as f64;
            log::debug!("{task}/{mode} fold {k} `{key}`: mse {mse:.5}");
            let rows =
                test.iter().zip(preds).map(|(r, pred)| PredictionRow { fold: k, record: (*r).clone(), pred }).collect();
            Ok(FoldResult { key: key.clone(), mse, rows })
        })
        .collect::<Result<Vec<_>>>()?;
    let mse = folds.iter().map(|f| f.mse).sum::<f64>() / folds.len() as f64;
    Ok(BenchmarkResult { task, mode, folds, mse })
}

pub const PREDICTION_COLUMNS: [&str; 12] = [
    "fold",
    "solvent_a",
    "solvent_b",
    "frac_a",
    "temperature_C",
    "residence_time_min",
    "sm_true",
    "p2_true",
    "p3_true",
    "sm_pred",
    "p2_pred",
    "p3_pred",
];

pub fn export_predictions<W: Write>(result: &BenchmarkResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PREDICTION_COLUMNS)?;
    for row in result.folds.iter().flat_map(|f| &f.rows) {
        let r = &row.record;
        let mut rec = vec![
            row.fold.to_string(),
            r.solvent_a.clone(),
            r.solvent_b.clone().unwrap_or_default(),
            r.frac_a.to_string(),
            r.temperature.to_string(),
            r.residence_time.to_string(),
        ];
        rec.extend(r.outcomes().iter().chain(&row.pred).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(results: &[BenchmarkResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "mode", "mse"])?;
    for r in results {
        w.write_record([r.task.to_string(), r.mode.to_string(), r.mse.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
