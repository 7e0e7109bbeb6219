//! Masked-value pretraining: epochs, plateau schedule, early stopping and
//! evaluation of the pretrained model.

mod checkpoint;
mod eval;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use eval::{evaluate_test_table, evaluate_validation, write_test_table, PropertyError, TestTable};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape};
use crate::dataio::{compute_schema, DataSplit, PropertySchema, SolventRecord, SolventTable};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::rng::{derived, Rng};
use crate::seqgen::{collate, sample_training_item, MaskedItem, TypeVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub mask_rate: f64,
    pub batch_size: usize,
    pub samples_per_solvent: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Keep a weight snapshot every this many epochs (0 = never).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_factor: 0.5,
            lr_patience: 5,
            lr_floor: 1e-8,
            mask_rate: 0.3,
            batch_size: 64,
            samples_per_solvent: 10,
            max_epochs: 500,
            early_stop_patience: 30,
            seed: 0,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_floor && self.lr_floor < self.lr_init) {
            return Err(Error::Config(format!(
                "need 0 < lr_floor < lr_init, got {} and {}",
                self.lr_floor, self.lr_init
            )));
        }
        if !(0.0 < self.mask_rate && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1]", self.mask_rate)));
        }
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor {} outside (0, 1)", self.lr_factor)));
        }
        if self.batch_size == 0 || self.samples_per_solvent == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, samples_per_solvent and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Absolute validation improvement that resets the plateau counter.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    floor: f64,
    best: f64,
    bad_epochs: usize,
    since_best: usize,
    floor_plateau: bool,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, floor: f64) -> Self {
        Self { lr, factor, patience, floor, best: f64::INFINITY, bad_epochs: 0, since_best: 0, floor_plateau: false }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Epochs since the last improvement.
    pub fn since_best(&self) -> usize {
        self.since_best
    }

    /// True once a full plateau has elapsed with the rate already at its floor.
    pub fn exhausted(&self) -> bool {
        self.floor_plateau
    }

    /// Record one validation loss; returns whether it improved.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = loss;
            self.bad_epochs = 0;
            self.since_best = 0;
            return true;
        }
        self.bad_epochs += 1;
        self.since_best += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            if self.lr <= self.floor {
                self.floor_plateau = true;
            }
            self.lr = (self.lr * self.factor).max(self.floor);
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn write_history<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.lr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation weights with full history.
    pub checkpoint: Checkpoint,
    pub snapshots: Vec<Checkpoint>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// Why an epoch loop ended.
fn stop_reason(sched: &PlateauScheduler, cfg: &TrainConfig, epoch: usize) -> Option<&'static str> {
    if sched.since_best() >= cfg.early_stop_patience {
        Some("early stop")
    } else if sched.exhausted() {
        Some("learning rate floor")
    } else if epoch >= cfg.max_epochs {
        Some("max epochs")
    } else {
        None
    }
}

const SAMPLE_STREAM: u64 = 0x53414d50; // "SAMP"
const ORDER_STREAM: u64 = 0x4f524452; // "ORDR"
const DROPOUT_STREAM: u64 = 0x44524f50; // "DROP"
const INIT_STREAM: u64 = 0x494e4954; // "INIT"

/// All training items of one epoch, in a seeded order.
pub fn epoch_items(
    records: &[&SolventRecord],
    schema: &PropertySchema,
    vocab: &TypeVocab,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<MaskedItem>> {
    let mut items: Vec<MaskedItem> = records
        .par_iter()
        .enumerate()
        .map(|(s, r)| {
            (0..cfg.samples_per_solvent)
                .map(|k| {
                    let mut rng = derived(cfg.seed, &[SAMPLE_STREAM, s as u64, epoch as u64, k as u64]);
                    sample_training_item(r, schema, vocab, &mut rng, cfg.mask_rate)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    items.shuffle(&mut derived(cfg.seed, &[ORDER_STREAM, epoch as u64]));
    Ok(items)
}

/// Fresh model initialized from the training seed.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Transformer<f32>> {
    Transformer::new(config, &mut derived(seed, &[INIT_STREAM]))
}

/// Train from scratch. `on_epoch` sees every finished epoch record.
pub fn train(
    table: &SolventTable,
    split: &DataSplit,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schema = compute_schema(table, &split.train_ids)?;
    let vocab = TypeVocab::new(table.types());
    let model_cfg = ModelConfig { type_vocab: vocab.len(), ..model_cfg };
    let train_recs: Vec<&SolventRecord> = split
        .train_ids
        .iter()
        .map(|id| table.require(id))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|r| r.present_count() >= 2)
        .collect();
    if train_recs.is_empty() {
        return Err(Error::Validation("no training solvent has two present properties".into()));
    }
    let val_recs: Vec<&SolventRecord> = split.val_ids.iter().map(|id| table.require(id)).collect::<Result<_>>()?;
    let mut model = init_model(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&model.store, AdamConfig { lr: cfg.lr_init, ..AdamConfig::default() });
    let mut sched = PlateauScheduler::new(cfg.lr_init, cfg.lr_factor, cfg.lr_patience, cfg.lr_floor);
    let mut history = Vec::new();
    let mut snapshots = Vec::new();
    if cfg.snapshot_every > 0 {
        snapshots.push(Checkpoint::capture(&model, &schema, &vocab, cfg.seed, 0));
    }
    let mut best = Checkpoint::capture(&model, &schema, &vocab, cfg.seed, 0);
    let mut aborted = None;
    let mut epoch = 0;
    loop {
        epoch += 1;
        let items = epoch_items(&train_recs, &schema, &vocab, cfg, epoch)?;
        let batches = collate(&items, cfg.batch_size)?;
        adam.set_lr(sched.lr());
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        let mut failure = None;
        for (bi, batch) in batches.iter().enumerate() {
            let mut drop_rng: Rng = derived(cfg.seed, &[DROPOUT_STREAM, epoch as u64, bi as u64]);
            let mut t = Tape::new();
            let p = model.store.bind(&mut t);
            let fwd = model.layout.forward(&mut t, &p, batch, Some(&mut drop_rng))?;
            let loss = model.layout.masked_loss(&mut t, &fwd, batch)?;
            let lv = t.scalar(loss);
            if !lv.is_finite() {
                failure = Some(format!("non-finite training loss in epoch {epoch}, batch {bi}"));
                break;
            }
            t.backward(loss)?;
            model.store.zero_grad();
            model.store.collect_grads(&t, &p);
            if let Err(e) = adam_step(&mut model.store, &mut adam) {
                failure = Some(e.to_string());
                break;
            }
            loss_sum += lv * batch.masked_count() as f64;
            weight += batch.masked_count();
        }
        let val_loss =
            if failure.is_none() { evaluate_validation(&model, &schema, &vocab, &val_recs)? } else { f64::NAN };
        if failure.is_none() && !val_loss.is_finite() {
            failure = Some(format!("non-finite validation loss in epoch {epoch}"));
        }
        if let Some(msg) = failure {
            log::error!("{msg}; keeping the last good weights");
            aborted = Some(msg);
            break;
        }
        let rec = EpochRecord { epoch, train_loss: loss_sum / weight as f64, val_loss, lr: sched.lr() };
        on_epoch(&rec);
        history.push(rec);
        if sched.observe(val_loss) {
            best = Checkpoint::capture(&model, &schema, &vocab, cfg.seed, epoch);
        }
        if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
            snapshots.push(Checkpoint::capture(&model, &schema, &vocab, cfg.seed, epoch));
        }
        if let Some(reason) = stop_reason(&sched, cfg, epoch) {
            log::info!("stopping after epoch {epoch}: {reason}");
            break;
        }
    }
    best.train = Some(cfg.clone());
    best.split = Some(split.clone());
    best.history = history;
    Ok(TrainOutcome { checkpoint: best, snapshots, aborted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_halves_after_each_plateau() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 5, 1e-8);
        assert!(s.observe(1.0));
        let mut lrs = Vec::new();
        for _ in 0..11 {
            assert!(!s.observe(1.0));
            lrs.push(s.lr());
        }
        assert_eq!(lrs[..4], [1e-3; 4]);
        assert_eq!(lrs[4..9], [5e-4; 5]);
        assert_eq!(lrs[9..], [2.5e-4; 2]);
    }

    #[test]
    fn improvement_needs_threshold() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 5, 1e-8);
        s.observe(1.0);
        assert!(!s.observe(1.0 - 5e-7));
        assert!(s.observe(1.0 - 2e-6));
        assert_eq!(s.since_best(), 0);
    }

    #[test]
    fn lr_never_rises_and_respects_floor() {
        let mut s = PlateauScheduler::new(1e-3, 0.5, 1, 1e-5);
        let mut prev = s.lr();
        for i in 0..40 {
            s.observe(1.0 + (i % 3) as f64);
            assert!(s.lr() <= prev && s.lr() >= 1e-5);
            prev = s.lr();
        }
        assert!(s.exhausted());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_floor: 1e-2, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { mask_rate: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn history_file_layout() {
        let mut out = Vec::new();
        write_history(&[EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25, lr: 0.001 }], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,train_loss,val_loss,lr\n1,0.5,0.25,0.001\n");
    }
}
