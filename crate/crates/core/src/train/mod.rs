//! Optimization loop, early stopping and k-fold cross-validation.

mod checkpoint;
mod features;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use features::{Encoders, FeatureSource, FeatureTable, LiveFeatures};
pub use optim::Adam;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryLabel, FoldPlan, PostRecord};
use crate::error::{Error, Result};
use crate::eval::{argmax, EvalReport};
use crate::model::{Mode, ModelConfig, MultimodalModel, Task};
use crate::params::fnv1a;

/// Validation quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAccuracy,
    ValMacroF1,
}

impl Monitor {
    pub fn value(self, r: &EpochRecord) -> f64 {
        match self {
            Monitor::ValLoss => r.val_loss,
            Monitor::ValAccuracy => r.val_accuracy,
            Monitor::ValMacroF1 => r.val_macro_f1,
        }
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Monitor::ValLoss => a < b,
            _ => a > b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: Monitor,
    pub seed: u64,
    /// Train fusion and heads only (desk-scale mode).
    pub freeze_backbones: bool,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-6,
            batch_size: 4,
            max_epochs: 50,
            patience: 5,
            monitor: Monitor::ValLoss,
            seed: 0,
            freeze_backbones: true,
            augment: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub monitor: Monitor,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best monitored value and the epochs since it was seen.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    monitor: Monitor,
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(monitor: Monitor, patience: usize) -> Self {
        EarlyStopper {
            monitor,
            patience: patience.max(1),
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let improved = match self.best {
            None => value.is_finite(),
            Some((_, b)) => self.monitor.better(value, b),
        };
        if improved {
            self.best = Some((epoch, value));
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Loss, metrics and per-example outputs over a set of examples.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub report: EvalReport,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

/// Class probabilities for `idx` in evaluation mode.
pub fn predict(
    model: &MultimodalModel,
    source: &dyn FeatureSource,
    idx: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = source.inputs(chunk, None)?;
        let o = model.forward(&x, &mut Mode::Eval)?;
        let probs = o.log_probs.exp()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        out.extend(probs);
    }
    Ok(out)
}

/// Mean combined loss and metrics for `idx` in evaluation mode.
pub fn evaluate(
    model: &MultimodalModel,
    source: &dyn FeatureSource,
    labels: &[usize],
    idx: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut total = 0.0;
    let mut probabilities = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = source.inputs(chunk, None)?;
        let out = model.forward(&x, &mut Mode::Eval)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        total += model.loss(&out, &y)?.to_scalar::<f64>()? * chunk.len() as f64;
        probabilities.extend(
            out.log_probs
                .exp()?
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?,
        );
    }
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let report = EvalReport::from_predictions(&predictions, &truth, model.config().num_classes())?;
    Ok(Evaluation {
        loss: total / idx.len() as f64,
        report,
        predictions,
        probabilities,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ fnv1a(format!("epoch{epoch}").as_bytes())
}

fn snapshot_all(
    model: &MultimodalModel,
    source: &dyn FeatureSource,
) -> Result<Vec<HashMap<String, Tensor>>> {
    let mut out = vec![model.store().snapshot()?];
    for s in source.trainable_stores() {
        out.push(s.snapshot()?);
    }
    Ok(out)
}

fn restore_all(
    model: &MultimodalModel,
    source: &dyn FeatureSource,
    snaps: &[HashMap<String, Tensor>],
) -> Result<()> {
    model.store().restore(&snaps[0])?;
    for (s, snap) in source.trainable_stores().iter().zip(&snaps[1..]) {
        s.restore(snap)?;
    }
    Ok(())
}

/// Trains one head (and any trainable backbone in `source`) on `train_idx`,
/// early-stopping on `val_idx`, and returns the model restored to its best
/// epoch.
pub fn train_fold(
    source: &dyn FeatureSource,
    labels: &[usize],
    train_idx: &[usize],
    val_idx: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(MultimodalModel, TrainLog)> {
    train_cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data(
            "train and validation splits must be non-empty".into(),
        ));
    }
    crate::error::check_dim("labels", source.len(), labels.len())?;
    if let Some(&l) = labels.iter().find(|&&l| l >= model_cfg.num_classes()) {
        return Err(Error::Data(format!(
            "label {l} out of range for {} classes",
            model_cfg.num_classes()
        )));
    }
    let model = MultimodalModel::seeded(*model_cfg, train_cfg.seed)?;
    let mut vars: Vec<Var> = model.store().trainable_vars();
    if !train_cfg.freeze_backbones {
        for s in source.trainable_stores() {
            vars.extend(s.trainable_vars());
        }
    }
    let mut opt = Adam::new(
        vars,
        train_cfg.lr,
        train_cfg.beta1,
        train_cfg.beta2,
        train_cfg.eps,
    );
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ fnv1a(b"dropout"));
    let mut stopper = EarlyStopper::new(train_cfg.monitor, train_cfg.patience);
    let mut epochs = Vec::new();
    let mut best_snapshot = None;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order = train_idx.to_vec();

    for epoch in 1..=train_cfg.max_epochs {
        let started = Instant::now();
        let seed = epoch_seed(train_cfg.seed, epoch);
        order.clone_from_slice(train_idx);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let augment = train_cfg.augment.then_some(seed);
        let mut total = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let x = source.inputs(batch, augment)?;
            let out = model.forward(&x, &mut Mode::Train(&mut dropout_rng))?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = model.loss(&out, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            opt.backward_step(&loss)?;
            total += value * batch.len() as f64;
        }
        let val = evaluate(&model, source, labels, val_idx, train_cfg.batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train_idx.len() as f64,
            val_loss: val.loss,
            val_accuracy: val.report.accuracy,
            val_macro_f1: val.report.macro_f1,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        let decision = stopper.observe(epoch, train_cfg.monitor.value(&record));
        epochs.push(record);
        match decision {
            StopDecision::Improved => best_snapshot = Some(snapshot_all(&model, source)?),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    let best_epoch = stopper.best().map(|(e, _)| e).unwrap_or(epochs.len());
    if let Some(snap) = &best_snapshot {
        restore_all(&model, source, snap)?;
    }
    Ok((
        model,
        TrainLog {
            monitor: train_cfg.monitor,
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}

/// Class index of a record for a task; `None` when the record does not take
/// part in the task (non-antisemitic posts in the multiclass task).
pub fn label_of(record: &PostRecord, task: Task) -> Option<usize> {
    match task {
        Task::Binary => Some(u8::from(record.binary_label) as usize),
        Task::Multiclass => match record.binary_label {
            BinaryLabel::Antisemitic => record.category_label.map(|c| c.index()),
            BinaryLabel::NonAntisemitic => None,
        },
    }
}

/// Records that take part in `task`.
pub fn task_records(records: &[PostRecord], task: Task) -> Vec<PostRecord> {
    records
        .iter()
        .filter(|r| label_of(r, task).is_some())
        .cloned()
        .collect()
}

/// Index lists of one fold over a record list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Maps a plan onto `records`. Plan ids absent from `records` are dropped
/// (the plan may cover a superset, as in the multiclass task); every record
/// must appear in exactly one test set.
pub fn fold_indices(records: &[PostRecord], plan: &FoldPlan) -> Result<Vec<FoldIndices>> {
    let pos: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut tested = vec![0usize; records.len()];
    let map = |ids: &[String]| -> Vec<usize> {
        ids.iter()
            .filter_map(|id| pos.get(id.as_str()).copied())
            .collect()
    };
    let folds: Vec<FoldIndices> = plan
        .folds
        .iter()
        .map(|f| FoldIndices {
            train: map(&f.train),
            val: map(&f.val),
            test: map(&f.test),
        })
        .collect();
    for f in &folds {
        for &i in &f.test {
            tested[i] += 1;
        }
    }
    if let Some(i) = tested.iter().position(|&c| c != 1) {
        return Err(Error::Data(format!(
            "fold plan does not place record {} in exactly one test set",
            records[i].id
        )));
    }
    Ok(folds)
}

/// Per-fold seed of the head.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ fnv1a(format!("fold{fold}").as_bytes())
}

pub struct FoldOutcome {
    pub fold: usize,
    pub model: MultimodalModel,
    pub log: TrainLog,
    pub test: Evaluation,
    pub test_idx: Vec<usize>,
    pub source: Arc<dyn FeatureSource>,
}

/// Builds the feature source a fold trains on.
pub type SourceFactory<'a> = dyn Fn(usize) -> Result<Arc<dyn FeatureSource>> + Sync + 'a;

/// Trains and tests one model per fold. `records` must all take part in the
/// model's task. `parallel_folds > 1` trains that many folds at once.
pub fn run_cross_validation(
    records: &[PostRecord],
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sources: &SourceFactory,
    parallel_folds: usize,
) -> Result<Vec<FoldOutcome>> {
    let labels = records
        .iter()
        .map(|r| {
            label_of(r, model_cfg.task).ok_or_else(|| {
                Error::Data(format!("record {} has no {} label", r.id, model_cfg.task))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let folds = fold_indices(records, plan)?;
    let run = |(i, f): (usize, &FoldIndices)| -> Result<FoldOutcome> {
        let source = sources(i)?;
        crate::error::check_dim("feature source", records.len(), source.len())?;
        let cfg = TrainConfig {
            seed: fold_seed(train_cfg.seed, i),
            ..*train_cfg
        };
        let (model, log) = train_fold(source.as_ref(), &labels, &f.train, &f.val, model_cfg, &cfg)?;
        let test = evaluate(
            &model,
            source.as_ref(),
            &labels,
            &f.test,
            train_cfg.batch_size,
        )?;
        Ok(FoldOutcome {
            fold: i,
            model,
            log,
            test,
            test_idx: f.test.clone(),
            source,
        })
    };
    if parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel_folds)
            .build()
            .map_err(|e| Error::Training(format!("thread pool: {e}")))?;
        pool.install(|| folds.par_iter().enumerate().map(run).collect())
    } else {
        folds.iter().enumerate().map(run).collect()
    }
}
