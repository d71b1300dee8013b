//! Adam training with an optional cosine schedule, per-epoch validation,
//! and early stopping on validation loss.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vocseg_nn::{Adam, Mode, Tensor};

use crate::error::{Result, SegError};
use crate::model_zoo::{Model, ModelState};
use crate::objective_metrics::{
    argmax_classes, cross_entropy_sums, cross_entropy_with_grad, ClassWeights, ConfusionMatrix, LossSums,
    MetricReport, MetricSummary,
};
use crate::paired_transforms::{augment_train_batch, AugmentPolicy};
use crate::voc_data::{make_batches, Batch, SegSample, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    None,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub scheduler: Scheduler,
    pub t_max: usize,
    pub use_weights: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.005,
            lr_min: 0.0,
            epochs_max: 50,
            patience: 5,
            scheduler: Scheduler::None,
            t_max: 50,
            use_weights: false,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_max > self.lr_min && self.lr_max.is_finite()) {
            return Err(SegError::config(
                "lr_max",
                format!("need lr_max > lr_min >= 0, got {} and {}", self.lr_max, self.lr_min),
            ));
        }
        if self.t_max < 1 {
            return Err(SegError::config("t_max", "must be at least 1"));
        }
        if self.patience < 1 {
            return Err(SegError::config("patience", "must be at least 1"));
        }
        if self.epochs_max < 1 {
            return Err(SegError::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(SegError::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate for the epoch after `completed` finished epochs.
    pub fn lr_at(&self, completed: usize) -> f64 {
        match self.scheduler {
            Scheduler::None => self.lr_max,
            Scheduler::Cosine => cosine_lr(completed, self.t_max, self.lr_max, self.lr_min),
        }
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * t_cur / t_max)) / 2`,
/// held at `lr_min` once `t_cur` passes `t_max`.
pub fn cosine_lr(t_cur: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t_cur >= t_max {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t_cur as f64 / t_max as f64).cos())
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train: MetricSummary,
    pub val: MetricSummary,
}

/// Patience counter over validation loss; improvement is strict.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = val_loss < self.best_val_loss;
        if improved {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        StopDecision {
            improved,
            stop: self.epochs_since_improvement >= self.patience,
        }
    }
}

/// What [`fit`] drives: one training epoch at a given rate, one validation
/// pass, and a snapshot of the current weights.
pub trait EpochRunner {
    type Snapshot;

    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<MetricSummary>;

    fn validate(&mut self) -> Result<MetricSummary>;

    fn snapshot(&self) -> Self::Snapshot;
}

#[derive(Clone, Debug)]
pub struct FitOutcome<S> {
    /// Weights at `best_epoch`, never the last epoch's unless they coincide.
    pub best: S,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stopped_early: bool,
}

/// Runs up to `epochs_max` epochs, snapshotting on every strict validation
/// improvement and stopping after `patience` epochs without one.
/// `on_epoch` sees each record as soon as it exists.
pub fn fit<R: EpochRunner>(
    config: &TrainConfig,
    runner: &mut R,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitOutcome<R::Snapshot>> {
    config.validate()?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut records = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs_max {
        let lr = config.lr_at(epoch - 1);
        let train = runner.train_epoch(epoch, lr)?;
        let val = runner.validate()?;
        let record = EpochRecord { epoch, lr, train, val };
        on_epoch(&record)?;
        records.push(record);
        let decision = stopper.observe(epoch, val.loss);
        if decision.improved {
            best = Some(runner.snapshot());
        }
        if decision.stop {
            stopped_early = epoch < config.epochs_max;
            break;
        }
    }
    let stop_epoch = records.len();
    Ok(FitOutcome {
        best: best.ok_or_else(|| SegError::NonFinite("validation loss in every epoch".into()))?,
        records,
        best_epoch: stopper.best_epoch,
        stop_epoch,
        stopped_early,
    })
}

/// Anything that maps an image batch to logits without learning.
pub trait Predictor {
    fn predict(&mut self, images: &Tensor) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        self.forward(images, Mode::Eval)
    }
}

/// Loss pooled per pixel over all batches and confusion-matrix metrics.
pub fn evaluate<P: Predictor + ?Sized>(model: &mut P, batches: &[Batch], weights: Option<&ClassWeights>) -> Result<MetricReport> {
    if batches.is_empty() {
        return Err(SegError::Invalid("cannot evaluate an empty split".into()));
    }
    let mut sums = LossSums::default();
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for batch in batches {
        let logits = model.predict(&batch.images)?;
        sums.add(cross_entropy_sums(&logits, &batch.masks, weights)?);
        cm.update(&argmax_classes(&logits), &batch.masks)?;
    }
    MetricReport::from_confusion(&cm, sums.mean())
}

/// One pass over `batches`: augment, forward, loss, backward, Adam step.
/// The report uses the training-mode logits of each batch.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut Model,
    batches: &[Batch],
    optimizer: &mut Adam,
    weights: Option<&ClassWeights>,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<MetricReport> {
    if batches.is_empty() {
        return Err(SegError::Invalid("cannot train on an empty split".into()));
    }
    let mut sums = LossSums::default();
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for (i, batch) in batches.iter().enumerate() {
        let batch = augment_train_batch(batch, policy, rng)?;
        model.zero_grad();
        let logits = model.forward(&batch.images, Mode::Train)?;
        let loss = cross_entropy_with_grad(&logits, &batch.masks, weights).map_err(|e| match e {
            SegError::NonFinite(what) => SegError::NonFinite(format!("{what} in training batch {i} ({})", batch.ids.join(", "))),
            other => other,
        })?;
        model.backward(&loss.grad)?;
        optimizer.step(model.params_mut());
        sums.add(loss.sums);
        cm.update(&argmax_classes(&logits), &batch.masks)?;
    }
    MetricReport::from_confusion(&cm, sums.mean())
}

/// The concrete runner: a model, Adam, the training samples and the
/// validation batches. Shuffling and augmentation draw from one seeded
/// generator, so a seed fixes the whole run.
pub struct SegTrainer<'a> {
    pub model: Model,
    pub optimizer: Adam,
    train: &'a [SegSample],
    val_batches: Vec<Batch>,
    batch_size: usize,
    augment: AugmentPolicy,
    weights: Option<ClassWeights>,
    rng: ChaCha8Rng,
}

impl<'a> SegTrainer<'a> {
    pub fn new(
        model: Model,
        config: &TrainConfig,
        train: &'a [SegSample],
        val: &[SegSample],
        augment: AugmentPolicy,
        weights: Option<ClassWeights>,
    ) -> Result<Self> {
        Ok(Self {
            model,
            optimizer: Adam::new(config.lr_max as f32),
            train,
            val_batches: make_batches(val, config.batch_size, false, 0)?,
            batch_size: config.batch_size,
            augment,
            weights,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn val_batches(&self) -> &[Batch] {
        &self.val_batches
    }
}

impl EpochRunner for SegTrainer<'_> {
    type Snapshot = ModelState;

    fn train_epoch(&mut self, _epoch: usize, lr: f64) -> Result<MetricSummary> {
        self.optimizer.lr = lr as f32;
        let shuffle_seed: u64 = self.rng.random();
        let batches = make_batches(self.train, self.batch_size, true, shuffle_seed)?;
        let report = train_epoch(
            &mut self.model,
            &batches,
            &mut self.optimizer,
            self.weights.as_ref(),
            &self.augment,
            &mut self.rng,
        )?;
        Ok(report.summary())
    }

    fn validate(&mut self) -> Result<MetricSummary> {
        Ok(evaluate(&mut self.model, &self.val_batches, self.weights.as_ref())?.summary())
    }

    fn snapshot(&self) -> ModelState {
        self.model.state()
    }
}
