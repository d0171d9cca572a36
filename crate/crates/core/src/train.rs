//! Losses, Adam, gradual unfreezing and the training loops for both models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::imaging::{self, AugmentParams, Normalization};
use crate::metrics::{self, Averaging, ConfusionMatrix, OverlapCounts};
use crate::nn::{Model, ModelKind, ParamGrads, NUM_CLASSES};
use crate::tensor::{DType, Element, Tensor};

/// Smoothing term of the Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probability threshold used for mask metrics during training.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    CrossEntropy,
    DicePlusBce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::CrossEntropy => "ce",
            LossKind::DicePlusBce => "dice_plus_bce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dice" => Some(LossKind::Dice),
            "ce" => Some(LossKind::CrossEntropy),
            "dice_plus_bce" => Some(LossKind::DicePlusBce),
            _ => None,
        }
    }

    fn is_segmentation(self) -> bool {
        !matches!(self, LossKind::CrossEntropy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub precision: DType,
    pub loss: LossKind,
    pub early_stop_patience: Option<usize>,
    /// Inverse-frequency class weights in the cross-entropy.
    pub class_weights: bool,
    /// Geometric augmentation of training batches; `None` disables it.
    pub augment: Option<AugmentParams>,
    pub averaging: Averaging,
    pub normalization: Normalization,
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            precision: DType::F32,
            loss: LossKind::DicePlusBce,
            early_stop_patience: None,
            class_weights: true,
            augment: Some(AugmentParams::default()),
            averaging: Averaging::Macro,
            normalization: Normalization::PerImage,
        }
    }

    pub fn classification() -> Self {
        TrainConfig {
            epochs: 20,
            loss: LossKind::CrossEntropy,
            ..Self::segmentation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn check_model(&self, kind: ModelKind) -> Result<()> {
        let ok = match kind {
            ModelKind::Segmentation => self.loss.is_segmentation(),
            ModelKind::Classifier => !self.loss.is_segmentation(),
        };
        if !ok {
            return Err(Error::Config(format!(
                "loss `{}` does not fit a {} model",
                self.loss.as_str(),
                kind.as_str()
            )));
        }
        Ok(())
    }
}

/// Records `loss` of `kind` on the tape. Segmentation targets are flattened
/// binary masks; classification targets are class indices in `labels`.
pub fn record_loss<T: Element>(
    tape: &mut Tape<T>,
    kind: LossKind,
    output: Var,
    masks: &[T],
    labels: &[usize],
    class_weights: Option<&[T]>,
) -> Result<Var> {
    let smooth = T::from_f64_lossy(DICE_SMOOTH);
    match kind {
        LossKind::Dice => tape.dice_loss(output, masks, smooth),
        LossKind::DicePlusBce => {
            let d = tape.dice_loss(output, masks, smooth)?;
            let b = tape.bce_loss(output, masks)?;
            tape.add(d, b)
        }
        LossKind::CrossEntropy => tape.cross_entropy(output, labels, class_weights),
    }
}

/// `w_c = N / (K n_c)`; classes absent from `labels` get weight 0.
pub fn inverse_frequency_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (n_classes as f64 * c as f64) })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of one parameter; `step` counts its own updates for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// Adam state keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            slots: BTreeMap::new(),
        }
    }
}

/// One parameter update request.
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a [T],
}

/// Bias-corrected Adam over `updates`; increments `state.step` once.
pub fn adam_step<T: Element>(updates: &mut [ParamUpdate<'_, T>], state: &mut OptimizerState<T>, cfg: &AdamConfig) -> Result<()> {
    for u in updates.iter() {
        if u.grad.len() != u.value.numel() {
            return Err(Error::dim(format!(
                "adam: gradient of `{}` has {} values for {} parameters",
                u.name,
                u.grad.len(),
                u.value.numel()
            )));
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for u in updates.iter_mut() {
        let slot = state.slots.entry(u.name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![T::zero(); u.grad.len()],
            v: vec![T::zero(); u.grad.len()],
            step: 0,
        });
        if slot.m.len() != u.grad.len() {
            return Err(Error::dim(format!("adam: state of `{}` has the wrong size", u.name)));
        }
        slot.step += 1;
        let t = slot.step as i32;
        let c1 = T::from_f64_lossy(1.0 - b1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - b2.powi(t));
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (lr, eps) = (T::from_f64_lossy(cfg.lr), T::from_f64_lossy(cfg.eps));
        let one = T::one();
        for (((p, &g), m), v) in u
            .value
            .data_mut()
            .iter_mut()
            .zip(u.grad)
            .zip(slot.m.iter_mut())
            .zip(slot.v.iter_mut())
        {
            *m = b1t * *m + (one - b1t) * g;
            *v = b2t * *v + (one - b2t) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnfreezeStage {
    /// Zero-based epoch index at which the blocks become trainable.
    pub start_epoch: usize,
    pub blocks: Vec<String>,
}

/// Stages of encoder blocks made trainable over time, deepest block first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnfreezeSchedule {
    stages: Vec<UnfreezeStage>,
}

fn encoder_depth(name: &str) -> Option<usize> {
    name.strip_prefix("enc").and_then(|d| d.parse().ok())
}

impl UnfreezeSchedule {
    pub fn new(stages: Vec<UnfreezeStage>) -> Result<Self> {
        for w in stages.windows(2) {
            if w[1].start_epoch <= w[0].start_epoch {
                return Err(Error::Config(format!(
                    "unfreeze stages must start at strictly increasing epochs ({} then {})",
                    w[0].start_epoch, w[1].start_epoch
                )));
            }
        }
        let mut last = usize::MAX;
        for s in &stages {
            for b in &s.blocks {
                let d = encoder_depth(b)
                    .ok_or_else(|| Error::Config(format!("unfreeze stage names non-encoder block `{b}`")))?;
                if d >= last {
                    return Err(Error::Config(format!(
                        "unfreeze order must go from deeper to shallower encoder blocks (`{b}` after enc{last})"
                    )));
                }
                last = d;
            }
        }
        Ok(UnfreezeSchedule { stages })
    }

    /// Every block trainable from the first epoch.
    pub fn all_trainable(encoder_blocks: &[String]) -> Self {
        let mut blocks = encoder_blocks.to_vec();
        blocks.sort_by_key(|b| std::cmp::Reverse(encoder_depth(b)));
        UnfreezeSchedule {
            stages: vec![UnfreezeStage { start_epoch: 0, blocks }],
        }
    }

    /// Encoder frozen for the first 20% of epochs, then one block every further
    /// 10% of epochs, deepest first.
    pub fn default_for(encoder_blocks: &[String], epochs: usize) -> Self {
        let frozen = (epochs * 2 / 10).max(1);
        let step = (epochs / 10).max(1);
        let mut blocks = encoder_blocks.to_vec();
        blocks.sort_by_key(|b| std::cmp::Reverse(encoder_depth(b)));
        UnfreezeSchedule {
            stages: blocks
                .into_iter()
                .enumerate()
                .map(|(k, b)| UnfreezeStage {
                    start_epoch: frozen + k * step,
                    blocks: vec![b],
                })
                .collect(),
        }
    }

    pub fn stages(&self) -> &[UnfreezeStage] {
        &self.stages
    }

    /// Epoch at which `block` becomes trainable, if it ever does.
    pub fn unfreeze_epoch(&self, block: &str) -> Option<usize> {
        self.stages
            .iter()
            .find(|s| s.blocks.iter().any(|b| b == block))
            .map(|s| s.start_epoch)
    }
}

/// Blocks trainable at zero-based `epoch`: every stage already started plus `always`.
pub fn unfreeze_plan(schedule: &UnfreezeSchedule, epoch: usize, always: &[String]) -> BTreeSet<String> {
    let mut set: BTreeSet<String> = always.iter().cloned().collect();
    for s in schedule.stages.iter().filter(|s| s.start_epoch <= epoch) {
        set.extend(s.blocks.iter().cloned());
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskMetrics {
    Classification { accuracy: f64, f1: f64 },
    Segmentation { dice: f64, iou: f64 },
}

impl TaskMetrics {
    pub fn pair(&self) -> (f64, f64) {
        match *self {
            TaskMetrics::Classification { accuracy, f1 } => (accuracy, f1),
            TaskMetrics::Segmentation { dice, iou } => (dice, iou),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train: TaskMetrics,
    pub val: TaskMetrics,
    pub trainable_param_count: usize,
    pub trainable_blocks: Vec<String>,
}

/// Loss and metric accumulator over one pass.
struct PassStats {
    loss_sum: f64,
    count: usize,
    cm: ConfusionMatrix,
    overlap: OverlapCounts,
}

impl PassStats {
    fn new() -> Self {
        PassStats {
            loss_sum: 0.0,
            count: 0,
            cm: ConfusionMatrix::new(NUM_CLASSES),
            overlap: OverlapCounts::default(),
        }
    }

    fn record<T: Element>(&mut self, loss: f64, n: usize, output: &Tensor<T>, batch: &Batch<T>) -> Result<()> {
        self.loss_sum += loss * n as f64;
        self.count += n;
        if batch.labels.is_empty() {
            let pred: Vec<u8> = output
                .data()
                .iter()
                .map(|&p| (p.as_f64() >= MASK_THRESHOLD) as u8)
                .collect();
            let truth: Vec<u8> = batch.masks.iter().map(|&t| (t.as_f64() >= 0.5) as u8).collect();
            self.overlap.merge(OverlapCounts::from_pixels(&pred, &truth));
        } else {
            for (row, &label) in output.data().chunks(NUM_CLASSES).zip(&batch.labels) {
                self.cm.add(label, argmax(row))?;
            }
        }
        Ok(())
    }

    fn finish(&self, kind: ModelKind, averaging: Averaging) -> Result<(f64, TaskMetrics)> {
        let loss = self.loss_sum / self.count.max(1) as f64;
        let m = match kind {
            ModelKind::Segmentation => TaskMetrics::Segmentation {
                dice: self.overlap.dice(),
                iou: self.overlap.iou(),
            },
            ModelKind::Classifier => TaskMetrics::Classification {
                accuracy: metrics::accuracy(&self.cm)?,
                f1: metrics::precision_recall_f1(&self.cm, averaging).f1,
            },
        };
        Ok((loss, m))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Assembled model input and targets.
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub masks: Vec<T>,
    pub labels: Vec<usize>,
}

fn mix_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds a batch; `augment` carries the parameters and the (seed, epoch) used
/// to derive per-sample transforms.
pub fn make_batch<T: Element>(
    samples: &[(usize, &Sample)],
    kind: ModelKind,
    normalization: Normalization,
    augment: Option<(&AugmentParams, u64, usize)>,
) -> Result<Batch<T>> {
    let side = samples
        .first()
        .map(|(_, s)| s.image.width())
        .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let mut input = Vec::with_capacity(samples.len() * side * side);
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    for &(idx, s) in samples {
        let target = match kind {
            ModelKind::Segmentation => Some(
                s.infection
                    .as_ref()
                    .ok_or_else(|| Error::Manifest(format!("{} has no infection mask", s.path.display())))?,
            ),
            ModelKind::Classifier => {
                labels.push(
                    s.label
                        .ok_or_else(|| Error::Manifest(format!("{} has no label", s.path.display())))?
                        .index(),
                );
                None
            }
        };
        let (image, mask) = match augment {
            Some((params, seed, epoch)) => {
                let (i, m) = imaging::augment(&s.image, target, params, mix_seed(seed, epoch, idx))?;
                (i, m)
            }
            None => (s.image.clone(), target.cloned()),
        };
        let norm = imaging::normalize_with(&image, normalization);
        input.extend(norm.tensor.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        if let Some(m) = mask {
            masks.extend(m.pixels().iter().map(|&p| if p == 1 { T::one() } else { T::zero() }));
        }
    }
    Ok(Batch {
        input: Tensor::new([samples.len(), 1, side, side], input)?,
        masks,
        labels,
    })
}

fn check_dataset(data: &Dataset, kind: ModelKind, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{what} set has no records")));
    }
    for s in &data.samples {
        match kind {
            ModelKind::Segmentation if s.infection.is_none() => {
                return Err(Error::Manifest(format!(
                    "{what} record {} has no infection mask",
                    s.path.display()
                )))
            }
            ModelKind::Classifier if s.label.is_none() => {
                return Err(Error::Manifest(format!("{what} record {} has no label", s.path.display())))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Training-time context shared by every epoch of a run.
pub struct TrainState<T> {
    pub optimizer: OptimizerState<T>,
    pub class_weights: Option<Vec<T>>,
}

impl<T: Element> TrainState<T> {
    pub fn new(config: &TrainConfig, train: &Dataset) -> Result<Self> {
        let class_weights = if config.loss == LossKind::CrossEntropy && config.class_weights {
            let labels = train.labels()?;
            Some(
                inverse_frequency_weights(&labels, NUM_CLASSES)
                    .into_iter()
                    .map(T::from_f64_lossy)
                    .collect(),
            )
        } else {
            None
        };
        Ok(TrainState {
            optimizer: OptimizerState::new(),
            class_weights,
        })
    }
}

/// One pass over `data` in shuffled batches with Adam updates of trainable blocks.
/// Returns the mean loss and the metrics of the training-mode predictions.
pub fn train_epoch<T: Element, M: Model<T>>(
    model: &mut M,
    data: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState<T>,
    epoch: usize,
) -> Result<(f64, TaskMetrics)> {
    let kind = model.kind();
    config.check_model(kind)?;
    check_dataset(data, kind, "training")?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
    let adam = AdamConfig::new(config.learning_rate);
    let mut stats = PassStats::new();
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let samples: Vec<(usize, &Sample)> = chunk.iter().map(|&i| (i, &data.samples[i])).collect();
        let augment = config.augment.as_ref().map(|a| (a, config.seed, epoch));
        let batch = make_batch::<T>(&samples, kind, config.normalization, augment)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.input.clone());
        let fwd = model.forward_train(&mut tape, x, ParamGrads::Trainable)?;
        let loss = record_loss(
            &mut tape,
            config.loss,
            fwd.output,
            &batch.masks,
            &batch.labels,
            state.class_weights.as_deref(),
        )?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NumericAbort {
                epoch,
                batch: b,
                detail: format!("loss is {loss_value}"),
            });
        }
        stats.record(loss_value, chunk.len(), tape.value(fwd.output), &batch)?;
        if !tape.requires_grad(loss) {
            continue;
        }
        tape.backward(loss)?;
        let mut names = Vec::new();
        for (bi, block) in model.blocks().iter().enumerate() {
            if block.trainable {
                for (pi, p) in block.params.iter().enumerate() {
                    names.push((bi, pi, p.name.clone()));
                }
            }
        }
        let mut grads: Vec<Vec<T>> = Vec::with_capacity(names.len());
        for &(bi, pi, ref name) in &names {
            let g = tape.grad(fwd.params[bi][pi]).ok_or_else(|| {
                Error::Gradient(format!("no gradient reached trainable parameter `{name}`"))
            })?;
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericAbort {
                    epoch,
                    batch: b,
                    detail: format!("non-finite gradient in `{name}` at {bad}"),
                });
            }
            grads.push(g.to_vec());
        }
        drop(tape);
        let blocks = model.blocks_mut();
        let mut updates: Vec<ParamUpdate<'_, T>> = Vec::with_capacity(names.len());
        let mut grad_iter = grads.iter();
        for block in blocks.iter_mut().filter(|b| b.trainable) {
            for p in block.params.iter_mut() {
                let g = grad_iter.next().expect("one gradient per trainable parameter");
                updates.push(ParamUpdate {
                    name: &p.name,
                    value: &mut p.value,
                    grad: g,
                });
            }
        }
        adam_step(&mut updates, &mut state.optimizer, &adam)?;
    }
    stats.finish(kind, config.averaging)
}

/// Mean loss and metrics of `model` in evaluation mode.
pub fn evaluate<T: Element, M: Model<T>>(
    model: &M,
    data: &Dataset,
    config: &TrainConfig,
    class_weights: Option<&[T]>,
) -> Result<(f64, TaskMetrics)> {
    let kind = model.kind();
    check_dataset(data, kind, "evaluation")?;
    let mut stats = PassStats::new();
    let indexed: Vec<(usize, &Sample)> = data.samples.iter().enumerate().collect();
    for chunk in indexed.chunks(config.batch_size) {
        let batch = make_batch::<T>(chunk, kind, config.normalization, None)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.input.clone());
        let fwd = model.forward(&mut tape, x, crate::nn::Mode::Eval, ParamGrads::None)?;
        let loss = record_loss(&mut tape, config.loss, fwd.output, &batch.masks, &batch.labels, class_weights)?;
        let v = tape.value(loss).data()[0].as_f64();
        stats.record(v, chunk.len(), tape.value(fwd.output), &batch)?;
    }
    stats.finish(kind, config.averaging)
}

/// Tracks the best validation loss; stops once more than `patience` epochs passed without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: Option<usize>,
    pub best_loss: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records the loss of `epoch`; true when training should stop.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
        }
        matches!(self.patience, Some(p) if epoch - self.best_epoch > p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub history: Vec<EpochReport>,
    pub stopped_early: bool,
    /// Zero-based epoch with the lowest validation loss.
    pub best_epoch: usize,
}

/// Trains for `config.epochs` epochs, applying the unfreeze plan before every
/// epoch. `observer` sees every report together with the model after that epoch.
pub fn fit<T: Element, M: Model<T>>(
    model: &mut M,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    schedule: &UnfreezeSchedule,
    mut observer: impl FnMut(&EpochReport, &M),
) -> Result<FitResult> {
    config.validate()?;
    config.check_model(model.kind())?;
    check_dataset(train, model.kind(), "training")?;
    check_dataset(val, model.kind(), "validation")?;
    let mut state = TrainState::new(config, train)?;
    let always = model.always_trainable();
    let mut history = Vec::with_capacity(config.epochs);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let plan = unfreeze_plan(schedule, epoch, &always);
        model.set_trainable_only(&plan)?;
        let (train_loss, train_m) = train_epoch(model, train, config, &mut state, epoch)?;
        let (val_loss, val_m) = evaluate(model, val, config, state.class_weights.as_deref())?;
        if !val_loss.is_finite() {
            return Err(Error::NumericAbort {
                epoch,
                batch: 0,
                detail: format!("validation loss is {val_loss}"),
            });
        }
        let report = EpochReport {
            epoch,
            train_loss,
            val_loss,
            train: train_m,
            val: val_m,
            trainable_param_count: model.trainable_param_count(),
            trainable_blocks: plan.into_iter().collect(),
        };
        observer(&report, model);
        history.push(report);
        if stopper.update(epoch, val_loss) {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        history,
        stopped_early,
        best_epoch: stopper.best_epoch,
    })
}

/// History CSV; the epoch column counts from 1.
pub fn history_csv(history: &[EpochReport]) -> String {
    let seg = matches!(history.first().map(|r| r.train), Some(TaskMetrics::Segmentation { .. }));
    let mut out = String::from(if seg {
        "epoch,train_loss,val_loss,train_dice,val_dice,train_iou,val_iou\n"
    } else {
        "epoch,train_loss,val_loss,train_acc,val_acc,train_f1,val_f1\n"
    });
    for r in history {
        let (ta, tb) = r.train.pair();
        let (va, vb) = r.val.pair();
        writeln!(out, "{},{},{},{ta},{va},{tb},{vb}", r.epoch + 1, r.train_loss, r.val_loss).unwrap();
    }
    out
}

#[cfg(test)]
mod tests;
