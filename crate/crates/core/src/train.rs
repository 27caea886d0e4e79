//! Training: AdamW with a cosine-annealed rate, per-batch sample
//! reweighting, and early stopping on validation DSC.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cim::{self, CimConfig, SampleWeights};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, MaskMap, MetricSummary};
use crate::model::{predict, Model};
use crate::rng;
use crate::synth::{augment, AugmentConfig, Sample};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    /// When false the sample weights stay uniform.
    pub cim_enabled: bool,
    pub augment: AugmentConfig,
    /// Derived from the run seed when loaded as part of a run configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 0.0,
            batch_size: 8,
            epochs: 400,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 25,
            cim_enabled: true,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_max, self.adam_eps]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        let ok = positive
            && (0.0..=self.lr_max).contains(&self.lr_min)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epochs > 0
            && self.early_stop_patience > 0;
        if !ok {
            return Err(Error::Config(format!(
                "invalid training configuration {self:?}"
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2 for the weight learner, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Domain {
            op: "cosine_lr",
            detail: format!("step {step} outside 0..={total_steps}"),
        });
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    if 2 * step == total_steps {
        return Ok((lr_max + lr_min) / 2.0);
    }
    let t = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + t.cos()))
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    pub fn update(
        &mut self,
        model: &mut Model,
        grads: &HashMap<String, Tensor>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (name, param) in model.named_params_mut() {
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *p -= lr * cfg.weight_decay * *p;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Early stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub epochs_without_improvement: usize,
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
            best: None,
            epochs_without_improvement: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.epochs_without_improvement = 0;
        } else {
            self.epochs_without_improvement += 1;
        }
        StopDecision {
            improved,
            stop: self.epochs_without_improvement >= self.patience,
        }
    }
}

/// Images `N x 3 x S x S` with their masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub masks: MaskMap,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot batch zero samples".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(samples.len() * h * w);
        for s in &samples {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::mismatch(
                    "batch",
                    first.image.shape(),
                    s.image.shape(),
                ));
            }
            images.extend_from_slice(s.image.data());
            labels.extend_from_slice(s.mask.labels());
        }
        Ok(Self {
            images: Tensor::new(&[samples.len(), 3, h, w], images)?,
            masks: MaskMap::new([samples.len(), h, w], labels)?,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_cim: f64,
    pub l_dice: f64,
    pub l_fl: f64,
    pub loss: f64,
    /// Weight-learner objective at uniform weights and at the learned ones;
    /// absent when reweighting is disabled.
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
}

/// Everything `train_step` needs besides the model and the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct StepContext {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub cim: CimConfig,
}

/// One optimization step: forward, learn sample weights from the deepest
/// features (no gradient into the network), weighted loss, backward,
/// AdamW update at rate `lr`.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    ctx: &StepContext,
    opt: &mut AdamW,
    lr: f64,
) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::DegenerateReduction {
            op: "train_step",
            count: batch.len(),
        });
    }
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let out = bound.forward(tape.constant(batch.images.clone()))?;

    let (weights, objective_before, objective_after) = if ctx.train.cim_enabled {
        let features = cim::extract_feature_vars(&out.f5.value(), &ctx.cim, ctx.cim.seed)?;
        let learned = cim::learn_weights_detailed(&features, &ctx.cim)?;
        (
            learned.weights,
            Some(learned.uniform_objective),
            Some(learned.objective),
        )
    } else {
        (SampleWeights::uniform(batch.len()), None, None)
    };

    let ce = losses::ce_per_sample(out.probs, &batch.masks)?;
    let l_cim = cim::cim_loss(ce, &weights)?;
    let l_dice = losses::dice_loss(out.probs, &batch.masks, &ctx.loss)?;
    let l_fl = losses::focal_loss(out.probs, &batch.masks, &ctx.loss)?;
    let loss = losses::total_loss(l_cim, l_dice, l_fl, &ctx.loss)?;
    let metrics = StepMetrics {
        l_cim: l_cim.item()?,
        l_dice: l_dice.item()?,
        l_fl: l_fl.item()?,
        loss: loss.item()?,
        objective_before,
        objective_after,
    };

    let grads = tape.backward(loss)?;
    let mut by_name = HashMap::with_capacity(bound.params.len());
    for (name, var) in &bound.params {
        if let Some(g) = grads.get(*var) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            by_name.insert(name.clone(), g.clone());
        }
    }
    drop(bound);
    opt.update(model, &by_name, lr, &ctx.train);
    Ok(metrics)
}

/// Per-image mIoU / DSC of the model's hard predictions.
pub fn evaluate(model: &Model, samples: &[Sample], chunk: usize) -> Result<MetricSummary> {
    let batch = Batch::from_samples(samples)?;
    let probs = predict(model, &batch.images, chunk)?;
    losses::summarize(&MaskMap::argmax(&probs)?, &batch.masks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cim: f64,
    pub l_dice: f64,
    pub l_fl: f64,
    pub loss: f64,
    pub val_miou: f64,
    pub val_dsc: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub struct FitResult {
    pub history: TrainHistory,
    /// Parameters after the epoch with the best validation DSC.
    pub best: Model,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean(v.into_iter()))
}

/// Batch index lists for one epoch: a seeded shuffle cut into
/// `batch_size` pieces; a trailing piece of one sample joins the previous
/// batch (the weight learner needs two samples).
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, 0x6570_6f63_6800 + epoch as u64);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    epoch_batches(n, batch_size, 0, 0).len()
}

/// Trains on `train`, validating on `val` after every epoch. `on_epoch` sees
/// each record as it is produced.
pub fn fit(
    model: Model,
    train: &[Sample],
    val: &[Sample],
    ctx: &StepContext,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    ctx.train.validate()?;
    ctx.loss.validate()?;
    ctx.cim.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Config(format!(
            "need at least 2 training and 1 validation sample, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let cfg = &ctx.train;
    let per_epoch = steps_per_epoch(train.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut model = model;
    let mut opt = AdamW::new();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut metrics = Vec::with_capacity(per_epoch);
        let mut lr = cfg.lr_max;
        for (b, indices) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let samples = indices
                .iter()
                .map(|&i| {
                    let seed = rng::derive(rng::derive(cfg.seed, epoch as u64), i as u64);
                    let ops = cfg.augment.sample_ops(&mut rng::rng(seed));
                    augment(&train[i], &ops, rng::mix64(seed))
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_samples(&samples)?;
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)?;
            let m = train_step(&mut model, &batch, ctx, &mut opt, lr).map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("epoch {epoch}, step {b}: {what}"))
                }
                other => other,
            })?;
            metrics.push(m);
            step += 1;
        }
        let summary = evaluate(&model, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            l_cim: mean(metrics.iter().map(|m| m.l_cim)),
            l_dice: mean(metrics.iter().map(|m| m.l_dice)),
            l_fl: mean(metrics.iter().map(|m| m.l_fl)),
            loss: mean(metrics.iter().map(|m| m.loss)),
            val_miou: summary.miou.mean,
            val_dsc: summary.dsc.mean,
            lr,
            objective_before: mean_opt(metrics.iter().map(|m| m.objective_before)),
            objective_after: mean_opt(metrics.iter().map(|m| m.objective_after)),
        };
        on_epoch(&record);
        let decision = stopper.observe(record.val_dsc);
        history.epochs.push(record);
        if decision.improved {
            best = model.clone();
            history.best_epoch = epoch;
        }
        if decision.stop {
            history.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(FitResult { history, best })
}
