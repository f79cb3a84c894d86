//! Loss, metrics, gate scheduling and the epoch loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{parse, Model, Network};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Graph, Mode, ParamStore, Scalar, Tensor, BCE_CLAMP};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Gates stay frozen for epochs `0..gate_freeze_epochs`.
    pub gate_freeze_epochs: usize,
    /// Shuffle seed.
    pub seed: u64,
    /// Evaluate (and let the caller checkpoint) every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 4,
            lr: 1e-3,
            gate_freeze_epochs: 10,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 5] = ["epochs", "batch_size", "lr", "gate_freeze_epochs", "eval_every"];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        Ok(())
    }

    /// Apply one `key=value` setting. Returns `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "gate_freeze_epochs" => self.gate_freeze_epochs = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("gate_freeze_epochs", self.gate_freeze_epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }
}

/// Pixel-mean binary cross-entropy with predictions clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::mismatch("bce_loss", pred.shape(), target.shape()));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let (p, t) = (p.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP), t.as_f64());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.numel() as f64)
}

/// Pixel confusion counts of a thresholded prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn of<T: Scalar>(pred: &[T], target: &[T], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(target) {
            match (p.as_f64() >= threshold, t.as_f64() >= 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn merge(self, o: Self) -> Self {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// `2TP / (2TP + FP + FN)`, 1 when both prediction and target are empty.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    /// `TP / (TP + FP + FN)`, 1 when both prediction and target are empty.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub f1: f64,
    pub iou: f64,
    pub loss: f64,
}

impl Metrics {
    fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        Metrics {
            f1: items.iter().map(|m| m.f1).sum::<f64>() / n,
            iou: items.iter().map(|m| m.iou).sum::<f64>() / n,
            loss: items.iter().map(|m| m.loss).sum::<f64>() / n,
        }
    }
}

/// F1 and IoU at `threshold`, plus the BCE of the raw prediction.
pub fn f1_iou<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<Metrics> {
    let loss = bce_loss(pred, target)?;
    let c = Confusion::of(pred.data(), target.data(), threshold);
    Ok(Metrics {
        f1: c.f1(),
        iou: c.iou(),
        loss,
    })
}

/// Freezes every gate before `freeze_epochs`, unfreezes from then on.
pub fn gate_schedule<T: Scalar>(epoch: usize, net: &Network, store: &mut ParamStore<T>, freeze_epochs: usize) {
    net.set_gates_trainable(store, epoch >= freeze_epochs);
}

/// Stacks samples into `[B, 1, I, I]` image and mask tensors.
pub fn batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("batch", "no samples"))?;
    let shape = first.image.shape().to_vec();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for s in samples {
        if s.image.shape() != shape.as_slice() || s.mask.shape() != shape.as_slice() {
            return Err(Error::mismatch("batch", &shape, s.image.shape()));
        }
        xs.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
        ys.extend(s.mask.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let mut dims = shape;
    dims[0] = samples.len();
    Ok((Tensor::new(dims.clone(), xs)?, Tensor::new(dims, ys)?))
}

fn image_slices<T: Scalar>(t: &Tensor<T>) -> impl Iterator<Item = &[T]> {
    let per = t.numel() / t.shape()[0].max(1);
    t.data().chunks(per)
}

/// Evaluation-mode metrics of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_image: Vec<(String, Metrics)>,
    /// Mean of the per-image scores.
    pub mean: Metrics,
    /// Scores over all pixels of the set at once.
    pub pooled: Metrics,
}

/// Runs the model in evaluation mode over `samples`; returns the report and
/// one `[1, 1, I, I]` probability map per sample.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], batch_size: usize) -> Result<(EvalReport, Vec<Tensor<T>>)> {
    let mut per_image = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut pooled = Confusion::default();
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let (x, y) = batch::<T>(&refs)?;
        let p = model.predict(&x)?;
        for ((s, ps), ys) in chunk.iter().zip(image_slices(&p)).zip(image_slices(&y)) {
            let pt = Tensor::new(s.image.shape().to_vec(), ps.to_vec())?;
            let yt = Tensor::new(s.image.shape().to_vec(), ys.to_vec())?;
            let m = f1_iou(&pt, &yt, THRESHOLD)?;
            pooled = pooled.merge(Confusion::of(ps, ys, THRESHOLD));
            loss_sum += m.loss;
            per_image.push((s.id.clone(), m));
            preds.push(pt);
        }
    }
    let metrics: Vec<_> = per_image.iter().map(|(_, m)| *m).collect();
    let report = EvalReport {
        mean: Metrics::mean(&metrics),
        pooled: Metrics {
            f1: pooled.f1(),
            iou: pooled.iou(),
            loss: loss_sum / samples.len().max(1) as f64,
        },
        per_image,
    };
    Ok((report, preds))
}

/// Training-set summary of one epoch, from the training-mode forward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean batch loss; `f1`/`iou` are per-image means.
    pub metrics: Metrics,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} f1={:.6} iou={:.6}",
            self.epoch, self.metrics.loss, self.metrics.f1, self.metrics.iou
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub report: EvalReport,
}

impl fmt::Display for EvalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (m, p) = (self.report.mean, self.report.pooled);
        write!(
            f,
            "eval epoch={} loss={:.6} f1={:.6} iou={:.6} pooled_f1={:.6} pooled_iou={:.6}",
            self.epoch, m.loss, m.f1, m.iou, p.f1, p.iou
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

/// What the per-epoch callback sees.
pub struct Progress<'a, T> {
    pub model: &'a Model<T>,
    pub record: &'a EpochRecord,
    pub eval: Option<&'a EvalRecord>,
    pub last: bool,
}

/// Mini-batch Adam on BCE with the gate schedule applied per epoch.
///
/// `eval_set` is scored in evaluation mode every `eval_every` epochs (the
/// training set is used when it is empty). The callback runs after every
/// epoch; an error from it stops training.
pub fn train<T, F>(
    model: &mut Model<T>,
    train_set: &[Sample],
    eval_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    T: Scalar,
    F: FnMut(Progress<'_, T>) -> Result<()>,
{
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train_set.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    let size = model.config().img_size;
    if let Some(s) = train_set.iter().chain(eval_set).find(|s| s.image.shape() != [1, 1, size, size]) {
        return Err(Error::Config(format!(
            "sample {} has shape {:?} but the model expects [1, 1, {size}, {size}]",
            s.id,
            s.image.shape()
        )));
    }
    let eval_set = if eval_set.is_empty() { train_set } else { eval_set };
    let mut adam = AdamState::<T>::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        gate_schedule(epoch, &model.net, &mut model.params, cfg.gate_freeze_epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut scores = Vec::with_capacity(train_set.len());
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<_> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = batch::<T>(&refs)?;
            model.params.zero_grad();
            let mut g = Graph::new(Mode::Train);
            let xi = g.input(x);
            let pred = model.forward(&mut g, xi)?;
            let loss = g.bce_loss(pred, y.clone())?;
            let value = g.value(loss).item().as_f64();
            g.backward(loss, &mut model.params)?;
            let bad_grad = model
                .params
                .iter()
                .find(|(_, p)| !p.grad.all_finite())
                .map(|(_, p)| p.name.clone());
            if !value.is_finite() || bad_grad.is_some() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    loss: value,
                    param: bad_grad.unwrap_or_else(|| "(all gradients finite)".into()),
                });
            }
            g.apply_running_updates(&mut model.params);
            adam.step(&mut model.params);

            loss_sum += value * idx.len() as f64;
            for (ps, ys) in image_slices(g.value(pred)).zip(image_slices(&y)) {
                let c = Confusion::of(ps, ys, THRESHOLD);
                scores.push(Metrics { f1: c.f1(), iou: c.iou(), loss: 0.0 });
            }
        }
        let mut metrics = Metrics::mean(&scores);
        metrics.loss = loss_sum / train_set.len() as f64;
        let record = EpochRecord { epoch, metrics };
        let last = epoch + 1 == cfg.epochs;
        let eval = if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let (report, _) = evaluate(model, eval_set, cfg.batch_size)?;
            Some(EvalRecord { epoch, report })
        } else {
            None
        };
        on_epoch(Progress {
            model,
            record: &record,
            eval: eval.as_ref(),
            last,
        })?;
        history.epochs.push(record);
        history.evals.extend(eval);
    }
    Ok(history)
}
