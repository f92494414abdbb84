//! Evaluation, distillation loss and AdamW fine-tuning.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{shuffled_indices, Dataset};
use crate::error::{Result, VbpError};
use crate::grad::{self, log_softmax, Params};
use crate::model::{forward_model, ModelSpec, WeightStore};
use crate::table::Table;
use crate::tensor::Tensor;

/// Learning rate used for ImageNet-scale fine-tuning; too small for toy runs.
pub const PAPER_LR: f64 = 1.5e-5;
pub const TOY_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub loss: f64,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy and mean cross-entropy over a labeled dataset.
pub fn evaluate(spec: &ModelSpec, weights: &WeightStore, dataset: &Dataset) -> Result<Evaluation> {
    let labels = dataset.require_labels()?;
    if dataset.is_empty() {
        return Err(VbpError::Usage("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for idx in dataset.batches(64) {
        let logits = forward_model(spec, weights, &dataset.batch(&idx), None)?;
        if !logits.all_finite() {
            return Err(VbpError::Numeric("non-finite logits during evaluation".into()));
        }
        for (row, &i) in logits.rows().zip(&idx) {
            let y = labels[i] as usize;
            correct += (argmax(row) == y) as usize;
            let r: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            loss -= log_softmax(&r)[y];
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation { top1: correct as f64 / n, loss: loss / n })
}

/// `top1(pruned) / top1(dense)`.
pub fn retention(pruned_top1: f64, dense_top1: f64) -> f64 {
    if dense_top1 == 0.0 {
        0.0
    } else {
        pruned_top1 / dense_top1
    }
}

/// `(1−α)·CE(s, y) + α·T²·KL(softmax(t/T) ‖ softmax(s/T))`, batch-averaged,
/// and its gradient w.r.t. the student logits.
pub fn kd_loss_grad(
    student: &[f64],
    teacher: &[f64],
    labels: &[u32],
    classes: usize,
    alpha: f64,
    temperature: f64,
) -> (f64, Vec<f64>) {
    let bs = labels.len() as f64;
    let (ce, mut grad) = grad::cross_entropy(student, labels, classes);
    grad.iter_mut().for_each(|g| *g *= 1.0 - alpha);
    let mut kl = 0.0;
    for ((s, t), g) in student.chunks_exact(classes).zip(teacher.chunks_exact(classes)).zip(grad.chunks_exact_mut(classes)) {
        let ls = log_softmax(&s.iter().map(|v| v / temperature).collect::<Vec<_>>());
        let lt = log_softmax(&t.iter().map(|v| v / temperature).collect::<Vec<_>>());
        for i in 0..classes {
            let pt = lt[i].exp();
            kl += pt * (lt[i] - ls[i]);
            g[i] += alpha * temperature * (ls[i].exp() - pt) / bs;
        }
    }
    let loss = (1.0 - alpha) * ce + alpha * temperature * temperature * kl / bs;
    (loss, grad)
}

/// Scalar distillation loss on `[batch, classes]` logits.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, labels: &[u32], alpha: f64, temperature: f64) -> Result<f64> {
    if student.shape() != teacher.shape() || student.num_rows() != labels.len() {
        return Err(VbpError::dim("kd_loss", student.shape(), teacher.shape()));
    }
    let s: Vec<f64> = student.data().iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = teacher.data().iter().map(|&v| v as f64).collect();
    Ok(kd_loss_grad(&s, &t, labels, student.last_dim(), alpha, temperature).0)
}

/// Cosine annealing from `base` at step 0 to 0 at step `total − 1`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: TOY_LR, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n: usize) -> Self {
        AdamW { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let AdamWConfig { weight_decay, beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + eps);
            *p -= lr * (update + weight_decay * *p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig { enabled: true, alpha: 0.5, temperature: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub kd: KdConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            kd: KdConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(VbpError::Usage("epochs and batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.kd.alpha) {
            return Err(VbpError::Usage(format!("kd alpha must lie in [0, 1], got {}", self.kd.alpha)));
        }
        if !(self.kd.temperature > 0.0) {
            return Err(VbpError::Usage(format!("kd temperature must be > 0, got {}", self.kd.temperature)));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(VbpError::Usage(format!("learning rate must be >= 0, got {}", self.optimizer.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub weights: WeightStore,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl FinetuneResult {
    /// `epoch, lr, train_loss, val_top1, wall_seconds`.
    pub fn log_table(&self) -> Table {
        let mut t = Table::new(["epoch", "lr", "train_loss", "val_top1", "wall_seconds"]);
        for e in &self.log {
            t.push([
                e.epoch.to_string(),
                format!("{:e}", e.lr),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.val_top1),
                format!("{:.3}", e.wall_seconds),
            ]);
        }
        t
    }
}

/// Fine-tunes `weights` on `train`, optionally distilling from `teacher`, and
/// returns the weights of the epoch with the best `val` top-1 (earliest on ties).
pub fn finetune(
    spec: &ModelSpec,
    weights: &WeightStore,
    teacher: Option<(&ModelSpec, &WeightStore)>,
    train: &Dataset,
    val: &Dataset,
    config: &FinetuneConfig,
) -> Result<FinetuneResult> {
    config.validate()?;
    let labels = train.require_labels()?;
    val.require_labels()?;
    if train.is_empty() || val.is_empty() {
        return Err(VbpError::Usage("fine-tuning needs non-empty train and validation sets".into()));
    }
    let teacher = if config.kd.enabled {
        let (ts, tw) = teacher.ok_or_else(|| VbpError::Usage("distillation enabled but no teacher given".into()))?;
        if ts.num_classes != spec.num_classes {
            return Err(VbpError::Usage(format!(
                "teacher has {} classes, student has {}",
                ts.num_classes, spec.num_classes
            )));
        }
        Some((ts, tw))
    } else {
        None
    };

    let mut params = Params::from_weights(spec, weights)?;
    let mut opt = AdamW::new(config.optimizer, params.data.len());
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = config.epochs * steps_per_epoch;
    let mut step = 0;
    let mut best: Option<(f64, usize, WeightStore)> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = shuffled_indices(train.len(), config.seed, &format!("finetune.epoch.{epoch}"));
        let lr0 = cosine_lr(config.optimizer.lr, step, total);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch = train.batch(idx);
            let y: Vec<u32> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = grad::forward(&params, &batch)?;
            let (loss, dlogits) = match teacher {
                Some((ts, tw)) => {
                    let t: Vec<f64> = forward_model(ts, tw, &batch, None)?.data().iter().map(|&v| v as f64).collect();
                    kd_loss_grad(&logits, &t, &y, spec.num_classes, config.kd.alpha, config.kd.temperature)
                }
                None => grad::cross_entropy(&logits, &y, spec.num_classes),
            };
            if !loss.is_finite() {
                return Err(VbpError::Numeric(format!("loss became {loss} at epoch {epoch}")));
            }
            loss_sum += loss * idx.len() as f64;
            let g = params.backward(&cache, &dlogits);
            opt.step(&mut params.data, &g.data, cosine_lr(config.optimizer.lr, step, total));
            step += 1;
        }
        let current = params.to_weights();
        let val_top1 = evaluate(spec, &current, val)?.top1;
        log.push(EpochLog {
            epoch,
            lr: lr0,
            train_loss: loss_sum / train.len() as f64,
            val_top1,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_top1 > *b) {
            best = Some((val_top1, epoch, current));
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch");
    Ok(FinetuneResult { weights, best_epoch, log })
}
