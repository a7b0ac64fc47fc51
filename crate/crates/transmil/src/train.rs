//! Bag-level training: AdamW wrapped in lookahead weight averaging, a
//! one-bag-per-step loop that keeps the best validation checkpoint, and
//! split evaluation.
//!
//! The optimizer holds fast weights (the live model tensors) and a slow
//! copy. Every inner AdamW step advances the fast weights; every
//! `lookahead_k` steps the slow weights move a fraction `lookahead_alpha`
//! toward the fast ones and the fast weights snap back onto them. The sync
//! is computed as the convex combination `(1−α)·slow + α·fast`, which at
//! `α = 1` reproduces the fast weights exactly, making the wrapper a strict
//! no-op around the inner optimizer.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionMode;
use crate::metrics::{accuracy, auc_binary, auc_macro_ovr, MetricsError};
use crate::mil::Bag;
use crate::model::BagClassifier;
use crate::tensor::{Tape, Tensor, TensorError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_auc,val_acc,seconds";

#[derive(Debug)]
pub enum TrainError {
    /// Invalid training configuration; names the offending field.
    Config { field: &'static str, why: String },
    /// Bags that cannot be trained on (wrong width, label out of range…).
    Data { why: String },
    Metrics(MetricsError),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config { field, why } => write!(f, "invalid {field}: {why}"),
            TrainError::Data { why } => write!(f, "unusable dataset: {why}"),
            TrainError::Metrics(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Metrics(e) => Some(e),
            TrainError::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        TrainError::Metrics(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// AdamW (decoupled weight decay) inside a lookahead outer loop. Moment
/// buffers belong to the fast weights and survive sync points.
pub struct LookaheadAdam {
    lr: f64,
    weight_decay: f64,
    sync_period: usize,
    sync_alpha: f64,
    steps: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    slow: Vec<Vec<f64>>,
}

impl LookaheadAdam {
    pub fn new(
        params: &[&Tensor],
        lr: f64,
        weight_decay: f64,
        sync_period: usize,
        sync_alpha: f64,
    ) -> Result<LookaheadAdam, TrainError> {
        let err = |field, why: String| Err(TrainError::Config { field, why });
        if !(lr > 0.0 && lr.is_finite()) {
            return err("lr", format!("must be positive and finite, got {lr}"));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return err("weight_decay", format!("must be non-negative, got {weight_decay}"));
        }
        if sync_period == 0 {
            return err("lookahead_k", "sync period must be at least 1".to_string());
        }
        if !(sync_alpha > 0.0 && sync_alpha <= 1.0) {
            return err("lookahead_alpha", format!("must lie in (0, 1], got {sync_alpha}"));
        }
        Ok(LookaheadAdam {
            lr,
            weight_decay,
            sync_period,
            sync_alpha,
            steps: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            slow: params.iter().map(|p| p.data().to_vec()).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One inner AdamW step on every parameter's accumulated gradient (a
    /// missing gradient buffer counts as zero), then a sync if the step
    /// count reached the period. Callers zero the gradients afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), TrainError> {
        if params.len() != self.slow.len() {
            return Err(TrainError::Data {
                why: format!("optimizer tracks {} tensors, got {}", self.slow.len(), params.len()),
            });
        }
        self.steps += 1;
        let t = self.steps as i32;
        let m_scale = 1.0 - BETA1.powi(t);
        let v_scale = 1.0 - BETA2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            if p.numel() != self.slow[idx].len() {
                return Err(TrainError::Data {
                    why: format!("parameter {idx} changed size under the optimizer"),
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            match p.grad() {
                Some(g) => {
                    for i in 0..g.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    }
                }
                None => {
                    for i in 0..m.len() {
                        m[i] *= BETA1;
                        v[i] *= BETA2;
                    }
                }
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                let m_hat = m[i] / m_scale;
                let v_hat = v[i] / v_scale;
                data[i] -= self.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * data[i]);
            }
        }
        if self.steps % self.sync_period == 0 {
            self.sync(params);
        }
        Ok(())
    }

    fn sync(&mut self, params: &mut [&mut Tensor]) {
        let a = self.sync_alpha;
        for (slow, p) in self.slow.iter_mut().zip(params.iter_mut()) {
            for (s, x) in slow.iter_mut().zip(p.data_mut()) {
                *s = (1.0 - a) * *s + a * *x;
                *x = *s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub mode: AttentionMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 1e-5,
            epochs: 50,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            mode: AttentionMode::Nystrom,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights after the final epoch.
    pub model: BagClassifier,
    /// The snapshot with the highest validation AUC (the untrained model
    /// counts as epoch 0).
    pub best: BagClassifier,
    pub best_val_auc: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub bags: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub mean_loss: f64,
}

fn check_bags(model: &BagClassifier, bags: &[Bag], split: &str) -> Result<(), TrainError> {
    if bags.is_empty() {
        return Err(TrainError::Data { why: format!("{split} split is empty") });
    }
    for bag in bags {
        let width = bag.instances.shape()[1];
        if width != model.config.input_dim {
            return Err(TrainError::Data {
                why: format!(
                    "bag {:?} has {width}-wide features but the model expects {}",
                    bag.id, model.config.input_dim
                ),
            });
        }
        if bag.label >= model.config.classes {
            return Err(TrainError::Data {
                why: format!(
                    "bag {:?} has label {} but the model has {} classes",
                    bag.id, bag.label, model.config.classes
                ),
            });
        }
    }
    Ok(())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Runs the model over `bags` and reports accuracy, AUC (binary or
/// macro one-vs-rest), and mean cross-entropy.
pub fn evaluate(model: &BagClassifier, bags: &[Bag], mode: AttentionMode) -> Result<EvalReport, TrainError> {
    check_bags(model, bags, "eval")?;
    let classes = model.config.classes;
    let mut probs = Vec::with_capacity(bags.len() * classes);
    let mut labels = Vec::with_capacity(bags.len());
    let mut loss_sum = 0.0;
    for bag in bags {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let features = tape.constant_from(bag.instances.shape(), bag.instances.data().to_vec())?;
        let pass = bound.forward(&mut tape, features, mode)?;
        let p = softmax(tape.value(pass.logits));
        loss_sum -= p[bag.label].max(f64::MIN_POSITIVE).ln();
        probs.extend_from_slice(&p);
        labels.push(bag.label);
    }

    let auc = if classes == 2 {
        let scores: Vec<f64> = labels.iter().enumerate().map(|(i, _)| probs[i * 2 + 1]).collect();
        let binary: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
        auc_binary(&scores, &binary)?
    } else {
        auc_macro_ovr(&probs, classes, &labels)?
    };
    Ok(EvalReport {
        bags: bags.len(),
        accuracy: accuracy(&probs, classes, &labels)?,
        auc,
        mean_loss: loss_sum / bags.len() as f64,
    })
}

/// Trains one bag per step with a seeded shuffle each epoch, evaluating on
/// `val` after every epoch. The returned outcome carries both the final
/// weights and the best-validation snapshot. Identical inputs and seed give
/// bit-identical results; zero epochs return the model untouched.
pub fn train_loop(
    model: BagClassifier,
    train: &[Bag],
    val: &[Bag],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let mut model = model;
    model.config.validate()?;
    check_bags(&model, train, "train")?;
    check_bags(&model, val, "val")?;
    let mut opt = LookaheadAdam::new(
        &model.parameters(),
        cfg.lr,
        cfg.weight_decay,
        cfg.lookahead_k,
        cfg.lookahead_alpha,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let baseline = evaluate(&model, val, cfg.mode)?;
    let mut best = model.clone();
    let mut best_val_auc = baseline.auc;
    let mut best_epoch = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &i in &order {
            let bag = &train[i];
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let features = tape.constant_from(bag.instances.shape(), bag.instances.data().to_vec())?;
            let pass = bound.forward(&mut tape, features, cfg.mode)?;
            let loss = tape.cross_entropy(pass.logits, bag.label)?;
            loss_sum += tape.value(loss)[0];
            tape.backward(loss)?;

            let ids = bound.ids();
            let mut params = model.parameters_mut();
            for (id, p) in ids.iter().zip(params.iter_mut()) {
                tape.write_grad(*id, p);
            }
            opt.step(&mut params)?;
            for p in params.iter_mut() {
                p.zero_grad();
            }
        }

        let report = evaluate(&model, val, cfg.mode)?;
        if report.auc > best_val_auc {
            best = model.clone();
            best_val_auc = report.auc;
            best_epoch = epoch;
        }
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auc: report.auc,
            val_acc: report.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { model, best, best_val_auc, best_epoch, log })
}

/// Writes the per-epoch log as CSV with LF endings.
pub fn write_train_log(log: &[EpochLog], path: impl AsRef<Path>) -> io::Result<()> {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{:.3}\n",
            e.epoch, e.train_loss, e.val_auc, e.val_acc, e.seconds
        ));
    }
    fs::write(path, out)
}
