//! Weighted binary cross-entropy training with per-sequence steps, the two
//! learning-rate schedules, early stopping on validation accuracy and
//! best-epoch weight retention.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use mvscan_nn::{AdamW, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::View;
use crate::error::{Error, IoContext, Result};
use crate::evaluate::roc_auc;
use crate::models::checkpoint::{self, WeightOrigin};
use crate::models::{apply_bn_updates, predict, sigmoid, Pass, ScanModel};
use crate::seed;

pub const LR_RANGE: (f64, f64) = (1e-8, 1e-1);
pub const WEIGHT_DECAY_RANGE: (f64, f64) = (1e-6, 1e-1);
pub const PROB_EPS: f64 = 1e-7;
pub const PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheduler {
    CosineAnnealing { t_max: usize },
    ReduceOnPlateau { factor: f64, patience: usize },
}

impl Scheduler {
    pub fn cosine() -> Self {
        Self::CosineAnnealing { t_max: 10 }
    }

    pub fn plateau() -> Self {
        Self::ReduceOnPlateau { factor: 0.5, patience: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub scheduler: Scheduler,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let within = |x: f64, (lo, hi): (f64, f64)| x >= lo && x <= hi;
        if !within(self.learning_rate, LR_RANGE) {
            return Err(Error::Precondition(format!("learning rate {} outside [1e-8, 1e-1]", self.learning_rate)));
        }
        if !within(self.weight_decay, WEIGHT_DECAY_RANGE) {
            return Err(Error::Precondition(format!("weight decay {} outside [1e-6, 1e-1]", self.weight_decay)));
        }
        crate::models::check_dropout(self.dropout)?;
        match self.scheduler {
            Scheduler::CosineAnnealing { t_max } if t_max == 0 => Err(Error::Precondition("cosine T_max must be ≥ 1".into())),
            Scheduler::ReduceOnPlateau { factor, patience } if !(factor > 0.0 && factor < 1.0) || patience == 0 => {
                Err(Error::Precondition(format!("plateau factor {factor} / patience {patience} out of range")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub max_epochs: usize,
    pub patience: usize,
}

impl TrainBudget {
    pub fn new(max_epochs: usize) -> Self {
        Self { max_epochs, patience: PATIENCE }
    }

    pub fn tuning() -> Self {
        Self::new(20)
    }

    pub fn cv() -> Self {
        Self::new(30)
    }

    pub fn final_stage() -> Self {
        Self::new(100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Precondition(format!("budget needs ≥ 1 epoch and patience ≥ 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub pos: f64,
    pub neg: f64,
}

impl ClassWeights {
    pub const UNIT: Self = Self { pos: 1.0, neg: 1.0 };
}

/// `w_c = N / (2 N_c)`.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    let n = labels.len();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == n {
        return Err(Error::Weighting(format!("{pos} positives among {n} labels")));
    }
    Ok(ClassWeights { pos: n as f64 / (2 * pos) as f64, neg: n as f64 / (2 * (n - pos)) as f64 })
}

/// Weighted binary cross-entropy of a probability. Probabilities inside
/// [0, 1] are clamped to [ε, 1 − ε] before the logarithm.
pub fn weighted_bce(p: f64, y: u8, w: ClassWeights) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(p));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    Ok(if y == 1 { -w.pos * p.ln() } else { -w.neg * (1.0 - p).ln() })
}

/// Loss and its derivative with respect to the logit. The derivative is
/// the unclamped closed form, so saturated wrong predictions still move.
pub fn weighted_bce_logit(z: f64, y: u8, w: ClassWeights) -> (f64, f64) {
    let p = sigmoid(z);
    let loss = weighted_bce(p, y, w).unwrap_or(f64::NAN);
    let grad = if y == 1 { w.pos * (p - 1.0) } else { w.neg * p };
    (loss, grad)
}

/// Learning-rate schedule state, stepped once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: Scheduler,
    pub lr0: f64,
    pub lr: f64,
    /// Completed epochs.
    pub t: usize,
    pub best: Option<f64>,
    pub stagnant: usize,
}

impl LrSchedule {
    pub fn new(hp: &HyperParams) -> Self {
        Self { kind: hp.scheduler, lr0: hp.learning_rate, lr: hp.learning_rate, t: 0, best: None, stagnant: 0 }
    }

    /// Closes an epoch with its validation metric and returns the next rate.
    /// Cosine follows `lr0 (1 + cos(π t / T_max)) / 2`; plateau multiplies
    /// by `factor` once `patience` epochs pass without a strict improvement.
    pub fn step(&mut self, metric: f64) -> f64 {
        self.t += 1;
        match self.kind {
            Scheduler::CosineAnnealing { t_max } => {
                let x = std::f64::consts::PI * self.t as f64 / t_max as f64;
                self.lr = self.lr0 * (1.0 + x.cos()) / 2.0;
            }
            Scheduler::ReduceOnPlateau { factor, patience } => {
                if self.best.is_none_or(|b| metric > b) {
                    self.best = Some(metric);
                    self.stagnant = 0;
                } else {
                    self.stagnant += 1;
                    if self.stagnant >= patience {
                        self.lr *= factor;
                        self.stagnant = 0;
                    }
                }
            }
        }
        self.lr
    }
}

/// One sequence volume; `study_id` groups sequences for study-level
/// validation metrics.
#[derive(Debug, Clone)]
pub struct Sample {
    pub study_id: String,
    pub label: u8,
    pub volume: Arc<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScore {
    pub study_id: String,
    pub label: u8,
    /// Mean probability over the study's sequences.
    pub prob: f64,
}

/// Inference over `samples`, averaged per study and sorted by study id.
pub fn score_studies<M: ScanModel<f32> + ?Sized>(model: &M, samples: &[Sample]) -> Result<Vec<StudyScore>> {
    let probs: Vec<f64> = samples.par_iter().map(|s| predict(model, &s.volume)).collect::<Result<_>>()?;
    let mut by_study: BTreeMap<&str, (u8, Vec<f64>)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(probs) {
        by_study.entry(&s.study_id).or_insert((s.label, Vec::new())).1.push(p);
    }
    Ok(by_study
        .into_iter()
        .map(|(id, (label, ps))| StudyScore { study_id: id.to_string(), label, prob: ps.iter().sum::<f64>() / ps.len() as f64 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    /// Study-level accuracy at probability 0.5.
    pub accuracy: f64,
    /// `None` when the validation set holds a single class.
    pub auc: Option<f64>,
}

pub fn val_metrics(scores: &[StudyScore]) -> ValMetrics {
    let correct = scores.iter().filter(|s| (s.prob > 0.5) == (s.label == 1)).count();
    let probs: Vec<f64> = scores.iter().map(|s| s.prob).collect();
    let labels: Vec<u8> = scores.iter().map(|s| s.label).collect();
    ValMetrics { accuracy: correct as f64 / scores.len() as f64, auc: roc_auc(&probs, &labels).ok() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    Diverged { epoch: usize, step: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    /// 1-indexed; 0 when no epoch finished.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub val_auc_at_best: Option<f64>,
    pub epochs_run: usize,
    pub status: TrainStatus,
    pub checkpoint: Option<PathBuf>,
    pub history: Vec<EpochRecord>,
}

impl TrainResult {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Best-epoch weights are written here.
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch JSON lines.
    pub history: Option<PathBuf>,
    pub view: Option<View>,
    pub config_hash: Option<String>,
    /// Test hook: replaces the loss at this global step (1-indexed) with NaN.
    pub nan_at_step: Option<u64>,
}

/// Trains `model` in place and leaves it holding the best-epoch weights.
pub fn train<M: ScanModel<f32> + ?Sized>(
    model: &mut M,
    train_set: &[Sample],
    val_set: &[Sample],
    hp: &HyperParams,
    budget: &TrainBudget,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainResult> {
    hp.validate()?;
    budget.validate()?;
    if val_set.is_empty() {
        return Err(Error::Precondition("validation set is empty".into()));
    }
    let labels: Vec<u8> = train_set.iter().map(|s| s.label).collect();
    let weights = class_weights(&labels)?;
    let mut history_file = match &options.history {
        Some(p) => Some(std::fs::File::create(p).at(p)?),
        None => None,
    };

    let mut optim = AdamW::new(hp.weight_decay);
    let mut schedule = LrSchedule::new(hp);
    let mut best: Option<(usize, ValMetrics, ParamStore<f32>)> = None;
    let mut history = Vec::new();
    let mut status = TrainStatus::Completed;
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 1..=budget.max_epochs {
        let lr = schedule.lr;
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(seed, &format!("epoch/{epoch}"))));
        let mut loss_sum = 0.0;
        for &i in &order {
            step += 1;
            let sample = &train_set[i];
            let mut pass = Pass::new(model.store(), true, true, seed::derive(seed, &format!("step/{step}")));
            let out = model.forward(&mut pass, &sample.volume)?;
            let z = f64::from(pass.tape.value(out.logit).data()[0]);
            let (mut loss, grad) = weighted_bce_logit(z, sample.label, weights);
            if options.nan_at_step == Some(step) {
                loss = f64::NAN;
            }
            if !loss.is_finite() || !z.is_finite() {
                status = TrainStatus::Diverged { epoch, step };
                break 'epochs;
            }
            loss_sum += loss;
            let grads = pass.tape.backward(out.logit, Tensor::new(vec![1], vec![grad as f32])?)?;
            let Pass { binding, bn_updates, .. } = pass;
            optim.step(model.store_mut(), &binding, &grads, lr);
            apply_bn_updates(model.store_mut(), &bn_updates);
        }

        let metrics = val_metrics(&score_studies(model, val_set)?);
        let record =
            EpochRecord { epoch, train_loss: loss_sum / train_set.len() as f64, lr, val_accuracy: metrics.accuracy, val_auc: metrics.auc };
        if let Some(f) = history_file.as_mut() {
            let path = options.history.as_ref().expect("history path");
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n").at(path)?;
        }
        history.push(record);
        if best.as_ref().is_none_or(|b| metrics.accuracy > b.1.accuracy) {
            best = Some((epoch, metrics, model.store().clone()));
        }
        schedule.step(metrics.accuracy);
        let best_epoch = best.as_ref().expect("set above").0;
        if epoch - best_epoch >= budget.patience && epoch < budget.max_epochs {
            status = TrainStatus::EarlyStopped;
            break;
        }
    }

    let epochs_run = history.len();
    let (best_epoch, best_metrics) = match best {
        Some((epoch, metrics, store)) => {
            *model.store_mut() = store;
            (epoch, Some(metrics))
        }
        None => (0, None),
    };
    let checkpoint = match (&options.checkpoint, best_metrics) {
        (Some(path), Some(_)) => {
            checkpoint::save_model(path, model, WeightOrigin::FineTuned, options.view, options.config_hash.clone())?;
            Some(path.clone())
        }
        _ => None,
    };
    Ok(TrainResult {
        best_epoch,
        best_val_accuracy: best_metrics.map_or(0.0, |m| m.accuracy),
        val_auc_at_best: best_metrics.and_then(|m| m.auc),
        epochs_run,
        status,
        checkpoint,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights() {
        let mut labels = vec![1u8; 50];
        labels.extend([0u8; 50]);
        assert_eq!(class_weights(&labels).unwrap(), ClassWeights::UNIT);
        let mut labels = vec![1u8; 20];
        labels.extend([0u8; 80]);
        assert_eq!(class_weights(&labels).unwrap(), ClassWeights { pos: 2.5, neg: 0.625 });
        assert!(matches!(class_weights(&[0, 0, 0]), Err(Error::Weighting(_))));
    }

    #[test]
    fn loss_examples() {
        let w = ClassWeights { pos: 2.0, neg: 1.0 };
        assert!((weighted_bce(0.5, 1, w).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((weighted_bce(0.5, 0, w).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(weighted_bce(0.999_999_9, 1, ClassWeights::UNIT).unwrap() < 1e-6);
        assert!(matches!(weighted_bce(1.5, 1, w), Err(Error::Domain(_))));
        assert!(weighted_bce(1.0, 0, w).unwrap().is_finite());
    }

    #[test]
    fn logit_gradient_matches_finite_difference() {
        let w = ClassWeights { pos: 2.5, neg: 0.625 };
        for y in [0, 1] {
            for z in [-3.0, -0.2, 0.0, 1.7] {
                let h = 1e-6;
                let fd = (weighted_bce_logit(z + h, y, w).0 - weighted_bce_logit(z - h, y, w).0) / (2.0 * h);
                assert!((fd - weighted_bce_logit(z, y, w).1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn schedules() {
        let hp = |scheduler| HyperParams { learning_rate: 1e-4, weight_decay: 1e-4, dropout: 0.0, scheduler };
        let mut s = LrSchedule::new(&hp(Scheduler::plateau()));
        s.step(0.5);
        assert_eq!(s.step(0.5), 1e-4);
        assert_eq!(s.step(0.4), 1e-4);
        assert_eq!(s.step(0.5), 5e-5);
        let mut s = LrSchedule::new(&hp(Scheduler::cosine()));
        let lrs: Vec<f64> = (0..10).map(|_| s.step(0.0)).collect();
        assert!((lrs[4] - 5e-5).abs() < 1e-18);
        assert_eq!(lrs[9], 0.0);
        let mut s = LrSchedule::new(&hp(Scheduler::CosineAnnealing { t_max: 5 }));
        assert_eq!((0..5).map(|_| s.step(0.0)).last().unwrap(), 0.0);
    }

    #[test]
    fn hyperparameter_bounds() {
        let ok = HyperParams { learning_rate: 1e-8, weight_decay: 1e-1, dropout: 0.5, scheduler: Scheduler::cosine() };
        ok.validate().unwrap();
        assert!(HyperParams { learning_rate: 0.2, ..ok }.validate().is_err());
        assert!(HyperParams { weight_decay: 1e-7, ..ok }.validate().is_err());
        assert!(HyperParams { dropout: 0.51, ..ok }.validate().is_err());
        assert!(TrainBudget { max_epochs: 0, patience: 10 }.validate().is_err());
        assert_eq!(TrainBudget::final_stage().max_epochs, 100);
    }
}
