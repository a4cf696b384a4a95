//! Architecture screening, stratified k-fold stability runs, lowest-std
//! architecture selection and the final per-view model bundle.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{FoldPlan, Modality, StudyRecord, View};
use crate::error::{Error, Result};
use crate::models::InitProvenance;
use crate::seed;
use crate::training::{HyperParams, TrainBudget, TrainResult};

/// The `k` highest-scoring architectures, best first; equal scores fall
/// back to identifier order.
pub fn select_top_k(screen: &BTreeMap<String, f64>, k: usize) -> Result<Vec<String>> {
    if screen.len() < k {
        return Err(Error::Size(format!("asked for the top {k} of {} architectures", screen.len())));
    }
    let mut ranked: Vec<(&String, f64)> = screen.iter().map(|(a, &s)| (a, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(k).map(|(a, _)| a.clone()).collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample (n − 1) standard deviation; 0 for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVResult {
    pub view: View,
    pub modality: Modality,
    pub architecture: String,
    /// One validation AUC per fold. Empty for published summaries.
    pub fold_aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub fold_plan_digest: Option<String>,
}

impl CVResult {
    pub fn from_folds(
        view: View,
        modality: Modality,
        architecture: &str,
        fold_aucs: Vec<f64>,
        fold_plan_digest: Option<String>,
    ) -> Result<Self> {
        if fold_aucs.is_empty() || fold_aucs.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Precondition(format!("fold AUCs must be non-empty and within [0, 1]: {fold_aucs:?}")));
        }
        Ok(Self {
            view,
            modality,
            architecture: architecture.to_string(),
            mean: mean(&fold_aucs),
            std: sample_std(&fold_aucs),
            fold_aucs,
            fold_plan_digest,
        })
    }

    /// A result known only by its mean and standard deviation.
    pub fn from_summary(view: View, modality: Modality, architecture: &str, mean: f64, std: f64) -> Self {
        Self { view, modality, architecture: architecture.to_string(), fold_aucs: Vec::new(), mean, std, fold_plan_digest: None }
    }

    /// `"0.725 ± 0.054"`.
    pub fn summary(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub view: View,
    pub modality: Modality,
    pub architecture: String,
    pub criterion: String,
    pub chosen: CVResult,
    pub candidates: Vec<CVResult>,
}

/// Lowest fold-AUC standard deviation wins; ties go to the higher mean,
/// then the lower identifier.
pub fn select_architecture(candidates: &[CVResult]) -> Result<SelectionDecision> {
    let first = candidates.first().ok_or_else(|| Error::Size("no candidates to select from".into()))?;
    if let Some(c) = candidates.iter().find(|c| c.view != first.view || c.modality != first.modality) {
        return Err(Error::KeyMismatch(format!("{} {} next to {} {}", first.view, first.modality, c.view, c.modality)));
    }
    let chosen = candidates
        .iter()
        .min_by(|a, b| a.std.total_cmp(&b.std).then(b.mean.total_cmp(&a.mean)).then(a.architecture.cmp(&b.architecture)))
        .expect("non-empty");
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.architecture.cmp(&b.architecture));
    Ok(SelectionDecision {
        view: first.view,
        modality: first.modality,
        architecture: chosen.architecture.clone(),
        criterion: "min_fold_auc_std".into(),
        chosen: chosen.clone(),
        candidates: sorted,
    })
}

/// One fold's training job.
#[derive(Debug, Clone)]
pub struct FoldTask<'a> {
    pub fold: usize,
    pub train: Vec<&'a StudyRecord>,
    pub val: Vec<&'a StudyRecord>,
    pub seed: u64,
}

/// Splits `pool` by `plan`, checks every validation fold holds both classes,
/// then runs `train_fold` on all folds (in parallel) and collects one
/// validation AUC per fold.
pub fn run_cv<F>(plan: &FoldPlan, pool: &[StudyRecord], view: View, architecture: &str, seed: u64, train_fold: F) -> Result<CVResult>
where
    F: Fn(&FoldTask<'_>) -> Result<f64> + Sync,
{
    let first = pool.first().ok_or_else(|| Error::Size("empty cross-validation pool".into()))?;
    let fold_of = |s: &StudyRecord| {
        plan.fold(&s.shoulder_id).ok_or_else(|| Error::Reference(format!("shoulder {} is not in the fold plan", s.shoulder_id)))
    };
    let mut tasks = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let mut task = FoldTask { fold, train: Vec::new(), val: Vec::new(), seed: seed::derive(seed, &format!("fold/{fold}")) };
        for s in pool {
            if fold_of(s)? == fold {
                task.val.push(s);
            } else {
                task.train.push(s);
            }
        }
        let pos = task.val.iter().filter(|s| s.is_positive()).count();
        if pos == 0 || pos == task.val.len() {
            return Err(Error::FoldDegeneracy { fold });
        }
        tasks.push(task);
    }
    let aucs: Vec<f64> = tasks.par_iter().map(&train_fold).collect::<Result<_>>()?;
    CVResult::from_folds(view, first.modality, architecture, aucs, Some(plan.digest()))
}

/// The retrained model for one view-modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub view: View,
    pub modality: Modality,
    pub architecture: String,
    pub hp: HyperParams,
    pub init: InitProvenance,
    pub budget: TrainBudget,
    pub checkpoint: PathBuf,
    pub train: TrainResult,
    pub seed: u64,
}

/// Retrains the selected architecture with its tuned hyperparameters;
/// `train` fits the model on the initial split and returns the result with
/// the checkpoint it wrote.
pub fn retrain_final<F>(decision: &SelectionDecision, hp: &HyperParams, budget: &TrainBudget, seed: u64, train: F) -> Result<ModelBundle>
where
    F: FnOnce(&str, &HyperParams, &TrainBudget, u64) -> Result<(TrainResult, InitProvenance)>,
{
    let (result, init) = train(&decision.architecture, hp, budget, seed)?;
    if result.diverged() {
        return Err(Error::Training(format!("{} {} retraining diverged: {:?}", decision.view, decision.modality, result.status)));
    }
    let checkpoint = result.checkpoint.clone().ok_or_else(|| Error::Training("retraining produced no checkpoint".into()))?;
    Ok(ModelBundle {
        view: decision.view,
        modality: decision.modality,
        architecture: decision.architecture.clone(),
        hp: *hp,
        init,
        budget: *budget,
        checkpoint,
        train: result,
        seed,
    })
}
