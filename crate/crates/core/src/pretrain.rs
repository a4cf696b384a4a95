//! Pretraining mode: the fine-tune workflow on an external corpus with a
//! held-aside stratified development set, five-fold augmentation, a
//! shorter cosine period and development-set AUC as the objective.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{load_manifest_labeled, CohortManifest, StudyRecord, View};
use crate::dataset::ViewData;
use crate::error::{Error, Result};
use crate::evaluate::roc_auc;
use crate::models::{build_model, checkpoint, InitStrategy, MAX_DROPOUT};
use crate::preprocess::AugmentPolicy;
use crate::seed;
use crate::training::{score_studies, train, Scheduler, TrainBudget, TrainOptions, LR_RANGE, PATIENCE, WEIGHT_DECAY_RANGE};
use crate::tuning::{auc_objective, plan_hyperband, run_hyperband, HyperbandPlan, SearchSpace, TrialLedger, TrialRecord};

pub const DEV_SET_SIZE: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainProfile {
    /// Corpus manifest, cohort schema.
    pub corpus: PathBuf,
    /// Held-out manifest the screen AUC is measured on. When absent a
    /// stratified subset of `dev_set_size` studies is held out of the corpus.
    pub screen: Option<PathBuf>,
    /// Binary manifest column used as the target.
    pub label_field: String,
    pub dev_set_size: usize,
    pub augment_multiplier: usize,
    pub cosine_t_max: usize,
    pub views: Vec<View>,
}

impl Default for PretrainProfile {
    fn default() -> Self {
        Self {
            corpus: PathBuf::new(),
            screen: None,
            label_field: "abnormal".into(),
            dev_set_size: DEV_SET_SIZE,
            augment_multiplier: 5,
            cosine_t_max: 5,
            views: vec![View::Sagittal],
        }
    }
}

impl PretrainProfile {
    pub fn new(corpus: impl Into<PathBuf>, label_field: &str) -> Self {
        Self { corpus: corpus.into(), label_field: label_field.into(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dev_set_size == 0 || self.augment_multiplier == 0 || self.cosine_t_max == 0 || self.views.is_empty() {
            return Err(Error::Precondition(format!("invalid pretraining profile {self:?}")));
        }
        Ok(())
    }
}

/// The settings a tuning run actually uses. Fine-tune and pretrain runs
/// built from the same base differ only in the fields a profile overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectiveConfig {
    pub augment_multiplier: usize,
    pub cosine_t_max: usize,
    /// Partition whose AUC is the tuning objective.
    pub objective_dataset: String,
    pub label_field: String,
    pub objective_metric: String,
    pub checkpoint_metric: String,
    pub learning_rate: (f64, f64),
    pub weight_decay: (f64, f64),
    pub dropout: (f64, f64),
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_resource: usize,
    pub eta: usize,
    pub max_trials: usize,
    pub patience: usize,
}

impl EffectiveConfig {
    pub fn fine_tune() -> Self {
        let Scheduler::ReduceOnPlateau { factor, patience } = Scheduler::plateau() else { unreachable!() };
        Self {
            augment_multiplier: 10,
            cosine_t_max: 10,
            objective_dataset: "val".into(),
            label_field: "label".into(),
            objective_metric: "auc".into(),
            checkpoint_metric: "val_accuracy".into(),
            learning_rate: LR_RANGE,
            weight_decay: WEIGHT_DECAY_RANGE,
            dropout: (0.0, MAX_DROPOUT),
            plateau_factor: factor,
            plateau_patience: patience,
            max_resource: 20,
            eta: 3,
            max_trials: 100,
            patience: PATIENCE,
        }
    }

    /// `self` with the profile's overrides applied.
    pub fn with_profile(&self, profile: &PretrainProfile) -> Self {
        Self {
            augment_multiplier: profile.augment_multiplier,
            cosine_t_max: profile.cosine_t_max,
            objective_dataset: "dev".into(),
            label_field: profile.label_field.clone(),
            ..self.clone()
        }
    }

    pub fn search_space(&self) -> SearchSpace {
        SearchSpace {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            schedulers: vec![
                Scheduler::CosineAnnealing { t_max: self.cosine_t_max },
                Scheduler::ReduceOnPlateau { factor: self.plateau_factor, patience: self.plateau_patience },
            ],
        }
    }

    pub fn augment_policy(&self, seed: u64) -> AugmentPolicy {
        AugmentPolicy { multiplier: self.augment_multiplier, ..AugmentPolicy::fine_tune(seed) }
    }

    pub fn plan(&self) -> Result<HyperbandPlan> {
        plan_hyperband(self.max_resource, self.eta)
    }
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        Self::fine_tune()
    }
}

/// Names of the fields whose values differ.
pub fn config_diff(a: &EffectiveConfig, b: &EffectiveConfig) -> Result<BTreeSet<String>> {
    let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (serde_json::to_value(a)?, serde_json::to_value(b)?) else {
        unreachable!("structs serialize to objects")
    };
    Ok(a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect())
}

/// Draws `size` studies stratified by label; returns (held out, rest), each
/// in manifest order. Both parts must keep both classes.
pub fn stratified_holdout<'a>(studies: &[&'a StudyRecord], size: usize, seed: u64) -> Result<(Vec<&'a StudyRecord>, Vec<&'a StudyRecord>)> {
    let n = studies.len();
    let pos = studies.iter().filter(|s| s.is_positive()).count();
    let take_pos = ((size * pos) as f64 / n.max(1) as f64).round() as usize;
    let take_neg = size.saturating_sub(take_pos);
    if size >= n || take_pos == 0 || take_neg == 0 || take_pos >= pos || take_neg >= n - pos {
        return Err(Error::Infeasible(format!("cannot hold out {size} of {n} studies ({pos} positive) keeping both classes on each side")));
    }
    let mut rng = seed::rng(seed);
    let mut chosen = BTreeSet::new();
    for (label, k) in [(1u8, take_pos), (0u8, take_neg)] {
        let mut ids: Vec<&str> = studies.iter().filter(|s| s.label == label).map(|s| s.study_id.as_str()).collect();
        ids.shuffle(&mut rng);
        chosen.extend(ids.into_iter().take(k));
    }
    Ok(studies.iter().partition(|s| chosen.contains(s.study_id.as_str())))
}

/// Study ids of the development set and training remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevSplit {
    pub dev: Vec<String>,
    pub train: Vec<String>,
    pub screen: Vec<String>,
}

/// Splits the corpus into screen (unless `external_screen`), development
/// and training sets.
pub fn dev_split(corpus: &CohortManifest, dev_size: usize, external_screen: bool, seed: u64) -> Result<DevSplit> {
    corpus.single_modality()?;
    let all: Vec<&StudyRecord> = corpus.studies.iter().collect();
    let ids = |v: &[&StudyRecord]| v.iter().map(|s| s.study_id.clone()).collect::<Vec<_>>();
    let (screen, pool) =
        if external_screen { (Vec::new(), all) } else { stratified_holdout(&all, dev_size, seed::derive(seed, "screen"))? };
    let (dev, train) = stratified_holdout(&pool, dev_size, seed::derive(seed, "dev"))?;
    Ok(DevSplit { dev: ids(&dev), train: ids(&train), screen: ids(&screen) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainViewResult {
    pub view: View,
    pub best: TrialRecord,
    pub epochs_consumed: usize,
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub dev_auc: f64,
    pub screen_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub architecture: String,
    pub effective: EffectiveConfig,
    pub split: DevSplit,
    pub views: Vec<PretrainViewResult>,
    /// Mean screen AUC over the profile's views; the value architectures
    /// are ranked by.
    pub screen_auc: f64,
    pub seed: u64,
}

/// Where and how a pretraining run executes.
#[derive(Debug, Clone)]
pub struct PretrainRun<'a> {
    /// Fine-tune settings the profile overrides.
    pub base: &'a EffectiveConfig,
    pub out_dir: &'a Path,
    pub seed: u64,
    pub config_hash: Option<String>,
}

/// Hyperband over `space` with the profile's overrides, per view. The best
/// trial is retrained with its own seed and saved as a domain checkpoint;
/// the screen AUC is measured on the held-out studies.
pub fn run_pretrain(profile: &PretrainProfile, architecture: &str, space: &SearchSpace, run: &PretrainRun<'_>) -> Result<PretrainReport> {
    profile.validate()?;
    let effective = run.base.with_profile(profile);
    let space = space.clone().with_cosine_t_max(effective.cosine_t_max);
    let plan = effective.plan()?;
    let corpus = load_manifest_labeled(&profile.corpus, &profile.label_field)?;
    let screen_manifest = match &profile.screen {
        Some(p) => Some(load_manifest_labeled(p, &profile.label_field)?),
        None => None,
    };
    let split = dev_split(&corpus, profile.dev_set_size, screen_manifest.is_some(), run.seed)?;
    let train_ids: BTreeSet<String> = split.train.iter().cloned().collect();
    let init = InitStrategy::random();

    let mut views = Vec::new();
    for &view in &profile.views {
        let vseed = seed::derive(run.seed, view.as_str());
        let dir = run.out_dir.join(architecture).join(view.as_str());
        std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        let studies: Vec<&StudyRecord> = corpus.studies.iter().collect();
        let data = ViewData::build(&corpus, &studies, &train_ids, view)?;
        let policy = effective.augment_policy(seed::derive(vseed, "augment"));
        let train_set = data.augmented_samples(split.train.iter().map(String::as_str), &policy)?;
        let dev_set = data.samples(split.dev.iter().map(String::as_str))?;

        let ledger: TrialLedger = run_hyperband(
            &space,
            &plan,
            effective.max_trials,
            |ctx| auc_objective(architecture, &init, &train_set, &dev_set, ctx, effective.patience),
            seed::derive(vseed, "hyperband"),
            Some(&dir.join("ledger.jsonl")),
        )?;
        let best = ledger.best()?.clone();

        let mut model = build_model(architecture, best.hp.dropout, &init, seed::derive(best.seed, "init"))?;
        let budget = TrainBudget { max_epochs: best.epochs, patience: effective.patience };
        let result = train(model.as_mut(), &train_set, &dev_set, &best.hp, &budget, best.seed, &TrainOptions::default())?;
        let dev_auc = result.val_auc_at_best.ok_or_else(|| Error::UndefinedAuc("development set holds a single class".into()))?;
        let path = dir.join("domain.ckpt");
        let sha = checkpoint::save_model(&path, model.as_ref(), checkpoint::WeightOrigin::Domain, Some(view), run.config_hash.clone())?;

        let screen_scores = match &screen_manifest {
            Some(m) => {
                let studies: Vec<&StudyRecord> = m.studies.iter().collect();
                let held = ViewData::build_with_stats(m, &studies, view, &data.stats)?;
                score_studies(model.as_ref(), &held.all_samples()?)?
            }
            None => score_studies(model.as_ref(), &data.samples(split.screen.iter().map(String::as_str))?)?,
        };
        let probs: Vec<f64> = screen_scores.iter().map(|s| s.prob).collect();
        let labels: Vec<u8> = screen_scores.iter().map(|s| s.label).collect();
        let screen_auc = roc_auc(&probs, &labels)?;
        views.push(PretrainViewResult {
            view,
            epochs_consumed: ledger.epochs_consumed(),
            best,
            checkpoint: path,
            checkpoint_sha256: sha,
            dev_auc,
            screen_auc,
        });
    }
    let screen_auc = views.iter().map(|v| v.screen_auc).sum::<f64>() / views.len() as f64;
    Ok(PretrainReport { architecture: architecture.to_string(), effective, split, views, screen_auc, seed: run.seed })
}

/// Screen AUCs keyed by architecture, the input of the top-k screen.
pub fn screen_table(reports: &[PretrainReport]) -> BTreeMap<String, f64> {
    reports.iter().map(|r| (r.architecture.clone(), r.screen_auc)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_changes_exactly_four_fields() {
        let base = EffectiveConfig::fine_tune();
        let pre = base.with_profile(&PretrainProfile::new("corpus.csv", "abnormal"));
        let diff = config_diff(&base, &pre).unwrap();
        let expected: BTreeSet<String> =
            ["augment_multiplier", "cosine_t_max", "objective_dataset", "label_field"].into_iter().map(String::from).collect();
        assert_eq!(diff, expected);
        assert_eq!(pre.augment_policy(1).multiplier, 5);
        assert!(pre.search_space().schedulers.contains(&Scheduler::CosineAnnealing { t_max: 5 }));
    }

    fn corpus(n: usize, positives: usize) -> CohortManifest {
        let studies = (0..n)
            .map(|i| StudyRecord {
                study_id: format!("c{i:03}"),
                patient_id: format!("p{i}"),
                shoulder_id: format!("p{i}-R"),
                modality: crate::cohort::Modality::StandardMri,
                label: u8::from(i < positives),
                sequences: Vec::new(),
            })
            .collect();
        CohortManifest::new(".", studies)
    }

    #[test]
    fn dev_screen_and_train_are_disjoint_and_stratified() {
        let m = corpus(400, 100);
        let split = dev_split(&m, 120, false, 3).unwrap();
        assert_eq!((split.dev.len(), split.screen.len(), split.train.len()), (120, 120, 160));
        let mut all: Vec<&String> = split.dev.iter().chain(&split.screen).chain(&split.train).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 400);
        let positives = |ids: &[String]| ids.iter().filter(|id| m.study(id).unwrap().is_positive()).count();
        assert_eq!((positives(&split.dev), positives(&split.screen)), (30, 30));
        assert_eq!(dev_split(&m, 120, false, 3).unwrap(), split);

        let external = dev_split(&m, 120, true, 3).unwrap();
        assert!(external.screen.is_empty());
        assert_eq!(external.train.len(), 280);
    }

    #[test]
    fn holdout_needs_both_classes_on_each_side() {
        let m = corpus(10, 1);
        let all: Vec<&StudyRecord> = m.studies.iter().collect();
        assert!(matches!(stratified_holdout(&all, 5, 0), Err(Error::Infeasible(_))));
        assert!(matches!(stratified_holdout(&all, 10, 0), Err(Error::Infeasible(_))));
    }
}
