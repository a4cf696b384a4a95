//! Pipeline stages. Each stage reads its upstream artifacts from the run
//! directory, fails with a dependency error naming the missing stage, and
//! writes provenance-stamped outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mvscan_core::cohort::{
    load_manifest, make_folds, stratified_split, validate_no_leakage, CohortManifest, FoldPlan, LeakageReport, Modality, Partition,
    SequencePlacement, SplitAssignment, StudyRecord, View,
};
use mvscan_core::dataset::ViewData;
use mvscan_core::evaluate::{aggregate_scan, calibrate_threshold, evaluate, roc_curve, write_roc_csv, EvaluationReport, ScanPrediction};
use mvscan_core::interpret::{gradcam, overlay_image, Heatmap};
use mvscan_core::models::{build_model, load_model, predict, ScanModel};
use mvscan_core::preprocess::StandardizationStats;
use mvscan_core::pretrain::{run_pretrain, screen_table, PretrainProfile, PretrainReport, PretrainRun};
use mvscan_core::selection::{retrain_final, run_cv, select_architecture, select_top_k, CVResult, ModelBundle, SelectionDecision};
use mvscan_core::training::{train, Sample, TrainBudget, TrainOptions};
use mvscan_core::tuning::{auc_objective, run_hyperband, SearchOutcome, TrialRecord};
use mvscan_core::{seed, Error};
use serde::{Deserialize, Serialize};

use crate::artifacts::Run;
use crate::error::{CliError, CliResult};

/// Stages of the fine-tune chain, in dependency order.
pub const CHAIN: [&str; 7] = ["ingest", "split", "tune", "cv", "select", "retrain", "evaluate"];

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Ingest,
    Split,
    Tune,
    Cv,
    Select,
    Retrain,
    Evaluate,
    Gradcam(GradcamArgs),
    Pretrain { profile: PathBuf },
}

impl Command {
    pub fn from_chain_name(name: &str) -> Option<Self> {
        Some(match name {
            "ingest" => Command::Ingest,
            "split" => Command::Split,
            "tune" => Command::Tune,
            "cv" => Command::Cv,
            "select" => Command::Select,
            "retrain" => Command::Retrain,
            "evaluate" => Command::Evaluate,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcamArgs {
    pub study: String,
    pub view: View,
    pub slice: usize,
    /// PNG path; the JSON sidecar sits next to it.
    pub out: PathBuf,
}

/// Runs one stage and returns the artifacts it wrote.
pub fn run_pipeline(run: &Run, command: &Command) -> CliResult<Vec<PathBuf>> {
    match command {
        Command::Ingest => ingest(run),
        Command::Split => split(run),
        Command::Tune => tune(run),
        Command::Cv => cv(run),
        Command::Select => select(run),
        Command::Retrain => retrain(run),
        Command::Evaluate => evaluate_stage(run),
        Command::Gradcam(args) => gradcam_stage(run, args),
        Command::Pretrain { profile } => pretrain_stage(run, profile),
    }
}

/// Runs the whole fine-tune chain.
pub fn run_chain(run: &Run) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for name in CHAIN {
        out.extend(run_pipeline(run, &Command::from_chain_name(name).expect("chain names are commands"))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub manifest: PathBuf,
    pub studies: usize,
    pub positives: usize,
    pub modalities: Vec<Modality>,
    pub sequences_per_view: BTreeMap<View, usize>,
}

fn ingest(run: &Run) -> CliResult<Vec<PathBuf>> {
    let path = &run.config.manifest;
    let manifest = load_manifest(path)?;
    let modalities: Vec<Modality> = manifest.modalities().into_iter().collect();
    if let Some(m) = run.config.modalities.iter().find(|m| !modalities.contains(m)) {
        return Err(CliError::Config(format!("modality {m} is configured but absent from {}", path.display())));
    }
    let mut sequences_per_view = BTreeMap::new();
    for q in manifest.studies.iter().flat_map(|s| &s.sequences) {
        *sequences_per_view.entry(q.view).or_insert(0) += 1;
    }
    let summary = IngestSummary {
        manifest: std::path::absolute(path).map_err(|e| CliError::io(path, e))?,
        studies: manifest.len(),
        positives: manifest.positives(),
        modalities,
        sequences_per_view,
    };
    Ok(vec![run.write("ingest", "ingest.json", summary, std::slice::from_ref(path))?])
}

/// The validated manifest and the modalities this run covers.
fn ingested(run: &Run) -> CliResult<(CohortManifest, Vec<Modality>, PathBuf)> {
    let (summary, path): (IngestSummary, _) = run.read("ingest", "ingest.json")?;
    let manifest = load_manifest(&summary.manifest)?;
    let modalities = if run.config.modalities.is_empty() { summary.modalities } else { run.config.modalities.clone() };
    Ok((manifest, modalities, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitArtifact {
    pub split: SplitAssignment,
    pub leakage: LeakageReport,
    /// (studies, positives) per partition.
    pub counts: BTreeMap<Partition, (usize, usize)>,
}

fn split_rel(m: Modality) -> PathBuf {
    PathBuf::from("split").join(format!("{m}.json"))
}

fn split(run: &Run) -> CliResult<Vec<PathBuf>> {
    let (manifest, modalities, ingest_path) = ingested(run)?;
    let mut out = Vec::new();
    for m in modalities {
        let sub = manifest.for_modality(m);
        let split = stratified_split(&sub, run.config.split_ratios, seed::derive(run.config.seed, &format!("split/{m}")))?;
        let leakage = validate_no_leakage(&SequencePlacement::from_split(&split, &sub), &sub)?;
        if !leakage.passed() {
            return Err(CliError::Core(Error::Precondition(format!("{m} split leaks shoulders: {leakage:?}"))));
        }
        let counts = Partition::ALL
            .iter()
            .map(|&p| {
                let s = split.studies(&sub, p);
                (p, (s.len(), s.iter().filter(|s| s.is_positive()).count()))
            })
            .collect();
        out.push(run.write("split", split_rel(m), SplitArtifact { split, leakage, counts }, std::slice::from_ref(&ingest_path))?);
    }
    Ok(out)
}

/// One modality's studies and split.
struct ModalityData {
    modality: Modality,
    manifest: CohortManifest,
    split: SplitAssignment,
    split_path: PathBuf,
}

impl ModalityData {
    fn ids(&self, p: Partition) -> Vec<String> {
        self.split.studies(&self.manifest, p).iter().map(|s| s.study_id.clone()).collect()
    }

    fn studies(&self, parts: &[Partition]) -> Vec<&StudyRecord> {
        parts.iter().flat_map(|&p| self.split.studies(&self.manifest, p)).collect()
    }

    /// Every study of the view, standardized with train-partition statistics.
    fn view_data(&self, view: View) -> CliResult<ViewData> {
        let train: BTreeSet<String> = self.ids(Partition::Train).into_iter().collect();
        let all: Vec<&StudyRecord> = self.manifest.studies.iter().collect();
        Ok(ViewData::build(&self.manifest, &all, &train, view)?)
    }
}

fn modality_data(run: &Run) -> CliResult<Vec<ModalityData>> {
    let (manifest, modalities, _) = ingested(run)?;
    modalities
        .into_iter()
        .map(|m| {
            let (a, split_path): (SplitArtifact, _) = run.read("split", split_rel(m))?;
            Ok(ModalityData { modality: m, manifest: manifest.for_modality(m), split: a.split, split_path })
        })
        .collect()
}

fn view_dir(m: Modality, view: View) -> PathBuf {
    PathBuf::from(m.as_str()).join(view.as_str())
}

/// Same augmentation seed in every stage, so tuning, CV and retraining see
/// identical augmented copies.
fn augmented(run: &Run, md: &ModalityData, data: &ViewData, ids: &[String]) -> CliResult<BTreeMap<String, Vec<Sample>>> {
    let policy = run.config.tune.augment_policy(seed::derive(run.config.seed, &format!("augment/{}/{}", md.modality, data.view)));
    Ok(data.augmented_by_study(ids.iter().map(String::as_str), &policy)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub architecture: String,
    pub best: TrialRecord,
    pub outcome: SearchOutcome,
    pub epochs_consumed: usize,
    pub planned_epochs: usize,
    pub records: usize,
}

fn tune_rel(m: Modality, view: View, arch: &str) -> PathBuf {
    PathBuf::from("tune").join(view_dir(m, view)).join(arch)
}

fn tune(run: &Run) -> CliResult<Vec<PathBuf>> {
    let c = &run.config;
    let plan = c.tune.plan()?;
    let space = c.tune.search_space();
    let mut out = Vec::new();
    for md in modality_data(run)? {
        for &view in &c.views {
            let data = md.view_data(view)?;
            let train_ids = md.ids(Partition::Train);
            let train_set: Vec<Sample> = augmented(run, &md, &data, &train_ids)?.into_values().flatten().collect();
            let val_set = data.samples(md.ids(Partition::Val).iter().map(String::as_str))?;
            drop(data);
            for arch in &c.architectures {
                let init = c.init.strategy(arch, view)?;
                // a ledger searched from other starting weights must not resume
                let mut search = format!("tune/{}/{view}/{arch}", md.modality);
                if let Some(ckpt) = &init.checkpoint {
                    search = format!("{search}/init/{}", crate::artifacts::sha256_file(ckpt)?);
                }
                let dir = run.path(tune_rel(md.modality, view, arch));
                std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                let ledger_path = dir.join("ledger.jsonl");
                let ledger = run_hyperband(
                    &space,
                    &plan,
                    c.tune.max_trials,
                    |ctx| auc_objective(arch, &init, &train_set, &val_set, ctx, c.tune.patience),
                    seed::derive(c.seed, &search),
                    Some(&ledger_path),
                )?;
                let best = ledger.best()?.clone();
                let summary = TuneSummary {
                    architecture: arch.clone(),
                    best,
                    outcome: ledger.outcome.clone(),
                    epochs_consumed: ledger.epochs_consumed(),
                    planned_epochs: plan.scheduled_budget(c.tune.max_trials),
                    records: ledger.records.len(),
                };
                let inputs = [md.split_path.clone(), ledger_path.clone()];
                out.push(ledger_path.clone());
                out.push(run.write("tune", tune_rel(md.modality, view, arch).join("best.json"), summary, &inputs)?);
            }
        }
    }
    Ok(out)
}

fn cv_rel(m: Modality, view: View, arch: &str) -> PathBuf {
    PathBuf::from("cv").join(view_dir(m, view)).join(format!("{arch}.json"))
}

fn cv(run: &Run) -> CliResult<Vec<PathBuf>> {
    let c = &run.config;
    let mut out = Vec::new();
    for md in modality_data(run)? {
        let pool: Vec<StudyRecord> = md.studies(&[Partition::Train, Partition::Val]).into_iter().cloned().collect();
        let plan: FoldPlan = make_folds(&pool, c.cv.folds, seed::derive(c.seed, &format!("folds/{}", md.modality)))?;
        let plan_path = run.write(
            "cv",
            PathBuf::from("cv").join(md.modality.as_str()).join("folds.json"),
            &plan,
            std::slice::from_ref(&md.split_path),
        )?;
        out.push(plan_path.clone());
        for &view in &c.views {
            let tuned: Vec<(String, TuneSummary, PathBuf)> = c
                .architectures
                .iter()
                .map(|a| {
                    let (t, p) = run.read::<TuneSummary>("tune", tune_rel(md.modality, view, a).join("best.json"))?;
                    Ok((a.clone(), t, p))
                })
                .collect::<CliResult<_>>()?;
            let data = md.view_data(view)?;
            let pool_ids: Vec<String> = pool.iter().map(|s| s.study_id.clone()).collect();
            let aug = augmented(run, &md, &data, &pool_ids)?;
            let plain: BTreeMap<String, Vec<Sample>> =
                pool_ids.iter().map(|id| Ok((id.clone(), data.samples([id.as_str()])?))).collect::<CliResult<_>>()?;
            drop(data);
            let budget = TrainBudget { max_epochs: c.cv.max_epochs, patience: c.tune.patience };
            for (arch, t, tune_path) in tuned {
                let init = c.init.strategy(&arch, view)?;
                let hp = t.best.hp;
                let result =
                    run_cv(&plan, &pool, view, &arch, seed::derive(c.seed, &format!("cv/{}/{view}/{arch}", md.modality)), |task| {
                        let train_set: Vec<Sample> =
                            task.train.iter().flat_map(|s| aug.get(&s.study_id).into_iter().flatten().cloned()).collect();
                        let val_set: Vec<Sample> =
                            task.val.iter().flat_map(|s| plain.get(&s.study_id).into_iter().flatten().cloned()).collect();
                        let mut model = build_model(&arch, hp.dropout, &init, seed::derive(task.seed, "init"))?;
                        let r = train(model.as_mut(), &train_set, &val_set, &hp, &budget, task.seed, &TrainOptions::default())?;
                        if r.diverged() {
                            return Err(Error::Training(format!("fold {} diverged: {:?}", task.fold, r.status)));
                        }
                        r.val_auc_at_best.ok_or_else(|| Error::UndefinedAuc(format!("fold {}", task.fold)))
                    })?;
                out.push(run.write("cv", cv_rel(md.modality, view, &arch), result, &[plan_path.clone(), tune_path])?);
            }
        }
    }
    Ok(out)
}

fn select_rel(m: Modality, view: View) -> PathBuf {
    PathBuf::from("select").join(m.as_str()).join(format!("{view}.json"))
}

fn select(run: &Run) -> CliResult<Vec<PathBuf>> {
    let (_, modalities, _) = ingested(run)?;
    let mut out = Vec::new();
    for m in modalities {
        for &view in &run.config.views {
            let mut candidates = Vec::new();
            let mut inputs = Vec::new();
            for a in &run.config.architectures {
                let (r, p): (CVResult, _) = run.read("cv", cv_rel(m, view, a))?;
                candidates.push(r);
                inputs.push(p);
            }
            out.push(run.write("select", select_rel(m, view), select_architecture(&candidates)?, &inputs)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainArtifact {
    pub bundle: ModelBundle,
    pub stats: StandardizationStats,
}

fn retrain_rel(m: Modality, view: View) -> PathBuf {
    PathBuf::from("retrain").join(view_dir(m, view))
}

fn retrain(run: &Run) -> CliResult<Vec<PathBuf>> {
    let c = &run.config;
    let mut out = Vec::new();
    for md in modality_data(run)? {
        for &view in &c.views {
            let (decision, select_path): (SelectionDecision, _) = run.read("select", select_rel(md.modality, view))?;
            let (tuned, tune_path): (TuneSummary, _) =
                run.read("tune", tune_rel(md.modality, view, &decision.architecture).join("best.json"))?;
            let data = md.view_data(view)?;
            let train_set: Vec<Sample> = augmented(run, &md, &data, &md.ids(Partition::Train))?.into_values().flatten().collect();
            let val_set = data.samples(md.ids(Partition::Val).iter().map(String::as_str))?;
            let stats = data.stats.clone();
            drop(data);
            let dir = run.path(retrain_rel(md.modality, view));
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let options = TrainOptions {
                checkpoint: Some(dir.join("model.ckpt")),
                history: Some(dir.join("history.jsonl")),
                view: Some(view),
                config_hash: Some(run.config_hash.clone()),
                nan_at_step: None,
            };
            let budget = TrainBudget { max_epochs: c.retrain.max_epochs, patience: c.tune.patience };
            let seed = seed::derive(c.seed, &format!("retrain/{}/{view}", md.modality));
            let bundle = retrain_final(&decision, &tuned.best.hp, &budget, seed, |arch, hp, budget, seed| {
                let init = c.init.strategy(arch, view).map_err(|e| Error::Precondition(e.to_string()))?;
                let mut model = build_model(arch, hp.dropout, &init, seed::derive(seed, "init"))?;
                let r = train(model.as_mut(), &train_set, &val_set, hp, budget, seed, &options)?;
                Ok((r, model.init_provenance().clone()))
            })?;
            let inputs = [md.split_path.clone(), select_path, tune_path, bundle.checkpoint.clone()];
            out.push(bundle.checkpoint.clone());
            out.push(run.write(
                "retrain",
                retrain_rel(md.modality, view).join("bundle.json"),
                RetrainArtifact { bundle, stats },
                &inputs,
            )?);
        }
    }
    Ok(out)
}

/// The retrained model of one view with the statistics its inputs need.
pub fn load_view_model(run: &Run, m: Modality, view: View) -> CliResult<(Box<dyn ScanModel<f32>>, RetrainArtifact, PathBuf)> {
    let (a, path): (RetrainArtifact, _) = run.read("retrain", retrain_rel(m, view).join("bundle.json"))?;
    let model = load_model(&a.bundle.checkpoint)?;
    Ok((model, a, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Ensemble probabilities above this are positive.
    pub threshold: f64,
    pub calibrated_on: Partition,
    pub studies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub partition: Partition,
    pub predictions: Vec<ScanPrediction>,
    /// Decision per study at the calibrated threshold.
    pub decisions: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateArtifact {
    pub modality: Modality,
    pub report: EvaluationReport,
    pub validation: EvaluationReport,
    pub per_view_auc: BTreeMap<View, f64>,
}

pub fn evaluate_rel(m: Modality) -> PathBuf {
    PathBuf::from("evaluate").join(m.as_str())
}

fn predict_partition(
    models: &[(View, Box<dyn ScanModel<f32>>, ViewData)],
    md: &ModalityData,
    p: Partition,
) -> CliResult<Vec<ScanPrediction>> {
    let mut out = Vec::new();
    for s in md.split.studies(&md.manifest, p) {
        let mut probs: BTreeMap<View, Vec<f64>> = BTreeMap::new();
        for (view, model, data) in models {
            for sample in data.samples([s.study_id.as_str()])? {
                probs.entry(*view).or_default().push(predict(model.as_ref(), &sample.volume)?);
            }
        }
        if !probs.is_empty() {
            out.push(aggregate_scan(&s.study_id, &probs, Some(s.label))?);
        }
    }
    Ok(out)
}

fn labeled(preds: &[ScanPrediction]) -> (Vec<f64>, Vec<u8>) {
    preds.iter().map(|p| (p.ensemble, p.label.expect("labeled study"))).unzip()
}

fn evaluate_stage(run: &Run) -> CliResult<Vec<PathBuf>> {
    let c = &run.config;
    let mut out = Vec::new();
    for md in modality_data(run)? {
        let mut models = Vec::new();
        let mut inputs = vec![md.split_path.clone()];
        let held_out = md.studies(&[Partition::Val, Partition::Test]);
        for &view in &c.views {
            let (model, a, path) = load_view_model(run, md.modality, view)?;
            inputs.push(path);
            inputs.push(a.bundle.checkpoint.clone());
            let data = ViewData::build_with_stats(&md.manifest, &held_out, view, &a.stats)?;
            models.push((view, model, data));
        }
        let val = predict_partition(&models, &md, Partition::Val)?;
        let test = predict_partition(&models, &md, Partition::Test)?;
        let threshold = calibrate_threshold(&val.iter().map(|p| (p.ensemble, p.label.expect("labeled study"))).collect::<Vec<_>>())?;
        let eseed = seed::derive(c.seed, &format!("bootstrap/{}", md.modality));
        let (tp, tl) = labeled(&test);
        let (vp, vl) = labeled(&val);
        let report = evaluate(&format!("{}-test", md.modality), &tp, &tl, threshold, c.evaluate.bootstrap_iterations, eseed)?;
        let validation = evaluate(&format!("{}-val", md.modality), &vp, &vl, threshold, 0, eseed)?;
        let mut per_view_auc = BTreeMap::new();
        for (view, _, _) in &models {
            let (s, l): (Vec<f64>, Vec<u8>) =
                test.iter().filter_map(|p| Some((*p.per_view.get(view)?, p.label.expect("labeled study")))).unzip();
            if let Ok(auc) = mvscan_core::evaluate::roc_auc(&s, &l) {
                per_view_auc.insert(*view, auc);
            }
        }
        let dir = evaluate_rel(md.modality);
        let roc_path = run.path(dir.join("roc.csv"));
        let roc_dir = run.path(&dir);
        std::fs::create_dir_all(&roc_dir).map_err(|e| CliError::io(&roc_dir, e))?;
        write_roc_csv(&roc_path, &roc_curve(&tp, &tl)?)?;
        out.push(roc_path);
        let sets: Vec<PredictionSet> = [(Partition::Val, val), (Partition::Test, test)]
            .into_iter()
            .map(|(partition, predictions)| {
                let decisions = predictions.iter().map(|p| (p.study_id.clone(), p.ensemble > threshold)).collect();
                PredictionSet { partition, predictions, decisions }
            })
            .collect();
        out.push(run.write("evaluate", dir.join("predictions.json"), &sets, &inputs)?);
        let thresholds = Thresholds { threshold, calibrated_on: Partition::Val, studies: sets[0].predictions.len() };
        out.push(run.write("evaluate", dir.join("thresholds.json"), thresholds, &inputs)?);
        out.push(run.write(
            "evaluate",
            dir.join("report.json"),
            EvaluateArtifact { modality: md.modality, report, validation, per_view_auc },
            &inputs,
        )?);
    }
    Ok(out)
}

fn gradcam_stage(run: &Run, args: &GradcamArgs) -> CliResult<Vec<PathBuf>> {
    let (manifest, _, _) = ingested(run)?;
    let study = manifest.study(&args.study).ok_or_else(|| CliError::Config(format!("study {} is not in the manifest", args.study)))?;
    let (model, a, bundle_path) = load_view_model(run, study.modality, args.view)?;
    let data = ViewData::build_with_stats(&manifest, &[study], args.view, &a.stats)?;
    let v = data
        .study(&study.study_id)
        .and_then(|s| s.volumes.first())
        .ok_or_else(|| CliError::Config(format!("study {} has no {} sequence", study.study_id, args.view)))?;
    let (h, png) = heatmap_overlay(model.as_ref(), v, args.slice, &study.study_id)?;
    png.save(&args.out).map_err(|e| CliError::Core(Error::Image(e.to_string())))?;
    let sidecar = args.out.with_extension("json");
    let prov = run.provenance("gradcam", &[bundle_path, a.bundle.checkpoint.clone()])?;
    crate::artifacts::write_json(&sidecar, &crate::artifacts::Artifact { provenance: prov, data: h })?;
    Ok(vec![args.out.clone(), sidecar])
}

/// Grad-CAM of one slice with study and view filled in, plus its overlay.
pub fn heatmap_overlay(
    model: &dyn ScanModel<f32>,
    v: &mvscan_core::preprocess::SequenceVolume,
    slice: usize,
    study_id: &str,
) -> CliResult<(Heatmap, image::RgbImage)> {
    let mut h = gradcam(model, &mvscan_core::dataset::to_tensor(v)?, slice)?;
    h.study_id = Some(study_id.to_string());
    h.view = Some(v.view);
    let png = overlay_image(&h, v.slice(slice))?;
    Ok((h, png))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenSummary {
    pub screen_auc: BTreeMap<String, f64>,
    pub top_k: Vec<String>,
}

fn pretrain_stage(run: &Run, profile_path: &Path) -> CliResult<Vec<PathBuf>> {
    let text = std::fs::read_to_string(profile_path).map_err(|e| CliError::io(profile_path, e))?;
    let profile: PretrainProfile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", profile_path.display())))?;
    let c = &run.config;
    let dir = run.path("pretrain");
    let pre =
        PretrainRun { base: &c.tune, out_dir: &dir, seed: seed::derive(c.seed, "pretrain"), config_hash: Some(run.config_hash.clone()) };
    let mut reports: Vec<PretrainReport> = Vec::new();
    let mut out = Vec::new();
    let mut inputs = vec![profile_path.to_path_buf(), profile.corpus.clone()];
    for arch in &c.architectures {
        let r = run_pretrain(&profile, arch, &c.tune.search_space(), &pre)?;
        let ckpts: Vec<PathBuf> = r.views.iter().map(|v| v.checkpoint.clone()).collect();
        let rel = PathBuf::from("pretrain").join(arch).join("report.json");
        let mut arch_inputs = inputs.clone();
        arch_inputs.extend(ckpts.iter().cloned());
        out.extend(ckpts);
        let p = run.write("pretrain", rel, &r, &arch_inputs)?;
        inputs.push(p.clone());
        out.push(p);
        reports.push(r);
    }
    let table = screen_table(&reports);
    let top_k = select_top_k(&table, table.len().min(3))?;
    out.push(run.write("pretrain", "pretrain/screen.json", ScreenSummary { screen_auc: table, top_k }, &inputs)?);
    Ok(out)
}
