//! Hyperband search over learning rate, weight decay, dropout and LR
//! schedule, with a JSON-lines trial ledger that a rerun resumes from.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::models::{build_model, InitStrategy};
use crate::seed;
use crate::training::{train, HyperParams, Sample, Scheduler, TrainBudget, TrainOptions, LR_RANGE, WEIGHT_DECAY_RANGE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub weight_decay: (f64, f64),
    pub dropout: (f64, f64),
    pub schedulers: Vec<Scheduler>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: LR_RANGE,
            weight_decay: WEIGHT_DECAY_RANGE,
            dropout: (0.0, crate::models::MAX_DROPOUT),
            schedulers: vec![Scheduler::cosine(), Scheduler::plateau()],
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let e = rng.random_range(lo.log10()..=hi.log10());
    10f64.powf(e).clamp(lo, hi)
}

impl SearchSpace {
    /// Same space with every cosine schedule using `t_max`.
    pub fn with_cosine_t_max(mut self, t_max: usize) -> Self {
        for s in &mut self.schedulers {
            if let Scheduler::CosineAnnealing { t_max: t } = s {
                *t = t_max;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64), (min, max): (f64, f64)| lo > 0.0 && lo <= hi && lo >= min && hi <= max;
        if !ok(self.learning_rate, LR_RANGE) || !ok(self.weight_decay, WEIGHT_DECAY_RANGE) {
            return Err(Error::Precondition("search bounds outside the admissible ranges".into()));
        }
        let (dlo, dhi) = self.dropout;
        if !(0.0 <= dlo && dlo <= dhi && dhi <= crate::models::MAX_DROPOUT) || self.schedulers.is_empty() {
            return Err(Error::Precondition("dropout bounds or scheduler choices invalid".into()));
        }
        Ok(())
    }

    /// Log-uniform rates, uniform dropout, uniform scheduler choice.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperParams {
        let learning_rate = log_uniform(rng, self.learning_rate);
        let weight_decay = log_uniform(rng, self.weight_decay);
        let dropout = rng.random_range(self.dropout.0..=self.dropout.1);
        let scheduler = self.schedulers[rng.random_range(0..self.schedulers.len())];
        HyperParams { learning_rate, weight_decay, dropout, scheduler }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub configs: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub rungs: Vec<Rung>,
}

impl Bracket {
    pub fn budget(&self) -> usize {
        self.rungs.iter().map(|r| r.configs * r.epochs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandPlan {
    pub max_resource: usize,
    pub eta: usize,
    pub s_max: usize,
    /// `s = s_max` down to 0.
    pub brackets: Vec<Bracket>,
}

fn bracket(max_resource: usize, eta: usize, s: usize, n: usize) -> Bracket {
    let eta_s = eta.pow(s as u32);
    let rungs = (0..=s)
        .map(|i| Rung { configs: n / eta.pow(i as u32), epochs: (max_resource * eta.pow(i as u32) / eta_s).max(1) })
        .take_while(|r| r.configs > 0)
        .collect();
    Bracket { s, rungs }
}

/// Bracket table: `s_max = ⌊log_η R⌋`, `n = ⌈(s_max+1) η^s / (s+1)⌉`,
/// rung `i` runs `⌊n/η^i⌋` configs for `⌊R η^i / η^s⌋` (≥ 1) epochs.
pub fn plan_hyperband(max_resource: usize, eta: usize) -> Result<HyperbandPlan> {
    if max_resource == 0 || eta < 2 {
        return Err(Error::Precondition(format!("Hyperband needs R ≥ 1 and η ≥ 2, got R={max_resource}, η={eta}")));
    }
    let mut s_max = 0;
    while eta.pow(s_max as u32 + 1) <= max_resource {
        s_max += 1;
    }
    let brackets = (0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max + 1) * eta.pow(s as u32)).div_ceil(s + 1);
            bracket(max_resource, eta, s, n)
        })
        .collect();
    Ok(HyperbandPlan { max_resource, eta, s_max, brackets })
}

impl HyperbandPlan {
    /// Distinct configurations in one pass over all brackets.
    pub fn configs_per_pass(&self) -> usize {
        self.brackets.iter().map(|b| b.rungs[0].configs).sum()
    }

    /// Epochs of one full pass.
    pub fn budget(&self) -> usize {
        self.brackets.iter().map(Bracket::budget).sum()
    }

    /// Bracket instances covering exactly `max_trials` configurations:
    /// whole passes, then the next pass truncated where the cap falls.
    pub fn schedule(&self, max_trials: usize) -> Vec<ScheduledBracket> {
        let mut out = Vec::new();
        let mut next_id = 0;
        'passes: for pass in 0.. {
            for b in &self.brackets {
                if next_id >= max_trials {
                    break 'passes;
                }
                let n = b.rungs[0].configs.min(max_trials - next_id);
                let bracket = if n == b.rungs[0].configs { b.clone() } else { bracket(self.max_resource, self.eta, b.s, n) };
                out.push(ScheduledBracket { index: out.len(), pass, first_trial: next_id, bracket });
                next_id += n;
            }
        }
        out
    }

    /// Closed-form epochs granted to a `max_trials` schedule.
    pub fn scheduled_budget(&self, max_trials: usize) -> usize {
        self.schedule(max_trials).iter().map(|b| b.bracket.budget()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBracket {
    pub index: usize,
    pub pass: usize,
    pub first_trial: usize,
    pub bracket: Bracket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Failed { reason: String },
}

/// One configuration evaluated at one rung.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub bracket: usize,
    pub s: usize,
    pub rung: usize,
    pub hp: HyperParams,
    /// Epochs granted.
    pub epochs: usize,
    pub seed: u64,
    /// Validation AUC.
    pub objective: Option<f64>,
    #[serde(flatten)]
    pub status: TrialStatus,
}

impl TrialRecord {
    pub fn completed(&self) -> bool {
        self.status == TrialStatus::Completed
    }
}

/// What a trial's training function receives.
#[derive(Debug, Clone)]
pub struct TrialContext {
    pub trial_id: usize,
    pub rung: usize,
    pub hp: HyperParams,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchOutcome {
    Completed,
    /// No trial completed.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLedger {
    pub plan: HyperbandPlan,
    pub max_trials: usize,
    pub outcome: SearchOutcome,
    /// In schedule order: bracket, rung, trial id.
    pub records: Vec<TrialRecord>,
}

impl TrialLedger {
    /// Epochs granted across all records.
    pub fn epochs_consumed(&self) -> usize {
        self.records.iter().map(|r| r.epochs).sum()
    }

    pub fn best(&self) -> Result<&TrialRecord> {
        best_trial(&self.records)
    }
}

pub fn read_ledger(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

/// Replaces the ledger file in one rename.
pub fn write_ledger(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).at(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n").at(&tmp)?;
        }
        f.flush().at(&tmp)?;
    }
    std::fs::rename(&tmp, path).at(path)
}

/// Runs the schedule, promoting the top `⌊n_i/η⌋` completed trials of each
/// rung by objective (ties: lower trial id). Each rung retrains from
/// scratch with its own derived seed. Records already in the ledger at
/// `ledger_path` are reused, and the file is rewritten after every rung.
pub fn run_hyperband<F>(
    space: &SearchSpace,
    plan: &HyperbandPlan,
    max_trials: usize,
    train_fn: F,
    seed: u64,
    ledger_path: Option<&Path>,
) -> Result<TrialLedger>
where
    F: Fn(&TrialContext) -> Result<f64> + Sync,
{
    space.validate()?;
    let mut known: BTreeMap<(usize, usize), TrialRecord> = BTreeMap::new();
    if let Some(path) = ledger_path.filter(|p| p.exists()) {
        for r in read_ledger(path)? {
            known.insert((r.trial_id, r.rung), r);
        }
    }
    let mut records: Vec<TrialRecord> = Vec::new();
    for sb in plan.schedule(max_trials) {
        let mut alive: Vec<usize> = (sb.first_trial..sb.first_trial + sb.bracket.rungs[0].configs).collect();
        for (i, rung) in sb.bracket.rungs.iter().enumerate() {
            let contexts: Vec<TrialContext> = alive
                .iter()
                .map(|&t| TrialContext {
                    trial_id: t,
                    rung: i,
                    hp: space.sample(&mut seed::rng(seed::derive(seed, &format!("config/{t}")))),
                    epochs: rung.epochs,
                    seed: seed::derive(seed, &format!("trial/{t}/rung/{i}")),
                })
                .collect();
            let rung_records: Vec<TrialRecord> = contexts
                .par_iter()
                .map(|c| {
                    if let Some(r) = known.get(&(c.trial_id, c.rung)) {
                        if r.hp != c.hp || r.epochs != c.epochs || r.seed != c.seed {
                            return Err(Error::Precondition(format!(
                                "ledger record for trial {} rung {} was produced by a different search",
                                c.trial_id, c.rung
                            )));
                        }
                        return Ok(r.clone());
                    }
                    let (objective, status) = match train_fn(c) {
                        Ok(auc) if (0.0..=1.0).contains(&auc) => (Some(auc), TrialStatus::Completed),
                        Ok(auc) => (None, TrialStatus::Failed { reason: format!("objective {auc} outside [0, 1]") }),
                        Err(e) => (None, TrialStatus::Failed { reason: e.to_string() }),
                    };
                    Ok(TrialRecord {
                        trial_id: c.trial_id,
                        bracket: sb.index,
                        s: sb.bracket.s,
                        rung: c.rung,
                        hp: c.hp,
                        epochs: c.epochs,
                        seed: c.seed,
                        objective,
                        status,
                    })
                })
                .collect::<Result<_>>()?;
            let keep = sb.bracket.rungs.get(i + 1).map_or(0, |next| next.configs);
            alive = promote(&rung_records, keep);
            records.extend(rung_records);
            if let Some(path) = ledger_path {
                write_ledger(path, &records)?;
            }
            if alive.is_empty() {
                break;
            }
        }
    }
    let outcome = if records.iter().any(TrialRecord::completed) { SearchOutcome::Completed } else { SearchOutcome::Empty };
    Ok(TrialLedger { plan: plan.clone(), max_trials, outcome, records })
}

/// Trial ids of the best `keep` completed records, in id order.
pub fn promote(rung: &[TrialRecord], keep: usize) -> Vec<usize> {
    let mut done: Vec<&TrialRecord> = rung.iter().filter(|r| r.completed()).collect();
    done.sort_by(|a, b| b.objective.partial_cmp(&a.objective).unwrap().then(a.trial_id.cmp(&b.trial_id)));
    let mut ids: Vec<usize> = done.iter().take(keep).map(|r| r.trial_id).collect();
    ids.sort_unstable();
    ids
}

/// Highest objective over completed records; ties go to the lower trial
/// id, then the later rung.
pub fn best_trial(records: &[TrialRecord]) -> Result<&TrialRecord> {
    records
        .iter()
        .filter(|r| r.completed())
        .min_by(|a, b| b.objective.partial_cmp(&a.objective).unwrap().then(a.trial_id.cmp(&b.trial_id)).then(b.rung.cmp(&a.rung)))
        .ok_or_else(|| Error::NoResult("the ledger holds no completed trial".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveDiff {
    pub trial_id: usize,
    pub rung: usize,
    pub first: f64,
    pub second: f64,
    /// `first − second`.
    pub diff: f64,
}

/// Per-record objective differences between two searches run with the same
/// seed (for example domain- versus generic-initialized weights).
pub fn objective_diff(first: &TrialLedger, second: &TrialLedger) -> Vec<ObjectiveDiff> {
    let other: BTreeMap<(usize, usize), f64> = second.records.iter().filter_map(|r| Some(((r.trial_id, r.rung), r.objective?))).collect();
    first
        .records
        .iter()
        .filter_map(|r| {
            let (a, b) = (r.objective?, *other.get(&(r.trial_id, r.rung))?);
            Some(ObjectiveDiff { trial_id: r.trial_id, rung: r.rung, first: a, second: b, diff: a - b })
        })
        .collect()
}

/// Trains `architecture` from `init` for the trial's epochs and returns the
/// validation AUC at the best-accuracy epoch.
pub fn auc_objective(
    architecture: &str,
    init: &InitStrategy,
    train_set: &[Sample],
    val_set: &[Sample],
    ctx: &TrialContext,
    patience: usize,
) -> Result<f64> {
    let mut model = build_model(architecture, ctx.hp.dropout, init, seed::derive(ctx.seed, "init"))?;
    let budget = TrainBudget { max_epochs: ctx.epochs, patience };
    let r = train(model.as_mut(), train_set, val_set, &ctx.hp, &budget, ctx.seed, &TrainOptions::default())?;
    if r.diverged() {
        return Err(Error::Training(format!("diverged: {:?}", r.status)));
    }
    r.val_auc_at_best.ok_or_else(|| Error::UndefinedAuc("validation set holds a single class".into()))
}
