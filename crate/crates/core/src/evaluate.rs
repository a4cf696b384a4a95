//! Probability aggregation, threshold calibration, confusion metrics, ROC
//! AUC with bootstrap intervals, and Fleiss' kappa.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_rational::Ratio;
use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::View;
use crate::error::{Error, IoContext, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    pub study_id: String,
    pub label: Option<u8>,
    pub per_sequence: BTreeMap<View, Vec<f64>>,
    /// Mean over each view's sequences.
    pub per_view: BTreeMap<View, f64>,
    /// Unweighted mean over the views present.
    pub ensemble: f64,
    /// Views absent from the input; non-empty means the ensemble is partial.
    pub missing_views: Vec<View>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn aggregate_scan(study_id: &str, seq_probs: &BTreeMap<View, Vec<f64>>, label: Option<u8>) -> Result<ScanPrediction> {
    if seq_probs.values().all(|v| v.is_empty()) {
        return Err(Error::Aggregation(format!("study {study_id} has no sequence probabilities")));
    }
    if let Some(p) = seq_probs.values().flatten().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Aggregation(format!("study {study_id}: probability {p} outside [0, 1]")));
    }
    let per_sequence: BTreeMap<View, Vec<f64>> = seq_probs.iter().filter(|(_, v)| !v.is_empty()).map(|(k, v)| (*k, v.clone())).collect();
    let per_view: BTreeMap<View, f64> = per_sequence.iter().map(|(k, v)| (*k, mean(v))).collect();
    let views: Vec<f64> = per_view.values().copied().collect();
    let missing_views = View::ALL.iter().copied().filter(|v| !per_view.contains_key(v)).collect();
    Ok(ScanPrediction { study_id: study_id.to_string(), label, per_sequence, per_view, ensemble: mean(&views), missing_views })
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Size(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc(format!("{p} positives and {n} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives keeps mid-ranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i+j+2)/2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j + 1;
    }
    let (p, n) = (p as u128, n as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC operating points for every distinct threshold, from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc(format!("{p} positives and {n} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: s, fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64 });
    }
    Ok(points)
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush().at(path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl Confusion {
    pub fn n(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn accuracy(&self) -> Option<Ratio<u64>> {
        ratio(self.tp + self.tn, self.n())
    }

    pub fn sensitivity(&self) -> Option<Ratio<u64>> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<Ratio<u64>> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: u64, den: u64) -> Option<Ratio<u64>> {
    (den > 0).then(|| Ratio::new_raw(num, den))
}

/// Percentage with two decimals, rounded half up in exact arithmetic.
pub fn percent(r: Ratio<u64>) -> String {
    let (num, den) = (u128::from(*r.numer()), u128::from(*r.denom()));
    let hundredths = (num * 20000 + den) / (2 * den);
    format!("{}.{:02}%", hundredths / 100, hundredths % 100)
}

/// Counts with the decision rule `prob > threshold`.
pub fn confusion_metrics(preds: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Size(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut c = Confusion { tp: 0, fn_: 0, tn: 0, fp: 0 };
    for (&p, &y) in preds.iter().zip(labels) {
        match (p > threshold, y == 1) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
        }
    }
    Ok(c)
}

/// Threshold among midpoints of adjacent distinct scores minimizing
/// |sensitivity − specificity|; ties prefer higher sensitivity, then the
/// lower threshold. When every score is equal the common score is returned.
pub fn calibrate_threshold(preds: &[(f64, u8)]) -> Result<f64> {
    let labels: Vec<u8> = preds.iter().map(|p| p.1).collect();
    let (pos, neg) = class_counts(&labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Calibration);
    }
    let mut sorted: Vec<(f64, u8)> = preds.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (pos, neg) = (pos as u64, neg as u64);
    // sweeping upward: everything at or below the candidate is negative
    let (mut below_pos, mut below_neg) = (0u64, 0u64);
    let mut best: Option<(u64, u64, f64)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 == 1 {
                below_pos += 1;
            } else {
                below_neg += 1;
            }
            i += 1;
        }
        if i == sorted.len() {
            break;
        }
        let t = (s + sorted[i].0) / 2.0;
        let (tp, tn) = (pos - below_pos, below_neg);
        // |tp/P − tn/N| compared through the common denominator P·N
        let gap = (tp * neg).abs_diff(tn * pos);
        let better = match best {
            None => true,
            Some((g, btp, _)) => gap < g || (gap == g && tp > btp),
        };
        if better {
            best = Some((gap, tp, t));
        }
    }
    Ok(best.map_or(sorted[0].0, |b| b.2))
}

/// Fleiss' kappa over a subjects × categories count matrix.
pub fn fleiss_kappa(m: &[Vec<u64>]) -> Result<f64> {
    if m.len() < 2 {
        return Err(Error::Size("Fleiss' kappa needs at least two subjects".into()));
    }
    let raters: u64 = m[0].iter().sum();
    let k = m[0].len();
    if raters < 2 || m.iter().any(|r| r.len() != k || r.iter().sum::<u64>() != raters) {
        return Err(Error::Size("every subject needs the same number (≥ 2) of ratings over the same categories".into()));
    }
    let (n_sub, r) = (m.len() as f64, raters as f64);
    let p_bar = m.iter().map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - r) / (r * (r - 1.0))).sum::<f64>() / n_sub;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = m.iter().map(|row| row[j] as f64).sum::<f64>() / (n_sub * r);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::UndefinedKappa);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePoint {
    pub fpr: f64,
    pub tpr_lower: f64,
    pub tpr_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub iterations: usize,
    pub seed: u64,
    /// Resamples redrawn because they held a single class.
    pub redraws: usize,
    pub stratified: bool,
    pub accuracy: Interval,
    pub sensitivity: Interval,
    pub specificity: Interval,
    pub auc: Interval,
    pub roc_envelope: Vec<EnvelopePoint>,
}

/// Linear-interpolation percentile (`q` in [0, 100]) of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn interval(estimate: f64, mut xs: Vec<f64>) -> Interval {
    xs.sort_by(f64::total_cmp);
    Interval { estimate, lower: percentile(&xs, 2.5), upper: percentile(&xs, 97.5) }
}

/// Highest TPR reachable at or below each FPR grid value.
fn tpr_at(points: &[RocPoint], grid: &[f64]) -> Vec<f64> {
    grid.iter().map(|&f| points.iter().filter(|p| p.fpr <= f + 1e-12).map(|p| p.tpr).fold(0.0, f64::max)).collect()
}

/// Class-stratified percentile bootstrap of accuracy, sensitivity,
/// specificity (at `threshold`) and AUC, plus a pointwise ROC band.
pub fn bootstrap_ci(preds: &[f64], labels: &[u8], threshold: f64, iterations: usize, seed: u64) -> Result<BootstrapReport> {
    let (p, n) = class_counts(labels);
    if preds.len() < 2 || p == 0 || n == 0 || iterations == 0 {
        return Err(Error::Size(format!("bootstrap needs both classes and iterations, got {p}/{n}/{iterations}")));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let rows: Vec<(f64, f64, f64, f64, Vec<f64>)> = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = seed::rng(seed::derive_n(seed, it as u64));
            let mut s = Vec::with_capacity(preds.len());
            let mut y = Vec::with_capacity(preds.len());
            for group in [&pos, &neg] {
                for _ in 0..group.len() {
                    let k = group[rng.random_range(0..group.len())];
                    s.push(preds[k]);
                    y.push(labels[k]);
                }
            }
            let c = confusion_metrics(&s, &y, threshold).expect("non-empty resample");
            let f = |r: Option<Ratio<u64>>| r.map_or(f64::NAN, |r| *r.numer() as f64 / *r.denom() as f64);
            let auc = roc_auc(&s, &y).expect("stratified resample keeps both classes");
            let env = tpr_at(&roc_curve(&s, &y).expect("both classes"), &grid);
            (f(c.accuracy()), f(c.sensitivity()), f(c.specificity()), auc, env)
        })
        .collect();
    let c = confusion_metrics(preds, labels, threshold)?;
    let f = |r: Option<Ratio<u64>>| r.map_or(f64::NAN, |r| *r.numer() as f64 / *r.denom() as f64);
    let column = |k: usize| rows.iter().map(|r| [r.0, r.1, r.2, r.3][k]).collect::<Vec<_>>();
    let roc_envelope = grid
        .iter()
        .enumerate()
        .map(|(g, &fpr)| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.4[g]).collect();
            v.sort_by(f64::total_cmp);
            EnvelopePoint { fpr, tpr_lower: percentile(&v, 2.5), tpr_upper: percentile(&v, 97.5) }
        })
        .collect();
    Ok(BootstrapReport {
        iterations,
        seed,
        redraws: 0,
        stratified: true,
        accuracy: interval(f(c.accuracy()), column(0)),
        sensitivity: interval(f(c.sensitivity()), column(1)),
        specificity: interval(f(c.specificity()), column(2)),
        auc: interval(roc_auc(preds, labels)?, column(3)),
        roc_envelope,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub threshold: f64,
    pub counts: Confusion,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// e.g. `"90.14% (64/71)"`.
    pub accuracy_text: String,
    pub sensitivity_text: String,
    pub specificity_text: String,
    pub auc: f64,
    pub bootstrap: Option<BootstrapReport>,
}

fn rate_text(r: Option<Ratio<u64>>) -> String {
    match r {
        Some(r) => format!("{} ({}/{})", percent(r), r.numer(), r.denom()),
        None => "undefined".into(),
    }
}

fn rate(r: Option<Ratio<u64>>) -> f64 {
    r.map_or(f64::NAN, |r| *r.numer() as f64 / *r.denom() as f64)
}

impl EvaluationReport {
    pub fn from_counts(dataset: &str, threshold: f64, counts: Confusion, auc: f64) -> Self {
        Self {
            dataset: dataset.to_string(),
            threshold,
            counts,
            accuracy: rate(counts.accuracy()),
            sensitivity: rate(counts.sensitivity()),
            specificity: rate(counts.specificity()),
            accuracy_text: rate_text(counts.accuracy()),
            sensitivity_text: rate_text(counts.sensitivity()),
            specificity_text: rate_text(counts.specificity()),
            auc,
            bootstrap: None,
        }
    }
}

/// Full report at a fixed threshold, with bootstrap intervals when
/// `iterations > 0`.
pub fn evaluate(dataset: &str, preds: &[f64], labels: &[u8], threshold: f64, iterations: usize, seed: u64) -> Result<EvaluationReport> {
    let counts = confusion_metrics(preds, labels, threshold)?;
    let mut report = EvaluationReport::from_counts(dataset, threshold, counts, roc_auc(preds, labels)?);
    if iterations > 0 {
        report.bootstrap = Some(bootstrap_ci(preds, labels, threshold, iterations, seed)?);
    }
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).at(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").at(path)?;
    Ok(())
}
