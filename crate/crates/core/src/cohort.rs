//! Cohort data model, manifest ingestion, shoulder-level stratified splits
//! and cross-validation fold plans.
//!
//! Splits are made per shoulder: every sequence of every study of one
//! shoulder lands in the same partition (or fold). Split operations accept
//! one modality per call.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    StandardMri,
    Mra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Sagittal,
    Axial,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Sagittal, View::Axial, View::Coronal];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SequenceType {
    T1,
    T2,
    #[serde(rename = "MERGE")]
    Merge,
    #[serde(rename = "PD")]
    Pd,
    #[serde(rename = "STIR")]
    Stir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($s => Ok(Self::$v),)+
                    other => Err(format!(
                        "`{other}` is not one of {}",
                        [$($s),+].join(", ")
                    )),
                }
            }
        }
    };
}

text_enum!(Modality { StandardMri => "standard_mri", Mra => "mra" });
text_enum!(View { Sagittal => "sagittal", Axial => "axial", Coronal => "coronal" });
text_enum!(SequenceType { T1 => "T1", T2 => "T2", Merge => "MERGE", Pd => "PD", Stir => "STIR" });
text_enum!(Partition { Train => "train", Val => "val", Test => "test" });

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRef {
    pub view: View,
    pub sequence_type: SequenceType,
    pub fat_sat: bool,
    /// Relative to the manifest directory unless absolute.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub patient_id: String,
    pub shoulder_id: String,
    pub modality: Modality,
    pub label: u8,
    pub sequences: Vec<SequenceRef>,
}

impl StudyRecord {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn sequences_for(&self, view: View) -> impl Iterator<Item = &SequenceRef> {
        self.sequences.iter().filter(move |s| s.view == view)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    /// Directory that relative volume paths resolve against.
    pub root: PathBuf,
    pub studies: Vec<StudyRecord>,
}

pub const MANIFEST_HEADER: [&str; 9] =
    ["study_id", "patient_id", "shoulder_id", "modality", "label", "view", "sequence_type", "fat_sat", "volume_path"];

impl CohortManifest {
    pub fn new(root: impl Into<PathBuf>, studies: Vec<StudyRecord>) -> Self {
        Self { root: root.into(), studies }
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.studies.iter().filter(|s| s.is_positive()).count()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.studies.iter().filter(|s| s.modality == modality).count()
    }

    pub fn modalities(&self) -> BTreeSet<Modality> {
        self.studies.iter().map(|s| s.modality).collect()
    }

    pub fn for_modality(&self, modality: Modality) -> CohortManifest {
        self.filter(|s| s.modality == modality)
    }

    pub fn filter(&self, keep: impl Fn(&StudyRecord) -> bool) -> CohortManifest {
        CohortManifest { root: self.root.clone(), studies: self.studies.iter().filter(|s| keep(s)).cloned().collect() }
    }

    pub fn study(&self, study_id: &str) -> Option<&StudyRecord> {
        self.studies.iter().find(|s| s.study_id == study_id)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Single modality of this manifest, or an error naming the mix.
    pub fn single_modality(&self) -> Result<Option<Modality>> {
        let mods = self.modalities();
        if mods.len() > 1 {
            let names: Vec<_> = mods.iter().map(|m| m.as_str()).collect();
            return Err(Error::MixedModality(names.join(" + ")));
        }
        Ok(mods.into_iter().next())
    }

    /// Writes the manifest as CSV, one row per sequence.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_HEADER)?;
        for s in &self.studies {
            for q in &s.sequences {
                w.write_record([
                    s.study_id.as_str(),
                    s.patient_id.as_str(),
                    s.shoulder_id.as_str(),
                    s.modality.as_str(),
                    if s.label == 1 { "1" } else { "0" },
                    q.view.as_str(),
                    q.sequence_type.as_str(),
                    if q.fat_sat { "true" } else { "false" },
                    &q.path.to_string_lossy(),
                ])?;
            }
        }
        w.flush().at(path)?;
        Ok(())
    }
}

fn schema(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema { line, field: field.to_string(), message: message.into() }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

/// Reads and validates a manifest file; volume paths must exist.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    load_manifest_labeled(path, "label")
}

/// Parses manifest CSV from `reader`; relative paths resolve against `root`.
pub fn parse_manifest(reader: impl Read, root: &Path, check_files: bool) -> Result<CohortManifest> {
    parse_manifest_labeled(reader, root, check_files, "label")
}

/// Like [`load_manifest`], but study labels come from the binary column
/// `label_field`, which may be an extra column after the standard ones.
pub fn load_manifest_labeled(path: &Path, label_field: &str) -> Result<CohortManifest> {
    let file = std::fs::File::open(path).at(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest_labeled(file, &root, true, label_field)
}

pub fn parse_manifest_labeled(reader: impl Read, root: &Path, check_files: bool, label_field: &str) -> Result<CohortManifest> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (i, expected) in MANIFEST_HEADER.iter().enumerate() {
        if headers.get(i) != Some(*expected) {
            return Err(schema(1, expected, format!("header must start with {}", MANIFEST_HEADER.join(","))));
        }
    }
    let label_col = headers.iter().position(|h| h == label_field).ok_or_else(|| schema(1, label_field, "label column not found"))?;
    let mut studies: Vec<StudyRecord> = Vec::new();
    let mut by_id: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen_paths: BTreeSet<(String, PathBuf)> = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(schema(line, "row", format!("expected {} fields, got {}", headers.len(), rec.len())));
        }
        let field = |j: usize| rec.get(j).unwrap_or("");
        let nonempty = |j: usize| -> Result<String> {
            let v = field(j);
            if v.is_empty() {
                Err(schema(line, MANIFEST_HEADER[j], "must not be empty"))
            } else {
                Ok(v.to_string())
            }
        };
        let study_id = nonempty(0)?;
        let patient_id = nonempty(1)?;
        let shoulder_id = nonempty(2)?;
        let modality: Modality = field(3).parse().map_err(|m| schema(line, "modality", m))?;
        let label = match field(label_col) {
            "0" => 0,
            "1" => 1,
            other => return Err(schema(line, label_field, format!("`{other}` is not 0 or 1"))),
        };
        let view: View = field(5).parse().map_err(|m| schema(line, "view", m))?;
        let sequence_type: SequenceType = field(6).parse().map_err(|m| schema(line, "sequence_type", m))?;
        let fat_sat = parse_bool(field(7)).ok_or_else(|| schema(line, "fat_sat", "expected true/false"))?;
        let rel = PathBuf::from(nonempty(8)?);
        if check_files {
            let full = if rel.is_absolute() { rel.clone() } else { root.join(&rel) };
            if !full.exists() {
                return Err(Error::DanglingReference { study_id, path: full });
            }
        }
        if !seen_paths.insert((study_id.clone(), rel.clone())) {
            return Err(Error::DuplicateStudy(format!("line {line}: study {study_id} lists {} twice", rel.display())));
        }
        let seq = SequenceRef { view, sequence_type, fat_sat, path: rel };
        match by_id.get(&study_id) {
            Some(&idx) => {
                let s = &mut studies[idx];
                if s.patient_id != patient_id || s.shoulder_id != shoulder_id || s.modality != modality || s.label != label {
                    return Err(Error::DuplicateStudy(format!(
                        "line {line}: study_id {study_id} reused with different patient/shoulder/modality/label"
                    )));
                }
                s.sequences.push(seq);
            }
            None => {
                by_id.insert(study_id.clone(), studies.len());
                studies.push(StudyRecord { study_id, patient_id, shoulder_id, modality, label, sequences: vec![seq] });
            }
        }
    }
    let mut shoulders: BTreeMap<(Modality, &str), &str> = BTreeMap::new();
    for s in &studies {
        if let Some(other) = shoulders.insert((s.modality, &s.shoulder_id), &s.study_id) {
            return Err(Error::DuplicateStudy(format!(
                "shoulder {} has two {} studies ({other}, {})",
                s.shoulder_id, s.modality, s.study_id
            )));
        }
    }
    Ok(CohortManifest { root: root.to_path_buf(), studies })
}

/// Shoulder → partition assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn partition_of(&self, shoulder_id: &str) -> Option<Partition> {
        self.assignment.get(shoulder_id).copied()
    }

    pub fn shoulders_in(&self, p: Partition) -> impl Iterator<Item = &str> {
        self.assignment.iter().filter(move |(_, &q)| q == p).map(|(s, _)| s.as_str())
    }

    pub fn size(&self, p: Partition) -> usize {
        self.shoulders_in(p).count()
    }

    /// Studies of `manifest` falling in `p`.
    pub fn studies<'a>(&self, manifest: &'a CohortManifest, p: Partition) -> Vec<&'a StudyRecord> {
        manifest.studies.iter().filter(|s| self.partition_of(&s.shoulder_id) == Some(p)).collect()
    }
}

/// Integer sizes summing to `total`, each within 1 of `total·weight`.
/// Ties go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let targets: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut sizes: Vec<usize> = targets.iter().map(|t| (t + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - sizes[a] as f64;
        let rb = targets[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Split `positives` across bins in proportion to `sizes`, exactly: bin `i`
/// receives `floor` or `ceil` of `positives·sizes[i]/Σsizes`. Ties follow
/// `tie_order`.
fn proportional_counts(positives: usize, sizes: &[usize], tie_order: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut counts: Vec<usize> = sizes.iter().map(|&s| positives * s / total).collect();
    let rema: Vec<usize> = sizes.iter().map(|&s| positives * s % total).collect();
    let extra = positives - counts.iter().sum::<usize>();
    let rank = |i: usize| tie_order.iter().position(|&j| j == i).unwrap_or(i);
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| rema[b].cmp(&rema[a]).then(rank(a).cmp(&rank(b))));
    for &i in order.iter().take(extra) {
        counts[i] += 1;
    }
    counts
}

/// One label per shoulder, sorted by shoulder id.
fn shoulder_labels<'a>(studies: impl IntoIterator<Item = &'a StudyRecord>) -> Result<BTreeMap<&'a str, u8>> {
    let mut labels: BTreeMap<&str, u8> = BTreeMap::new();
    for s in studies {
        if let Some(prev) = labels.insert(&s.shoulder_id, s.label) {
            if prev != s.label {
                return Err(Error::Precondition(format!("shoulder {} carries conflicting labels", s.shoulder_id)));
            }
        }
    }
    Ok(labels)
}

fn check_single_modality<'a>(studies: impl IntoIterator<Item = &'a StudyRecord>) -> Result<()> {
    let mods: BTreeSet<Modality> = studies.into_iter().map(|s| s.modality).collect();
    if mods.len() > 1 {
        let names: Vec<_> = mods.iter().map(|m| m.as_str()).collect();
        return Err(Error::MixedModality(names.join(" + ")));
    }
    Ok(())
}

/// Shoulder-level stratified train/val/test split.
///
/// Partition sizes use largest-remainder rounding of `ratios`; positives are
/// then apportioned so each partition's positive count is within one of its
/// proportional share. Identical inputs give identical assignments.
pub fn stratified_split(manifest: &CohortManifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    check_single_modality(&manifest.studies)?;
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let labels = shoulder_labels(&manifest.studies)?;
    let n = labels.len();
    let sizes = largest_remainder(n, &ratios);
    let pos: Vec<&str> = labels.iter().filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<&str> = labels.iter().filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    let pos_counts = proportional_counts(pos.len(), &sizes, &[0, 1, 2]);
    for (i, p) in Partition::ALL.iter().enumerate() {
        if ratios[i] > 0.0 && (pos_counts[i] == 0 || sizes[i] - pos_counts[i] == 0) {
            return Err(Error::Infeasible(format!(
                "{p} partition would hold {} positives and {} negatives ({} positives, {} negatives overall)",
                pos_counts[i],
                sizes[i] - pos_counts[i],
                pos.len(),
                neg.len()
            )));
        }
    }
    let mut rng = seed::rng(seed);
    let mut assignment = BTreeMap::new();
    for (mut members, counts) in [(pos, pos_counts.clone()), (neg, sizes.iter().zip(&pos_counts).map(|(s, p)| s - p).collect::<Vec<_>>())] {
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (part, &count) in Partition::ALL.iter().zip(&counts) {
            for s in it.by_ref().take(count) {
                assignment.insert(s.to_string(), *part);
            }
        }
    }
    Ok(SplitAssignment { ratios, seed, assignment })
}

/// Shoulder → fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub fold_of: BTreeMap<String, usize>,
    /// Size and positive count of the pool the plan was drawn from.
    pub pool_size: usize,
    pub pool_positives: usize,
}

impl FoldPlan {
    pub fn fold(&self, shoulder_id: &str) -> Option<usize> {
        self.fold_of.get(shoulder_id).copied()
    }

    pub fn fold_size(&self, fold: usize) -> usize {
        self.fold_of.values().filter(|&&f| f == fold).count()
    }

    /// Content hash, used to confirm candidates share one plan.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("fold plan serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Stratified k-fold plan over a pool of studies (one modality).
pub fn make_folds(pool: &[StudyRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    check_single_modality(pool)?;
    if k < 2 {
        return Err(Error::Precondition(format!("k = {k}, need at least 2 folds")));
    }
    let labels = shoulder_labels(pool)?;
    let pos: Vec<&str> = labels.iter().filter(|(_, &l)| l == 1).map(|(s, _)| *s).collect();
    let neg: Vec<&str> = labels.iter().filter(|(_, &l)| l == 0).map(|(s, _)| *s).collect();
    if pos.len() < k || neg.len() < k {
        return Err(Error::Infeasible(format!(
            "{k} folds need at least {k} members per class, pool has {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let n = labels.len();
    let mut rng = seed::rng(seed);
    // which folds absorb the remainder is decided by a seeded permutation
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut sizes = vec![n / k; k];
    for &f in order.iter().take(n % k) {
        sizes[f] += 1;
    }
    let pos_counts = proportional_counts(pos.len(), &sizes, &order);
    if let Some(f) = (0..k).find(|&f| pos_counts[f] == 0 || sizes[f] == pos_counts[f]) {
        return Err(Error::Infeasible(format!("fold {f} would be single-class")));
    }
    let mut fold_of = BTreeMap::new();
    for (mut members, counts) in
        [(pos.clone(), pos_counts.clone()), (neg, sizes.iter().zip(&pos_counts).map(|(s, p)| s - p).collect::<Vec<_>>())]
    {
        members.shuffle(&mut rng);
        let mut it = members.into_iter();
        for (fold, &count) in counts.iter().enumerate() {
            for s in it.by_ref().take(count) {
                fold_of.insert(s.to_string(), fold);
            }
        }
    }
    Ok(FoldPlan { k, seed, fold_of, pool_size: n, pool_positives: pos.len() })
}

/// Something that places sequences into named partitions or folds.
pub trait Placement {
    /// Partition label of one sequence; `None` when the placement does not
    /// cover it.
    fn place(&self, study: &StudyRecord, seq: &SequenceRef) -> Option<String>;
    /// Shoulder ids the placement refers to.
    fn referenced_shoulders(&self) -> BTreeSet<String>;
}

impl Placement for SplitAssignment {
    fn place(&self, study: &StudyRecord, _: &SequenceRef) -> Option<String> {
        self.partition_of(&study.shoulder_id).map(|p| p.to_string())
    }

    fn referenced_shoulders(&self) -> BTreeSet<String> {
        self.assignment.keys().cloned().collect()
    }
}

impl Placement for FoldPlan {
    fn place(&self, study: &StudyRecord, _: &SequenceRef) -> Option<String> {
        self.fold(&study.shoulder_id).map(|f| format!("fold{f}"))
    }

    fn referenced_shoulders(&self) -> BTreeSet<String> {
        self.fold_of.keys().cloned().collect()
    }
}

/// Explicit per-sequence placement, keyed by (study_id, volume path).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SequencePlacement {
    pub shoulders: BTreeMap<String, String>,
    pub entries: BTreeMap<(String, PathBuf), String>,
}

impl SequencePlacement {
    /// Places every sequence of every study according to `split`.
    pub fn from_split(split: &SplitAssignment, manifest: &CohortManifest) -> Self {
        let mut out = Self::default();
        for s in &manifest.studies {
            if let Some(p) = split.partition_of(&s.shoulder_id) {
                for q in &s.sequences {
                    out.set(s, q, p.as_str());
                }
            }
        }
        out
    }

    pub fn set(&mut self, study: &StudyRecord, seq: &SequenceRef, partition: &str) {
        self.shoulders.insert(study.shoulder_id.clone(), study.study_id.clone());
        self.entries.insert((study.study_id.clone(), seq.path.clone()), partition.to_string());
    }
}

impl Placement for SequencePlacement {
    fn place(&self, study: &StudyRecord, seq: &SequenceRef) -> Option<String> {
        self.entries.get(&(study.study_id.clone(), seq.path.clone())).cloned()
    }

    fn referenced_shoulders(&self) -> BTreeSet<String> {
        self.shoulders.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageViolation {
    pub shoulder_id: String,
    pub partitions: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<LeakageViolation>,
    /// Shoulders present in the manifest but not placed.
    pub unplaced: Vec<String>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every shoulder whose sequences span more than one partition.
pub fn validate_no_leakage(placement: &dyn Placement, manifest: &CohortManifest) -> Result<LeakageReport> {
    let known: BTreeSet<&str> = manifest.studies.iter().map(|s| s.shoulder_id.as_str()).collect();
    if let Some(unknown) = placement.referenced_shoulders().iter().find(|s| !known.contains(s.as_str())) {
        return Err(Error::Reference(format!("shoulder {unknown} is not in the manifest")));
    }
    let mut spans: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    let mut unplaced = BTreeSet::new();
    for s in &manifest.studies {
        for q in &s.sequences {
            match placement.place(s, q) {
                Some(p) => {
                    spans.entry(&s.shoulder_id).or_default().insert(p);
                }
                None => {
                    unplaced.insert(s.shoulder_id.clone());
                }
            }
        }
    }
    let violations = spans
        .into_iter()
        .filter(|(_, parts)| parts.len() > 1)
        .map(|(shoulder, parts)| LeakageViolation { shoulder_id: shoulder.to_string(), partitions: parts.into_iter().collect() })
        .collect();
    Ok(LeakageReport { violations, unplaced: unplaced.into_iter().collect() })
}

/// Positive fraction of the shoulders in `studies`.
pub fn positive_fraction<'a>(studies: impl IntoIterator<Item = &'a StudyRecord>) -> f64 {
    let (mut n, mut p) = (0usize, 0usize);
    for s in studies {
        n += 1;
        p += s.label as usize;
    }
    if n == 0 {
        0.0
    } else {
        p as f64 / n as f64
    }
}
