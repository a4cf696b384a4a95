//! Manifest studies to model-ready samples: read, resize, crop, standardize
//! with training-partition statistics, and augment the training copies.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use mvscan_nn::Tensor;
use rayon::prelude::*;

use crate::cohort::{CohortManifest, Partition, StudyRecord, View};
use crate::error::{Error, Result};
use crate::preprocess::{
    apply_standardization, augment, center_crop, fit_standardization, read_volume, resize_volume, AugmentPolicy, SequenceVolume,
    StandardizationStats, CROP_SIDE, RESIZE_SIDE,
};
use crate::seed;
use crate::training::Sample;

/// Reads one sequence and brings it to the cropped stage.
pub fn load_cropped(manifest: &CohortManifest, study: &StudyRecord, index: usize) -> Result<SequenceVolume> {
    let seq = study.sequences.get(index).ok_or_else(|| Error::Reference(format!("study {} has no sequence {index}", study.study_id)))?;
    let raw = read_volume(&manifest.resolve(&seq.path))?;
    if raw.view != seq.view || raw.sequence_type != seq.sequence_type || raw.fat_sat != seq.fat_sat {
        return Err(Error::Reference(format!(
            "{}: volume header says {} {} but the manifest lists {} {}",
            seq.path.display(),
            raw.view,
            raw.key(),
            seq.view,
            seq.sequence_type
        )));
    }
    center_crop(&resize_volume(&raw, RESIZE_SIDE)?, CROP_SIDE)
}

/// One study's standardized sequences for a single view.
#[derive(Debug, Clone)]
pub struct StudyVolumes {
    pub study_id: String,
    pub label: u8,
    pub volumes: Vec<SequenceVolume>,
}

/// Every `view` sequence of a set of studies, standardized with statistics
/// fitted on the studies marked as training.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub view: View,
    pub stats: StandardizationStats,
    studies: BTreeMap<String, StudyVolumes>,
}

impl ViewData {
    /// `train_ids` name the studies whose voxels fit the statistics.
    /// Studies without a sequence in `view` are left out.
    pub fn build(manifest: &CohortManifest, studies: &[&StudyRecord], train_ids: &BTreeSet<String>, view: View) -> Result<Self> {
        let jobs = jobs(studies, view);
        let cropped: Vec<SequenceVolume> = jobs
            .par_iter()
            .map(|&(s, i)| {
                let v = load_cropped(manifest, s, i)?;
                Ok(if train_ids.contains(&s.study_id) { v.with_partition(Partition::Train) } else { v })
            })
            .collect::<Result<_>>()?;
        let stats = fit_standardization(cropped.iter().filter(|v| v.partition == Some(Partition::Train)))?;
        Self::standardize(&jobs, cropped, view, stats)
    }

    /// Standardizes with statistics fitted elsewhere.
    pub fn build_with_stats(manifest: &CohortManifest, studies: &[&StudyRecord], view: View, stats: &StandardizationStats) -> Result<Self> {
        let jobs = jobs(studies, view);
        let cropped: Vec<SequenceVolume> = jobs.par_iter().map(|&(s, i)| load_cropped(manifest, s, i)).collect::<Result<_>>()?;
        Self::standardize(&jobs, cropped, view, stats.clone())
    }

    fn standardize(jobs: &[(&StudyRecord, usize)], cropped: Vec<SequenceVolume>, view: View, stats: StandardizationStats) -> Result<Self> {
        let standardized: Vec<SequenceVolume> = cropped.par_iter().map(|v| apply_standardization(v, &stats)).collect::<Result<_>>()?;
        let mut by_study: BTreeMap<String, StudyVolumes> = BTreeMap::new();
        for ((s, _), v) in jobs.iter().zip(standardized) {
            by_study
                .entry(s.study_id.clone())
                .or_insert_with(|| StudyVolumes { study_id: s.study_id.clone(), label: s.label, volumes: Vec::new() })
                .volumes
                .push(v);
        }
        Ok(Self { view, stats, studies: by_study })
    }

    pub fn study(&self, study_id: &str) -> Option<&StudyVolumes> {
        self.studies.get(study_id)
    }

    pub fn study_ids(&self) -> impl Iterator<Item = &str> {
        self.studies.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    /// Unaugmented samples, one per sequence. Ids without a sequence in this
    /// view are skipped.
    pub fn samples<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for id in ids {
            if let Some(s) = self.studies.get(id) {
                for v in &s.volumes {
                    out.push(Sample { study_id: s.study_id.clone(), label: s.label, volume: Arc::new(to_tensor(v)?) });
                }
            }
        }
        Ok(out)
    }

    pub fn all_samples(&self) -> Result<Vec<Sample>> {
        self.samples(self.study_ids())
    }

    /// `policy.multiplier` augmented copies of every sequence. Copies of a
    /// sequence depend only on the policy seed, study id and sequence index.
    pub fn augmented_samples<'a>(&self, ids: impl IntoIterator<Item = &'a str>, policy: &AugmentPolicy) -> Result<Vec<Sample>> {
        Ok(self.augmented_by_study(ids, policy)?.into_values().flatten().collect())
    }

    /// Augmented samples grouped by study id.
    pub fn augmented_by_study<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
        policy: &AugmentPolicy,
    ) -> Result<BTreeMap<String, Vec<Sample>>> {
        let jobs: Vec<(&StudyVolumes, usize)> =
            ids.into_iter().filter_map(|id| self.studies.get(id)).flat_map(|s| (0..s.volumes.len()).map(move |i| (s, i))).collect();
        let nested: Vec<Vec<Sample>> = jobs
            .par_iter()
            .map(|&(s, i)| {
                let p = policy.with_seed(seed::derive(policy.seed, &format!("{}/{i}", s.study_id)));
                augment(&s.volumes[i], &p)?
                    .iter()
                    .map(|v| Ok(Sample { study_id: s.study_id.clone(), label: s.label, volume: Arc::new(to_tensor(v)?) }))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut out: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for ((s, _), samples) in jobs.iter().zip(nested) {
            out.entry(s.study_id.clone()).or_default().extend(samples);
        }
        Ok(out)
    }
}

fn jobs<'a>(studies: &[&'a StudyRecord], view: View) -> Vec<(&'a StudyRecord, usize)> {
    studies.iter().flat_map(|s| s.sequences.iter().enumerate().filter(move |(_, q)| q.view == view).map(move |(i, _)| (*s, i))).collect()
}

pub fn to_tensor(v: &SequenceVolume) -> Result<Tensor<f32>> {
    Ok(Tensor::new(v.shape.to_vec(), v.voxels.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Modality, SequenceRef, SequenceType};
    use crate::preprocess::write_volume;
    use std::path::Path;

    fn fixture(root: &Path) -> CohortManifest {
        let mut studies = Vec::new();
        for (i, (label, view)) in [(0, View::Sagittal), (1, View::Sagittal), (0, View::Sagittal), (1, View::Axial)].into_iter().enumerate()
        {
            let name = format!("s{i}.f32");
            let voxels = (0..2 * 16 * 16).map(|j| (i * 50 + j % 37) as f32).collect();
            write_volume(&root.join(&name), &SequenceVolume::new([2, 16, 16], voxels, view, SequenceType::T1, false).unwrap()).unwrap();
            studies.push(StudyRecord {
                study_id: format!("s{i}"),
                patient_id: format!("p{i}"),
                shoulder_id: format!("p{i}-L"),
                modality: Modality::Mra,
                label,
                sequences: vec![SequenceRef { view, sequence_type: SequenceType::T1, fat_sat: false, path: name.into() }],
            });
        }
        CohortManifest::new(root, studies)
    }

    #[test]
    fn statistics_come_from_training_studies_only() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path());
        let all: Vec<&StudyRecord> = m.studies.iter().collect();
        let train: BTreeSet<String> = ["s0".to_string(), "s1".to_string()].into();
        let data = ViewData::build(&m, &all, &train, View::Sagittal).unwrap();
        assert_eq!(data.study_ids().collect::<Vec<_>>(), ["s0", "s1", "s2"]);

        let cropped: Vec<SequenceVolume> = all[..2].iter().map(|s| load_cropped(&m, s, 0).unwrap()).collect();
        let n = cropped.iter().map(|v| v.voxels.len()).sum::<usize>() as f64;
        let mean = cropped.iter().flat_map(|v| &v.voxels).map(|&x| x as f64).sum::<f64>() / n;
        let moments = data.stats.per_key.values().next().unwrap();
        assert_eq!(moments.count, n as u64);
        assert!((moments.mean - mean).abs() < 1e-6 * mean.abs().max(1.0));

        let reused = ViewData::build_with_stats(&m, &all, View::Sagittal, &data.stats).unwrap();
        assert_eq!(reused.all_samples().unwrap().len(), 3);
        assert_eq!(reused.study("s2").unwrap().volumes, data.study("s2").unwrap().volumes);
    }

    #[test]
    fn augmented_copies_do_not_depend_on_the_other_ids() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path());
        let all: Vec<&StudyRecord> = m.studies.iter().collect();
        let data = ViewData::build(&m, &all, &["s0".to_string()].into(), View::Sagittal).unwrap();
        let policy = AugmentPolicy { multiplier: 3, ..AugmentPolicy::fine_tune(5) };
        let both = data.augmented_by_study(["s0", "s1", "s3"], &policy).unwrap();
        let alone = data.augmented_by_study(["s1"], &policy).unwrap();
        assert_eq!(both.keys().collect::<Vec<_>>(), ["s0", "s1"]);
        assert_eq!(both["s1"].len(), 3);
        for (a, b) in both["s1"].iter().zip(&alone["s1"]) {
            assert_eq!(a.volume.data(), b.volume.data());
        }
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(dir.path());
        m.studies[0].sequences[0].sequence_type = SequenceType::T2;
        let err = load_cropped(&m, &m.studies[0], 0).unwrap_err();
        assert!(matches!(err, Error::Reference(_)), "{err}");
        assert!(load_cropped(&m, &m.studies[0], 1).is_err());
    }
}
