//! Synthetic cohorts: smooth textured volumes with an ellipsoidal bright
//! lesion planted in every view of each positive study.
//!
//! Every volume also carries a brighter ring, so the per-volume min-max
//! rescale sees the same intensity range with or without a lesion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mvscan_core::cohort::{CohortManifest, Modality, SequenceRef, SequenceType, StudyRecord, View};
use mvscan_core::preprocess::{crop_offset, write_volume, SequenceVolume, CROP_SIDE, RESIZE_SIDE};
use mvscan_core::seed;
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const LESIONS_FILE: &str = "lesions.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_studies: usize,
    pub positive_fraction: f64,
    /// Views per study, taken in sagittal, axial, coronal order.
    pub views: usize,
    pub slices: usize,
    /// In-plane side of the raw volumes.
    pub side: usize,
    /// Lesion semi-axes in raw voxels: (slices, rows, columns).
    pub lesion_radii: [f64; 3],
    /// Lesion brightness above the background, in background units.
    pub lesion_intensity: f64,
    /// Brightness of the ring present in every volume; must exceed the
    /// lesion so the lesion never sets the volume maximum.
    pub ring_intensity: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub modality: Modality,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_studies: 60,
            positive_fraction: 0.3,
            views: 3,
            slices: 12,
            side: 256,
            lesion_radii: [2.5, 28.0, 28.0],
            lesion_intensity: 0.9,
            ring_intensity: 1.0,
            noise: 0.03,
            modality: Modality::Mra,
            seed: 0,
        }
    }
}

/// Raw intensity scale and sequence per view, so that standardization has
/// distinct keys to fit.
const PROTOCOL: [(View, SequenceType, bool, f64, f64); 3] = [
    (View::Sagittal, SequenceType::T1, false, 800.0, 120.0),
    (View::Axial, SequenceType::Pd, true, 1500.0, 40.0),
    (View::Coronal, SequenceType::T2, true, 400.0, 60.0),
];

/// Lesion ground truth for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Raw-voxel center (slice, row, column) and semi-axes.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Half-open slice range holding lesion voxels.
    pub slices: (usize, usize),
    /// Half-open bounding box in preprocessed 224 × 224 coordinates.
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Lesion {
    /// Slice through the lesion center.
    pub fn center_slice(&self) -> usize {
        self.center[0].round() as usize
    }
}

/// Ground truth keyed by study id, then view.
pub type LesionMap = BTreeMap<String, BTreeMap<View, Lesion>>;

impl SyntheticSpec {
    pub fn positives(&self) -> usize {
        (self.n_studies as f64 * self.positive_fraction).round() as usize
    }

    /// Raw-coordinate window that survives resize and center crop.
    fn crop_window(&self) -> (f64, f64) {
        let scale = self.side as f64 / RESIZE_SIDE as f64;
        let lo = crop_offset(RESIZE_SIDE, CROP_SIDE) as f64 * scale;
        (lo, lo + CROP_SIDE as f64 * scale)
    }

    pub fn validate(&self) -> CliResult<()> {
        let spec_err = |m: String| Err(CliError::Config(format!("synthetic spec: {m}")));
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return spec_err(format!("positive fraction {} must lie strictly between 0 and 1", self.positive_fraction));
        }
        let p = self.positives();
        if p == 0 || p == self.n_studies {
            return spec_err(format!("{} studies at fraction {} leave a class empty", self.n_studies, self.positive_fraction));
        }
        if !(1..=3).contains(&self.views) || self.slices == 0 || self.side < 8 {
            return spec_err(format!(
                "views must be 1..=3 and slices, side positive, got {} / {} / {}",
                self.views, self.slices, self.side
            ));
        }
        if self.noise < 0.0 || self.lesion_intensity <= 0.0 || self.lesion_radii.iter().any(|&r| r <= 0.0) {
            return spec_err("noise, lesion intensity and radii must be positive".into());
        }
        if self.ring_intensity <= self.lesion_intensity {
            return spec_err(format!("ring intensity {} must exceed lesion intensity {}", self.ring_intensity, self.lesion_intensity));
        }
        let [rz, ry, rx] = self.lesion_radii;
        let (lo, hi) = self.crop_window();
        if 2.0 * rz > self.slices as f64 || 2.0 * ry.max(rx) + 2.0 > hi - lo {
            return spec_err(format!(
                "lesion radii {:?} do not fit inside the {}-slice crop region [{lo}, {hi})",
                self.lesion_radii, self.slices
            ));
        }
        Ok(())
    }
}

/// Maps a raw in-plane coordinate to preprocessed (resized, cropped) pixels.
fn to_cropped(raw: f64, side: usize) -> f64 {
    let s = RESIZE_SIDE as f64 / side as f64;
    (raw + 0.5) * s - 0.5 - crop_offset(RESIZE_SIDE, CROP_SIDE) as f64
}

fn clamp_range(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    (lo.floor().max(0.0) as usize, (hi.ceil().max(0.0) as usize).min(n))
}

fn volume(spec: &SyntheticSpec, view_seed: u64, lesion: Option<&Lesion>, scale: f64, offset: f64) -> Vec<f32> {
    let mut rng = seed::rng(view_seed);
    let (n, side) = (spec.slices, spec.side);
    let (fy, fx): (f64, f64) = (rng.random_range(0.01..0.04), rng.random_range(0.01..0.04));
    let (py, px): (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let (lo, hi) = spec.crop_window();
    let (c, ring_r) = ((side as f64 - 1.0) / 2.0, 0.42 * (hi - lo));
    let mut out = Vec::with_capacity(n * side * side);
    for z in 0..n {
        for y in 0..side {
            for x in 0..side {
                let base = 0.4 + 0.1 * ((y as f64 * fy + py).sin() * (x as f64 * fx + px).cos()) + 0.02 * z as f64 / n as f64;
                let bump = lesion.map_or(0.0, |l| {
                    let d = [
                        (z as f64 - l.center[0]) / l.radii[0],
                        (y as f64 - l.center[1]) / l.radii[1],
                        (x as f64 - l.center[2]) / l.radii[2],
                    ];
                    if d.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        spec.lesion_intensity
                    } else {
                        0.0
                    }
                });
                let ring = if ((y as f64 - c).hypot(x as f64 - c) - ring_r).abs() <= 1.0 { spec.ring_intensity } else { 0.0 };
                let v = base + bump.max(ring) + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                out.push((v * scale + offset) as f32);
            }
        }
    }
    out
}

fn place_lesion(spec: &SyntheticSpec, rng: &mut impl rand::Rng) -> Lesion {
    let [rz, ry, rx] = spec.lesion_radii;
    let (lo, hi) = spec.crop_window();
    let cz = rng.random_range(rz..=(spec.slices as f64 - 1.0 - rz).max(rz));
    let cy = rng.random_range(lo + ry + 1.0..=hi - ry - 1.0);
    let cx = rng.random_range(lo + rx + 1.0..=hi - rx - 1.0);
    Lesion {
        center: [cz, cy, cx],
        radii: spec.lesion_radii,
        slices: clamp_range(cz - rz, cz + rz + 1.0, spec.slices),
        rows: clamp_range(to_cropped(cy - ry, spec.side), to_cropped(cy + ry, spec.side) + 1.0, CROP_SIDE),
        cols: clamp_range(to_cropped(cx - rx, spec.side), to_cropped(cx + rx, spec.side) + 1.0, CROP_SIDE),
    }
}

/// Writes volumes, `manifest.csv` and `lesions.json` under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> CliResult<(CohortManifest, LesionMap)> {
    spec.validate()?;
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| CliError::io(&vol_dir, e))?;
    let mut labels: Vec<u8> = (0..spec.n_studies).map(|i| u8::from(i < spec.positives())).collect();
    labels.shuffle(&mut seed::rng(seed::derive(spec.seed, "labels")));

    let mut studies = Vec::with_capacity(spec.n_studies);
    let mut lesions = LesionMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let study_id = format!("syn{i:04}");
        let patient_id = format!("pt{i:04}");
        let mut sequences = Vec::new();
        for &(view, sequence_type, fat_sat, scale, offset) in PROTOCOL.iter().take(spec.views) {
            let vseed = seed::derive(spec.seed, &format!("{study_id}/{view}"));
            let lesion = (label == 1).then(|| place_lesion(spec, &mut seed::rng(seed::derive(vseed, "lesion"))));
            let voxels = volume(spec, vseed, lesion.as_ref(), scale, offset);
            let rel = PathBuf::from("volumes").join(format!("{study_id}_{view}.f32"));
            let v = SequenceVolume::new([spec.slices, spec.side, spec.side], voxels, view, sequence_type, fat_sat)?;
            write_volume(&out_dir.join(&rel), &v)?;
            sequences.push(SequenceRef { view, sequence_type, fat_sat, path: rel });
            if let Some(l) = lesion {
                lesions.entry(study_id.clone()).or_default().insert(view, l);
            }
        }
        studies.push(StudyRecord {
            study_id,
            shoulder_id: format!("{patient_id}-R"),
            patient_id,
            modality: spec.modality,
            label,
            sequences,
        });
    }
    let manifest = CohortManifest::new(out_dir, studies);
    manifest.write_csv(&out_dir.join(MANIFEST_FILE))?;
    let lesions_path = out_dir.join(LESIONS_FILE);
    std::fs::write(&lesions_path, serde_json::to_vec_pretty(&lesions)?).map_err(|e| CliError::io(&lesions_path, e))?;
    Ok((manifest, lesions))
}

pub fn read_lesions(path: &Path) -> CliResult<LesionMap> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
