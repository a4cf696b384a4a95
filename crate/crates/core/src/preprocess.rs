//! Volume normalization chain (resize, center crop, per-sequence-type
//! standardization with per-volume min-max rescale) and rigid augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Partition, SequenceType, View};
use crate::error::{Error, IoContext, Result};
use crate::seed;

pub const RESIZE_SIDE: usize = 400;
pub const CROP_SIDE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Resized,
    Cropped,
    Standardized,
    Augmented,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Raw => "raw",
            Stage::Resized => "resized",
            Stage::Cropped => "cropped",
            Stage::Standardized => "standardized",
            Stage::Augmented => "augmented",
        };
        f.write_str(s)
    }
}

/// One scan sequence: `n_slices × height × width` voxels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceVolume {
    pub shape: [usize; 3],
    pub voxels: Vec<f32>,
    pub view: View,
    pub sequence_type: SequenceType,
    pub fat_sat: bool,
    pub stage: Stage,
    /// Partition the volume was drawn from, when known.
    pub partition: Option<Partition>,
}

impl SequenceVolume {
    pub fn new(shape: [usize; 3], voxels: Vec<f32>, view: View, sequence_type: SequenceType, fat_sat: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {shape:?}")));
        }
        if voxels.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} voxels do not fill {shape:?}", voxels.len())));
        }
        Ok(Self { shape, voxels, view, sequence_type, fat_sat, stage: Stage::Raw, partition: None })
    }

    pub fn with_partition(mut self, p: Partition) -> Self {
        self.partition = Some(p);
        self
    }

    pub fn slices(&self) -> usize {
        self.shape[0]
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.voxels[i * plane..(i + 1) * plane]
    }

    pub fn key(&self) -> StatsKey {
        StatsKey { sequence_type: self.sequence_type, fat_sat: self.fat_sat }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    fn derived(&self, shape: [usize; 3], voxels: Vec<f32>, stage: Stage) -> Self {
        Self { shape, voxels, stage, ..self.clone() }
    }
}

/// Bilinear sample with half-pixel centers; edges clamp.
fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let axis = |o: usize, scale: f64, n: usize| -> (usize, usize, f32) {
        let c = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (c - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..ow).map(|x| axis(x, sx, w)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, h);
        let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, fx) in &cols {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Resize every slice to `target × target` with bilinear interpolation.
/// A volume already at the target size is returned unchanged.
pub fn resize_volume(v: &SequenceVolume, target: usize) -> Result<SequenceVolume> {
    if !matches!(v.stage, Stage::Raw | Stage::Resized) {
        return Err(Error::Stage(format!("resize expects a raw volume, got {}", v.stage)));
    }
    let [n, h, w] = v.shape;
    if target == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot resize {:?} to side {target}", v.shape)));
    }
    if h == target && w == target {
        return Ok(v.derived(v.shape, v.voxels.clone(), Stage::Resized));
    }
    let mut voxels = Vec::with_capacity(n * target * target);
    for i in 0..n {
        voxels.extend(resize_plane(v.slice(i), h, w, target, target));
    }
    Ok(v.derived([n, target, target], voxels, Stage::Resized))
}

/// Offsets of a centered `size` window inside a `dim` axis.
pub fn crop_offset(dim: usize, size: usize) -> usize {
    (dim - size) / 2
}

pub fn center_crop(v: &SequenceVolume, size: usize) -> Result<SequenceVolume> {
    if !matches!(v.stage, Stage::Raw | Stage::Resized | Stage::Cropped) {
        return Err(Error::Stage(format!("crop expects an unstandardized volume, got {}", v.stage)));
    }
    let [n, h, w] = v.shape;
    if h < size || w < size {
        return Err(Error::Shape(format!("cannot crop {h}x{w} to {size}x{size}")));
    }
    let (oy, ox) = (crop_offset(h, size), crop_offset(w, size));
    let mut voxels = Vec::with_capacity(n * size * size);
    for i in 0..n {
        let plane = v.slice(i);
        for y in oy..oy + size {
            voxels.extend_from_slice(&plane[y * w + ox..y * w + ox + size]);
        }
    }
    Ok(v.derived([n, size, size], voxels, Stage::Cropped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StatsKey {
    pub sequence_type: SequenceType,
    pub fat_sat: bool,
}

impl fmt::Display for StatsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.sequence_type, if self.fat_sat { "+fs" } else { "" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub count: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Accumulator {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Accumulator {
    fn push_all(&mut self, xs: &[f32]) {
        for &x in xs {
            let x = f64::from(x);
            self.n += 1;
            self.sum += x;
            self.sum_sq += x * x;
        }
    }

    fn moments(&self) -> Moments {
        let mean = self.sum / self.n as f64;
        let var = (self.sum_sq / self.n as f64 - mean * mean).max(0.0);
        Moments { mean, std: var.sqrt(), count: self.n }
    }
}

/// Per (sequence type, fat-sat) intensity moments of training volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    #[serde(with = "keyed")]
    pub per_key: BTreeMap<StatsKey, Moments>,
    /// Moments over every training voxel, used only when `allow_fallback`.
    pub global: Moments,
    pub allow_fallback: bool,
    pub fitted_on: Partition,
}

mod keyed {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        #[serde(flatten)]
        key: StatsKey,
        #[serde(flatten)]
        moments: Moments,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<StatsKey, Moments>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<Entry> = map.iter().map(|(k, m)| Entry { key: *k, moments: *m }).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<StatsKey, Moments>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| (e.key, e.moments)).collect())
    }
}

/// Pooled mean and population standard deviation per key.
pub fn fit_standardization<'a>(train: impl IntoIterator<Item = &'a SequenceVolume>) -> Result<StandardizationStats> {
    let mut acc: BTreeMap<StatsKey, Accumulator> = BTreeMap::new();
    let mut global = Accumulator::default();
    for v in train {
        if let Some(p) = v.partition {
            if p != Partition::Train {
                return Err(Error::PartitionLeak(p.to_string()));
            }
        }
        if v.stage >= Stage::Standardized {
            return Err(Error::Stage(format!("statistics are fitted before standardization, got {}", v.stage)));
        }
        acc.entry(v.key()).or_default().push_all(&v.voxels);
        global.push_all(&v.voxels);
    }
    if acc.is_empty() {
        return Err(Error::Precondition("no training volumes to fit standardization on".into()));
    }
    let mut per_key = BTreeMap::new();
    for (key, a) in acc {
        let m = a.moments();
        if !(m.std > 0.0) {
            return Err(Error::DegenerateStats(key.to_string()));
        }
        per_key.insert(key, m);
    }
    Ok(StandardizationStats { per_key, global: global.moments(), allow_fallback: false, fitted_on: Partition::Train })
}

/// Z-score with the volume's key statistics, then min-max rescale of the
/// volume to [0, 1]. A constant result maps to zeros.
pub fn apply_standardization(v: &SequenceVolume, stats: &StandardizationStats) -> Result<SequenceVolume> {
    if v.stage >= Stage::Standardized {
        return Err(Error::Stage(format!("volume is already {}", v.stage)));
    }
    let m = match stats.per_key.get(&v.key()) {
        Some(m) => *m,
        None if stats.allow_fallback => stats.global,
        None => return Err(Error::UnknownSequenceType(v.key().to_string())),
    };
    let z: Vec<f64> = v.voxels.iter().map(|&x| (f64::from(x) - m.mean) / m.std).collect();
    let (lo, hi) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let voxels = if range > 0.0 { z.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0) as f32).collect() } else { vec![0.0; z.len()] };
    Ok(v.derived(v.shape, voxels, Stage::Standardized))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub multiplier: usize,
    pub rotation_deg: f64,
    pub translation_frac: f64,
    pub scale_frac: f64,
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn fine_tune(seed: u64) -> Self {
        Self {
            multiplier: 10,
            rotation_deg: 15.0,
            translation_frac: 0.10,
            scale_frac: 0.10,
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            noise_sigma: 0.01,
            seed,
        }
    }

    pub fn pretrain(seed: u64) -> Self {
        Self { multiplier: 5, ..Self::fine_tune(seed) }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation_deg, self.translation_frac, self.scale_frac, self.noise_sigma];
        let probs = [self.flip_h_prob, self.flip_v_prob];
        if self.multiplier == 0
            || ranges.iter().any(|r| !(*r >= 0.0))
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || self.scale_frac >= 1.0
        {
            return Err(Error::Precondition(format!("invalid augmentation policy {self:?}")));
        }
        Ok(())
    }
}

/// A rigid-plus-scale in-plane transform shared by all slices.
#[derive(Debug, Clone, Copy)]
struct Transform {
    angle: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    flip_h: bool,
    flip_v: bool,
}

impl Transform {
    fn sample(policy: &AugmentPolicy, h: usize, w: usize, rng: &mut impl rand::Rng) -> Self {
        let sym = |rng: &mut dyn rand::Rng, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        Self {
            angle: sym(rng, policy.rotation_deg).to_radians(),
            scale: 1.0 + sym(rng, policy.scale_frac),
            tx: sym(rng, policy.translation_frac) * w as f64,
            ty: sym(rng, policy.translation_frac) * h as f64,
            flip_h: rng.random_bool(policy.flip_h_prob),
            flip_v: rng.random_bool(policy.flip_v_prob),
        }
    }

    /// Source coordinates of output pixel (y, x); forward map is
    /// flip, then scale and rotate about the center, then translate.
    fn source(&self, y: f64, x: f64, cy: f64, cx: f64) -> (f64, f64) {
        let (dy, dx) = (y - cy - self.ty, x - cx - self.tx);
        let (s, c) = self.angle.sin_cos();
        let ry = (-s * dx + c * dy) / self.scale;
        let rx = (c * dx + s * dy) / self.scale;
        let sy = if self.flip_v { -ry } else { ry };
        let sx = if self.flip_h { -rx } else { rx };
        (sy + cy, sx + cx)
    }
}

fn sample_zero_pad(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

/// `policy.multiplier` randomly transformed copies of a standardized volume.
/// Output `j` depends only on `(v, policy, j)`.
pub fn augment(v: &SequenceVolume, policy: &AugmentPolicy) -> Result<Vec<SequenceVolume>> {
    policy.validate()?;
    if v.stage != Stage::Standardized {
        return Err(Error::Stage(format!("augmentation expects a standardized volume, got {}", v.stage)));
    }
    let [n, h, w] = v.shape;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let noise = Normal::new(0.0, policy.noise_sigma).map_err(|e| Error::Precondition(e.to_string()))?;
    (0..policy.multiplier)
        .map(|j| {
            let mut rng = seed::rng(seed::derive_n(policy.seed, j as u64));
            let t = Transform::sample(policy, h, w, &mut rng);
            let mut voxels = Vec::with_capacity(v.voxels.len());
            for i in 0..n {
                let plane = v.slice(i);
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = t.source(y as f64, x as f64, cy, cx);
                        let val = sample_zero_pad(plane, h, w, sy, sx) + noise.sample(&mut rng) as f32;
                        voxels.push(val.clamp(0.0, 1.0));
                    }
                }
            }
            Ok(v.derived(v.shape, voxels, Stage::Augmented))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    view: View,
    sequence_type: SequenceType,
    fat_sat: bool,
    stage: Stage,
}

/// Path of the JSON sidecar describing a raw volume file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes little-endian f32 voxels plus the JSON sidecar.
pub fn write_volume(path: &Path, v: &SequenceVolume) -> Result<()> {
    let bytes: Vec<u8> = v.voxels.iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(path, bytes).at(path)?;
    let side = Sidecar { shape: v.shape, view: v.view, sequence_type: v.sequence_type, fat_sat: v.fat_sat, stage: v.stage };
    let sc = sidecar_path(path);
    std::fs::write(&sc, serde_json::to_vec_pretty(&side)?).at(&sc)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<SequenceVolume> {
    let sc = sidecar_path(path);
    let side: Sidecar = serde_json::from_slice(&std::fs::read(&sc).at(&sc)?)?;
    let bytes = std::fs::read(path).at(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!("{} is not a whole number of f32 values", path.display())));
    }
    let voxels: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut v = SequenceVolume::new(side.shape, voxels, side.view, side.sequence_type, side.fat_sat)?;
    v.stage = side.stage;
    Ok(v)
}
