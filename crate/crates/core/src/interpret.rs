//! Grad-CAM heatmaps and color overlays.
//!
//! The score explained for slice `k` is the model's logit on that slice
//! alone: through the cross-slice max a slice that wins no feature would
//! receive no gradient at all.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use mvscan_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::cohort::View;
use crate::error::{Error, Result};
use crate::models::{CamLayout, Pass, ScanModel};
use crate::preprocess::CROP_SIDE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub side: usize,
    /// Row-major, `side × side`, within [0, 1].
    #[serde(skip)]
    pub values: Vec<f32>,
    pub layer: String,
    pub slice: usize,
    pub study_id: Option<String>,
    pub view: Option<View>,
    /// Range of the rectified, upsampled map before min-max scaling.
    pub raw_min: f64,
    pub raw_max: f64,
    pub warning: Option<String>,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.side + x]
    }

    /// Fraction of the total heat inside the half-open box
    /// `[y0, y1) × [x0, x1)`; 0 for an all-zero map.
    pub fn mass_in(&self, (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> f64 {
        let total: f64 = self.values.iter().map(|&v| f64::from(v)).sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 =
            (y0..y1.min(self.side)).flat_map(|y| (x0..x1.min(self.side)).map(move |x| (y, x))).map(|(y, x)| f64::from(self.at(y, x))).sum();
        inside / total
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = self.values.iter().enumerate().fold(0, |b, (i, &v)| if v > self.values[b] { i } else { b });
        (i / self.side, i % self.side)
    }
}

/// Bilinear resize with half-pixel centers, edges clamped.
fn upsample(src: &[f64], (h, w): (usize, usize), side: usize) -> Vec<f64> {
    let coord = |o: usize, n: usize| {
        let c = ((o as f64 + 0.5) * n as f64 / side as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(n - 1), c - lo as f64)
    };
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let (y0, y1, fy) = coord(oy, h);
        for ox in 0..side {
            let (x0, x1, fx) = coord(ox, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grad-CAM of `model` for slice `slice` of a preprocessed `(n, H, W)`
/// volume, upsampled to 224 × 224 and min-max normalized.
pub fn gradcam<M: ScanModel<f32> + ?Sized>(model: &M, volume: &Tensor<f32>, slice: usize) -> Result<Heatmap> {
    if !model.has_cam_target() {
        return Err(Error::Precondition(format!("{} exposes no Grad-CAM target layer", model.architecture())));
    }
    let s = volume.shape();
    if s.len() != 3 || slice >= s[0] {
        return Err(Error::Shape(format!("slice {slice} of a volume shaped {s:?}")));
    }
    let plane = s[1] * s[2];
    let one = Tensor::new(vec![1, s[1], s[2]], volume.data()[slice * plane..(slice + 1) * plane].to_vec())?;
    let mut pass = Pass::new(model.store(), false, true, 0);
    let out = model.forward(&mut pass, &one)?;
    let target = out.cam.ok_or_else(|| Error::Precondition(format!("{} exposes no Grad-CAM target layer", model.architecture())))?;
    let grads = pass.tape.backward(out.logit, Tensor::new(vec![1], vec![1.0])?)?;
    let act = pass.tape.value(target.var);
    let zeros = Tensor::zeros(act.shape().to_vec());
    let grad = grads.get(target.var).unwrap_or(&zeros);
    let sh = act.shape();
    // (channels, h, w) indexing into the activation for slice 0
    let (c, h, w, index): (usize, usize, usize, Box<dyn Fn(usize, usize, usize) -> usize>) = match target.layout {
        CamLayout::Channels => {
            let (c, h, w) = (sh[1], sh[2], sh[3]);
            (c, h, w, Box::new(move |ch, y, x| (ch * h + y) * w + x))
        }
        CamLayout::Tokens { skip, grid: (gh, gw) } => {
            let c = sh[2];
            (c, gh, gw, Box::new(move |ch, y, x| (skip + y * gw + x) * c + ch))
        }
    };
    let (a, g) = (act.data(), grad.data());
    let mut cam = vec![0.0f64; h * w];
    for ch in 0..c {
        let alpha = (0..h * w).map(|p| f64::from(g[index(ch, p / w, p % w)])).sum::<f64>() / (h * w) as f64;
        for (p, v) in cam.iter_mut().enumerate() {
            *v += alpha * f64::from(a[index(ch, p / w, p % w)]);
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let up = upsample(&cam, (h, w), CROP_SIDE);
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (values, warning) = if hi > lo {
        (up.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect(), None)
    } else {
        (vec![0.0; CROP_SIDE * CROP_SIDE], Some("gradient-weighted activation is zero everywhere".to_string()))
    };
    Ok(Heatmap { side: CROP_SIDE, values, layer: target.layer, slice, study_id: None, view: None, raw_min: lo, raw_max: hi, warning })
}

/// Jet colormap, `x` in [0, 1].
pub fn jet(x: f32) -> [f32; 3] {
    let f = |c: f32| (1.5 - (4.0 * x - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

/// Blends the jet-colored heatmap over a grayscale slice with per-pixel
/// opacity equal to the heat.
pub fn overlay_image(h: &Heatmap, slice_image: &[f32]) -> Result<RgbImage> {
    if slice_image.len() != h.side * h.side {
        return Err(Error::Shape(format!("{} pixels for a {}×{} heatmap", slice_image.len(), h.side, h.side)));
    }
    let side = h.side as u32;
    Ok(RgbImage::from_fn(side, side, |x, y| {
        let i = (y * side + x) as usize;
        let (heat, gray) = (h.values[i], slice_image[i].clamp(0.0, 1.0));
        let color = jet(heat);
        Rgb(color.map(|c| ((1.0 - heat) * gray + heat * c) * 255.0).map(|v| v.round() as u8))
    }))
}

/// Writes the overlay PNG and a JSON sidecar (target layer, bounds).
pub fn overlay(h: &Heatmap, slice_image: &[f32], path: &Path) -> Result<()> {
    let img = overlay_image(h, slice_image)?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    crate::evaluate::write_json(&path.with_extension("json"), h)
}
