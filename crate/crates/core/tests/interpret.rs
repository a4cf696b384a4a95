use std::sync::Arc;

use mvscan_core::interpret::{gradcam, overlay, overlay_image, Heatmap};
use mvscan_core::models::{predict, SliceModel, Volume3DConfig, Volume3DModel};
use mvscan_core::training::{train, HyperParams, Sample, Scheduler, TrainBudget, TrainOptions};
use mvscan_core::Error;
use mvscan_nn::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Planted {
    sample: Sample,
    /// Lesion bounding box rows/cols, half-open.
    bbox: ((usize, usize), (usize, usize)),
}

fn planted(n: usize, seed: u64) -> Vec<Planted> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 32.0;
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let (cy, cx): (f64, f64) = (rng.random_range(50.0..174.0), rng.random_range(50.0..174.0));
            let v = Tensor::from_fn(vec![3, 224, 224], |k| {
                let (y, x) = (((k / 224) % 224) as f64, (k % 224) as f64);
                if label == 1 && (y - cy).powi(2) + (x - cx).powi(2) < r * r {
                    1.0
                } else {
                    rng.random_range(0.0..0.3)
                }
            });
            let bbox = (((cy - r).floor() as usize, (cy + r).ceil() as usize), ((cx - r).floor() as usize, (cx + r).ceil() as usize));
            Planted { sample: Sample { study_id: format!("s{i:03}"), label, volume: Arc::new(v) }, bbox }
        })
        .collect()
}

#[test]
fn heat_concentrates_on_the_planted_blob() {
    let data = planted(32, 21);
    let samples: Vec<Sample> = data.iter().map(|p| p.sample.clone()).collect();
    let (tr, va) = samples.split_at(20);
    let mut m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 22).unwrap();
    let hp = HyperParams { learning_rate: 2e-2, weight_decay: 1e-4, dropout: 0.0, scheduler: Scheduler::cosine() };
    let r = train(&mut m, tr, va, &hp, &TrainBudget::tuning(), 23, &TrainOptions::default()).unwrap();
    assert_eq!(r.best_val_accuracy, 1.0);
    let mut checked = 0;
    for p in data.iter().filter(|p| p.sample.label == 1) {
        if predict(&m, &p.sample.volume).unwrap() <= 0.5 {
            continue;
        }
        let h = gradcam(&m, &p.sample.volume, 1).unwrap();
        assert_eq!((h.side, h.values.len()), (224, 224 * 224));
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(h.layer, "backbone.conv2");
        let (y, x) = h.argmax();
        let ((y0, y1), (x0, x1)) = p.bbox;
        assert!((y0..y1).contains(&y) && (x0..x1).contains(&x), "argmax {:?} outside {:?}", (y, x), p.bbox);
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn attention_backbones_target_last_block() {
    let v = Tensor::from_fn(vec![2, 224, 224], |k| (k % 97) as f32 / 97.0);
    let vit = SliceModel::<f32>::random("tiny-test-vit", 0.0, 1).unwrap();
    let h = gradcam(&vit, &v, 0).unwrap();
    assert_eq!(h.layer, "backbone.blocks.0");
    assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
    let swin = SliceModel::<f32>::random("tiny-test-swin", 0.0, 1).unwrap();
    let h = gradcam(&swin, &v, 1).unwrap();
    assert!(h.layer.starts_with("backbone.stages.1"), "{}", h.layer);
    assert_eq!(h.values.len(), 224 * 224);
    assert!(matches!(gradcam(&swin, &v, 2), Err(Error::Shape(_))));
    let volumetric = Volume3DModel::<f32>::new(Volume3DConfig::desk(), 0.0, 0).unwrap();
    assert!(matches!(gradcam(&volumetric, &Tensor::zeros(vec![15, 64, 64]), 0), Err(Error::Precondition(_))));
}

#[test]
fn zero_map_is_a_warning() {
    let mut m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 2).unwrap();
    m.store.set("head.weight", Tensor::zeros(vec![1, 16])).unwrap();
    let h = gradcam(&m, &Tensor::full(vec![1, 224, 224], 0.5), 0).unwrap();
    assert!(h.warning.is_some());
    assert!(h.values.iter().all(|&v| v == 0.0));
}

fn heatmap(value: f32) -> Heatmap {
    Heatmap {
        side: 224,
        values: vec![value; 224 * 224],
        layer: "x".into(),
        slice: 0,
        study_id: None,
        view: None,
        raw_min: 0.0,
        raw_max: 0.0,
        warning: None,
    }
}

#[test]
fn overlay_cases() {
    let base: Vec<f32> = (0..224 * 224).map(|i| (i % 224) as f32 / 223.0).collect();
    let zero = overlay_image(&heatmap(0.0), &base).unwrap();
    for (x, y, p) in zero.enumerate_pixels() {
        let g = (base[(y * 224 + x) as usize] * 255.0).round() as u8;
        assert_eq!(p.0, [g, g, g]);
    }
    let ones = overlay_image(&heatmap(1.0), &base).unwrap();
    assert!(ones.pixels().all(|p| p.0 == [128, 0, 0]));
    assert!(matches!(overlay_image(&heatmap(0.5), &base[..100]), Err(Error::Shape(_))));

    let dir = tempfile::tempdir().unwrap();
    let mut h = heatmap(0.0);
    h.values = (0..224 * 224).map(|i| (i / 224) as f32 / 223.0).collect();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    overlay(&h, &base, &a).unwrap();
    overlay(&h, &base, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.json").exists());
}
