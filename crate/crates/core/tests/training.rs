use std::sync::Arc;

use mvscan_core::models::checkpoint;
use mvscan_core::models::{Pass, ScanModel, SliceModel, Volume3DConfig, Volume3DModel};
use mvscan_core::training::{
    class_weights, score_studies, train, val_metrics, weighted_bce, weighted_bce_logit, ClassWeights, EpochRecord, HyperParams, Sample,
    Scheduler, TrainBudget, TrainOptions, TrainStatus,
};
use mvscan_nn::{Real, Tensor};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Low-contrast noise, plus a bright disc on every slice of positives.
fn planted(n_studies: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_studies)
        .map(|i| {
            let label = (i % 2) as u8;
            let (cy, cx) = (rng.random_range(60.0..164.0), rng.random_range(60.0..164.0));
            let v = Tensor::from_fn(vec![3, 224, 224], |k| {
                let (y, x) = (((k / 224) % 224) as f64, (k % 224) as f64);
                let lesion = label == 1 && (y - cy).powi(2) + (x - cx).powi(2) < 32.0 * 32.0;
                if lesion {
                    1.0
                } else {
                    rng.random_range(0.0..0.3)
                }
            });
            Sample { study_id: format!("s{i:03}"), label, volume: Arc::new(v) }
        })
        .collect()
}

fn hp(lr: f64) -> HyperParams {
    HyperParams { learning_rate: lr, weight_decay: 1e-4, dropout: 0.0, scheduler: Scheduler::cosine() }
}

#[test]
fn separable_set_reaches_full_accuracy() {
    let data = planted(24, 1);
    let (tr, va) = data.split_at(16);
    let mut m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint: Some(dir.path().join("best.ckpt")),
        history: Some(dir.path().join("history.jsonl")),
        ..Default::default()
    };
    let r = train(&mut m, tr, va, &hp(2e-2), &TrainBudget::tuning(), 3, &opts).unwrap();
    assert_eq!(r.best_val_accuracy, 1.0, "{:?}", r.history);
    assert!(r.epochs_run <= 20 && r.epochs_run <= r.best_epoch + 10);
    let best = r.history.iter().map(|h| h.val_accuracy).fold(0.0, f64::max);
    assert_eq!(best, r.best_val_accuracy);
    assert_eq!(r.history.iter().find(|h| h.val_accuracy == best).unwrap().epoch, r.best_epoch);

    // reloading the checkpoint reproduces the best validation accuracy
    let back: SliceModel<f32> = checkpoint::load_slice_model(r.checkpoint.as_ref().unwrap()).unwrap();
    let m2 = val_metrics(&score_studies(&back, va).unwrap());
    assert_eq!(m2.accuracy, r.best_val_accuracy);
    assert_eq!(m2.auc, r.val_auc_at_best);

    let lines: Vec<EpochRecord> =
        std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, r.history);

    // same seed, same run
    let mut again = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 2).unwrap();
    let r2 = train(&mut again, tr, va, &hp(2e-2), &TrainBudget::tuning(), 3, &TrainOptions::default()).unwrap();
    assert_eq!(r.history, r2.history);
}

#[test]
fn frozen_accuracy_stops_after_patience() {
    let data = planted(8, 4);
    let (tr, va) = data.split_at(4);
    let mut m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 5).unwrap();
    let r = train(&mut m, tr, va, &hp(1e-8), &TrainBudget::new(30), 6, &TrainOptions::default()).unwrap();
    assert!(r.history.iter().all(|h| h.val_accuracy == r.history[0].val_accuracy));
    assert_eq!((r.best_epoch, r.epochs_run), (1, 11));
    assert_eq!(r.status, TrainStatus::EarlyStopped);
}

#[test]
fn forced_nan_aborts() {
    let data = planted(6, 7);
    let (tr, va) = data.split_at(4);
    let mut m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 8).unwrap();
    let opts = TrainOptions { nan_at_step: Some(6), ..Default::default() };
    let r = train(&mut m, tr, va, &hp(1e-3), &TrainBudget::new(5), 9, &opts).unwrap();
    assert_eq!(r.status, TrainStatus::Diverged { epoch: 2, step: 6 });
    assert_eq!(r.epochs_run, 1);
    assert_eq!(r.best_epoch, 1);
    assert!(r.history.iter().all(|h| h.train_loss.is_finite() && h.train_loss >= 0.0));
}

#[test]
fn preconditions() {
    let data = planted(4, 0);
    let mut m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 0).unwrap();
    let negatives: Vec<Sample> = data.iter().filter(|s| s.label == 0).cloned().collect();
    assert!(train(&mut m, &negatives, &data, &hp(1e-3), &TrainBudget::new(1), 0, &TrainOptions::default()).is_err());
    assert!(train(&mut m, &data, &[], &hp(1e-3), &TrainBudget::new(1), 0, &TrainOptions::default()).is_err());
}

/// Loss of one training-mode pass (dropout 0) and the tape gradient of the
/// named weights.
fn loss_and_grads<M: ScanModel<f64>>(m: &M, v: &Tensor<f64>, names: &[&str], w: ClassWeights) -> (f64, Vec<Tensor<f64>>) {
    let mut pass = Pass::new(m.store(), true, true, 0);
    let out = m.forward(&mut pass, v).unwrap();
    let z = pass.tape.value(out.logit).data()[0];
    let (loss, g) = weighted_bce_logit(z, 1, w);
    let grads = pass.tape.backward(out.logit, Tensor::new(vec![1], vec![g]).unwrap()).unwrap();
    let gs = names.iter().map(|n| grads.get(pass.binding.var(m.store().id(n).unwrap())).unwrap().clone()).collect();
    (loss, gs)
}

fn gradcheck<M: ScanModel<f64>>(mut m: M, v: Tensor<f64>, names: &[&str]) {
    let w = ClassWeights { pos: 2.5, neg: 0.625 };
    let (_, analytic) = loss_and_grads(&m, &v, names, w);
    for (name, g) in names.iter().zip(&analytic) {
        let id = m.store().id(name).unwrap();
        let len = m.store().get(id).len();
        for i in (0..len).step_by((len / 6).max(1)) {
            let h = 1e-6;
            let orig = m.store().get(id).data()[i];
            m.store_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss_and_grads(&m, &v, &[], w).0;
            m.store_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss_and_grads(&m, &v, &[], w).0;
            m.store_mut().get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {a}, numeric {fd}, rel {rel}");
        }
    }
}

fn random_volume<T: Real>(shape: [usize; 3], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(0.0..1.0)))
}

#[test]
fn finite_differences_tiny_cnn() {
    let m = SliceModel::<f64>::random("tiny-test-cnn", 0.0, 11).unwrap();
    gradcheck(m, random_volume([2, 224, 224], 12), &["head.weight", "head.bias", "backbone.conv2.weight", "backbone.conv1.bias"]);
}

#[test]
fn finite_differences_desk_volume_cnn() {
    let m = Volume3DModel::<f64>::new(Volume3DConfig::desk(), 0.0, 13).unwrap();
    gradcheck(m, random_volume([15, 64, 64], 14), &["classifier.fc3.weight", "classifier.fc3.bias", "classifier.fc1.weight"]);
}

#[test]
fn weight_formula_on_imbalanced_counts() {
    let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 20)).collect();
    let w = class_weights(&labels).unwrap();
    // weighted class totals balance: 20·2.5 = 80·0.625
    assert_eq!(20.0 * w.pos, 80.0 * w.neg);
}

proptest! {
    #[test]
    fn unit_weights_give_plain_bce(p in 1e-6f64..(1.0 - 1e-6), y in 0u8..2) {
        let plain = -(f64::from(y) * p.ln() + (1.0 - f64::from(y)) * (1.0 - p).ln());
        let weighted = weighted_bce(p, y, ClassWeights::UNIT).unwrap();
        prop_assert!((weighted - plain).abs() <= 1e-12 * plain.abs().max(1.0));
        prop_assert!(weighted >= 0.0);
    }
}
