use mvscan_core::models::checkpoint::{self, WeightOrigin};
use mvscan_core::models::{
    build_3d_cnn, build_slice_model, predict, BackboneSpec, Family, InitKind, InitStrategy, Pass, ScanModel, SliceModel, Volume3DConfig,
    Volume3DModel, REGISTRY,
};
use mvscan_core::Error;
use mvscan_nn::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn volume(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, side, side], |_| rng.random_range(0.0..1.0))
}

fn permute(v: &Tensor<f32>, order: &[usize]) -> Tensor<f32> {
    let plane = v.shape()[1] * v.shape()[2];
    let data = order.iter().flat_map(|&i| v.data()[i * plane..(i + 1) * plane].iter().copied()).collect();
    Tensor::new(vec![order.len(), v.shape()[1], v.shape()[2]], data).unwrap()
}

#[test]
fn registry_specs() {
    for id in REGISTRY {
        let spec = BackboneSpec::lookup(id).unwrap();
        assert!(spec.feature_dim > 0);
        assert_eq!(spec.input_side, 224);
    }
    assert_eq!(BackboneSpec::lookup("tiny-test-cnn").unwrap().family, Family::Convolutional);
    assert_eq!(BackboneSpec::lookup("alexnet-class").unwrap().family, Family::Convolutional);
    assert_eq!(BackboneSpec::lookup("vit-class").unwrap().family, Family::Attention);
    assert_eq!(BackboneSpec::lookup("swin-class").unwrap().feature_dim, 768);
    assert!(BackboneSpec::lookup("densenet").is_err());
}

#[test]
fn dropout_range_is_enforced() {
    assert!(matches!(build_slice_model("alexnet-class", 0.6, &InitStrategy::random(), 0), Err(Error::Precondition(_))));
    let m = build_slice_model("tiny-test-cnn", 0.0, &InitStrategy::random(), 0).unwrap();
    assert_eq!(m.init.kind, InitKind::Random);
}

#[test]
fn pooled_vector_is_elementwise_max_of_slice_features() {
    let m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 1).unwrap();
    let v = volume(4, 224, 2);
    let mut pass = Pass::new(&m.store, false, false, 0);
    let (feats, _) = m.slice_features(&mut pass, &v).unwrap();
    let f = pass.tape.value(feats).clone();
    let out = m.forward(&mut pass, &v).unwrap();
    let pooled = pass.tape.value(out.pooled.unwrap()).data().to_vec();
    let d = m.spec.feature_dim;
    for j in 0..d {
        let max = (0..4).map(|i| f.data()[i * d + j]).fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(pooled[j], max);
    }
}

#[test]
fn zero_head_gives_one_half() {
    let mut m = SliceModel::<f32>::random("tiny-test-cnn", 0.2, 3).unwrap();
    m.store.set("head.weight", Tensor::zeros(vec![1, 16])).unwrap();
    m.store.set("head.bias", Tensor::zeros(vec![1])).unwrap();
    assert_eq!(predict(&m, &volume(3, 224, 4)).unwrap(), 0.5);
}

#[test]
fn slice_order_and_duplicates_do_not_matter() {
    for arch in ["tiny-test-cnn", "tiny-test-vit", "tiny-test-swin"] {
        let m = SliceModel::<f32>::random(arch, 0.3, 5).unwrap();
        let v = volume(5, 224, 6);
        let p = predict(&m, &v).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let shuffled = predict(&m, &permute(&v, &[3, 0, 4, 2, 1])).unwrap();
        assert_eq!(p.to_bits(), shuffled.to_bits(), "{arch}");
        let dup = predict(&m, &permute(&v, &[0, 1, 2, 3, 4, 2])).unwrap();
        assert_eq!(p.to_bits(), dup.to_bits(), "{arch}");
    }
}

#[test]
fn wrong_spatial_shape_is_rejected() {
    let m = SliceModel::<f32>::random("tiny-test-cnn", 0.0, 0).unwrap();
    assert!(matches!(predict(&m, &volume(2, 200, 0)), Err(Error::Shape(_))));
}

#[test]
fn published_geometries_run_on_one_slice() {
    for arch in ["alexnet-class", "vit-class", "swin-class"] {
        let m = SliceModel::<f32>::random(arch, 0.0, 7).unwrap();
        let p = predict(&m, &volume(1, 224, 8)).unwrap();
        assert!(p > 0.0 && p < 1.0, "{arch}: {p}");
    }
}

#[test]
fn volume_cnn_contract() {
    let m = build_3d_cnn(0.5, 9).unwrap();
    assert_eq!(m.channel_sequence(), vec![96, 256, 384, 384, 256]);
    // closed-form count of the fully connected block: in·out + out per layer
    let dims = [256 * 6 * 6, 4096, 4096, 1];
    let oracle: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    assert_eq!(oracle, 54_538_241);
    assert_eq!(m.store.num_weights_with_prefix("classifier."), oracle);
    let p = predict(&m, &volume(24, 224, 10)).unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(m.config.min_extent(0), 15);
    match predict(&m, &volume(14, 224, 11)) {
        Err(Error::Shape(msg)) => assert!(msg.contains("15"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(build_3d_cnn(0.7, 0), Err(Error::Precondition(_))));
}

#[test]
fn checkpoint_round_trip_and_pretrained_loading() {
    let dir = tempfile::tempdir().unwrap();
    let m = SliceModel::<f32>::random("tiny-test-cnn", 0.1, 12).unwrap();
    let v = volume(3, 224, 13);
    let path = dir.path().join("m.ckpt");
    checkpoint::save_model(&path, &m, WeightOrigin::FineTuned, None, Some("abc".into())).unwrap();
    let back: SliceModel<f32> = checkpoint::load_slice_model(&path).unwrap();
    assert_eq!(predict(&m, &v).unwrap().to_bits(), predict(&back, &v).unwrap().to_bits());

    for (origin, kind) in [(WeightOrigin::Domain, InitKind::DomainPretrained), (WeightOrigin::Generic, InitKind::GenericPretrained)] {
        let p = dir.path().join(format!("{kind}.ckpt"));
        checkpoint::save_model(&p, &m, origin, None, None).unwrap();
        let init = InitStrategy { kind, checkpoint: Some(p.clone()) };
        let fresh = build_slice_model("tiny-test-cnn", 0.2, &init, 99).unwrap();
        assert_eq!(fresh.init.kind, kind);
        let conv = fresh.store.id("backbone.conv1.weight").unwrap();
        assert_eq!(fresh.store.get(conv), m.store.get(m.store.id("backbone.conv1.weight").unwrap()));
        let head = fresh.store.id("head.weight").unwrap();
        assert_ne!(fresh.store.get(head), m.store.get(m.store.id("head.weight").unwrap()));
    }
    // requesting domain weights from a generic checkpoint is refused
    let generic = dir.path().join("generic_pretrained.ckpt");
    assert!(matches!(build_slice_model("tiny-test-cnn", 0.0, &InitStrategy::domain(&generic), 0), Err(Error::IncompatibleWeights(_))));
    // architecture and width mismatches
    assert!(matches!(build_slice_model("tiny-test-vit", 0.0, &InitStrategy::generic(&generic), 0), Err(Error::IncompatibleWeights(_))));
    let mut meta = checkpoint::meta_for(&m, WeightOrigin::Domain, None, None);
    meta.feature_dim = 512;
    let wide = dir.path().join("wide.ckpt");
    checkpoint::save(&wide, &meta, &m.store).unwrap();
    assert!(matches!(build_slice_model("tiny-test-cnn", 0.0, &InitStrategy::domain(&wide), 0), Err(Error::IncompatibleWeights(_))));
    // corrupted blob
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(checkpoint::load_slice_model::<f32>(&path), Err(Error::IncompatibleWeights(_))));
}

#[test]
fn volume_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Volume3DModel::<f32>::new(Volume3DConfig::desk(), 0.0, 1).unwrap();
    let v = volume(15, 64, 2);
    let path = dir.path().join("v.ckpt");
    checkpoint::save_model(&path, &m, WeightOrigin::FineTuned, None, None).unwrap();
    let back = checkpoint::load_volume_model::<f32>(&path, Volume3DConfig::desk()).unwrap();
    assert_eq!(predict(&m, &v).unwrap(), predict(&back, &v).unwrap());
    assert_eq!(back.architecture(), "cnn3d");
}
