//! Slice models (2-d backbone per slice, max over slices, linear head,
//! sigmoid), the volumetric 3-d CNN, weight initialization strategies and
//! the checkpoint container.

mod attention;
mod backbone;
pub mod checkpoint;
mod volume3d;

use std::fmt;
use std::path::PathBuf;

use mvscan_nn::params::{fan_in_uniform, normal, uniform};
use mvscan_nn::{BatchStats, Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use attention::{SwinConfig, VitConfig};
pub use backbone::{Backbone, BackboneSpec, Family, REGISTRY};
pub use volume3d::{build_3d_cnn, Volume3DConfig, Volume3DModel, ARCH_3D};

/// Upper bound of the sampled dropout range.
pub const MAX_DROPOUT: f64 = 0.5;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

pub(crate) fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..=MAX_DROPOUT).contains(&p) {
        return Err(Error::Precondition(format!("dropout {p} outside [0, {MAX_DROPOUT}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    GenericPretrained,
    DomainPretrained,
    Random,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::GenericPretrained => "generic_pretrained",
            InitKind::DomainPretrained => "domain_pretrained",
            InitKind::Random => "random",
        })
    }
}

/// How backbone weights are initialized. The classifier head is always
/// drawn fresh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitStrategy {
    pub kind: InitKind,
    pub checkpoint: Option<PathBuf>,
}

impl InitStrategy {
    pub fn random() -> Self {
        Self { kind: InitKind::Random, checkpoint: None }
    }

    pub fn domain(checkpoint: impl Into<PathBuf>) -> Self {
        Self { kind: InitKind::DomainPretrained, checkpoint: Some(checkpoint.into()) }
    }

    pub fn generic(checkpoint: impl Into<PathBuf>) -> Self {
        Self { kind: InitKind::GenericPretrained, checkpoint: Some(checkpoint.into()) }
    }
}

/// Where a model's starting weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitProvenance {
    pub kind: InitKind,
    /// Digest of the checkpoint blob the backbone was loaded from.
    pub source_sha256: Option<String>,
}

impl InitProvenance {
    pub fn random() -> Self {
        Self { kind: InitKind::Random, source_sha256: None }
    }
}

/// Parameter registration helper used by model constructors.
pub(crate) struct Init<'s, T: Real> {
    pub store: &'s mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    pub fn conv(&mut self, prefix: &str, out: usize, inp: usize, kernel: &[usize], bias: bool) {
        let fan_in = inp * kernel.iter().product::<usize>();
        let mut shape = vec![out, inp];
        shape.extend_from_slice(kernel);
        let w = fan_in_uniform(&shape, fan_in, &mut self.rng);
        self.store.weight(format!("{prefix}.weight"), w);
        if bias {
            let b = fan_in_uniform(&[out], fan_in, &mut self.rng);
            self.store.weight(format!("{prefix}.bias"), b);
        }
    }

    /// He-uniform weights and zero bias, for small ReLU stacks.
    pub fn conv_relu(&mut self, prefix: &str, out: usize, inp: usize, kernel: &[usize]) {
        let fan_in = inp * kernel.iter().product::<usize>();
        let mut shape = vec![out, inp];
        shape.extend_from_slice(kernel);
        let w = uniform(&shape, (6.0 / fan_in as f64).sqrt(), &mut self.rng);
        self.store.weight(format!("{prefix}.weight"), w);
        self.store.weight(format!("{prefix}.bias"), Tensor::zeros(vec![out]));
    }

    pub fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool) {
        let w = fan_in_uniform(&[out, inp], inp, &mut self.rng);
        self.store.weight(format!("{prefix}.weight"), w);
        if bias {
            let b = fan_in_uniform(&[out], inp, &mut self.rng);
            self.store.weight(format!("{prefix}.bias"), b);
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.store.weight(format!("{prefix}.weight"), Tensor::full(vec![dim], T::one()));
        self.store.weight(format!("{prefix}.bias"), Tensor::zeros(vec![dim]));
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.store.weight(format!("{prefix}.weight"), Tensor::full(vec![c], T::one()));
        self.store.weight(format!("{prefix}.bias"), Tensor::zeros(vec![c]));
        self.store.buffer(format!("{prefix}.running_mean"), Tensor::zeros(vec![c]));
        self.store.buffer(format!("{prefix}.running_var"), Tensor::full(vec![c], T::one()));
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = normal(shape, std, &mut self.rng);
        self.store.weight(name, t);
    }
}

#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// One forward (and optionally backward) evaluation of a model.
pub struct Pass<'a, T: Real> {
    pub tape: Tape<T>,
    pub binding: Binding,
    store: &'a ParamStore<T>,
    train: bool,
    rng: ChaCha8Rng,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Pass<'a, T> {
    /// `train` enables dropout and batch statistics; `grads` marks the
    /// weights as requiring gradients.
    pub fn new(store: &'a ParamStore<T>, train: bool, grads: bool, seed: u64) -> Self {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, grads);
        Self { tape, binding, store, train, rng: seed::rng(seed), bn_updates: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.store.id(name).ok_or_else(|| Error::Nn(mvscan_nn::NnError::UnknownParam(name.to_string())))
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        Ok(self.binding.var(self.id(name)?))
    }

    fn optional(&self, name: &str) -> Option<Var> {
        self.store.id(name).map(|id| self.binding.var(id))
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: &[usize], pad: &[usize]) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.optional(&format!("{prefix}.bias"));
        Ok(self.tape.conv(x, w, b, stride, pad)?)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.optional(&format!("{prefix}.bias"));
        Ok(self.tape.linear(x, w, b)?)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.tape.layer_norm(x, g, b, LN_EPS)?)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let mean = self.id(&format!("{prefix}.running_mean"))?;
        let var = self.id(&format!("{prefix}.running_var"))?;
        if self.train {
            let (y, stats) = self.tape.batch_norm_train(x, g, b, BN_EPS)?;
            self.bn_updates.push(BnUpdate { mean, var, stats });
            Ok(y)
        } else {
            let (m, v) = (self.store.get(mean).data(), self.store.get(var).data());
            Ok(self.tape.batch_norm_eval(x, g, b, m, v, BN_EPS)?)
        }
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.train {
            self.tape.dropout(x, p, &mut self.rng)
        } else {
            x
        }
    }

    /// Replicates a single-channel `(N,1,H,W)` batch to three channels.
    pub fn to_rgb(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("expected (N,1,H,W), got {s:?}")));
        }
        let plane = s[2] * s[3];
        let idx = (0..s[0]).flat_map(|n| (0..3).flat_map(move |_| n * plane..(n + 1) * plane)).collect();
        Ok(self.tape.gather(x, idx, &[s[0], 3, s[2], s[3]])?)
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.unbiased_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Layout of the activation Grad-CAM weights.
#[derive(Debug, Clone, PartialEq)]
pub enum CamLayout {
    /// `(slices, channels, h, w)`.
    Channels,
    /// `(slices, tokens, channels)`; the first `skip` tokens are global
    /// tokens, the rest form an `h × w` grid.
    Tokens { skip: usize, grid: (usize, usize) },
}

#[derive(Debug, Clone)]
pub struct CamTarget {
    pub var: Var,
    pub layout: CamLayout,
    pub layer: String,
}

pub struct LogitOutput {
    /// Shape `[1]`.
    pub logit: Var,
    pub cam: Option<CamTarget>,
    /// Pooled slice features, `[feature_dim]`.
    pub pooled: Option<Var>,
}

/// A classifier mapping one preprocessed scan volume to a logit.
pub trait ScanModel<T: Real>: Send + Sync {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// `volume` is `(slices, H, W)`.
    fn forward(&self, pass: &mut Pass<'_, T>, volume: &Tensor<T>) -> Result<LogitOutput>;
    fn architecture(&self) -> &str;
    /// Width of the representation the classifier head reads.
    fn feature_dim(&self) -> usize;
    fn dropout(&self) -> f64;
    fn init_provenance(&self) -> &InitProvenance;
    fn set_init_provenance(&mut self, init: InitProvenance);
    /// Prefix of the classifier weights inside the store.
    fn head_prefix(&self) -> &str;
    /// Draws fresh classifier weights.
    fn reset_head(&mut self, seed: u64);
    /// Whether `forward` reports a spatial layer for Grad-CAM.
    fn has_cam_target(&self) -> bool {
        true
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inference-mode logit.
pub fn predict_logit<T: Real, M: ScanModel<T> + ?Sized>(model: &M, volume: &Tensor<T>) -> Result<f64> {
    let mut pass = Pass::new(model.store(), false, false, 0);
    let out = model.forward(&mut pass, volume)?;
    Ok(pass.tape.value(out.logit).data()[0].as_f64())
}

/// Inference-mode probability in (0, 1).
pub fn predict<T: Real, M: ScanModel<T> + ?Sized>(model: &M, volume: &Tensor<T>) -> Result<f64> {
    predict_logit(model, volume).map(sigmoid)
}

/// Backbone per slice, elementwise max over slices, dropout, linear head.
#[derive(Debug, Clone)]
pub struct SliceModel<T: Real> {
    pub spec: BackboneSpec,
    pub backbone: Backbone,
    pub dropout: f64,
    pub init: InitProvenance,
    pub store: ParamStore<T>,
}

pub const HEAD: &str = "head";

impl<T: Real> SliceModel<T> {
    /// Randomly initialized model for a registered backbone.
    pub fn random(architecture: &str, dropout: f64, seed: u64) -> Result<Self> {
        check_dropout(dropout)?;
        let (spec, backbone) = backbone::lookup(architecture)?;
        Self::with_backbone(spec, backbone, dropout, seed)
    }

    pub fn with_backbone(spec: BackboneSpec, backbone: Backbone, dropout: f64, seed: u64) -> Result<Self> {
        check_dropout(dropout)?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: seed::rng(seed::derive(seed, "backbone")) };
        backbone.init(&mut init, "backbone")?;
        let mut model = Self { spec, backbone, dropout, init: InitProvenance::random(), store };
        let mut head = Init { store: &mut model.store, rng: seed::rng(seed::derive(seed, HEAD)) };
        head.linear(HEAD, 1, model.spec.feature_dim, true);
        Ok(model)
    }

    /// Per-slice feature vectors `(slices, feature_dim)` and the Grad-CAM
    /// target activation.
    pub fn slice_features(&self, pass: &mut Pass<'_, T>, volume: &Tensor<T>) -> Result<(Var, CamTarget)> {
        let s = volume.shape();
        let side = self.spec.input_side;
        if s.len() != 3 || s[1] != side || s[2] != side {
            return Err(Error::Shape(format!("{} expects (n, {side}, {side}) input, got {s:?}", self.spec.id)));
        }
        let x = pass.tape.constant(volume.clone().reshaped(vec![s[0], 1, side, side])?);
        self.backbone.features(pass, x, "backbone")
    }
}

impl<T: Real> ScanModel<T> for SliceModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward(&self, pass: &mut Pass<'_, T>, volume: &Tensor<T>) -> Result<LogitOutput> {
        let (feats, cam) = self.slice_features(pass, volume)?;
        let pooled = pass.tape.max_axis0(feats)?;
        let dropped = pass.dropout(pooled, self.dropout);
        let row = pass.tape.reshape(dropped, &[1, self.spec.feature_dim])?;
        let logit = pass.linear(row, HEAD)?;
        let logit = pass.tape.reshape(logit, &[1])?;
        Ok(LogitOutput { logit, cam: Some(cam), pooled: Some(pooled) })
    }

    fn architecture(&self) -> &str {
        &self.spec.id
    }

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn dropout(&self) -> f64 {
        self.dropout
    }

    fn init_provenance(&self) -> &InitProvenance {
        &self.init
    }

    fn set_init_provenance(&mut self, init: InitProvenance) {
        self.init = init;
    }

    fn head_prefix(&self) -> &str {
        HEAD
    }

    fn reset_head(&mut self, seed: u64) {
        let mut rng = seed::rng(seed::derive(seed, HEAD));
        let f = self.spec.feature_dim;
        self.store.set("head.weight", fan_in_uniform(&[1, f], f, &mut rng)).expect("head shape");
        self.store.set("head.bias", fan_in_uniform(&[1], f, &mut rng)).expect("head shape");
    }
}

/// Builds a slice model, loading backbone weights for pretrained kinds.
pub fn build_slice_model(architecture: &str, dropout: f64, init: &InitStrategy, seed: u64) -> Result<SliceModel<f32>> {
    let mut model = SliceModel::random(architecture, dropout, seed)?;
    match (&init.kind, &init.checkpoint) {
        (InitKind::Random, _) => {}
        (kind, Some(path)) => {
            checkpoint::load_pretrained(&mut model, path, seed)?;
            if model.init.kind != *kind {
                return Err(Error::IncompatibleWeights(format!("{} holds {} weights, {kind} requested", path.display(), model.init.kind)));
            }
        }
        (kind, None) => {
            return Err(Error::Precondition(format!("{kind} initialization needs a checkpoint")));
        }
    }
    Ok(model)
}

/// Builds any registered slice architecture or the volumetric CNN
/// (`cnn3d`, standard geometry).
pub fn build_model(architecture: &str, dropout: f64, init: &InitStrategy, seed: u64) -> Result<Box<dyn ScanModel<f32>>> {
    if architecture != ARCH_3D {
        return Ok(Box::new(build_slice_model(architecture, dropout, init, seed)?));
    }
    let mut model = build_3d_cnn(dropout, seed)?;
    if let Some(path) = &init.checkpoint {
        checkpoint::load_pretrained(&mut model, path, seed)?;
    }
    if model.init.kind != init.kind {
        return Err(Error::Precondition(format!("{} initialization needs a matching checkpoint", init.kind)));
    }
    Ok(Box::new(model))
}

/// Reloads a model saved by [`checkpoint::save_model`].
pub fn load_model(path: &std::path::Path) -> Result<Box<dyn ScanModel<f32>>> {
    let ckpt = checkpoint::read(path)?;
    if ckpt.meta.architecture == ARCH_3D {
        Ok(Box::new(checkpoint::load_volume_model::<f32>(path, Volume3DConfig::standard())?))
    } else {
        Ok(Box::new(checkpoint::load_slice_model::<f32>(path)?))
    }
}

/// Inference probability for a standardized `(n, 224, 224)` sequence.
pub fn forward_scan<M: ScanModel<f32> + ?Sized>(model: &M, v: &crate::preprocess::SequenceVolume) -> Result<f64> {
    if v.stage < crate::preprocess::Stage::Standardized {
        return Err(Error::Stage(format!("models take standardized volumes, got {}", v.stage)));
    }
    predict(model, &crate::dataset::to_tensor(v)?)
}
