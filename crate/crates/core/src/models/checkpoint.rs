//! Single-file checkpoint: `MVCK`, a little-endian u64 header length, a
//! JSON header, then the little-endian weight blob.

use std::io::Write;
use std::path::Path;

use mvscan_nn::{ParamKind, ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{InitKind, InitProvenance, ScanModel, SliceModel, Volume3DConfig, Volume3DModel, ARCH_3D};
use crate::cohort::View;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 4] = b"MVCK";
const FORMAT: u32 = 1;

/// What the stored weights are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOrigin {
    /// Trained on a generic natural-image corpus.
    Generic,
    /// Trained on an in-domain corpus, for initializing fine-tuning.
    Domain,
    /// Fine-tuned task model.
    FineTuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub feature_dim: usize,
    pub origin: WeightOrigin,
    /// Initialization the stored weights were trained from.
    pub init: InitProvenance,
    pub dropout: f64,
    pub view: Option<View>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: u32,
    #[serde(flatten)]
    meta: CheckpointMeta,
    dtype: String,
    params: Vec<Entry>,
    sha256: String,
}

pub struct StoredTensor {
    pub name: String,
    pub buffer: bool,
    pub value: Tensor<f64>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub sha256: String,
    pub tensors: Vec<StoredTensor>,
}

fn to_bytes<T: Real>(store: &ParamStore<T>) -> (Vec<u8>, Vec<Entry>) {
    let wide = T::DTYPE == "f64";
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (_, p) in store.iter() {
        entries.push(Entry { name: p.name.clone(), shape: p.value.shape().to_vec(), buffer: p.kind == ParamKind::Buffer, offset });
        for &v in p.value.data() {
            if wide {
                blob.extend_from_slice(&v.as_f64().to_le_bytes());
            } else {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        offset += p.value.len();
    }
    (blob, entries)
}

/// Writes `store` with `meta`; returns the blob digest.
pub fn save<T: Real>(path: &Path, meta: &CheckpointMeta, store: &ParamStore<T>) -> Result<String> {
    let (blob, params) = to_bytes(store);
    let sha256 = hex::encode(Sha256::digest(&blob));
    let header = Header { format: FORMAT, meta: meta.clone(), dtype: T::DTYPE.to_string(), params, sha256: sha256.clone() };
    let json = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    f.write_all(MAGIC).at(path)?;
    f.write_all(&(json.len() as u64).to_le_bytes()).at(path)?;
    f.write_all(&json).at(path)?;
    f.write_all(&blob).at(path)?;
    f.flush().at(path)?;
    Ok(sha256)
}

fn bad(path: &Path, what: &str) -> Error {
    Error::IncompatibleWeights(format!("{}: {what}", path.display()))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).at(path)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header_end = 12usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    if header.format != FORMAT {
        return Err(bad(path, &format!("unsupported format {}", header.format)));
    }
    let blob = &bytes[header_end..];
    if hex::encode(Sha256::digest(blob)) != header.sha256 {
        return Err(bad(path, "weight blob does not match its recorded sha256"));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(path, &format!("unknown dtype {other}"))),
    };
    let mut tensors = Vec::with_capacity(header.params.len());
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset * width, (e.offset + n) * width);
        if end > blob.len() {
            return Err(bad(path, &format!("tensor {} runs past the blob", e.name)));
        }
        let data =
            blob[start..end]
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        f64::from(f32::from_le_bytes(c.try_into().unwrap()))
                    } else {
                        f64::from_le_bytes(c.try_into().unwrap())
                    }
                })
                .collect();
        tensors.push(StoredTensor { name: e.name, buffer: e.buffer, value: Tensor::new(e.shape, data)? });
    }
    Ok(Checkpoint { meta: header.meta, sha256: header.sha256, tensors })
}

/// Copies stored tensors accepted by `keep` into `store`; every accepted
/// tensor must exist with the same shape, and every store entry accepted
/// by `keep` must be covered.
pub fn restore<T: Real>(store: &mut ParamStore<T>, ckpt: &Checkpoint, keep: impl Fn(&str) -> bool) -> Result<()> {
    let mut covered = 0;
    for t in ckpt.tensors.iter().filter(|t| keep(&t.name)) {
        let id = store.id(&t.name).ok_or_else(|| Error::IncompatibleWeights(format!("checkpoint tensor {} has no counterpart", t.name)))?;
        let expected = store.get(id).shape().to_vec();
        if expected != t.value.shape() {
            return Err(Error::IncompatibleWeights(format!(
                "{}: checkpoint shape {:?}, model shape {expected:?}",
                t.name,
                t.value.shape()
            )));
        }
        *store.get_mut(id) = t.value.cast();
        covered += 1;
    }
    let wanted = store.iter().filter(|(_, p)| keep(&p.name)).count();
    if covered != wanted {
        return Err(Error::IncompatibleWeights(format!("checkpoint covers {covered} of {wanted} tensors")));
    }
    Ok(())
}

/// Metadata describing a model's current weights.
pub fn meta_for<T: Real, M: ScanModel<T> + ?Sized>(
    model: &M,
    origin: WeightOrigin,
    view: Option<View>,
    config_hash: Option<String>,
) -> CheckpointMeta {
    CheckpointMeta {
        architecture: model.architecture().to_string(),
        feature_dim: model.feature_dim(),
        origin,
        init: model.init_provenance().clone(),
        dropout: model.dropout(),
        view,
        config_hash,
    }
}

pub fn save_model<T: Real, M: ScanModel<T> + ?Sized>(
    path: &Path,
    model: &M,
    origin: WeightOrigin,
    view: Option<View>,
    config_hash: Option<String>,
) -> Result<String> {
    save(path, &meta_for(model, origin, view, config_hash), model.store())
}

/// Rebuilds a slice model exactly as saved.
pub fn load_slice_model<T: Real>(path: &Path) -> Result<SliceModel<T>> {
    let ckpt = read(path)?;
    let mut model = SliceModel::random(&ckpt.meta.architecture, ckpt.meta.dropout, 0)?;
    if model.spec.feature_dim != ckpt.meta.feature_dim {
        return Err(bad(path, "feature_dim differs from the registered architecture"));
    }
    restore(&mut model.store, &ckpt, |_| true)?;
    model.init = ckpt.meta.init.clone();
    Ok(model)
}

/// Rebuilds a volumetric model saved with `config`.
pub fn load_volume_model<T: Real>(path: &Path, config: Volume3DConfig) -> Result<Volume3DModel<T>> {
    let ckpt = read(path)?;
    if ckpt.meta.architecture != ARCH_3D || ckpt.meta.feature_dim != config.hidden {
        return Err(bad(path, "not a volumetric CNN checkpoint of this geometry"));
    }
    let mut model = Volume3DModel::new(config, ckpt.meta.dropout, 0)?;
    restore(&mut model.store, &ckpt, |_| true)?;
    model.init = ckpt.meta.init.clone();
    Ok(model)
}

/// Replaces the backbone of `model` with pretrained weights and draws a
/// fresh classifier head. Provenance follows the checkpoint's origin.
pub fn load_pretrained<T: Real, M: ScanModel<T> + ?Sized>(model: &mut M, path: &Path, seed: u64) -> Result<()> {
    let ckpt = read(path)?;
    if ckpt.meta.architecture != model.architecture() {
        return Err(bad(path, &format!("holds {} weights, model is {}", ckpt.meta.architecture, model.architecture())));
    }
    if ckpt.meta.feature_dim != model.feature_dim() {
        return Err(bad(path, &format!("feature_dim {} vs model {}", ckpt.meta.feature_dim, model.feature_dim())));
    }
    let kind = match ckpt.meta.origin {
        WeightOrigin::Generic => InitKind::GenericPretrained,
        WeightOrigin::Domain => InitKind::DomainPretrained,
        WeightOrigin::FineTuned => return Err(bad(path, "fine-tuned task weights are not an initialization source")),
    };
    let head = format!("{}.", model.head_prefix());
    restore(model.store_mut(), &ckpt, |name| !name.starts_with(&head))?;
    model.reset_head(seed);
    model.set_init_provenance(InitProvenance { kind, source_sha256: Some(ckpt.sha256) });
    Ok(())
}
