use mvscan_nn::{Real, Var};
use serde::{Deserialize, Serialize};

use super::attention::{SwinConfig, VitConfig};
use super::{CamLayout, CamTarget, Init, Pass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Convolutional,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub id: String,
    pub feature_dim: usize,
    pub family: Family,
    /// Side length of the square per-slice input.
    pub input_side: usize,
}

/// Per-slice 2-d feature extractors.
#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    /// Average-pool by `pool`, two 3×3 conv/ReLU stages, global average.
    TinyCnn {
        pool: usize,
        widths: [usize; 2],
    },
    /// AlexNet feature stack followed by global average pooling.
    AlexNet,
    Vit(VitConfig),
    Swin(SwinConfig),
}

/// Registered architecture identifiers.
pub const REGISTRY: [&str; 6] = ["tiny-test-cnn", "tiny-test-vit", "tiny-test-swin", "alexnet-class", "vit-class", "swin-class"];

pub(super) fn lookup(id: &str) -> Result<(BackboneSpec, Backbone)> {
    let backbone = match id {
        "tiny-test-cnn" => Backbone::TinyCnn { pool: 8, widths: [8, 16] },
        "tiny-test-vit" => Backbone::Vit(VitConfig::tiny()),
        "tiny-test-swin" => Backbone::Swin(SwinConfig::tiny()),
        "alexnet-class" => Backbone::AlexNet,
        "vit-class" => Backbone::Vit(VitConfig::vit_ti16()),
        "swin-class" => Backbone::Swin(SwinConfig::swin_t()),
        other => return Err(Error::Precondition(format!("unknown architecture `{other}`, registered: {}", REGISTRY.join(", ")))),
    };
    let spec = BackboneSpec {
        id: id.to_string(),
        feature_dim: backbone.feature_dim(),
        family: backbone.family(),
        input_side: crate::preprocess::CROP_SIDE,
    };
    Ok((spec, backbone))
}

impl BackboneSpec {
    pub fn lookup(id: &str) -> Result<Self> {
        lookup(id).map(|(s, _)| s)
    }
}

impl Backbone {
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::TinyCnn { widths, .. } => widths[1],
            Backbone::AlexNet => 256,
            Backbone::Vit(c) => c.dim,
            Backbone::Swin(c) => c.out_dim(),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Backbone::TinyCnn { .. } | Backbone::AlexNet => Family::Convolutional,
            Backbone::Vit(_) | Backbone::Swin(_) => Family::Attention,
        }
    }

    pub(crate) fn init<T: Real>(&self, init: &mut Init<'_, T>, prefix: &str) -> Result<()> {
        match self {
            Backbone::TinyCnn { widths, .. } => {
                init.conv_relu(&format!("{prefix}.conv1"), widths[0], 3, &[3, 3]);
                init.conv_relu(&format!("{prefix}.conv2"), widths[1], widths[0], &[3, 3]);
            }
            Backbone::AlexNet => {
                for (i, (out, inp, k)) in ALEXNET.iter().map(|l| (l.out, l.inp, l.k)).enumerate() {
                    init.conv(&format!("{prefix}.conv{}", i + 1), out, inp, &[k, k], true);
                }
            }
            Backbone::Vit(c) => c.init(init, prefix),
            Backbone::Swin(c) => c.init(init, prefix)?,
        }
        Ok(())
    }

    /// `x` is `(slices, 1, side, side)`; returns `(slices, feature_dim)`.
    pub(crate) fn features<T: Real>(&self, pass: &mut Pass<'_, T>, x: Var, prefix: &str) -> Result<(Var, CamTarget)> {
        match self {
            Backbone::TinyCnn { pool, .. } => {
                // pooling commutes with channel replication, so pool first
                let x = pass.tape.avg_pool2d(x, *pool)?;
                let x = pass.to_rgb(x)?;
                let x = pass.conv(x, &format!("{prefix}.conv1"), &[1, 1], &[1, 1])?;
                let x = pass.tape.relu(x);
                let x = pass.tape.max_pool(x, &[2, 2], &[2, 2])?;
                let x = pass.conv(x, &format!("{prefix}.conv2"), &[1, 1], &[1, 1])?;
                let act = pass.tape.relu(x);
                let feats = global_average(pass, act)?;
                Ok((feats, CamTarget { var: act, layout: CamLayout::Channels, layer: format!("{prefix}.conv2") }))
            }
            Backbone::AlexNet => {
                let mut x = pass.to_rgb(x)?;
                let mut layer = String::new();
                for (i, l) in ALEXNET.iter().enumerate() {
                    layer = format!("{prefix}.conv{}", i + 1);
                    x = pass.conv(x, &layer, &[l.stride; 2], &[l.pad; 2])?;
                    x = pass.tape.relu(x);
                    if l.pool_after {
                        x = pass.tape.max_pool(x, &[3, 3], &[2, 2])?;
                    }
                }
                let pooled = pass.tape.max_pool(x, &[3, 3], &[2, 2])?;
                let feats = global_average(pass, pooled)?;
                Ok((feats, CamTarget { var: x, layout: CamLayout::Channels, layer }))
            }
            Backbone::Vit(c) => c.features(pass, x, prefix),
            Backbone::Swin(c) => c.features(pass, x, prefix),
        }
    }
}

struct ConvLayer {
    out: usize,
    inp: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pool_after: bool,
}

const ALEXNET: [ConvLayer; 5] = [
    ConvLayer { out: 64, inp: 3, k: 11, stride: 4, pad: 2, pool_after: true },
    ConvLayer { out: 192, inp: 64, k: 5, stride: 1, pad: 2, pool_after: true },
    ConvLayer { out: 384, inp: 192, k: 3, stride: 1, pad: 1, pool_after: false },
    ConvLayer { out: 256, inp: 384, k: 3, stride: 1, pad: 1, pool_after: false },
    ConvLayer { out: 256, inp: 256, k: 3, stride: 1, pad: 1, pool_after: false },
];

/// `(N,C,H,W)` → `(N,C)`.
fn global_average<T: Real>(pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
    let s = pass.tape.shape(x).to_vec();
    let g = pass.tape.adaptive_avg_pool(x, &[1, 1])?;
    Ok(pass.tape.reshape(g, &[s[0], s[1]])?)
}
