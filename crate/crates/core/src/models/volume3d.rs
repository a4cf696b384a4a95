use mvscan_nn::params::fan_in_uniform;
use mvscan_nn::{ParamStore, Real, Tensor};

use super::{check_dropout, Init, InitProvenance, LogitOutput, Pass, ScanModel};
use crate::error::{Error, Result};
use crate::seed;

/// Geometry of the volumetric CNN. Five conv + batch-norm + ReLU layers,
/// 3×3×3 stride-2 max pooling after conv 1, 2 and 5, adaptive average
/// pooling, then two hidden fully connected layers and a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3DConfig {
    pub channels: [usize; 5],
    pub kernels: [[usize; 3]; 5],
    pub strides: [[usize; 3]; 5],
    pub pads: [[usize; 3]; 5],
    pub pooled: [usize; 3],
    pub hidden: usize,
}

const POOL_AFTER: [bool; 5] = [true, true, false, false, true];
const POOL_K: usize = 3;
const POOL_S: usize = 2;

impl Volume3DConfig {
    pub fn standard() -> Self {
        Self {
            channels: [96, 256, 384, 384, 256],
            kernels: [[3, 11, 11], [3, 5, 5], [3, 3, 3], [3, 3, 3], [3, 3, 3]],
            strides: [[1, 4, 4], [1, 1, 1], [1, 1, 1], [1, 1, 1], [1, 1, 1]],
            pads: [[1, 2, 2], [1, 2, 2], [1, 1, 1], [1, 1, 1], [1, 1, 1]],
            pooled: [1, 6, 6],
            hidden: 4096,
        }
    }

    /// Same layer geometry with narrow layers, for desk-scale checks.
    pub fn desk() -> Self {
        Self { channels: [4, 6, 8, 8, 6], hidden: 16, ..Self::standard() }
    }

    /// Input features of the first fully connected layer.
    pub fn flat_dim(&self) -> usize {
        self.channels[4] * self.pooled.iter().product::<usize>()
    }

    /// Spatial extent after the conv/pool stack, or `None` when a pooling
    /// window no longer fits along `axis`.
    pub fn extent(&self, axis: usize, len: usize) -> Option<usize> {
        let mut n = len;
        for l in 0..5 {
            let (k, s, p) = (self.kernels[l][axis], self.strides[l][axis], self.pads[l][axis]);
            if n + 2 * p < k {
                return None;
            }
            n = (n + 2 * p - k) / s + 1;
            if POOL_AFTER[l] {
                if n < POOL_K {
                    return None;
                }
                n = (n - POOL_K) / POOL_S + 1;
            }
        }
        Some(n)
    }

    /// Smallest admissible extent along `axis`.
    pub fn min_extent(&self, axis: usize) -> usize {
        (1..4096).find(|&n| self.extent(axis, n).is_some()).expect("some extent fits")
    }
}

#[derive(Debug, Clone)]
pub struct Volume3DModel<T: Real> {
    pub config: Volume3DConfig,
    pub dropout: f64,
    pub init: InitProvenance,
    pub store: ParamStore<T>,
}

pub const ARCH_3D: &str = "cnn3d";
const HEAD_3D: &str = "classifier.fc3";

impl<T: Real> Volume3DModel<T> {
    pub fn new(config: Volume3DConfig, dropout: f64, seed: u64) -> Result<Self> {
        check_dropout(dropout)?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: seed::rng(seed::derive(seed, "cnn3d")) };
        let mut inp = 1;
        for (l, &out) in config.channels.iter().enumerate() {
            init.conv(&format!("features.conv{}", l + 1), out, inp, &config.kernels[l], true);
            init.batch_norm(&format!("features.bn{}", l + 1), out);
            inp = out;
        }
        init.linear("classifier.fc1", config.hidden, config.flat_dim(), true);
        init.linear("classifier.fc2", config.hidden, config.hidden, true);
        init.linear(HEAD_3D, 1, config.hidden, true);
        Ok(Self { config, dropout, init: InitProvenance::random(), store })
    }

    pub fn channel_sequence(&self) -> Vec<usize> {
        (1..=5).map(|l| self.store.get(self.store.id(&format!("features.conv{l}.weight")).unwrap()).shape()[0]).collect()
    }
}

/// Builds the volumetric CNN with the standard geometry.
pub fn build_3d_cnn(dropout: f64, seed: u64) -> Result<Volume3DModel<f32>> {
    Volume3DModel::new(Volume3DConfig::standard(), dropout, seed)
}

impl<T: Real> ScanModel<T> for Volume3DModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn forward(&self, pass: &mut Pass<'_, T>, volume: &Tensor<T>) -> Result<LogitOutput> {
        let s = volume.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected (D, H, W) volume, got {s:?}")));
        }
        for (axis, name) in ["depth", "height", "width"].iter().enumerate() {
            if self.config.extent(axis, s[axis]).is_none() {
                return Err(Error::Shape(format!(
                    "{name} {} is below the minimum {} for this network",
                    s[axis],
                    self.config.min_extent(axis)
                )));
            }
        }
        let mut x = pass.tape.constant(volume.clone().reshaped(vec![1, 1, s[0], s[1], s[2]])?);
        for l in 0..5 {
            x = pass.conv(x, &format!("features.conv{}", l + 1), &self.config.strides[l], &self.config.pads[l])?;
            x = pass.batch_norm(x, &format!("features.bn{}", l + 1))?;
            x = pass.tape.relu(x);
            if POOL_AFTER[l] {
                x = pass.tape.max_pool(x, &[POOL_K; 3], &[POOL_S; 3])?;
            }
        }
        let x = pass.tape.adaptive_avg_pool(x, &self.config.pooled)?;
        let x = pass.tape.reshape(x, &[1, self.config.flat_dim()])?;
        let x = pass.linear(x, "classifier.fc1")?;
        let x = pass.tape.relu(x);
        let x = pass.linear(x, "classifier.fc2")?;
        let x = pass.tape.relu(x);
        let x = pass.dropout(x, self.dropout);
        let logit = pass.linear(x, HEAD_3D)?;
        let logit = pass.tape.reshape(logit, &[1])?;
        Ok(LogitOutput { logit, cam: None, pooled: None })
    }

    fn architecture(&self) -> &str {
        ARCH_3D
    }

    fn feature_dim(&self) -> usize {
        self.config.hidden
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

    fn has_cam_target(&self) -> bool {
        false
    }

    fn head_prefix(&self) -> &str {
        HEAD_3D
    }

    fn reset_head(&mut self, seed: u64) {
        let mut rng = seed::rng(seed::derive(seed, HEAD_3D));
        let h = self.config.hidden;
        self.store.set("classifier.fc3.weight", fan_in_uniform(&[1, h], h, &mut rng)).expect("head shape");
        self.store.set("classifier.fc3.bias", fan_in_uniform(&[1], h, &mut rng)).expect("head shape");
    }
}
