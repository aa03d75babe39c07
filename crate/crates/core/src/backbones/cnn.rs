//! Convolutional trunk: three conv1d/layer-norm/relu blocks with
//! same-style padding, mean-pooled over time.

use rand_chacha::ChaCha8Rng;

use super::{check_batch, BackboneConfig, BackboneError};
use crate::nn::Conv1d;
use crate::tensor::{Parameter, Tensor};

const LN_EPS: f64 = 1e-5;

pub struct CnnBackbone {
    blocks: [Conv1d; 3],
    dropout: f64,
    in_channels: usize,
    seq_len: usize,
}

impl CnnBackbone {
    /// `prefix` keeps parameter names distinct when the trunk is embedded
    /// inside another backbone.
    pub fn new(cfg: &BackboneConfig, init_seed: u64, prefix: &str) -> CnnBackbone {
        let (w1, w2) = cfg.cnn_channels;
        let (k1, k2, k3) = cfg.cnn_kernels;
        CnnBackbone {
            blocks: [
                Conv1d::new(init_seed, format!("{prefix}.conv1"), cfg.in_channels, w1, k1, 1, k1 / 2),
                Conv1d::new(init_seed, format!("{prefix}.conv2"), w1, w2, k2, 1, k2 / 2),
                Conv1d::new(init_seed, format!("{prefix}.conv3"), w2, cfg.feature_dim, k3, 1, k3 / 2),
            ],
            dropout: cfg.dropout,
            in_channels: cfg.in_channels,
            seq_len: cfg.seq_len,
        }
    }

    /// Trunk over an already-validated `[B, C, T]` tensor (used by wrappers
    /// whose effective T differs from the config).
    pub(crate) fn forward_raw(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, BackboneError> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h)?.layer_norm(LN_EPS).relu();
            h = h.dropout(self.dropout, train, rng);
        }
        Ok(h.mean_axis(2)?)
    }

    pub fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, BackboneError> {
        check_batch(x, self.in_channels, self.seq_len)?;
        self.forward_raw(x, train, rng)
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}
