//! Feature backbones: `[B, D, T]` batches in, `[B, K]` embeddings out.
//!
//! Four extractors share one config struct and one enum wrapper:
//! - `cnn`: three conv/layer-norm/relu blocks, mean-pooled over time;
//! - `fno`: the CNN trunk in parallel with a smoothed, truncated Fourier
//!   branch mixed per mode and read out in polar coordinates;
//! - `s3`: learned segment shuffling layers (straight-through) feeding the
//!   CNN trunk;
//! - `tslanet`: patch embedding with spectral-filter and gated-convolution
//!   blocks.
//!
//! Construction takes an `init_seed`; all weights derive from per-layer
//! named streams (see [`crate::nn`]).

mod cnn;
mod fno;
mod s3;
mod tslanet;

pub use cnn::CnnBackbone;
pub use fno::FnoBackbone;
pub use s3::S3Backbone;
pub use tslanet::TslanetBackbone;

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("bad input batch: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Cnn,
    Fno,
    S3,
    Tslanet,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] =
        [BackboneKind::Cnn, BackboneKind::Fno, BackboneKind::S3, BackboneKind::Tslanet];
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BackboneKind::Cnn => "cnn",
            BackboneKind::Fno => "fno",
            BackboneKind::S3 => "s3",
            BackboneKind::Tslanet => "tslanet",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cnn" => Ok(BackboneKind::Cnn),
            "fno" => Ok(BackboneKind::Fno),
            "s3" => Ok(BackboneKind::S3),
            "tslanet" => Ok(BackboneKind::Tslanet),
            other => Err(format!("unknown backbone {other:?} (cnn|fno|s3|tslanet)")),
        }
    }
}

/// One config for all backbones; kind-specific fields are ignored by the
/// kinds that do not use them.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub seq_len: usize,
    /// Output embedding width K.
    pub feature_dim: usize,
    /// Widths of the first two conv blocks; the third is `feature_dim`.
    pub cnn_channels: (usize, usize),
    pub cnn_kernels: (usize, usize, usize),
    pub dropout: f64,
    // S3.
    pub n_segments: usize,
    pub s3_layers: usize,
    pub shuffle_temperature: f64,
    // FNO.
    pub n_fourier_modes: usize,
    pub freq_feature_dim: usize,
    // TSLANet.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub tsla_layers: usize,
    pub icb_hidden: usize,
    pub gate_sharpness: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Cnn,
            in_channels: 3,
            seq_len: 64,
            feature_dim: 64,
            cnn_channels: (32, 64),
            cnn_kernels: (8, 5, 3),
            dropout: 0.1,
            n_segments: 4,
            s3_layers: 3,
            shuffle_temperature: 0.1,
            n_fourier_modes: 16,
            freq_feature_dim: 32,
            patch_size: 8,
            embed_dim: 32,
            tsla_layers: 2,
            icb_hidden: 64,
            gate_sharpness: 10.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let err = |m: String| Err(BackboneError::Config(m));
        if self.in_channels == 0 || self.seq_len < 2 || self.feature_dim == 0 {
            return err(format!(
                "need in_channels >= 1, seq_len >= 2, feature_dim >= 1; got {}, {}, {}",
                self.in_channels, self.seq_len, self.feature_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        let uses_cnn = matches!(self.kind, BackboneKind::Cnn | BackboneKind::Fno | BackboneKind::S3);
        if uses_cnn {
            let (w1, w2) = self.cnn_channels;
            let (k1, k2, k3) = self.cnn_kernels;
            if w1 == 0 || w2 == 0 {
                return err("conv widths must be >= 1".into());
            }
            if k1 == 0 || k2 == 0 || k3 == 0 {
                return err("conv kernels must be >= 1".into());
            }
            // With "same"-style padding k/2 the length never shrinks, so the
            // only degenerate case is a kernel longer than the sequence.
            let effective_t = match self.kind {
                BackboneKind::S3 => self.seq_len.div_ceil(self.n_segments.max(1))
                    * self.n_segments.max(1),
                _ => self.seq_len,
            };
            for k in [k1, k2, k3] {
                if k > effective_t {
                    return err(format!("conv kernel {k} exceeds sequence length {effective_t}"));
                }
            }
        }
        match self.kind {
            BackboneKind::Fno => {
                let f = self.seq_len / 2 + 1;
                if self.n_fourier_modes == 0 || self.n_fourier_modes > f {
                    return err(format!(
                        "n_fourier_modes must be in [1, {f}] for seq_len {}, got {}",
                        self.seq_len, self.n_fourier_modes
                    ));
                }
                if self.freq_feature_dim == 0 {
                    return err("freq_feature_dim must be >= 1".into());
                }
            }
            BackboneKind::S3 => {
                if self.n_segments == 0 || self.n_segments > self.seq_len {
                    return err(format!(
                        "n_segments must be in [1, seq_len], got {}",
                        self.n_segments
                    ));
                }
                if self.s3_layers == 0 {
                    return err("s3_layers must be >= 1".into());
                }
                if self.shuffle_temperature <= 0.0 {
                    return err("shuffle_temperature must be positive".into());
                }
            }
            BackboneKind::Tslanet => {
                if self.patch_size == 0 || self.patch_size > self.seq_len {
                    return err(format!(
                        "patch_size must be in [1, seq_len], got {}",
                        self.patch_size
                    ));
                }
                if self.embed_dim == 0 || self.icb_hidden == 0 || self.tsla_layers == 0 {
                    return err("embed_dim, icb_hidden, and tsla_layers must be >= 1".into());
                }
                if self.gate_sharpness <= 0.0 {
                    return err("gate_sharpness must be positive".into());
                }
            }
            BackboneKind::Cnn => {}
        }
        Ok(())
    }
}

/// A built feature extractor.
pub enum Backbone {
    Cnn(CnnBackbone),
    Fno(FnoBackbone),
    S3(S3Backbone),
    Tslanet(TslanetBackbone),
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, init_seed: u64) -> Result<Backbone, BackboneError> {
        cfg.validate()?;
        Ok(match cfg.kind {
            BackboneKind::Cnn => Backbone::Cnn(CnnBackbone::new(cfg, init_seed, "cnn")),
            BackboneKind::Fno => Backbone::Fno(FnoBackbone::new(cfg, init_seed)),
            BackboneKind::S3 => Backbone::S3(S3Backbone::new(cfg, init_seed)),
            BackboneKind::Tslanet => Backbone::Tslanet(TslanetBackbone::new(cfg, init_seed)),
        })
    }

    /// Embeds a `[B, in_channels, seq_len]` batch into `[B, feature_dim]`.
    /// `train` switches dropout and batch-statistic updates; `rng` is only
    /// drawn from in training mode.
    pub fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, BackboneError> {
        match self {
            Backbone::Cnn(b) => b.forward(x, train, rng),
            Backbone::Fno(b) => b.forward(x, train, rng),
            Backbone::S3(b) => b.forward(x, train, rng),
            Backbone::Tslanet(b) => b.forward(x, train, rng),
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        match self {
            Backbone::Cnn(b) => b.params(),
            Backbone::Fno(b) => b.params(),
            Backbone::S3(b) => b.params(),
            Backbone::Tslanet(b) => b.params(),
        }
    }

    /// Parameters trained only through straight-through surrogates; excluded
    /// from finite-difference sweeps because the forward pass is piecewise
    /// constant in them.
    pub fn straight_through_params(&self) -> Vec<Parameter> {
        match self {
            Backbone::S3(b) => b.priority_params(),
            Backbone::Tslanet(b) => b.threshold_params(),
            _ => Vec::new(),
        }
    }
}

pub(crate) fn check_batch(
    x: &Tensor,
    in_channels: usize,
    seq_len: usize,
) -> Result<(), BackboneError> {
    if x.rank() != 3 || x.shape()[1] != in_channels || x.shape()[2] != seq_len {
        return Err(BackboneError::Input(format!(
            "expected [B, {in_channels}, {seq_len}], got {:?}",
            x.shape()
        )));
    }
    if x.shape()[0] == 0 {
        return Err(BackboneError::Input("empty batch".into()));
    }
    Ok(())
}

/// Right-pads the time axis with zeros to a multiple of `unit`.
pub(crate) fn pad_to_multiple(x: &Tensor, unit: usize) -> Result<Tensor, TensorError> {
    let t = x.shape()[2];
    let rem = t % unit;
    if rem == 0 {
        return Ok(x.clone());
    }
    let pad = unit - rem;
    let zeros = Tensor::zeros(&[x.shape()[0], x.shape()[1], pad]);
    Tensor::concat(&[x.clone(), zeros], 2)
}
