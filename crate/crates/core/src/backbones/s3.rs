//! Segment-shuffling backbone: a stack of learned segment permutations with
//! residual connections, followed by the convolutional trunk.
//!
//! Each layer splits the (zero-padded) time axis into `n_segments` equal
//! segments and reorders them by a learned priority vector; the hard
//! permutation trains through a straight-through surrogate (see
//! [`crate::tensor::s3_shuffle`]).

use rand_chacha::ChaCha8Rng;

use super::{check_batch, pad_to_multiple, BackboneConfig, BackboneError, CnnBackbone};
use crate::nn::init_normal;
use crate::tensor::{s3_shuffle, Parameter, Tensor};

pub struct S3Backbone {
    priorities: Vec<Tensor>, // one [n_segments] vector per layer
    trunk: CnnBackbone,
    temperature: f64,
    in_channels: usize,
    seq_len: usize,
    n_segments: usize,
}

impl S3Backbone {
    pub fn new(cfg: &BackboneConfig, init_seed: u64) -> S3Backbone {
        let priorities = (0..cfg.s3_layers)
            .map(|i| {
                init_normal(init_seed, &format!("init.s3.priority{i}"), &[cfg.n_segments], 0.1)
            })
            .collect();
        S3Backbone {
            priorities,
            trunk: CnnBackbone::new(cfg, init_seed, "s3.cnn"),
            temperature: cfg.shuffle_temperature,
            in_channels: cfg.in_channels,
            seq_len: cfg.seq_len,
            n_segments: cfg.n_segments,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, BackboneError> {
        check_batch(x, self.in_channels, self.seq_len)?;
        let mut h = pad_to_multiple(x, self.n_segments)?;
        for p in &self.priorities {
            h = s3_shuffle(&h, p, self.temperature)?.add(&h);
        }
        self.trunk.forward_raw(&h, train, rng)
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut out: Vec<Parameter> = self
            .priorities
            .iter()
            .enumerate()
            .map(|(i, p)| Parameter::new(format!("s3.priority{i}"), p.clone()))
            .collect();
        out.extend(self.trunk.params());
        out
    }

    /// The priority vectors (straight-through trained).
    pub fn priority_params(&self) -> Vec<Parameter> {
        self.priorities
            .iter()
            .enumerate()
            .map(|(i, p)| Parameter::new(format!("s3.priority{i}"), p.clone()))
            .collect()
    }
}
