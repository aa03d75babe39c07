//! Patch-based backbone with spectral filtering and gated convolutions.
//!
//! The input is cut into non-overlapping patches (all channels of a time
//! window flattened together), linearly embedded, and given a learned
//! positional offset. Each block then applies
//!
//! - an adaptive spectral unit: FFT over the patch axis, a learned complex
//!   filter, and a hard high-frequency gate whose threshold trains through a
//!   straight-through sigmoid (batch power statistics in training, running
//!   statistics in evaluation), and
//! - a gated convolutional unit: two parallel conv1d projections combined
//!   multiplicatively (`gelu(a) * b + gelu(b) * a`) and projected back,
//!
//! each behind a residual connection. Patch features are mean-pooled and
//! projected to the shared feature width.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_batch, pad_to_multiple, BackboneConfig, BackboneError};
use crate::nn::{init_normal, Conv1d, Linear};
use crate::rng;
use crate::tensor::{irfft, rfft, spectral_gate, ComplexTensor, Parameter, Tensor};

const LN_EPS: f64 = 1e-5;
/// Momentum for the running power statistics used at evaluation time.
const POWER_MOMENTUM: f64 = 0.9;

pub struct TslanetBackbone {
    patch_embed: Linear,
    pos: Tensor, // [P, E]
    layers: Vec<TslaLayer>,
    head: Linear,
    patch_size: usize,
    n_patches: usize,
    in_channels: usize,
    seq_len: usize,
}

struct TslaLayer {
    name: String,
    filter_re: Tensor, // [E, F]
    filter_im: Tensor,
    tau: Tensor, // rank-0 gate threshold (through a sigmoid)
    conv1: Conv1d,
    conv2: Conv1d,
    conv3: Conv1d,
    running_power: RefCell<Option<Vec<f64>>>,
    sharpness: f64,
    dropout: f64,
    n_patches: usize,
}

impl TslaLayer {
    fn new(cfg: &BackboneConfig, init_seed: u64, i: usize, n_patches: usize) -> TslaLayer {
        let e = cfg.embed_dim;
        let f = n_patches / 2 + 1;
        let name = format!("tslanet.layer{i}");
        // Filter starts near identity so early training sees the signal.
        let mut r = rng::stream(init_seed, &format!("init.{name}.filter"), &[]);
        let mut re = Vec::with_capacity(e * f);
        let mut im = Vec::with_capacity(e * f);
        for _ in 0..e * f {
            re.push(1.0 + 0.02 * (r.random::<f64>() * 2.0 - 1.0));
            im.push(0.02 * (r.random::<f64>() * 2.0 - 1.0));
        }
        TslaLayer {
            filter_re: Tensor::leaf(&[e, f], re),
            filter_im: Tensor::leaf(&[e, f], im),
            tau: Tensor::leaf(&[], vec![0.0]),
            conv1: Conv1d::new(init_seed, format!("{name}.icb.conv1"), e, cfg.icb_hidden, 3, 1, 1),
            conv2: Conv1d::new(init_seed, format!("{name}.icb.conv2"), e, cfg.icb_hidden, 3, 1, 1),
            conv3: Conv1d::new(init_seed, format!("{name}.icb.conv3"), cfg.icb_hidden, e, 3, 1, 1),
            running_power: RefCell::new(None),
            sharpness: cfg.gate_sharpness,
            dropout: cfg.dropout,
            name,
            n_patches,
        }
    }

    /// Batch-mean spectral power per bin, normalised to a [0, 1] scale.
    fn batch_power(c: &ComplexTensor, f: usize) -> Vec<f64> {
        let re = c.re.data();
        let im = c.im.data();
        let lanes = re.len() / f;
        let mut pw = vec![0.0; f];
        for lane in 0..lanes {
            for k in 0..f {
                let (a, b) = (re[lane * f + k], im[lane * f + k]);
                pw[k] += a * a + b * b;
            }
        }
        let max = pw.iter().cloned().fold(0.0_f64, f64::max);
        if max > 0.0 {
            for v in pw.iter_mut() {
                *v /= max;
            }
        }
        pw
    }

    fn spectral_unit(&self, x: &Tensor, train: bool) -> Result<Tensor, BackboneError> {
        let p = self.n_patches;
        let f = p / 2 + 1;
        let z = x.permute(&[0, 2, 1])?; // [B, E, P]
        let c = rfft(&z);

        let power = if train {
            let batch = Self::batch_power(&c, f);
            let mut slot = self.running_power.borrow_mut();
            match slot.as_mut() {
                Some(running) => {
                    for (r, b) in running.iter_mut().zip(&batch) {
                        *r = POWER_MOMENTUM * *r + (1.0 - POWER_MOMENTUM) * b;
                    }
                }
                None => *slot = Some(batch.clone()),
            }
            batch
        } else {
            // Before any training step there are no statistics; pass all
            // bins so evaluation stays batch-independent.
            self.running_power.borrow().clone().unwrap_or_else(|| vec![1.0; f])
        };

        let filtered = c.mul_elementwise(&ComplexTensor::new(
            self.filter_re.clone(),
            self.filter_im.clone(),
        ));
        let (gr, gi) = spectral_gate(&filtered.re, &filtered.im, &self.tau, &power, self.sharpness)?;
        let back = irfft(&ComplexTensor::new(gr, gi), p)?;
        Ok(back.permute(&[0, 2, 1])?)
    }

    fn gated_conv_unit(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, BackboneError> {
        let z = x.permute(&[0, 2, 1])?; // [B, E, P]
        let c1 = self.conv1.forward(&z)?;
        let c2 = self.conv2.forward(&z)?;
        let mixed = c1.gelu().mul(&c2).add(&c2.gelu().mul(&c1));
        let mixed = mixed.dropout(self.dropout, train, rng);
        Ok(self.conv3.forward(&mixed)?.permute(&[0, 2, 1])?)
    }

    fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, BackboneError> {
        let u = x.add(&self.spectral_unit(x, train)?);
        let v = self.gated_conv_unit(&u.layer_norm(LN_EPS), train, rng)?;
        Ok(u.add(&v))
    }

    fn params(&self) -> Vec<Parameter> {
        let mut p = vec![
            Parameter::new(format!("{}.filter.re", self.name), self.filter_re.clone()),
            Parameter::new(format!("{}.filter.im", self.name), self.filter_im.clone()),
            Parameter::new(format!("{}.tau", self.name), self.tau.clone()),
        ];
        p.extend(self.conv1.params());
        p.extend(self.conv2.params());
        p.extend(self.conv3.params());
        p
    }
}

impl TslanetBackbone {
    pub fn new(cfg: &BackboneConfig, init_seed: u64) -> TslanetBackbone {
        let padded = cfg.seq_len.div_ceil(cfg.patch_size) * cfg.patch_size;
        let n_patches = padded / cfg.patch_size;
        let layers = (0..cfg.tsla_layers)
            .map(|i| TslaLayer::new(cfg, init_seed, i, n_patches))
            .collect();
        TslanetBackbone {
            patch_embed: Linear::new(
                init_seed,
                "tslanet.patch_embed",
                cfg.patch_size * cfg.in_channels,
                cfg.embed_dim,
            ),
            pos: init_normal(init_seed, "init.tslanet.pos", &[n_patches, cfg.embed_dim], 0.02),
            layers,
            head: Linear::new(init_seed, "tslanet.head", cfg.embed_dim, cfg.feature_dim),
            patch_size: cfg.patch_size,
            n_patches,
            in_channels: cfg.in_channels,
            seq_len: cfg.seq_len,
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, BackboneError> {
        check_batch(x, self.in_channels, self.seq_len)?;
        let b = x.shape()[0];
        let padded = pad_to_multiple(x, self.patch_size)?;
        // [B, D, T*] -> [B, T*, D] -> [B, P, ps*D]: a patch holds all
        // channels of one time window, time-major.
        let patches = padded
            .permute(&[0, 2, 1])?
            .reshape(&[b, self.n_patches, self.patch_size * self.in_channels]);
        let mut s = self.patch_embed.forward(&patches).add(&self.pos);
        for layer in &self.layers {
            s = layer.forward(&s, train, rng)?;
        }
        Ok(self.head.forward(&s.mean_axis(1)?))
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.patch_embed.params();
        p.push(Parameter::new("tslanet.pos", self.pos.clone()));
        for l in &self.layers {
            p.extend(l.params());
        }
        p.extend(self.head.params());
        p
    }

    /// The gate thresholds (straight-through trained).
    pub fn threshold_params(&self) -> Vec<Parameter> {
        self.layers
            .iter()
            .map(|l| Parameter::new(format!("{}.tau", l.name), l.tau.clone()))
            .collect()
    }
}
