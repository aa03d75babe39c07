//! Convolutional trunk in parallel with a frequency branch.
//!
//! The frequency branch takes the real FFT of the raw input, attenuates high
//! bins with a cosine window, keeps the lowest `n_fourier_modes`, mixes
//! channels per mode with a learned complex matrix, and reads the result out
//! as magnitude and phase (polar coordinates behave better than raw re/im
//! under phase shifts of the input). Both branch outputs are concatenated
//! and projected to the shared feature width.

use std::f64::consts::FRAC_PI_2;

use rand_chacha::ChaCha8Rng;

use super::{check_batch, BackboneConfig, BackboneError, CnnBackbone};
use crate::nn::{init_normal, Linear};
use crate::tensor::{rfft, Parameter, Tensor};

pub struct FnoBackbone {
    trunk: CnnBackbone,
    mix_re: Tensor, // [M, D, D]
    mix_im: Tensor,
    freq_proj: Linear, // 2*D*M -> freq_feature_dim
    out_proj: Linear,  // feature_dim + freq_feature_dim -> feature_dim
    window: Vec<f64>,  // cosine attenuation over all F bins
    modes: usize,
    in_channels: usize,
    seq_len: usize,
}

impl FnoBackbone {
    pub fn new(cfg: &BackboneConfig, init_seed: u64) -> FnoBackbone {
        let d = cfg.in_channels;
        let m = cfg.n_fourier_modes;
        let f = cfg.seq_len / 2 + 1;
        // w[k] = cos(pi k / (2F)): unity at DC, falling toward Nyquist.
        let window: Vec<f64> =
            (0..f).map(|k| (FRAC_PI_2 * k as f64 / f as f64).cos()).collect();
        let std = (1.0 / d as f64).sqrt();
        FnoBackbone {
            trunk: CnnBackbone::new(cfg, init_seed, "fno.cnn"),
            mix_re: init_normal(init_seed, "init.fno.mix.re", &[m, d, d], std),
            mix_im: init_normal(init_seed, "init.fno.mix.im", &[m, d, d], std),
            freq_proj: Linear::new(init_seed, "fno.freq_proj", 2 * d * m, cfg.freq_feature_dim),
            out_proj: Linear::new(
                init_seed,
                "fno.out_proj",
                cfg.feature_dim + cfg.freq_feature_dim,
                cfg.feature_dim,
            ),
            window,
            modes: m,
            in_channels: d,
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

        let cnn_feat = self.trunk.forward_raw(x, train, rng)?;

        let spectrum = rfft(x) // [B, D, F]
            .scale_last_axis(&self.window)
            .narrow_last(self.modes)?
            .mode_mix(&self.mix_re, &self.mix_im); // [B, D, M]
        let (mag, phase) = spectrum.to_polar();
        let flat_dim = self.in_channels * self.modes;
        let freq_in = Tensor::concat(
            &[mag.reshape(&[b, flat_dim]), phase.reshape(&[b, flat_dim])],
            1,
        )?;
        let freq_feat = self.freq_proj.forward(&freq_in);

        let joint = Tensor::concat(&[cnn_feat, freq_feat], 1)?;
        Ok(self.out_proj.forward(&joint))
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.trunk.params();
        p.push(Parameter::new("fno.mix.re", self.mix_re.clone()));
        p.push(Parameter::new("fno.mix.im", self.mix_im.clone()));
        p.extend(self.freq_proj.params());
        p.extend(self.out_proj.params());
        p
    }
}
