//! Dataset model: multi-domain labelled time-series collections, their
//! on-disk format, a synthetic benchmark generator, and windowing /
//! normalisation helpers.
//!
//! Samples are stored as `[N, D, T]` row-major, labels as `i64` class ids in
//! `[0, n_classes)`. Storage is f32 (see [`format`]); everything in memory
//! is f64.

mod format;
mod synthetic;

pub use format::{load_dataset, save_dataset, DATA_DIR_ENV};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {file} at byte {offset}: {message}")]
    Format { file: String, offset: u64, message: String },
    #[error("metadata error: {0}")]
    Meta(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("windowing error: {0}")]
    Window(String),
}

/// Per-channel first and second moments, used for source-fitted
/// normalisation of both domains.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Dataset-level description shared by all domains.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub n_channels: usize,
    pub window_len: usize,
    pub n_classes: usize,
    pub domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_channels == 0 || self.window_len == 0 {
            return Err(DataError::Meta("channel count and window length must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(DataError::Meta(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.domains.is_empty() {
            return Err(DataError::Meta("domain list is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.domains {
            if d.is_empty() || !seen.insert(d) {
                return Err(DataError::Meta(format!("domain id {d:?} is empty or repeated")));
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return Err(DataError::Meta(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.n_classes
                )));
            }
        }
        Ok(())
    }
}

/// One domain's labelled windows.
#[derive(Clone, Debug)]
pub struct TimeSeriesDataset {
    pub domain: String,
    pub n: usize,
    pub d: usize,
    pub t: usize,
    /// `[N, D, T]` row-major.
    pub samples: Vec<f64>,
    pub labels: Vec<i64>,
}

impl TimeSeriesDataset {
    pub fn new(
        domain: impl Into<String>,
        n: usize,
        d: usize,
        t: usize,
        samples: Vec<f64>,
        labels: Vec<i64>,
        n_classes: usize,
    ) -> Result<Self, DataError> {
        let domain = domain.into();
        if samples.len() != n * d * t {
            return Err(DataError::Invalid(format!(
                "domain {domain}: {} values for shape [{n}, {d}, {t}]",
                samples.len()
            )));
        }
        if labels.len() != n {
            return Err(DataError::Invalid(format!(
                "domain {domain}: {} labels for {n} samples",
                labels.len()
            )));
        }
        if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "domain {domain}: non-finite sample value {v}"
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l < 0 || l as usize >= n_classes) {
            return Err(DataError::Invalid(format!(
                "domain {domain}: label {l} outside [0, {n_classes})"
            )));
        }
        Ok(TimeSeriesDataset { domain, n, d, t, samples, labels })
    }

    /// Flat `[D, T]` view of one sample.
    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.d * self.t..(i + 1) * self.d * self.t]
    }

    /// Sorted distinct labels occurring in this domain.
    pub fn classes_present(&self) -> Vec<i64> {
        let mut c: Vec<i64> = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Copy containing only samples whose label is in `keep`.
    pub fn filter_classes(&self, keep: &[i64]) -> TimeSeriesDataset {
        let dt = self.d * self.t;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if keep.contains(&l) {
                samples.extend_from_slice(&self.samples[i * dt..(i + 1) * dt]);
                labels.push(l);
            }
        }
        TimeSeriesDataset {
            domain: self.domain.clone(),
            n: labels.len(),
            d: self.d,
            t: self.t,
            samples,
            labels,
        }
    }
}

/// All domains of one benchmark dataset plus shared metadata.
#[derive(Clone, Debug)]
pub struct MultiDomainDataset {
    pub meta: DatasetMeta,
    pub domains: BTreeMap<String, TimeSeriesDataset>,
}

impl MultiDomainDataset {
    pub fn domain(&self, id: &str) -> Result<&TimeSeriesDataset, DataError> {
        self.domains
            .get(id)
            .ok_or_else(|| DataError::Invalid(format!("unknown domain {id:?}")))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.meta.validate()?;
        for id in &self.meta.domains {
            let ds = self.domain(id)?;
            if ds.d != self.meta.n_channels || ds.t != self.meta.window_len {
                return Err(DataError::Invalid(format!(
                    "domain {id}: shape [{}, {}] disagrees with meta [{}, {}]",
                    ds.d, ds.t, self.meta.n_channels, self.meta.window_len
                )));
            }
            if ds.n == 0 {
                return Err(DataError::Invalid(format!("domain {id} is empty")));
            }
        }
        Ok(())
    }
}

/// Slices one long `[D, L]` recording into `[n, D, window_len]` windows with
/// the given stride. `stride == window_len` gives non-overlapping windows.
pub fn window(
    series: &[f64],
    d: usize,
    len: usize,
    window_len: usize,
    stride: usize,
) -> Result<(Vec<f64>, usize), DataError> {
    if d == 0 || window_len == 0 || stride == 0 {
        return Err(DataError::Window(
            "channels, window length, and stride must all be >= 1".into(),
        ));
    }
    if series.len() != d * len {
        return Err(DataError::Window(format!(
            "series has {} values for shape [{d}, {len}]",
            series.len()
        )));
    }
    if len < window_len {
        return Err(DataError::Window(format!(
            "series length {len} is shorter than the window {window_len}"
        )));
    }
    let n = (len - window_len) / stride + 1;
    let mut out = vec![0.0; n * d * window_len];
    for w in 0..n {
        let start = w * stride;
        for ch in 0..d {
            let src = ch * len + start;
            let dst = (w * d + ch) * window_len;
            out[dst..dst + window_len].copy_from_slice(&series[src..src + window_len]);
        }
    }
    Ok((out, n))
}

/// Per-channel mean and standard deviation over all samples and time steps.
pub fn channel_stats(ds: &TimeSeriesDataset) -> ChannelStats {
    let mut mean = vec![0.0; ds.d];
    let mut std = vec![0.0; ds.d];
    let count = (ds.n * ds.t) as f64;
    for i in 0..ds.n {
        for ch in 0..ds.d {
            let row = &ds.samples[(i * ds.d + ch) * ds.t..(i * ds.d + ch + 1) * ds.t];
            mean[ch] += row.iter().sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for i in 0..ds.n {
        for ch in 0..ds.d {
            let row = &ds.samples[(i * ds.d + ch) * ds.t..(i * ds.d + ch + 1) * ds.t];
            std[ch] += row.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
        }
    }
    for s in std.iter_mut() {
        *s = (*s / count).sqrt();
    }
    ChannelStats { mean, std }
}

/// Applies `(x - mean) / std` per channel; constant channels (std ~ 0) are
/// only centred.
pub fn apply_normalization(ds: &TimeSeriesDataset, stats: &ChannelStats) -> TimeSeriesDataset {
    assert_eq!(stats.mean.len(), ds.d, "stats must match channel count");
    let mut out = ds.clone();
    for i in 0..ds.n {
        for ch in 0..ds.d {
            let denom = if stats.std[ch] > 1e-8 { stats.std[ch] } else { 1.0 };
            let row = &mut out.samples[(i * ds.d + ch) * ds.t..(i * ds.d + ch + 1) * ds.t];
            for v in row.iter_mut() {
                *v = (*v - stats.mean[ch]) / denom;
            }
        }
    }
    out
}
