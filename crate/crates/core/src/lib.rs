//! Core library for a universal domain adaptation (UniDA) benchmark on time
//! series: a small f64 autodiff tensor engine, an entropic optimal-transport
//! solver, four feature backbones, six adaptation methods, and the shared
//! evaluation protocol (scenario construction, H-score, trial execution,
//! Bayesian hyperparameter search).
//!
//! Everything is deterministic given a master seed: all randomness flows
//! through named [`rng`] streams, so reruns reproduce results bit for bit.

pub mod backbones;
pub mod data;
pub mod gradcheck;
pub mod methods;
pub mod nn;
pub mod ot;
pub mod protocol;
pub mod rng;
pub mod tensor;
