//! Small trainable layers shared by backbones and method heads.
//!
//! Every layer derives its initial weights from `(init_seed, layer name)`,
//! so two models built from the same seed share identical weights for every
//! layer they have in common, regardless of what other layers exist. That
//! property is load-bearing: method comparisons assume identical backbone
//! initialisation across methods with different head sets.

use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::tensor::{conv1d, Parameter, Tensor, TensorError};

/// Leaf tensor with N(0, std^2) entries drawn from a named stream.
pub fn init_normal(init_seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut r = rng::stream(init_seed, name, &[]);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            z * std
        })
        .collect();
    Tensor::leaf(shape, data)
}

/// Dense layer `[..., d_in] -> [..., d_out]`, weight `[d_in, d_out]`,
/// Kaiming-scaled init, zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(init_seed: u64, name: impl Into<String>, d_in: usize, d_out: usize) -> Linear {
        let name = name.into();
        assert!(d_in >= 1 && d_out >= 1, "linear dims must be >= 1");
        let std = (2.0 / d_in as f64).sqrt();
        let weight = init_normal(init_seed, &format!("init.{name}.weight"), &[d_in, d_out], std);
        let bias = Tensor::leaf(&[d_out], vec![0.0; d_out]);
        Linear { name, weight, bias, d_in, d_out }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            *x.shape().last().expect("linear input needs rank >= 1"),
            self.d_in,
            "linear {} expects last dim {}, got {:?}",
            self.name,
            self.d_in,
            x.shape()
        );
        let lead: Vec<usize> = x.shape()[..x.rank() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let flat = x.reshape(&[rows, self.d_in]);
        let y = flat.matmul(&self.weight).add(&self.bias);
        let mut out_shape = lead;
        out_shape.push(self.d_out);
        y.reshape(&out_shape)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{}.weight", self.name), self.weight.clone()),
            Parameter::new(format!("{}.bias", self.name), self.bias.clone()),
        ]
    }
}

/// 1-D convolution layer with stride/padding and Kaiming init.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub weight: Tensor, // [c_out, c_in, k]
    pub bias: Tensor,   // [c_out]
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        init_seed: u64,
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv1d {
        let name = name.into();
        let std = (2.0 / (c_in * k) as f64).sqrt();
        let weight =
            init_normal(init_seed, &format!("init.{name}.weight"), &[c_out, c_in, k], std);
        let bias = Tensor::leaf(&[c_out], vec![0.0; c_out]);
        Conv1d { name, weight, bias, stride, padding }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        conv1d(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![
            Parameter::new(format!("{}.weight", self.name), self.weight.clone()),
            Parameter::new(format!("{}.bias", self.name), self.bias.clone()),
        ]
    }
}

/// Two-layer ReLU perceptron used for method heads.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(init_seed: u64, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Mlp {
        Mlp {
            l1: Linear::new(init_seed, format!("{name}.l1"), d_in, hidden),
            l2: Linear::new(init_seed, format!("{name}.l2"), hidden, d_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.l2.forward(&self.l1.forward(x).relu())
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p
    }
}
