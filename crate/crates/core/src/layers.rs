//! Parameterized layer descriptors. A layer owns only names and hyperparameters;
//! its tensors live in [`ModelWeights`] under `{name}.weight`, `{name}.bias`, ...

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::weights::{running_mean_key, running_var_key, ModelWeights};

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self { name: name.into(), in_channels, out_channels, kernel, dilation }
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn num_params(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels
    }

    pub fn init(&self, w: &mut ModelWeights, rng: &mut impl Rng) {
        let k = self.kernel;
        let shape = [self.out_channels, self.in_channels, k, k];
        w.params.insert(self.weight_key(), he_normal(&shape, self.in_channels * k * k, rng));
        w.params.insert(self.bias_key(), Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, &self.weight_key(), Some(&self.bias_key()), self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn init(&self, w: &mut ModelWeights) {
        let c = self.channels;
        w.params.insert(format!("{}.gamma", self.name), Tensor::full(&[c], 1.0));
        w.params.insert(format!("{}.beta", self.name), Tensor::zeros(&[c]));
        w.buffers.insert(running_mean_key(&self.name), Tensor::zeros(&[c]));
        w.buffers.insert(running_var_key(&self.name), Tensor::full(&[c], 1.0));
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.batch_norm(x, &self.name)
    }
}

/// Stride-2, 2x2-kernel transposed convolution.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose2x2 {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self { name: name.into(), in_channels, out_channels }
    }

    pub fn num_params(&self) -> usize {
        4 * self.in_channels * self.out_channels + self.out_channels
    }

    pub fn init(&self, w: &mut ModelWeights, rng: &mut impl Rng) {
        let shape = [self.in_channels, self.out_channels, 2, 2];
        w.params.insert(format!("{}.weight", self.name), he_normal(&shape, self.in_channels, rng));
        w.params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.out_channels]));
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv_transpose2x2(x, &format!("{}.weight", self.name), Some(&format!("{}.bias", self.name)))
    }
}
