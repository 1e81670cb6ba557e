//! Reverse-mode differentiation over a recorded sequence of layer operations.
//!
//! A [`Tape`] borrows the model weights immutably, records every op of one
//! forward pass together with its output value, and replays the ops in
//! reverse to produce parameter and input gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use crate::weights::{running_mean_key, running_var_key, BatchStats, ModelWeights};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Which statistics the normalization layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch's own moments and record them.
    Batch,
    /// Normalize with the stored running moments.
    Running,
}

enum Op {
    Input,
    Conv { x: Var, weight: String, bias: Option<String>, dilation: usize },
    ConvTranspose { x: Var, weight: String, bias: Option<String> },
    Norm { x: Var, prefix: String, mean: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    AvgPool { x: Var },
    Concat { parts: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

pub struct Tape<'w> {
    weights: &'w ModelWeights,
    mode: NormMode,
    nodes: Vec<Node>,
    stats: Vec<BatchStats>,
}

#[derive(Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<Var, Tensor>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn accumulate_param(map: &mut BTreeMap<String, Tensor>, name: &str, g: Tensor) {
    match map.get_mut(name) {
        Some(t) => t.add_assign(&g),
        None => {
            map.insert(name.to_string(), g);
        }
    }
}

impl<'w> Tape<'w> {
    pub fn new(weights: &'w ModelWeights, mode: NormMode) -> Self {
        Self { weights, mode, nodes: Vec::new(), stats: Vec::new() }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn weights(&self) -> &'w ModelWeights {
        self.weights
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = match &op {
            Op::Input => false,
            Op::Conv { .. } | Op::ConvTranspose { .. } | Op::Norm { .. } => true,
            Op::Relu { x } | Op::Sigmoid { x } | Op::AvgPool { x } => self.nodes[x.0].tracked,
            Op::Concat { parts } => parts.iter().any(|p| self.nodes[p.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// Batch statistics observed so far (only in [`NormMode::Batch`]).
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.stats
    }

    pub fn into_batch_stats(self) -> Vec<BatchStats> {
        self.stats
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// A leaf whose gradient is reported in [`Gradients::inputs`].
    pub fn input_tracked(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Input);
        self.nodes[v.0].tracked = true;
        v
    }

    pub fn conv2d(&mut self, x: Var, weight: &str, bias: Option<&str>, dilation: usize) -> Result<Var> {
        let w = self.weights.param(weight)?;
        let b = bias.map(|b| self.weights.param(b)).transpose()?;
        let xv = self.value(x);
        if xv.dims4().1 != w.dims4().1 {
            return Err(Error::Shape(format!(
                "`{weight}` expects {} input channels, got {}",
                w.dims4().1,
                xv.dims4().1
            )));
        }
        let y = kernels::conv2d(xv, w, b, dilation);
        Ok(self.push(
            y,
            Op::Conv { x, weight: weight.to_string(), bias: bias.map(str::to_string), dilation },
        ))
    }

    pub fn conv_transpose2x2(&mut self, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
        let w = self.weights.param(weight)?;
        let b = bias.map(|b| self.weights.param(b)).transpose()?;
        let xv = self.value(x);
        if xv.dims4().1 != w.dims4().0 {
            return Err(Error::Shape(format!(
                "`{weight}` expects {} input channels, got {}",
                w.dims4().0,
                xv.dims4().1
            )));
        }
        let y = kernels::conv_transpose2x2(xv, w, b);
        Ok(self.push(
            y,
            Op::ConvTranspose { x, weight: weight.to_string(), bias: bias.map(str::to_string) },
        ))
    }

    /// Per-channel normalization with learnable `{prefix}.gamma` / `{prefix}.beta`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.weights.param(&format!("{prefix}.gamma"))?.data();
        let beta = self.weights.param(&format!("{prefix}.beta"))?.data();
        let xv = &self.nodes[x.0].value;
        let batch = self.mode == NormMode::Batch;
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = if batch {
            let (n, _, h, w) = xv.dims4();
            let (mean, var) = kernels::channel_moments(xv);
            let inv_std = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            self.stats.push(BatchStats {
                prefix: prefix.to_string(),
                mean: mean.clone(),
                var,
                count: n * h * w,
            });
            (mean, inv_std)
        } else {
            let mean = self.weights.buffer(&running_mean_key(prefix))?.data().to_vec();
            let var = self.weights.buffer(&running_var_key(prefix))?.data();
            (mean, var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect())
        };
        let y = kernels::channel_affine(xv, &mean, &inv_std, gamma, beta);
        Ok(self.push(y, Op::Norm { x, prefix: prefix.to_string(), mean, inv_std, batch }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let y = kernels::avg_pool2(self.value(x));
        self.push(y, Op::AvgPool { x })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat { parts: parts.to_vec() }))
    }

    /// Back-propagate from one or more outputs, each seeded with `d(loss)/d(output)`.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::Shape(format!(
                    "seed {:?} for output {:?}",
                    g.shape(),
                    self.value(v).shape()
                )));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut out = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    out.inputs.insert(Var(idx), g);
                }
                Op::Conv { x, weight, bias, dilation } => {
                    let w = self.weights.param(weight)?;
                    let k = w.dims4().2;
                    let (dw, db) = kernels::conv2d_param_grads(self.value(*x), &g, k, *dilation);
                    accumulate_param(&mut out.params, weight, dw);
                    if let Some(b) = bias {
                        accumulate_param(&mut out.params, b, db);
                    }
                    if self.tracked(*x) {
                        accumulate(&mut grads[x.0], kernels::conv2d_input_grad(&g, w, *dilation));
                    }
                }
                Op::ConvTranspose { x, weight, bias } => {
                    let w = self.weights.param(weight)?;
                    let (dx, dw, db) = kernels::conv_transpose2x2_grads(self.value(*x), w, &g);
                    accumulate_param(&mut out.params, weight, dw);
                    if let Some(b) = bias {
                        accumulate_param(&mut out.params, b, db);
                    }
                    if self.tracked(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Norm { x, prefix, mean, inv_std, batch } => {
                    let gamma_key = format!("{prefix}.gamma");
                    let gamma = self.weights.param(&gamma_key)?.data();
                    let xv = self.value(*x);
                    let (dx, dgamma, dbeta) = if *batch {
                        kernels::batch_norm_train_grads(xv, &g, mean, inv_std, gamma)
                    } else {
                        kernels::batch_norm_eval_grads(xv, &g, mean, inv_std, gamma)
                    };
                    let c = dgamma.len();
                    accumulate_param(&mut out.params, &gamma_key, Tensor::from_vec(&[c], dgamma)?);
                    accumulate_param(&mut out.params, &format!("{prefix}.beta"), Tensor::from_vec(&[c], dbeta)?);
                    if self.tracked(*x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Relu { x } if self.tracked(*x) => {
                    let mut dx = g;
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(d, &y)| if y <= 0.0 { *d = 0.0 });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sigmoid { x } if self.tracked(*x) => {
                    let mut dx = g;
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(d, &y)| *d *= y * (1.0 - y));
                    accumulate(&mut grads[x.0], dx);
                }
                Op::AvgPool { x } if self.tracked(*x) => {
                    let dx = kernels::avg_pool2_grad(&g, self.value(*x).shape());
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).dims4().1;
                        if self.tracked(*p) {
                            accumulate(&mut grads[p.0], g.channels(start, c));
                        }
                        start += c;
                    }
                }
                Op::Relu { .. } | Op::Sigmoid { .. } | Op::AvgPool { .. } => {}
            }
        }
        Ok(out)
    }
}
