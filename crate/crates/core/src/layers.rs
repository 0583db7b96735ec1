//! Layer building blocks: convolution (dense or spatially separable),
//! batch normalization, and affine maps, with uniform parameter
//! traversal for the optimizer and checkpointing.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{batch_norm, conv2d, separable_conv2d, BnMode, BnStats, Tensor};

/// Fan-in-scaled Gaussian weight: std = 1/sqrt(fan_in).
pub fn init_weight<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let t = Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng);
    Tensor::param(shape, t.values().to_vec()).expect("shape is consistent")
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()]).expect("shape is consistent")
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![1.0; shape.iter().product()]).expect("shape is consistent")
}

fn load_tensor(map: &HashMap<String, Tensor>, name: &str, current: &Tensor) -> Result<Tensor> {
    let t = map
        .get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
    if t.shape() != current.shape() {
        return Err(Error::Format(format!(
            "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
            t.shape(),
            current.shape()
        )));
    }
    Tensor::param(t.shape(), t.values().to_vec())
}

/// Convolution layer, dense k x k or separable (k x 1 then 1 x k with
/// C_mid = C_out).
pub enum ConvLayer {
    Dense {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Separable {
        w_row: Tensor,
        w_col: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
}

impl ConvLayer {
    pub fn dense<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> ConvLayer {
        ConvLayer::Dense {
            weight: init_weight(&[c_out, c_in, k, k], c_in * k * k, rng),
            bias: zeros_param(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn separable<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> ConvLayer {
        // C_mid = C_out keeps the chain simple.
        ConvLayer::Separable {
            w_row: init_weight(&[c_out, c_in, k, 1], c_in * k, rng),
            w_col: init_weight(&[c_out, c_out, 1, k], c_out * k, rng),
            bias: zeros_param(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ConvLayer::Dense {
                weight,
                bias,
                stride,
                padding,
            } => conv2d(x, weight, Some(bias), *stride, *padding),
            ConvLayer::Separable {
                w_row,
                w_col,
                bias,
                stride,
                padding,
            } => separable_conv2d(x, w_row, w_col, Some(bias), *stride, *padding),
        }
    }

    /// (C_in, C_out, k) of this layer.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            ConvLayer::Dense { weight, .. } => {
                (weight.shape()[1], weight.shape()[0], weight.shape()[2])
            }
            ConvLayer::Separable { w_row, w_col, .. } => {
                (w_row.shape()[1], w_col.shape()[0], w_row.shape()[2])
            }
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, ConvLayer::Separable { .. })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ConvLayer::Dense { weight, bias, .. } => vec![weight, bias],
            ConvLayer::Separable {
                w_row, w_col, bias, ..
            } => vec![w_row, w_col, bias],
        }
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            ConvLayer::Dense { weight, bias, .. } => {
                out.push((format!("{prefix}.weight"), weight.clone()));
                out.push((format!("{prefix}.bias"), bias.clone()));
            }
            ConvLayer::Separable {
                w_row, w_col, bias, ..
            } => {
                out.push((format!("{prefix}.w_row"), w_row.clone()));
                out.push((format!("{prefix}.w_col"), w_col.clone()));
                out.push((format!("{prefix}.bias"), bias.clone()));
            }
        }
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        match self {
            ConvLayer::Dense { weight, bias, .. } => {
                *weight = load_tensor(map, &format!("{prefix}.weight"), weight)?;
                *bias = load_tensor(map, &format!("{prefix}.bias"), bias)?;
            }
            ConvLayer::Separable {
                w_row, w_col, bias, ..
            } => {
                *w_row = load_tensor(map, &format!("{prefix}.w_row"), w_row)?;
                *w_col = load_tensor(map, &format!("{prefix}.w_col"), w_col)?;
                *bias = load_tensor(map, &format!("{prefix}.bias"), bias)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self {
            ConvLayer::Dense { weight, bias, .. } => weight.numel() + bias.numel(),
            ConvLayer::Separable {
                w_row, w_col, bias, ..
            } => w_row.numel() + w_col.numel() + bias.numel(),
        }
    }
}

/// Batch normalization layer owning its running statistics.
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running: Mutex<Option<BnStats>>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: ones_param(&[channels]),
            beta: zeros_param(&[channels]),
            running: Mutex::new(None),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Train mode normalizes by the current pool's statistics and updates
    /// the running estimates. Eval mode also normalizes by the current
    /// pool's statistics but leaves the running estimates untouched: with
    /// per-sample pools the averaged running statistics do not match any
    /// individual sample's distribution, so inference keeps the same
    /// normalization the layer trained under. The running estimates are
    /// still tracked and checkpointed.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        match mode {
            BnMode::Train => {
                let mut running = self.running.lock().unwrap();
                batch_norm(x, &self.gamma, &self.beta, &mut running, mode, self.eps, self.momentum)
            }
            BnMode::Eval => {
                let mut scratch = None;
                batch_norm(
                    x,
                    &self.gamma,
                    &self.beta,
                    &mut scratch,
                    BnMode::Train,
                    self.eps,
                    self.momentum,
                )
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
        if let Some(stats) = self.running.lock().unwrap().as_ref() {
            let c = stats.mean.len();
            out.push((
                format!("{prefix}.running_mean"),
                Tensor::new(&[c], stats.mean.clone()).expect("stat length is consistent"),
            ));
            out.push((
                format!("{prefix}.running_var"),
                Tensor::new(&[c], stats.var.clone()).expect("stat length is consistent"),
            ));
        }
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        self.gamma = load_tensor(map, &format!("{prefix}.gamma"), &self.gamma)?;
        self.beta = load_tensor(map, &format!("{prefix}.beta"), &self.beta)?;
        let mean = map.get(&format!("{prefix}.running_mean"));
        let var = map.get(&format!("{prefix}.running_var"));
        *self.running.lock().unwrap() = match (mean, var) {
            (Some(m), Some(v)) => Some(BnStats {
                mean: m.values().to_vec(),
                var: v.values().to_vec(),
            }),
            _ => None,
        };
        Ok(())
    }

    /// Learnable scalars only; running statistics are buffers.
    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }
}

/// Conv -> BatchNorm -> ReLU block.
pub struct ConvBnBlock {
    pub conv: ConvLayer,
    pub bn: BatchNorm2d,
}

impl ConvBnBlock {
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.named_state(&format!("{prefix}.conv"), out);
        self.bn.named_state(&format!("{prefix}.bn"), out);
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        self.conv.load_state(&format!("{prefix}.conv"), map)?;
        self.bn.load_state(&format!("{prefix}.bn"), map)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Affine layer y = W x (+ b), weight stored [out, in].
pub struct Affine {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Affine {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Affine {
        Affine {
            weight: init_weight(&[out_dim, in_dim], in_dim, rng),
            bias: bias.then(|| zeros_param(&[out_dim])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.affine(&self.weight, self.bias.as_ref())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            p.push(b);
        }
        p
    }

    pub fn named_state(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }

    pub fn load_state(&mut self, prefix: &str, map: &HashMap<String, Tensor>) -> Result<()> {
        self.weight = load_tensor(map, &format!("{prefix}.weight"), &self.weight)?;
        if let Some(b) = self.bias.as_mut() {
            *b = load_tensor(map, &format!("{prefix}.bias"), b)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}
