//! VGG-style multi-scale feature extractor: three groups of three
//! Conv-BatchNorm-ReLU blocks, strides 2/4/8, with inference-time conv-BN
//! fusion.

use std::sync::Mutex;

use rand::Rng;

use crate::error::{VmError, VmResult};
use crate::tensor::{ops, Tensor};

pub const BLOCKS_PER_GROUP: usize = 3;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Backbone widths per group; the last equals the coarse transformer width.
#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: [32, 64, 128],
        }
    }
}

/// Multi-scale feature maps at 1/2, 1/4 and 1/8 resolution.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    pub f2: Tensor,
    pub f4: Tensor,
    pub f8: Tensor,
}

/// One Conv2d(3x3) + BatchNorm + ReLU block. Running statistics are
/// buffers, not parameters; they update under training mode only.
#[derive(Debug)]
pub struct ConvBnRelu {
    pub conv_w: Tensor, // [cout, cin, 3, 3]
    pub conv_b: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    running: Mutex<(Vec<f32>, Vec<f32>)>, // (mean, var)
    pub stride: usize,
}

impl Clone for ConvBnRelu {
    fn clone(&self) -> Self {
        let r = self.running.lock().unwrap();
        ConvBnRelu {
            conv_w: self.conv_w.clone(),
            conv_b: self.conv_b.clone(),
            bn_gamma: self.bn_gamma.clone(),
            bn_beta: self.bn_beta.clone(),
            running: Mutex::new(r.clone()),
            stride: self.stride,
        }
    }
}

impl ConvBnRelu {
    pub fn init(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> ConvBnRelu {
        // Kaiming-normal fan-in for the 3x3 kernel
        let std = (2.0 / (cin as f32 * 9.0)).sqrt();
        ConvBnRelu {
            conv_w: Tensor::randn(&[cout, cin, 3, 3], std, rng).require_grad(),
            conv_b: Tensor::zeros(&[cout]).require_grad(),
            bn_gamma: Tensor::full(&[cout], 1.0).require_grad(),
            bn_beta: Tensor::zeros(&[cout]).require_grad(),
            running: Mutex::new((vec![0.0; cout], vec![1.0; cout])),
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_w.shape()[0]
    }

    pub fn running_stats(&self) -> (Vec<f32>, Vec<f32>) {
        self.running.lock().unwrap().clone()
    }

    pub fn set_running_stats(&self, mean: Vec<f32>, var: Vec<f32>) {
        *self.running.lock().unwrap() = (mean, var);
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> VmResult<Tensor> {
        let conv = ops::conv2d(x, &self.conv_w, Some(&self.conv_b), self.stride, 1)?;
        let normed = if train {
            let (y, mean, var) = ops::batchnorm_train(&conv, &self.bn_gamma, &self.bn_beta, BN_EPS)?;
            let mut run = self.running.lock().unwrap();
            for ch in 0..mean.len() {
                run.0[ch] = (1.0 - BN_MOMENTUM) * run.0[ch] + BN_MOMENTUM * mean[ch];
                run.1[ch] = (1.0 - BN_MOMENTUM) * run.1[ch] + BN_MOMENTUM * var[ch];
            }
            y
        } else {
            let run = self.running.lock().unwrap();
            ops::batchnorm(&conv, &self.bn_gamma, &self.bn_beta, &run.0, &run.1, BN_EPS)?
        };
        Ok(ops::relu(&normed))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.bn_gamma,
            &mut self.bn_beta,
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv_w", &self.conv_w),
            ("conv_b", &self.conv_b),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
        ]
    }
}

/// Fold frozen batch-norm statistics into the convolution:
/// W' = W·γ/√(σ²+ε), b' = (b−μ)·γ/√(σ²+ε) + β.
pub fn fuse_conv_bn(block: &ConvBnRelu, train_mode: bool) -> VmResult<(Tensor, Tensor)> {
    if train_mode {
        return Err(VmError::Contract(
            "conv-bn fusion requires inference mode with frozen statistics".into(),
        ));
    }
    let (mean, var) = block.running_stats();
    let cout = block.out_channels();
    let per = block.conv_w.numel() / cout;
    let g = block.bn_gamma.data();
    let beta = block.bn_beta.data();
    let mut w = block.conv_w.data().to_vec();
    let mut b = block.conv_b.data().to_vec();
    for ch in 0..cout {
        let s = g[ch] / (var[ch] + BN_EPS).sqrt();
        for v in &mut w[ch * per..(ch + 1) * per] {
            *v *= s;
        }
        b[ch] = (b[ch] - mean[ch]) * s + beta[ch];
    }
    Ok((
        Tensor::from_vec(block.conv_w.shape(), w)?,
        Tensor::from_vec(&[cout], b)?,
    ))
}

/// The full extractor. `train_mode` switches batch-norm behaviour.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<ConvBnRelu>, // 9 blocks; group boundaries after 3 and 6
    pub config: BackboneConfig,
    pub train_mode: bool,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Backbone {
        let mut blocks = Vec::with_capacity(9);
        let mut cin = 1;
        for g in 0..3 {
            let cout = config.channels[g];
            for b in 0..BLOCKS_PER_GROUP {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(ConvBnRelu::init(cin, cout, stride, rng));
                cin = cout;
            }
        }
        Backbone {
            blocks,
            config,
            train_mode: false,
        }
    }

    /// Run the three groups over a [1, H, W] grayscale image (H, W multiples
    /// of 8) and collect the per-group outputs.
    pub fn extract(&self, image: &Tensor) -> VmResult<FeatureMaps> {
        if image.shape().len() != 3 || image.shape()[0] != 1 {
            return Err(VmError::Contract(format!(
                "extract expects [1, H, W], got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(VmError::Contract(format!(
                "image extents must be multiples of 8, got {h}x{w} (padding is the caller's job)"
            )));
        }
        let mut x = image.clone();
        let mut group_outputs = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, self.train_mode)?;
            if i % BLOCKS_PER_GROUP == BLOCKS_PER_GROUP - 1 {
                group_outputs.push(x.clone());
            }
        }
        let f8 = group_outputs.pop().unwrap();
        let f4 = group_outputs.pop().unwrap();
        let f2 = group_outputs.pop().unwrap();
        Ok(FeatureMaps { f2, f4, f8 })
    }

    /// Trainable parameter count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.params().iter().map(|(_, t)| t.numel()).sum::<usize>())
            .sum()
    }

    /// Fold every block's batch norm into its convolution.
    pub fn fuse(&self) -> VmResult<FusedBackbone> {
        let mut convs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (w, bias) = fuse_conv_bn(b, self.train_mode)?;
            convs.push(FusedConv {
                w,
                b: bias,
                stride: b.stride,
            });
        }
        Ok(FusedBackbone { convs })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct FusedConv {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

/// Inference-only backbone with batch norm folded away.
#[derive(Debug, Clone)]
pub struct FusedBackbone {
    pub convs: Vec<FusedConv>,
}

impl FusedBackbone {
    pub fn extract(&self, image: &Tensor) -> VmResult<FeatureMaps> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(VmError::Contract(format!(
                "image extents must be multiples of 8, got {h}x{w}"
            )));
        }
        let mut x = image.clone();
        let mut group_outputs = Vec::with_capacity(3);
        for (i, c) in self.convs.iter().enumerate() {
            let conv = ops::conv2d(&x, &c.w, Some(&c.b), c.stride, 1)?;
            x = ops::relu(&conv);
            if i % BLOCKS_PER_GROUP == BLOCKS_PER_GROUP - 1 {
                group_outputs.push(x.clone());
            }
        }
        let f8 = group_outputs.pop().unwrap();
        let f4 = group_outputs.pop().unwrap();
        let f2 = group_outputs.pop().unwrap();
        Ok(FeatureMaps { f2, f4, f8 })
    }
}
