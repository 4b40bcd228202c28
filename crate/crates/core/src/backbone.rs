//! Feature extractor contract and the reference convolutional backbone.

use crate::error::{bail, Result};
use crate::nn::{relu_backward, relu_inplace, Conv2d, GroupNorm, NormCache, ParamStore};
use crate::seed;
use crate::tensor::{Batch, Real, Tensor3};

/// Anything that maps an image to a `C×H×W` feature map.
pub trait FeatureExtractor<T: Real> {
    fn input_shape(&self) -> [usize; 3];
    fn output_shape(&self) -> [usize; 3];
    fn extract_features(&self, image: &Tensor3<T>) -> Result<Tensor3<T>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    /// Output channels of each block.
    pub widths: Vec<usize>,
    /// Stride of each block's 3×3 convolution.
    pub strides: Vec<usize>,
    pub norm_groups: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    /// 1×64×64 → 128×8×8.
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            input_size: 64,
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 1],
            norm_groups: 4,
            seed: 0,
        }
    }
}

const KERNEL: usize = 3;
const PAD: usize = 1;

fn conv_extent(size: usize, stride: usize) -> usize {
    (size + 2 * PAD - KERNEL) / stride + 1
}

impl BackboneConfig {
    /// Shape of a ResNet-18 final feature map at 224×224. Documents the
    /// contract at full scale; far too slow to train here.
    pub fn paper_scale() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_size: 224,
            widths: vec![64, 64, 128, 256, 512],
            strides: vec![2, 2, 2, 2, 2],
            norm_groups: 4,
            seed: 0,
        }
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let side = self.strides.iter().fold(self.input_size, |s, &st| conv_extent(s, st));
        [*self.widths.last().unwrap_or(&self.input_channels), side, side]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            bail!(
                Config,
                "backbone needs one stride per block ({} widths, {} strides)",
                self.widths.len(),
                self.strides.len()
            );
        }
        if self.input_channels == 0 || self.input_size < KERNEL {
            bail!(Config, "input must be at least {KERNEL}x{KERNEL} with one channel");
        }
        if self.strides.contains(&0) {
            bail!(Config, "strides must be positive");
        }
        for &w in &self.widths {
            if w == 0 || w % self.norm_groups != 0 {
                bail!(
                    Config,
                    "block width {w} not divisible by {} norm groups",
                    self.norm_groups
                );
            }
        }
        Ok(())
    }

    /// Output channels must fold into whole `r×r` patches.
    pub fn validate_for(&self, r: usize) -> Result<()> {
        self.validate()?;
        let [c, _, _] = self.output_shape();
        if r == 0 || c % (r * r) != 0 {
            bail!(Config, "feature channels {c} not divisible by r^2 = {}", r * r);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv: Conv2d,
    norm: GroupNorm,
}

/// Conv 3×3 → group norm → ReLU, repeated.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    blocks: Vec<Block>,
    pub params: ParamStore<T>,
}

struct BlockTape<T> {
    input_hw: (usize, usize),
    cols: Vec<T>,
    norm: NormCache<T>,
    out: Batch<T>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct BackboneTape<T> {
    blocks: Vec<BlockTape<T>>,
}

pub fn build_backbone<T: Real>(config: &BackboneConfig) -> Result<Backbone<T>> {
    Backbone::new(config)
}

impl<T: Real> Backbone<T> {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(&[config.seed, seed::TAG_INIT, 0]);
        let mut params = ParamStore::default();
        let mut blocks = Vec::new();
        let mut in_c = config.input_channels;
        for (i, (&width, &stride)) in config.widths.iter().zip(&config.strides).enumerate() {
            let conv = Conv2d::new(
                &mut params,
                &format!("block{i}.conv"),
                in_c,
                width,
                KERNEL,
                stride,
                PAD,
                &mut rng,
            );
            let norm = GroupNorm::new(
                &mut params,
                &format!("block{i}.norm"),
                width,
                config.norm_groups,
                &mut rng,
            )?;
            blocks.push(Block { conv, norm });
            in_c = width;
        }
        Ok(Backbone {
            config: config.clone(),
            blocks,
            params,
        })
    }

    fn check_input(&self, x: &Batch<T>) -> Result<()> {
        let s = self.config.input_size;
        if x.c != self.config.input_channels || x.h != s || x.w != s {
            bail!(
                Shape,
                "backbone expects {}x{s}x{s} images, got {}x{}x{}",
                self.config.input_channels,
                x.c,
                x.h,
                x.w
            );
        }
        Ok(())
    }

    pub fn forward(&self, x: &Batch<T>) -> Result<Batch<T>> {
        self.check_input(x)?;
        let p = &self.params.values;
        let mut act = x.clone();
        for block in &self.blocks {
            let (y, _) = block.conv.forward(p, &act)?;
            let (mut y, _) = block.norm.forward(p, &y);
            relu_inplace(&mut y.data);
            act = y;
        }
        Ok(act)
    }

    pub fn forward_tape(&self, x: &Batch<T>) -> Result<(Batch<T>, BackboneTape<T>)> {
        self.check_input(x)?;
        let p = &self.params.values;
        let mut tape = Vec::with_capacity(self.blocks.len());
        let mut act = x.clone();
        for block in &self.blocks {
            let input_hw = (act.h, act.w);
            let (y, cols) = block.conv.forward(p, &act)?;
            let (mut y, norm) = block.norm.forward(p, &y);
            relu_inplace(&mut y.data);
            tape.push(BlockTape {
                input_hw,
                cols,
                norm,
                out: y.clone(),
            });
            act = y;
        }
        Ok((act, BackboneTape { blocks: tape }))
    }

    /// Accumulates parameter gradients for upstream gradient `dy`.
    pub fn backward(&self, tape: &BackboneTape<T>, dy: Batch<T>, grads: &mut [T]) {
        let p = &self.params.values;
        let mut d = dy;
        for (i, (block, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            relu_backward(&bt.out.data, &mut d.data);
            let dconv = block.norm.backward(p, &bt.norm, &d, grads);
            match block.conv.backward(p, bt.input_hw, &bt.cols, &dconv, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl<T: Real> FeatureExtractor<T> for Backbone<T> {
    fn input_shape(&self) -> [usize; 3] {
        [
            self.config.input_channels,
            self.config.input_size,
            self.config.input_size,
        ]
    }

    fn output_shape(&self) -> [usize; 3] {
        self.config.output_shape()
    }

    fn extract_features(&self, image: &Tensor3<T>) -> Result<Tensor3<T>> {
        let out = self.forward(&Batch::from_map(image.clone()))?;
        Ok(out.item(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, size: usize) -> Tensor3<f64> {
        let data = (0..size * size)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 500.0 - 1.0)
            .collect();
        Tensor3::from_vec(1, size, size, data).unwrap()
    }

    #[test]
    fn reference_shape() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.output_shape(), [128, 8, 8]);
        let net = build_backbone::<f32>(&cfg).unwrap();
        let out = net.extract_features(&image(1, 64).cast()).unwrap();
        assert_eq!(out.shape(), [128, 8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn paper_scale_shape() {
        assert_eq!(BackboneConfig::paper_scale().output_shape(), [512, 7, 7]);
        assert!(BackboneConfig::paper_scale().validate_for(16).is_ok());
    }

    #[test]
    fn divisibility_rule() {
        let cfg = BackboneConfig {
            widths: vec![20, 100],
            strides: vec![2, 2],
            norm_groups: 4,
            ..BackboneConfig::default()
        };
        assert_eq!(cfg.output_shape()[0], 100);
        assert!(cfg.validate_for(8).is_err());
        assert!(cfg.validate_for(5).is_ok());
    }

    #[test]
    fn zero_final_conv_yields_norm_bias() {
        let cfg = BackboneConfig {
            widths: vec![4, 8],
            strides: vec![2, 1],
            input_size: 8,
            ..BackboneConfig::default()
        };
        let mut net = build_backbone::<f64>(&cfg).unwrap();
        net.params.slice_mut("block1.conv.weight").unwrap().fill(0.0);
        net.params.slice_mut("block1.conv.bias").unwrap().fill(0.0);
        let beta: Vec<f64> = (0..8).map(|i| 0.25 * i as f64).collect();
        net.params.slice_mut("block1.norm.beta").unwrap().copy_from_slice(&beta);
        let out = net.extract_features(&Tensor3::zeros(1, 8, 8)).unwrap();
        for (plane, b) in out.data.chunks(16).zip(&beta) {
            assert!(plane.iter().all(|v| v == b));
        }
    }

    #[test]
    fn deterministic_and_batch_consistent() {
        let cfg = BackboneConfig {
            seed: 9,
            ..BackboneConfig::default()
        };
        let net = build_backbone::<f64>(&cfg).unwrap();
        let again = build_backbone::<f64>(&cfg).unwrap();
        assert_eq!(net.params, again.params);
        let (a, b) = (image(1, 64), image(2, 64));
        let fa = net.extract_features(&a).unwrap();
        assert_eq!(fa, net.extract_features(&a).unwrap());
        let fb = net.extract_features(&b).unwrap();
        let batch = net.forward(&Batch::from_maps(&[&a, &b]).unwrap()).unwrap();
        for (x, y) in batch.item(0).data.iter().zip(&fa.data) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in batch.item(1).data.iter().zip(&fb.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_image_shape() {
        let net = build_backbone::<f64>(&BackboneConfig::default()).unwrap();
        assert!(net.extract_features(&image(0, 32)).is_err());
    }
}
