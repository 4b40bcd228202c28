//! Flat `key = value` run configuration.
//!
//! One file covers every tunable of a run. Unknown keys are rejected, `#`
//! starts a comment, and the fully resolved configuration is written next to
//! every command's outputs so the run can be repeated exactly.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{bail, Error, Result};
use crate::metrics::ProtocolConfig;
use crate::model::{HeadConfig, HeadKind, ModelConfig};
use crate::pixel_aux::LossOptions;
use crate::rearrange::FrGeometry;
use crate::routing::KlMode;
use crate::seed;
use crate::synth::SynthConfig;
use crate::trainer::{Augment, BalancedInit, Stage, TrainConfig};

/// Parses `key = value` lines; returns pairs in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Config, "line {}: expected 'key = value', got '{raw}'", no + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!(Config, "line {}: empty key", no + 1);
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    let Some((a, b)) = value.split_once('-') else {
        bail!(Config, "{key}: expected 'lo-hi', got '{value}'");
    };
    Ok((parse_value(key, a.trim())?, parse_value(key, b.trim())?))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub label_sigma: f64,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub norm_groups: usize,
    pub head_kind: HeadKind,
    pub r: usize,
    pub fr_kernel: usize,
    pub fr_stride: usize,
    pub proj_depth: usize,
    pub proj_width: usize,
    pub loss: LossOptions,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr: f64,
    pub stage2_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub balanced_init: BalancedInit,
    pub augment: Augment,
    pub routing_kl: KlMode,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            label_sigma: train.sigma,
            widths: bb.widths,
            strides: bb.strides,
            norm_groups: bb.norm_groups,
            head_kind: HeadKind::FrPa,
            r: 8,
            fr_kernel: 8,
            fr_stride: 8,
            proj_depth: 0,
            proj_width: crate::pixel_aux::DEFAULT_HIDDEN_WIDTH,
            loss: LossOptions::default(),
            batch_size: train.batch_size,
            stage1_epochs: train.epochs,
            stage2_epochs: crate::trainer::DEFAULT_STAGE2_EPOCHS,
            lr: train.lr,
            stage2_lr: crate::trainer::DEFAULT_STAGE2_LR,
            momentum: train.momentum,
            nesterov: train.nesterov,
            weight_decay: train.weight_decay,
            warmup_fraction: train.warmup_fraction,
            grad_clip: train.grad_clip,
            balanced_init: train.balanced_init,
            augment: train.augment,
            routing_kl: KlMode::Forward,
            protocol: ProtocolConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            k if k.starts_with("data.") => self.synth.set(k, v)?,
            "label.sigma" => self.label_sigma = parse_value(key, v)?,
            "backbone.widths" => self.widths = parse_list(key, v)?,
            "backbone.strides" => self.strides = parse_list(key, v)?,
            "backbone.norm_groups" => self.norm_groups = parse_value(key, v)?,
            "head.kind" => self.head_kind = HeadKind::parse(v)?,
            "head.r" => self.r = parse_value(key, v)?,
            "head.kernel" => self.fr_kernel = parse_value(key, v)?,
            "head.stride" => self.fr_stride = parse_value(key, v)?,
            "head.proj_depth" => self.proj_depth = parse_value(key, v)?,
            "head.proj_width" => self.proj_width = parse_value(key, v)?,
            "loss.er" => self.loss.use_er = parse_value(key, v)?,
            "loss.local_weight" => self.loss.local_weight = parse_value(key, v)?,
            "loss.holistic_weight" => self.loss.holistic_weight = parse_value(key, v)?,
            "train.batch_size" => self.batch_size = parse_value(key, v)?,
            "train.stage1_epochs" => self.stage1_epochs = parse_value(key, v)?,
            "train.stage2_epochs" => self.stage2_epochs = parse_value(key, v)?,
            "train.lr" => self.lr = parse_value(key, v)?,
            "train.stage2_lr" => self.stage2_lr = parse_value(key, v)?,
            "train.momentum" => self.momentum = parse_value(key, v)?,
            "train.nesterov" => self.nesterov = parse_value(key, v)?,
            "train.weight_decay" => self.weight_decay = parse_value(key, v)?,
            "train.warmup_fraction" => self.warmup_fraction = parse_value(key, v)?,
            "train.grad_clip" => self.grad_clip = parse_value(key, v)?,
            "train.balanced_init" => self.balanced_init = BalancedInit::parse(v)?,
            "train.augment_flip" => self.augment.flip_prob = parse_value(key, v)?,
            "train.augment_noise" => self.augment.noise_std = parse_value(key, v)?,
            "routing.kl" => self.routing_kl = KlMode::parse(v)?,
            "protocol.head_range" => self.protocol.head_range = parse_range(key, v)?,
            "protocol.group_width" => self.protocol.group_width = parse_value(key, v)?,
            other => bail!(Config, "unknown configuration key '{other}'"),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = vec![("seed".into(), self.seed.to_string())];
        e.extend(self.synth.entries());
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("label.sigma", self.label_sigma.to_string());
        put("backbone.widths", join(&self.widths));
        put("backbone.strides", join(&self.strides));
        put("backbone.norm_groups", self.norm_groups.to_string());
        put("head.kind", self.head_kind.name().into());
        put("head.r", self.r.to_string());
        put("head.kernel", self.fr_kernel.to_string());
        put("head.stride", self.fr_stride.to_string());
        put("head.proj_depth", self.proj_depth.to_string());
        put("head.proj_width", self.proj_width.to_string());
        put("loss.er", self.loss.use_er.to_string());
        put("loss.local_weight", self.loss.local_weight.to_string());
        put("loss.holistic_weight", self.loss.holistic_weight.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.stage1_epochs", self.stage1_epochs.to_string());
        put("train.stage2_epochs", self.stage2_epochs.to_string());
        put("train.lr", self.lr.to_string());
        put("train.stage2_lr", self.stage2_lr.to_string());
        put("train.momentum", self.momentum.to_string());
        put("train.nesterov", self.nesterov.to_string());
        put("train.weight_decay", self.weight_decay.to_string());
        put("train.warmup_fraction", self.warmup_fraction.to_string());
        put("train.grad_clip", self.grad_clip.to_string());
        put("train.balanced_init", self.balanced_init.name().into());
        put("train.augment_flip", self.augment.flip_prob.to_string());
        put("train.augment_noise", self.augment.noise_std.to_string());
        put("routing.kl", self.routing_kl.name().into());
        let (lo, hi) = self.protocol.head_range;
        put("protocol.head_range", format!("{lo}-{hi}"));
        put("protocol.group_width", self.protocol.group_width.to_string());
        e
    }

    pub fn to_text(&self) -> String {
        format_kv(&self.entries())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_channels: 1,
                input_size: self.synth.image_size,
                widths: self.widths.clone(),
                strides: self.strides.clone(),
                norm_groups: self.norm_groups,
                seed: seed::mix(&[self.seed, 0xBB]),
            },
            head: HeadConfig {
                kind: self.head_kind,
                max_age: self.synth.max_age,
                geometry: FrGeometry {
                    r: self.r,
                    kernel: self.fr_kernel,
                    stride: self.fr_stride,
                },
                proj_depth: self.proj_depth,
                proj_width: self.proj_width,
                seed: seed::mix(&[self.seed, 0xEA]),
            },
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let (epochs, lr) = match stage {
            Stage::One => (self.stage1_epochs, self.lr),
            Stage::Two => (self.stage2_epochs, self.stage2_lr),
        };
        TrainConfig {
            stage,
            epochs,
            batch_size: self.batch_size,
            lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            grad_clip: self.grad_clip,
            seed: self.seed,
            sigma: self.label_sigma,
            loss: self.loss,
            balanced_init: self.balanced_init,
            augment: self.augment,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            max_age: self.synth.max_age,
            ..self.protocol.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.set("train.lr", "0.01").unwrap();
        cfg.set("head.kind", "gap").unwrap();
        cfg.set("protocol.head_range", "20-60").unwrap();
        let text = format!("# header\n{}\n\n", cfg.to_text());
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
        let inline = RunConfig::from_text("seed = 7   # trailing comment").unwrap();
        assert_eq!(inline.seed, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::from_text("train.lrr = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_text("train.lr = fast").is_err());
        assert!(RunConfig::from_text("just a line").is_err());
        assert!(RunConfig::from_text("head.kind = linear").is_err());
    }
}
