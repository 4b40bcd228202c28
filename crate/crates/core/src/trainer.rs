//! Two-stage training.
//!
//! Stage 1 trains the backbone and the vanilla head end to end with
//! instance-balanced sampling. Stage 2 freezes the backbone, starts a
//! balanced head from the vanilla one (or from scratch), and trains it with
//! class-balanced sampling. Both stages minimise the summed local and
//! holistic loss with momentum SGD under a warmup + cosine schedule.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{Checkpoint, EpochStats};
use crate::error::{bail, Error, Result};
use crate::labels::{make_label_distribution, AgeLabel, LabelDistribution, DEFAULT_SIGMA};
use crate::model::{Head, Model, ModelConfig};
use crate::pixel_aux::{BranchLosses, LossOptions};
use crate::sampling::{draw, SamplerKind};
use crate::seed;
use crate::synth::Dataset;
use crate::tensor::{Batch, Real, Tensor3};

pub const DEFAULT_STAGE1_EPOCHS: usize = 10;
pub const DEFAULT_STAGE2_EPOCHS: usize = 5;
pub const DEFAULT_STAGE2_LR: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => bail!(InvalidInput, "stage must be 1 or 2, got {n}"),
        }
    }

    /// Instance-balanced in stage 1, class-balanced in stage 2.
    pub fn sampler(self) -> SamplerKind {
        match self {
            Stage::One => SamplerKind::Instance,
            Stage::Two => SamplerKind::Class,
        }
    }
}

/// How the stage-2 head starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BalancedInit {
    /// Copy of the trained vanilla head.
    Warm,
    /// Fresh random initialization.
    Cold,
}

impl BalancedInit {
    pub fn name(self) -> &'static str {
        match self {
            BalancedInit::Warm => "warm",
            BalancedInit::Cold => "cold",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "warm" => Ok(BalancedInit::Warm),
            "cold" => Ok(BalancedInit::Cold),
            _ => bail!(Config, "balanced init must be 'warm' or 'cold', got '{s}'"),
        }
    }
}

/// Training-time augmentation in normalized pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip_prob: f64,
    pub noise_std: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flip_prob: 0.5,
            noise_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup before cosine decay.
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,
    /// Label-distribution width.
    pub sigma: f64,
    pub loss: LossOptions,
    pub balanced_init: BalancedInit,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::One,
            epochs: DEFAULT_STAGE1_EPOCHS,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            warmup_fraction: 0.1,
            grad_clip: 2.0,
            seed: 0,
            sigma: DEFAULT_SIGMA,
            loss: LossOptions::default(),
            balanced_init: BalancedInit::Warm,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.batch_size >= 1, "batch size must be positive"),
            (self.lr.is_finite() && self.lr > 0.0, "learning rate must be positive"),
            ((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (
                (0.0..=1.0).contains(&self.warmup_fraction),
                "warmup fraction must lie in [0, 1]",
            ),
            (self.weight_decay >= 0.0, "weight decay must be non-negative"),
            (self.grad_clip >= 0.0, "gradient clip must be non-negative"),
            (self.sigma > 0.0, "label sigma must be positive"),
            (
                (0.0..=1.0).contains(&self.augment.flip_prob),
                "flip probability must lie in [0, 1]",
            ),
            (self.augment.noise_std >= 0.0, "augmentation noise must be non-negative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                bail!(Config, "{msg}");
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total`: linear warmup then cosine decay to 0.
pub fn learning_rate(base: f64, warmup_fraction: f64, step: usize, total: usize) -> f64 {
    let warm = (warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    base * 0.5 * (1.0 + (PI * (step - warm) as f64 / span).cos())
}

struct Sgd<T> {
    velocity: Vec<T>,
}

impl<T: Real> Sgd<T> {
    fn new(len: usize) -> Self {
        Sgd {
            velocity: vec![T::zero(); len],
        }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [T], grads: &[T]) {
        let (mu, wd, lr) = (T::of(cfg.momentum), T::of(cfg.weight_decay), T::of(lr));
        for ((w, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let g = g + wd * *w;
            *v = mu * *v + g;
            let update = if cfg.nesterov { g + mu * *v } else { *v };
            *w -= lr * update;
        }
    }
}

fn clip<T: Real>(grads: &mut [&mut [T]], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// One augmented training image.
pub fn augment_image<T: Real>(data: &Dataset, sample: usize, aug: &Augment, seed: u64) -> Tensor3<T> {
    let mut rng = seed::rng(&[seed]);
    let mut img = data.image::<T>(sample);
    if rng.random::<f64>() < aug.flip_prob {
        img = img.flip_horizontal();
    }
    if aug.noise_std > 0.0 {
        for v in img.data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += T::of(aug.noise_std * n);
        }
    }
    img
}

struct Epoch<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    targets: Vec<(AgeLabel, LabelDistribution)>,
    steps_per_epoch: usize,
    total_steps: usize,
}

impl<'a> Epoch<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a Dataset, max_age: usize) -> Result<Self> {
        cfg.validate()?;
        if data.max_age != max_age {
            bail!(
                Config,
                "dataset ages span 0..={} but the model has {} classes",
                data.max_age,
                max_age + 1
            );
        }
        if data.train.is_empty() {
            bail!(Dataset, "no training samples");
        }
        let targets = (0..=max_age)
            .map(|y| {
                let label = AgeLabel::new(y, max_age)?;
                Ok((label, make_label_distribution(label, cfg.sigma)?))
            })
            .collect::<Result<_>>()?;
        let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
        Ok(Epoch {
            cfg,
            data,
            targets,
            steps_per_epoch,
            total_steps: steps_per_epoch * cfg.epochs,
        })
    }

    /// Sample indices (into the dataset) for each batch of `epoch`.
    fn batches(&self, epoch: usize) -> Result<Vec<Vec<usize>>> {
        let index = self.data.train_index()?;
        let stage = self.cfg.stage.number() as u64;
        let s = seed::mix(&[self.cfg.seed, seed::TAG_EPOCH, stage, epoch as u64]);
        let order = draw(self.cfg.stage.sampler(), &index, s, self.data.train.len())?;
        Ok(order
            .chunks(self.cfg.batch_size)
            .map(|c| c.iter().map(|&j| self.data.train[j]).collect())
            .collect())
    }

    fn images<T: Real>(&self, epoch: usize, batch: &[usize], first_pos: usize) -> Result<Batch<T>> {
        let stage = self.cfg.stage.number() as u64;
        let maps: Vec<Tensor3<T>> = batch
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let s = seed::mix(&[
                    self.cfg.seed,
                    seed::TAG_AUGMENT,
                    stage,
                    epoch as u64,
                    i as u64,
                    (first_pos + slot) as u64,
                ]);
                augment_image(self.data, i, &self.cfg.augment, s)
            })
            .collect();
        Batch::from_maps(&maps.iter().collect::<Vec<_>>())
    }

    fn targets(&self, batch: &[usize]) -> Vec<(AgeLabel, &LabelDistribution)> {
        batch
            .iter()
            .map(|&i| {
                let (l, z) = &self.targets[self.data.ages[i]];
                (*l, z)
            })
            .collect()
    }

    fn check(&self, epoch: usize, batch: &[usize], losses: &[BranchLosses]) -> Result<()> {
        if let Some((i, l)) = batch.iter().zip(losses).find(|(_, l)| !l.l_sum.is_finite()) {
            let ids: Vec<&str> = batch.iter().map(|&j| self.data.ids[j].as_str()).collect();
            return Err(Error::NonFinite(format!(
                "stage {} epoch {epoch}: sample {} has l_loc={} l_hol={}; batch ids [{}]",
                self.cfg.stage.number(),
                self.data.ids[*i],
                l.l_loc,
                l.l_hol,
                ids.join(", ")
            )));
        }
        Ok(())
    }
}

struct Tally {
    sum: f64,
    loc: f64,
    hol: f64,
    n: usize,
}

impl Tally {
    fn new() -> Self {
        Tally {
            sum: 0.0,
            loc: 0.0,
            hol: 0.0,
            n: 0,
        }
    }

    fn add(&mut self, losses: &[BranchLosses]) {
        for l in losses {
            self.sum += l.l_sum;
            self.loc += l.l_loc;
            self.hol += l.l_hol;
            self.n += 1;
        }
    }

    fn finish(&self, stage: Stage, epoch: usize, lr: f64) -> EpochStats {
        let n = self.n.max(1) as f64;
        EpochStats {
            stage: stage.number(),
            epoch,
            l_sum: self.sum / n,
            l_loc: self.loc / n,
            l_hol: self.hol / n,
            lr,
        }
    }
}

/// Stage 1 with a per-epoch observer.
pub fn train_stage1_with<T: Real>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Checkpoint<T>> {
    if cfg.stage != Stage::One {
        bail!(Config, "stage-1 training needs a stage-1 configuration");
    }
    let mut model = Model::<T>::new(model_cfg)?;
    let run = Epoch::new(cfg, data, model_cfg.head.max_age)?;
    let mut opt_b = Sgd::new(model.backbone.params.len());
    let mut opt_h = Sgd::new(model.vanilla.params.len());
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut tally = Tally::new();
        let mut lr = 0.0;
        for (b, batch) in run.batches(epoch)?.iter().enumerate() {
            let x = run.images::<T>(epoch, batch, b * cfg.batch_size)?;
            let targets = run.targets(batch);
            let mut gb = model.backbone.params.zeros_like();
            let mut gh = model.vanilla.params.zeros_like();
            let (f, tape) = model.backbone.forward_tape(&x)?;
            let (losses, df) = model.vanilla.train_step(&f, &targets, &cfg.loss, &mut gh, true)?;
            run.check(epoch, batch, &losses)?;
            let df = df.expect("feature gradient requested");
            model.backbone.backward(&tape, df, &mut gb);
            clip(&mut [&mut gb[..], &mut gh[..]], cfg.grad_clip);
            lr = learning_rate(cfg.lr, cfg.warmup_fraction, step, run.total_steps);
            opt_b.step(cfg, lr, &mut model.backbone.params.values, &gb);
            opt_h.step(cfg, lr, &mut model.vanilla.params.values, &gh);
            tally.add(&losses);
            step += 1;
        }
        let stats = tally.finish(Stage::One, epoch, lr);
        on_epoch(&stats);
        history.push(stats);
    }
    debug_assert_eq!(step, run.total_steps.min(run.steps_per_epoch * cfg.epochs));
    Ok(Checkpoint::new(Stage::One, cfg.seed, model, history))
}

pub fn train_stage1<T: Real>(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &Dataset) -> Result<Checkpoint<T>> {
    train_stage1_with(cfg, model_cfg, data, &mut |_| {})
}

/// Stage 2 with a per-epoch observer.
pub fn train_stage2_with<T: Real>(
    cfg: &TrainConfig,
    data: &Dataset,
    stage1: &Checkpoint<T>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Checkpoint<T>> {
    if cfg.stage != Stage::Two {
        bail!(Config, "stage-2 training needs a stage-2 configuration");
    }
    if stage1.stage != Stage::One {
        bail!(InvalidInput, "stage-2 training must start from a stage-1 checkpoint");
    }
    let model = &stage1.model;
    let mut head = match cfg.balanced_init {
        BalancedInit::Warm => model.vanilla.clone(),
        BalancedInit::Cold => {
            let mut hc = model.vanilla.config.clone();
            hc.seed = seed::mix(&[hc.seed, 2]);
            Head::new(&hc, model.backbone.config.output_shape())?
        }
    };
    let run = Epoch::new(cfg, data, model.vanilla.config.max_age)?;
    let mut opt = Sgd::new(head.params.len());
    let mut history = stage1.history.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut tally = Tally::new();
        let mut lr = 0.0;
        for (b, batch) in run.batches(epoch)?.iter().enumerate() {
            let x = run.images::<T>(epoch, batch, b * cfg.batch_size)?;
            let targets = run.targets(batch);
            let f = model.backbone.forward(&x)?;
            let mut gh = head.params.zeros_like();
            let (losses, _) = head.train_step(&f, &targets, &cfg.loss, &mut gh, false)?;
            run.check(epoch, batch, &losses)?;
            clip(&mut [&mut gh[..]], cfg.grad_clip);
            lr = learning_rate(cfg.lr, cfg.warmup_fraction, step, run.total_steps);
            opt.step(cfg, lr, &mut head.params.values, &gh);
            tally.add(&losses);
            step += 1;
        }
        let stats = tally.finish(Stage::Two, epoch, lr);
        on_epoch(&stats);
        history.push(stats);
    }
    let out = Model {
        backbone: model.backbone.clone(),
        vanilla: model.vanilla.clone(),
        balanced: Some(head),
    };
    let mut ckpt = Checkpoint::new(Stage::Two, cfg.seed, out, history);
    ckpt.manifest = stage1.manifest.clone();
    Ok(ckpt)
}

pub fn train_stage2<T: Real>(cfg: &TrainConfig, data: &Dataset, stage1: &Checkpoint<T>) -> Result<Checkpoint<T>> {
    train_stage2_with(cfg, data, stage1, &mut |_| {})
}
