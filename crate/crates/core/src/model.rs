//! Classifier heads and the two-head model.

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{bail, Result};
use crate::labels::{logit_loss_grad, AgeLabel, LabelDistribution, PredictionDistribution, MAX_AGE};
use crate::nn::{batch_to_rows, rows_to_batch, Linear, ParamStore};
use crate::pixel_aux::{local_branch_batch, BranchLosses, LossOptions, Projection, DEFAULT_HIDDEN_WIDTH};
use crate::rearrange::{inverse_rearrange_batch, rearrange_batch, FrConv, FrGeometry, ScoreMap};
use crate::seed;
use crate::tensor::{Batch, Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Rearrangement + categorizing convolution + pixel-level auxiliary branches.
    FrPa,
    /// Global average pooling + linear classifier (ablation baseline).
    Gap,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::FrPa => "fr_pa",
            HeadKind::Gap => "gap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fr_pa" => Ok(HeadKind::FrPa),
            "gap" => Ok(HeadKind::Gap),
            other => bail!(Config, "unknown head kind '{other}' (expected fr_pa or gap)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub max_age: usize,
    pub geometry: FrGeometry,
    pub proj_depth: usize,
    pub proj_width: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::FrPa,
            max_age: MAX_AGE,
            geometry: FrGeometry::aligned(8),
            proj_depth: 0,
            proj_width: DEFAULT_HIDDEN_WIDTH,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn num_classes(&self) -> usize {
        self.max_age + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Arch {
    FrPa { fr: FrConv, proj: Projection },
    Gap { linear: Linear },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub config: HeadConfig,
    feature_shape: [usize; 3],
    arch: Arch,
    pub params: ParamStore<T>,
}

impl<T: Real> Head<T> {
    pub fn new(config: &HeadConfig, feature_shape: [usize; 3]) -> Result<Self> {
        let mut rng = seed::rng(&[config.seed, seed::TAG_INIT, 1]);
        let mut params = ParamStore::default();
        let classes = config.num_classes();
        let [c, h, w] = feature_shape;
        let arch = match config.kind {
            HeadKind::FrPa => {
                let fr = FrConv::new(&mut params, config.geometry, c, classes, &mut rng)?;
                let (sh, sw) = fr.score_hw(h, w)?;
                let proj = Projection::new(
                    &mut params,
                    classes * sh * sw,
                    classes,
                    config.proj_depth,
                    config.proj_width,
                    &mut rng,
                )?;
                Arch::FrPa { fr, proj }
            }
            HeadKind::Gap => Arch::Gap {
                linear: Linear::new(&mut params, "gap.linear", c, classes, &mut rng),
            },
        };
        Ok(Head {
            config: config.clone(),
            feature_shape,
            arch,
            params,
        })
    }

    pub fn fr_conv(&self) -> Option<&FrConv> {
        match &self.arch {
            Arch::FrPa { fr, .. } => Some(fr),
            Arch::Gap { .. } => None,
        }
    }

    pub fn projection(&self) -> Option<&Projection> {
        match &self.arch {
            Arch::FrPa { proj, .. } => Some(proj),
            Arch::Gap { .. } => None,
        }
    }

    fn check_features(&self, f: &Batch<T>) -> Result<()> {
        if [f.c, f.h, f.w] != self.feature_shape {
            bail!(
                Shape,
                "head expects features {:?}, got {:?}",
                self.feature_shape,
                [f.c, f.h, f.w]
            );
        }
        Ok(())
    }

    /// Score map of one feature map (FR heads only).
    pub fn score_map(&self, features: &Tensor3<T>) -> Result<ScoreMap<T>> {
        let Arch::FrPa { fr, .. } = &self.arch else {
            bail!(Config, "pooled heads have no score map");
        };
        let f = Batch::from_map(features.clone());
        self.check_features(&f)?;
        let r = rearrange_batch(&f, fr.geometry.r)?;
        Ok(fr.conv.forward(&self.params.values, &r)?.0.item(0))
    }

    /// Holistic logits, `N×(K+1)` row-major.
    pub fn logits(&self, f: &Batch<T>) -> Result<Vec<T>> {
        self.check_features(f)?;
        let p = &self.params.values;
        match &self.arch {
            Arch::FrPa { fr, proj } => {
                let r = rearrange_batch(f, fr.geometry.r)?;
                let (s, _) = fr.conv.forward(p, &r)?;
                Ok(proj.forward(p, &batch_to_rows(&s), f.n))
            }
            Arch::Gap { linear } => Ok(linear.forward(p, &pool(f), f.n)),
        }
    }

    pub fn predict(&self, f: &Batch<T>) -> Result<Vec<PredictionDistribution>> {
        let classes = self.config.num_classes();
        let logits = self.logits(f)?;
        Ok(logits
            .chunks(classes)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
                PredictionDistribution::from_logits(&row)
            })
            .collect())
    }

    /// Forward + backward of the mean batch loss. Parameter gradients are
    /// accumulated into `grads`; the feature gradient is returned on request.
    pub fn train_step(
        &self,
        f: &Batch<T>,
        targets: &[(AgeLabel, &LabelDistribution)],
        opts: &LossOptions,
        grads: &mut [T],
        need_feature_grad: bool,
    ) -> Result<(Vec<BranchLosses>, Option<Batch<T>>)> {
        self.check_features(f)?;
        if targets.len() != f.n {
            bail!(Shape, "{} targets for a batch of {}", targets.len(), f.n);
        }
        let n = f.n;
        let classes = self.config.num_classes();
        let inv_n = 1.0 / n as f64;
        let p = &self.params.values;
        let holistic = |logits: &[T]| -> (Vec<f64>, Vec<T>) {
            let mut losses = Vec::with_capacity(n);
            let mut dlogits = vec![T::zero(); logits.len()];
            let mut row = vec![0.0; classes];
            let mut grad = vec![0.0; classes];
            for (b, (label, z)) in targets.iter().enumerate() {
                for (dst, v) in row.iter_mut().zip(&logits[b * classes..(b + 1) * classes]) {
                    *dst = v.f64();
                }
                let parts = logit_loss_grad(&row, z, *label, opts.use_er, opts.holistic_weight * inv_n, &mut grad);
                losses.push(parts.total());
                for (dst, g) in dlogits[b * classes..(b + 1) * classes].iter_mut().zip(&grad) {
                    *dst = T::of(*g);
                }
            }
            (losses, dlogits)
        };
        match &self.arch {
            Arch::FrPa { fr, proj } => {
                let r = rearrange_batch(f, fr.geometry.r)?;
                let (s, cols) = fr.conv.forward(p, &r)?;
                let rows = batch_to_rows(&s);
                let (logits, tape) = proj.forward_tape(p, &rows, n);
                let (hol, dlogits) = holistic(&logits);
                let drows = proj.backward(p, &tape, &dlogits, n, grads);
                let mut ds = rows_to_batch(&drows, s.c, n, s.h, s.w);
                let mut dloc = Batch::zeros(s.c, n, s.h, s.w);
                let loc_opts = LossOptions {
                    local_weight: opts.local_weight * inv_n,
                    ..*opts
                };
                let loc = local_branch_batch(&s, targets, &loc_opts, &mut dloc);
                for (a, b) in ds.data.iter_mut().zip(&dloc.data) {
                    *a += *b;
                }
                let dr = fr.conv.backward(p, (r.h, r.w), &cols, &ds, grads, need_feature_grad);
                let losses = loc
                    .iter()
                    .zip(&hol)
                    .map(|(l, h)| {
                        let l_loc = opts.local_weight * l.total();
                        let l_hol = opts.holistic_weight * h;
                        BranchLosses {
                            l_loc,
                            l_hol,
                            l_sum: l_loc + l_hol,
                        }
                    })
                    .collect();
                let df = match dr {
                    Some(dr) => Some(inverse_rearrange_batch(&dr, fr.geometry.r)?),
                    None => None,
                };
                Ok((losses, df))
            }
            Arch::Gap { linear } => {
                let pooled = pool(f);
                let logits = linear.forward(p, &pooled, n);
                let (hol, dlogits) = holistic(&logits);
                let dpooled = linear.backward(p, &pooled, &dlogits, n, grads, need_feature_grad);
                let losses = hol
                    .iter()
                    .map(|h| BranchLosses {
                        l_loc: 0.0,
                        l_hol: opts.holistic_weight * h,
                        l_sum: opts.holistic_weight * h,
                    })
                    .collect();
                Ok((losses, dpooled.map(|d| unpool(&d, f))))
            }
        }
    }
}

fn pool<T: Real>(f: &Batch<T>) -> Vec<T> {
    let hw = f.plane();
    let inv = T::of(1.0 / hw as f64);
    let mut out = vec![T::zero(); f.n * f.c];
    for c in 0..f.c {
        for b in 0..f.n {
            let s: T = f.data[(c * f.n + b) * hw..][..hw].iter().copied().sum();
            out[b * f.c + c] = s * inv;
        }
    }
    out
}

fn unpool<T: Real>(d: &[T], f: &Batch<T>) -> Batch<T> {
    let hw = f.plane();
    let inv = T::of(1.0 / hw as f64);
    let mut out = Batch::zeros(f.c, f.n, f.h, f.w);
    for c in 0..f.c {
        for b in 0..f.n {
            out.data[(c * f.n + b) * hw..][..hw].fill(d[b * f.c + c] * inv);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadChoice {
    Vanilla,
    Balanced,
}

impl HeadChoice {
    pub fn name(self) -> &'static str {
        match self {
            HeadChoice::Vanilla => "vanilla",
            HeadChoice::Balanced => "balanced",
        }
    }
}

/// Shared backbone with a vanilla head and, after stage 2, a balanced head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub backbone: Backbone<T>,
    pub vanilla: Head<T>,
    pub balanced: Option<Head<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        if config.head.kind == HeadKind::FrPa {
            config.backbone.validate_for(config.head.geometry.r)?;
        }
        let backbone = Backbone::new(&config.backbone)?;
        let vanilla = Head::new(&config.head, config.backbone.output_shape())?;
        Ok(Model {
            backbone,
            vanilla,
            balanced: None,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config.clone(),
            head: self.vanilla.config.clone(),
        }
    }

    pub fn head(&self, choice: HeadChoice) -> Result<&Head<T>> {
        match choice {
            HeadChoice::Vanilla => Ok(&self.vanilla),
            HeadChoice::Balanced => self.balanced.as_ref().ok_or(crate::Error::MissingBalancedHead),
        }
    }

    pub fn predict(&self, images: &Batch<T>, choice: HeadChoice) -> Result<Vec<PredictionDistribution>> {
        let head = self.head(choice)?;
        head.predict(&self.backbone.forward(images)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::make_label_distribution;

    fn small_config(kind: HeadKind) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: 8,
                widths: vec![4, 8],
                strides: vec![2, 1],
                norm_groups: 2,
                seed: 3,
                ..BackboneConfig::default()
            },
            head: HeadConfig {
                kind,
                max_age: 6,
                geometry: FrGeometry::aligned(2),
                proj_depth: 1,
                proj_width: 5,
                seed: 4,
            },
        }
    }

    #[test]
    fn predict_requires_balanced_head() {
        let model = Model::<f64>::new(&small_config(HeadKind::FrPa)).unwrap();
        let x = Batch::zeros(1, 2, 8, 8);
        assert_eq!(model.predict(&x, HeadChoice::Vanilla).unwrap().len(), 2);
        assert!(matches!(
            model.predict(&x, HeadChoice::Balanced),
            Err(crate::Error::MissingBalancedHead)
        ));
    }

    #[test]
    fn train_step_reports_mean_consistent_losses() {
        for kind in [HeadKind::FrPa, HeadKind::Gap] {
            let model = Model::<f64>::new(&small_config(kind)).unwrap();
            let img: Vec<f64> = (0..64).map(|i| (i as f64 / 10.0).sin()).collect();
            let x = Batch::from_map(Tensor3::from_vec(1, 8, 8, img).unwrap());
            let f = model.backbone.forward(&x).unwrap();
            let y = AgeLabel::new(2, 6).unwrap();
            let z = make_label_distribution(y, 1.0).unwrap();
            let mut grads = model.vanilla.params.zeros_like();
            let (losses, df) = model
                .vanilla
                .train_step(&f, &[(y, &z)], &LossOptions::default(), &mut grads, true)
                .unwrap();
            assert_eq!(df.unwrap().data.len(), f.data.len());
            let l = losses[0];
            assert_eq!(l.l_sum, l.l_loc + l.l_hol);
            let p = &model.vanilla.predict(&f).unwrap()[0];
            let expected = crate::labels::base_loss(&z, p, y).unwrap();
            assert!((l.l_hol - expected).abs() < 1e-9);
            if kind == HeadKind::FrPa {
                let s = model.vanilla.score_map(&f.item(0)).unwrap();
                let loc = crate::pixel_aux::local_loss(&s, &z, y).unwrap();
                assert!((l.l_loc - loc).abs() < 1e-9);
            }
        }
    }
}
