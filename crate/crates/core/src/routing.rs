//! Adaptive routing between the vanilla and balanced heads.
//!
//! For each image both heads score the image and its horizontal mirror. The
//! head whose two predictions agree more closely (smaller KL divergence)
//! answers; its flip-averaged distribution is the final prediction.
//! Ties go to the balanced head.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::labels::{expected_age, kl_divergence, PredictionDistribution};
use crate::metrics::{PredictionRecord, ProtocolConfig};
use crate::model::{HeadChoice, Model};
use crate::synth::Dataset;
use crate::tensor::{Batch, Real, Tensor3};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlMode {
    /// `KL(raw ‖ flipped)`.
    Forward,
    /// `KL(raw ‖ flipped) + KL(flipped ‖ raw)`.
    Symmetric,
}

impl KlMode {
    pub fn name(self) -> &'static str {
        match self {
            KlMode::Forward => "forward",
            KlMode::Symmetric => "symmetric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(KlMode::Forward),
            "symmetric" => Ok(KlMode::Symmetric),
            _ => bail!(Config, "routing KL must be 'forward' or 'symmetric', got '{s}'"),
        }
    }

    pub fn upsilon(self, raw: &PredictionDistribution, flipped: &PredictionDistribution) -> Result<f64> {
        let fwd = kl_divergence(&raw.p, &flipped.p)?;
        Ok(match self {
            KlMode::Forward => fwd,
            KlMode::Symmetric => fwd + kl_divergence(&flipped.p, &raw.p)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub upsilon_vanilla: f64,
    pub upsilon_balanced: f64,
    pub chosen: HeadChoice,
    pub p_final: PredictionDistribution,
    pub y_hat: f64,
}

pub fn route_with(
    mode: KlMode,
    p_hol: &PredictionDistribution,
    p_hol_f: &PredictionDistribution,
    p_ban: &PredictionDistribution,
    p_ban_f: &PredictionDistribution,
) -> Result<RoutingDecision> {
    let n = p_hol.len();
    if [p_hol_f.len(), p_ban.len(), p_ban_f.len()].iter().any(|&l| l != n) {
        bail!(Shape, "routing needs four distributions of equal length");
    }
    let u1 = mode.upsilon(p_hol, p_hol_f)?;
    let u2 = mode.upsilon(p_ban, p_ban_f)?;
    let (chosen, p_final) = if u1 < u2 {
        (HeadChoice::Vanilla, p_hol.average(p_hol_f)?)
    } else {
        (HeadChoice::Balanced, p_ban.average(p_ban_f)?)
    };
    Ok(RoutingDecision {
        upsilon_vanilla: u1,
        upsilon_balanced: u2,
        chosen,
        y_hat: expected_age(&p_final),
        p_final,
    })
}

pub fn route(
    p_hol: &PredictionDistribution,
    p_hol_f: &PredictionDistribution,
    p_ban: &PredictionDistribution,
    p_ban_f: &PredictionDistribution,
) -> Result<RoutingDecision> {
    route_with(KlMode::Forward, p_hol, p_hol_f, p_ban, p_ban_f)
}

/// Holistic distributions of one head on an image and its mirror.
pub fn predict_pair<T: Real>(
    model: &Model<T>,
    head: HeadChoice,
    image: &Tensor3<T>,
) -> Result<(PredictionDistribution, PredictionDistribution)> {
    let h = model.head(head)?;
    let flipped = image.flip_horizontal();
    let x = Batch::from_maps(&[image, &flipped])?;
    let mut p = h.predict(&model.backbone.forward(&x)?)?;
    let f = p.pop().expect("two outputs");
    Ok((p.pop().expect("two outputs"), f))
}

/// Raw and mirrored predictions of both heads for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedOutputs {
    pub id: String,
    pub y: usize,
    pub vanilla: (PredictionDistribution, PredictionDistribution),
    pub balanced: Option<(PredictionDistribution, PredictionDistribution)>,
}

impl PairedOutputs {
    fn head(&self, choice: HeadChoice) -> Result<&(PredictionDistribution, PredictionDistribution)> {
        match choice {
            HeadChoice::Vanilla => Ok(&self.vanilla),
            HeadChoice::Balanced => self.balanced.as_ref().ok_or(Error::MissingBalancedHead),
        }
    }

    pub fn decision(&self, mode: KlMode) -> Result<RoutingDecision> {
        let (v, vf) = &self.vanilla;
        let (b, bf) = self.head(HeadChoice::Balanced)?;
        route_with(mode, v, vf, b, bf)
    }
}

/// Runs every head on `subset` of `data` (raw and mirrored), in batches.
pub fn paired_outputs<T: Real>(model: &Model<T>, data: &Dataset, subset: &[usize]) -> Result<Vec<PairedOutputs>> {
    let mut out = Vec::with_capacity(subset.len());
    for chunk in subset.chunks(EVAL_BATCH) {
        let raw: Vec<Tensor3<T>> = chunk.iter().map(|&i| data.image(i)).collect();
        let flipped: Vec<Tensor3<T>> = raw.iter().map(Tensor3::flip_horizontal).collect();
        let all: Vec<&Tensor3<T>> = raw.iter().chain(&flipped).collect();
        let f = model.backbone.forward(&Batch::from_maps(&all)?)?;
        let n = chunk.len();
        let split = |mut p: Vec<PredictionDistribution>| {
            let f = p.split_off(n);
            p.into_iter().zip(f)
        };
        let van: Vec<_> = split(model.vanilla.predict(&f)?).collect();
        let ban: Option<Vec<_>> = match &model.balanced {
            Some(h) => Some(split(h.predict(&f)?).collect()),
            None => None,
        };
        for (j, &i) in chunk.iter().enumerate() {
            out.push(PairedOutputs {
                id: data.ids[i].clone(),
                y: data.ages[i],
                vanilla: van[j].clone(),
                balanced: ban.as_ref().map(|b| b[j].clone()),
            });
        }
    }
    Ok(out)
}

/// The four ways of answering compared in evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Vanilla,
    Balanced,
    /// Always the head with the larger divergence.
    BiggerUpsilon,
    /// Adaptive routing.
    SmallerUpsilon,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Vanilla,
        Policy::Balanced,
        Policy::BiggerUpsilon,
        Policy::SmallerUpsilon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Vanilla => "vanilla",
            Policy::Balanced => "balanced",
            Policy::BiggerUpsilon => "bigger_upsilon",
            Policy::SmallerUpsilon => "smaller_upsilon",
        }
    }

    /// Head used for one sample.
    pub fn choose(self, d: &RoutingDecision) -> HeadChoice {
        let other = |h| match h {
            HeadChoice::Vanilla => HeadChoice::Balanced,
            HeadChoice::Balanced => HeadChoice::Vanilla,
        };
        match self {
            Policy::Vanilla => HeadChoice::Vanilla,
            Policy::Balanced => HeadChoice::Balanced,
            Policy::SmallerUpsilon => d.chosen,
            Policy::BiggerUpsilon => other(d.chosen),
        }
    }
}

/// Per-sample outcome of one policy, with the routing scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedSample {
    pub id: String,
    pub y: usize,
    pub y_hat: f64,
    pub head: HeadChoice,
    pub upsilon_vanilla: f64,
    pub upsilon_balanced: f64,
}

pub fn apply_policy(outputs: &[PairedOutputs], policy: Policy, mode: KlMode) -> Result<Vec<RoutedSample>> {
    outputs
        .iter()
        .map(|o| {
            let d = o.decision(mode)?;
            let head = policy.choose(&d);
            let (a, b) = o.head(head)?;
            Ok(RoutedSample {
                id: o.id.clone(),
                y: o.y,
                y_hat: expected_age(&a.average(b)?),
                head,
                upsilon_vanilla: d.upsilon_vanilla,
                upsilon_balanced: d.upsilon_balanced,
            })
        })
        .collect()
}

/// Flip-averaged predictions of a single head; works without a balanced head.
pub fn head_records(outputs: &[PairedOutputs], head: HeadChoice) -> Result<Vec<PredictionRecord>> {
    outputs
        .iter()
        .map(|o| {
            let (a, b) = o.head(head)?;
            Ok(PredictionRecord::new(o.id.clone(), o.y, expected_age(&a.average(b)?)))
        })
        .collect()
}

pub fn to_records(samples: &[RoutedSample]) -> Vec<PredictionRecord> {
    samples
        .iter()
        .map(|s| PredictionRecord::new(s.id.clone(), s.y, s.y_hat))
        .collect()
}

/// Share of samples routed to the vanilla head in one age range.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupUsage {
    pub lo: usize,
    pub hi: usize,
    pub n: usize,
    pub vanilla_ratio: Option<f64>,
}

impl GroupUsage {
    pub fn balanced_ratio(&self) -> Option<f64> {
        self.vanilla_ratio.map(|v| 1.0 - v)
    }
}

pub fn usage(samples: &[RoutedSample], ranges: &[(usize, usize)]) -> Vec<GroupUsage> {
    ranges
        .iter()
        .map(|&(lo, hi)| {
            let inside: Vec<&RoutedSample> = samples.iter().filter(|s| (lo..=hi).contains(&s.y)).collect();
            let v = inside.iter().filter(|s| s.head == HeadChoice::Vanilla).count();
            GroupUsage {
                lo,
                hi,
                n: inside.len(),
                vanilla_ratio: (!inside.is_empty()).then(|| v as f64 / inside.len() as f64),
            }
        })
        .collect()
}

/// Vanilla usage over the union of `ranges`.
pub fn pooled_vanilla_ratio(samples: &[RoutedSample], ranges: &[(usize, usize)]) -> Option<f64> {
    let inside: Vec<&RoutedSample> = samples
        .iter()
        .filter(|s| ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&s.y)))
        .collect();
    let v = inside.iter().filter(|s| s.head == HeadChoice::Vanilla).count();
    (!inside.is_empty()).then(|| v as f64 / inside.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub samples: Vec<RoutedSample>,
    /// Usage per AAR-width age group.
    pub groups: Vec<GroupUsage>,
    pub head_vanilla_ratio: Option<f64>,
    pub tail_vanilla_ratio: Option<f64>,
}

impl RoutingReport {
    pub fn build(samples: Vec<RoutedSample>, protocol: &ProtocolConfig) -> Self {
        let w = protocol.group_width;
        let groups: Vec<(usize, usize)> = (0..=protocol.max_age / w)
            .map(|g| (g * w, (g * w + w - 1).min(protocol.max_age)))
            .collect();
        RoutingReport {
            groups: usage(&samples, &groups),
            head_vanilla_ratio: pooled_vanilla_ratio(&samples, &[protocol.head()]),
            tail_vanilla_ratio: pooled_vanilla_ratio(&samples, &protocol.tails()),
            samples,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("ages      n   vanilla  balanced\n");
        for g in &self.groups {
            match g.vanilla_ratio {
                Some(v) => {
                    let _ = writeln!(s, "{:>3}-{:<3} {:>5}   {:.3}    {:.3}", g.lo, g.hi, g.n, v, 1.0 - v);
                }
                None => {
                    let _ = writeln!(s, "{:>3}-{:<3} {:>5}   --       --", g.lo, g.hi, g.n);
                }
            }
        }
        let fmt = |v: Option<f64>| v.map_or("--".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            s,
            "vanilla usage: head {} tail {}",
            fmt(self.head_vanilla_ratio),
            fmt(self.tail_vanilla_ratio)
        );
        s
    }
}

/// Writes routed predictions with their scores; the file is also a valid
/// prediction file for scoring.
pub fn write_routing_csv(path: &Path, samples: &[RoutedSample]) -> Result<()> {
    let mut w = crate::error::csv_writer(path)?;
    w.write_record([
        "id",
        "true_age",
        "pred_age",
        "upsilon_vanilla",
        "upsilon_balanced",
        "chosen",
    ])?;
    for s in samples {
        w.write_record([
            s.id.clone(),
            s.y.to_string(),
            s.y_hat.to_string(),
            s.upsilon_vanilla.to_string(),
            s.upsilon_balanced.to_string(),
            s.head.name().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back the per-sample head choices of a routing file.
pub fn read_routing_csv(path: &Path) -> Result<Vec<RoutedSample>> {
    let mut rdr = crate::error::csv_reader(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = || Error::InvalidInput(format!("{} line {}: malformed routing row", path.display(), i + 2));
        if row.len() < 6 {
            return Err(bad());
        }
        let head = match &row[5] {
            "vanilla" => HeadChoice::Vanilla,
            "balanced" => HeadChoice::Balanced,
            _ => return Err(bad()),
        };
        out.push(RoutedSample {
            id: row[0].to_string(),
            y: row[1].parse().map_err(|_| bad())?,
            y_hat: row[2].parse().map_err(|_| bad())?,
            upsilon_vanilla: row[3].parse().map_err(|_| bad())?,
            upsilon_balanced: row[4].parse().map_err(|_| bad())?,
            head,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::model::{HeadConfig, ModelConfig};
    use crate::rearrange::FrGeometry;
    use proptest::prelude::*;

    fn pd(p: &[f64]) -> PredictionDistribution {
        PredictionDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn toy_example() {
        let d = route(&pd(&[0.9, 0.1]), &pd(&[0.8, 0.2]), &pd(&[0.6, 0.4]), &pd(&[0.6, 0.4])).unwrap();
        let want = 0.9 * (0.9f64 / 0.8).ln() + 0.1 * (0.1f64 / 0.2).ln();
        assert!((d.upsilon_vanilla - want).abs() < 1e-15);
        assert!((d.upsilon_vanilla - 0.0367).abs() < 1e-4);
        assert_eq!(d.upsilon_balanced, 0.0);
        assert_eq!(d.chosen, HeadChoice::Balanced);
        assert!((d.p_final.p[0] - 0.6).abs() < 1e-15);
        assert!((d.y_hat - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_beats_positive_and_ties_go_balanced() {
        let a = pd(&[0.3, 0.7]);
        let b = pd(&[0.5, 0.5]);
        let d = route(&a, &a, &a, &b).unwrap();
        assert_eq!(d.chosen, HeadChoice::Vanilla);
        let t = route(&a, &b, &a, &b).unwrap();
        assert_eq!(t.upsilon_vanilla, t.upsilon_balanced);
        assert_eq!(t.chosen, HeadChoice::Balanced);
        assert!(route(&a, &a, &a, &pd(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn symmetric_mode() {
        let a = pd(&[0.9, 0.1]);
        let b = pd(&[0.8, 0.2]);
        let s = KlMode::Symmetric.upsilon(&a, &b).unwrap();
        let want = kl_divergence(&a.p, &b.p).unwrap() + kl_divergence(&b.p, &a.p).unwrap();
        assert_eq!(s, want);
        assert_eq!(KlMode::parse("symmetric").unwrap(), KlMode::Symmetric);
        assert!(KlMode::parse("reverse").is_err());
    }

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                input_size: 8,
                widths: vec![4, 8],
                strides: vec![2, 1],
                norm_groups: 2,
                seed: 7,
                ..BackboneConfig::default()
            },
            head: HeadConfig {
                max_age: 5,
                geometry: FrGeometry::aligned(2),
                proj_width: 4,
                seed: 8,
                ..HeadConfig::default()
            },
        };
        Model::new(&cfg).unwrap()
    }

    fn image(f: impl Fn(usize, usize) -> f64) -> Tensor3<f64> {
        Tensor3::from_vec(1, 8, 8, (0..64).map(|i| f(i / 8, i % 8)).collect()).unwrap()
    }

    #[test]
    fn pair_symmetry() {
        let mut m = tiny_model();
        assert!(matches!(
            predict_pair(&m, HeadChoice::Balanced, &image(|_, _| 0.0)),
            Err(Error::MissingBalancedHead)
        ));
        let sym = image(|r, c| ((r * 3 + c.min(7 - c)) as f64).sin());
        let (p, pf) = predict_pair(&m, HeadChoice::Vanilla, &sym).unwrap();
        assert_eq!(p, pf);
        let asym = image(|r, c| ((r * 5 + c * c) as f64 * 0.37).cos());
        let (p, pf) = predict_pair(&m, HeadChoice::Vanilla, &asym).unwrap();
        let (q, qf) = predict_pair(&m, HeadChoice::Vanilla, &asym.flip_horizontal()).unwrap();
        assert_eq!(p, qf);
        assert_eq!(pf, q);
        let (d, _) = predict_pair(&m, HeadChoice::Vanilla, &asym.flip_horizontal().flip_horizontal()).unwrap();
        assert_eq!(d, p);
        assert_ne!(p, pf);

        // identical heads tie everywhere
        m.balanced = Some(m.vanilla.clone());
        let (v, vf) = predict_pair(&m, HeadChoice::Vanilla, &asym).unwrap();
        let (b, bf) = predict_pair(&m, HeadChoice::Balanced, &asym).unwrap();
        assert_eq!(route(&v, &vf, &b, &bf).unwrap().chosen, HeadChoice::Balanced);
    }

    #[test]
    fn usage_aggregation() {
        let s = |y, head| RoutedSample {
            id: String::new(),
            y,
            y_hat: 0.0,
            head,
            upsilon_vanilla: 0.0,
            upsilon_balanced: 0.0,
        };
        let one = [s(30, HeadChoice::Vanilla)];
        let u = usage(&one, &[(18, 65), (0, 17)]);
        assert_eq!(u[0].vanilla_ratio, Some(1.0));
        assert_eq!(u[1].vanilla_ratio, None);
        let rep = RoutingReport::build(one.to_vec(), &ProtocolConfig::default());
        assert_eq!(rep.groups.len(), 11);
        assert_eq!(
            rep.groups[10],
            GroupUsage {
                lo: 100,
                hi: 100,
                n: 0,
                vanilla_ratio: None
            }
        );
        assert_eq!(rep.head_vanilla_ratio, Some(1.0));
        assert_eq!(rep.tail_vanilla_ratio, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let many = vec![s(3, HeadChoice::Balanced), s(40, HeadChoice::Vanilla)];
        write_routing_csv(&path, &many).unwrap();
        assert_eq!(read_routing_csv(&path).unwrap(), many);
        let recs = crate::metrics::read_predictions(&path).unwrap();
        assert_eq!(recs.len(), 2);
    }

    fn dist(n: usize) -> impl Strategy<Value = PredictionDistribution> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            PredictionDistribution {
                p: v.iter().map(|x| x / s).collect(),
            }
        })
    }

    proptest! {
        #[test]
        fn decision_contract(a in dist(6), b in dist(6), c in dist(6), d in dist(6), eps in 0.0f64..1.0) {
            let r = route(&a, &b, &c, &d).unwrap();
            prop_assert_eq!(r.chosen == HeadChoice::Vanilla, r.upsilon_vanilla < r.upsilon_balanced);
            prop_assert!(r.upsilon_vanilla >= 0.0 && r.upsilon_balanced >= 0.0);
            prop_assert!((r.p_final.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=5.0).contains(&r.y_hat));
            // Small perturbations that move each score by less than half the gap keep the choice.
            let gap = (r.upsilon_vanilla - r.upsilon_balanced).abs();
            let mix = |p: &PredictionDistribution| PredictionDistribution {
                p: p.p.iter().map(|v| (1.0 - eps * 1e-3) * v + eps * 1e-3 / 6.0).collect(),
            };
            let q = route(&mix(&a), &mix(&b), &mix(&c), &mix(&d)).unwrap();
            let moved = (q.upsilon_vanilla - r.upsilon_vanilla).abs().max((q.upsilon_balanced - r.upsilon_balanced).abs());
            if moved < gap / 2.0 {
                prop_assert_eq!(q.chosen, r.chosen);
            }
        }
    }
}
