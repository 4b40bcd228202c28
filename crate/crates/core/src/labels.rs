//! Age labels, Gaussian label distributions and the per-distribution losses
//! shared by every head: KL divergence, expectation and the ℓ1 age term.

use crate::error::{bail, Result};

/// Default maximum age index; categories are `0..=MAX_AGE`.
pub const MAX_AGE: usize = 100;
/// Default Gaussian spread of the target distribution, in years.
pub const DEFAULT_SIGMA: f64 = 1.0;
/// Softmax outputs are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgeLabel {
    pub y: usize,
    pub k: usize,
}

impl AgeLabel {
    pub fn new(y: usize, k: usize) -> Result<Self> {
        if y > k {
            bail!(InvalidInput, "age {y} outside [0, {k}]");
        }
        Ok(AgeLabel { y, k })
    }

    pub fn num_classes(&self) -> usize {
        self.k + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    pub z: Vec<f64>,
    pub sigma: f64,
}

impl LabelDistribution {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// All mass on a single age. Used as an exact target in tests.
    pub fn one_hot(y: AgeLabel) -> Self {
        let mut z = vec![0.0; y.num_classes()];
        z[y.y] = 1.0;
        LabelDistribution { z, sigma: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution {
    pub p: Vec<f64>,
}

impl PredictionDistribution {
    /// Validates positivity and normalization (±1e-9).
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            bail!(InvalidInput, "empty prediction distribution");
        }
        if let Some(v) = p.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            bail!(InvalidInput, "prediction entry {v} is not a positive probability");
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            bail!(InvalidInput, "prediction sums to {total}, not 1");
        }
        Ok(PredictionDistribution { p })
    }

    /// Numerically stable softmax with the [`PROB_FLOOR`] clamp.
    pub fn from_logits(logits: &[f64]) -> Self {
        PredictionDistribution {
            p: softmax(logits).into_iter().map(|v| v.max(PROB_FLOOR)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }

    /// Element-wise mean of two distributions over the same support.
    pub fn average(&self, other: &Self) -> Result<Self> {
        check_len(self.len(), other.len())?;
        Ok(PredictionDistribution {
            p: self.p.iter().zip(&other.p).map(|(a, b)| 0.5 * (a + b)).collect(),
        })
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            },
        )
        .0
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        bail!(Shape, "distribution lengths differ: {a} vs {b}");
    }
    Ok(())
}

/// Unnormalized Gaussian density of age `k` around `y`.
pub fn gaussian_weight(k: usize, y: usize, sigma: f64) -> f64 {
    let d = k as f64 - y as f64;
    (-(d * d) / (2.0 * sigma * sigma)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// Gaussian target over ages `0..=K`, renormalized over the truncated support.
pub fn make_label_distribution(y: AgeLabel, sigma: f64) -> Result<LabelDistribution> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        bail!(InvalidInput, "sigma must be positive, got {sigma}");
    }
    let raw: Vec<f64> = (0..=y.k).map(|k| gaussian_weight(k, y.y, sigma)).collect();
    let total: f64 = raw.iter().sum();
    Ok(LabelDistribution {
        z: raw.into_iter().map(|v| v / total).collect(),
        sigma,
    })
}

/// `Σ a·log(a/b)` with `0·log(0/·) = 0`. `b` is clamped to the probability
/// floor; entries still non-positive after clamping are rejected.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let mut total = 0.0;
    for (&ai, &bi) in a.iter().zip(b) {
        let bi = bi.max(PROB_FLOOR);
        if !(bi > 0.0) {
            bail!(InvalidInput, "non-positive probability {bi}");
        }
        if ai > 0.0 {
            total += ai * (ai / bi).ln();
        }
    }
    Ok(total)
}

pub fn kl_loss(z: &LabelDistribution, p: &PredictionDistribution) -> Result<f64> {
    kl_divergence(&z.z, &p.p)
}

/// Expectation refinement: `Σ k·p_k`.
pub fn expected_age(p: &PredictionDistribution) -> f64 {
    expectation(&p.p)
}

pub(crate) fn expectation(p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(k, v)| k as f64 * v).sum()
}

pub fn er_loss(y: AgeLabel, y_hat: f64) -> f64 {
    (y.y as f64 - y_hat).abs()
}

pub fn base_loss(z: &LabelDistribution, p: &PredictionDistribution, y: AgeLabel) -> Result<f64> {
    Ok(kl_loss(z, p)? + er_loss(y, expected_age(p)))
}

/// Loss terms for one softmax output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub kl: f64,
    pub er: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.kl + self.er
    }
}

/// Base loss of `softmax(logits)` against `(z, y)` and its gradient with
/// respect to the logits, written into `grad` (overwritten, then scaled).
///
/// With `use_er = false` only the KL term contributes. The ℓ1 term uses
/// `sign(0) = 0` at the kink.
pub fn logit_loss_grad(
    logits: &[f64],
    z: &LabelDistribution,
    y: AgeLabel,
    use_er: bool,
    scale: f64,
    grad: &mut [f64],
) -> LossParts {
    let p = softmax(logits);
    let z_total: f64 = z.z.iter().sum();
    let mut kl = 0.0;
    for (&zi, &pi) in z.z.iter().zip(&p) {
        if zi > 0.0 {
            kl += zi * (zi / pi.max(PROB_FLOOR)).ln();
        }
    }
    let y_hat = expectation(&p);
    let er = if use_er { (y.y as f64 - y_hat).abs() } else { 0.0 };
    let sign = if use_er {
        if y_hat > y.y as f64 {
            1.0
        } else if y_hat < y.y as f64 {
            -1.0
        } else {
            0.0
        }
    } else {
        0.0
    };
    for (j, g) in grad.iter_mut().enumerate() {
        let kl_grad = p[j] * z_total - z.z[j];
        let er_grad = sign * p[j] * (j as f64 - y_hat);
        *g = scale * (kl_grad + er_grad);
    }
    LossParts { kl, er }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(y: usize) -> AgeLabel {
        AgeLabel::new(y, MAX_AGE).unwrap()
    }

    #[test]
    fn peak_and_symmetry() {
        let peak = gaussian_weight(50, 50, 1.0);
        assert!((peak - 0.398_942_280_401_432_7).abs() < 1e-12);
        let d = make_label_distribution(label(50), 1.0).unwrap();
        for off in 1..=3 {
            assert_eq!(d.z[50 - off], d.z[50 + off]);
        }
    }

    #[test]
    fn boundary_label_renormalized() {
        let d = make_label_distribution(label(0), 1.0).unwrap();
        // oracle: direct summation of the unnormalized density
        let raw: Vec<f64> = (0..=100)
            .map(|k| (-((k as f64) * (k as f64)) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt())
            .collect();
        let s: f64 = raw.iter().sum();
        for (a, b) in d.z.iter().zip(&raw) {
            assert!((a - b / s).abs() < 1e-15);
        }
        assert!((d.z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.z[0] > d.z[1] && d.z[1] > d.z[2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(AgeLabel::new(101, 100).is_err());
        assert!(make_label_distribution(label(3), 0.0).is_err());
        assert!(make_label_distribution(label(3), -1.0).is_err());
        assert!(kl_divergence(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn kl_toy_values() {
        let z = LabelDistribution {
            z: vec![1.0, 0.0],
            sigma: 1.0,
        };
        let p = PredictionDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_loss(&z, &p).unwrap() - 2f64.ln()).abs() < 1e-12);
        let y = AgeLabel::new(0, 1).unwrap();
        assert!((base_loss(&z, &p, y).unwrap() - (2f64.ln() + 0.5)).abs() < 1e-12);
        let same = PredictionDistribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&same.p, &same.p).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_term_sum() {
        let z: [f64; 5] = [0.1, 0.2, 0.3, 0.15, 0.25];
        let p: [f64; 5] = [0.3, 0.1, 0.2, 0.25, 0.15];
        let mut oracle = 0.0;
        for i in 0..5 {
            oracle += z[i] * z[i].ln() - z[i] * p[i].ln();
        }
        assert!((kl_divergence(&z, &p).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn expectation_cases() {
        let mut one_hot = vec![PROB_FLOOR; 101];
        one_hot[30] = 1.0 - 100.0 * PROB_FLOOR;
        assert!((expectation(&one_hot) - 30.0).abs() < 1e-8);
        let uniform = vec![1.0 / 101.0; 101];
        assert!((expectation(&uniform) - 50.0).abs() < 1e-12);
        assert!((expectation(&[0.2, 0.8]) - 0.8).abs() < 1e-15);
        let y = label(30);
        assert_eq!(er_loss(y, 30.0), 0.0);
        assert_eq!(er_loss(y, 27.5), 2.5);
        assert_eq!(er_loss(label(0), 100.0), 100.0);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let y = AgeLabel::new(2, 4).unwrap();
        let z = make_label_distribution(y, 1.0).unwrap();
        let logits = [0.3, -0.2, 0.5, 1.1, -0.7];
        let mut grad = [0.0; 5];
        logit_loss_grad(&logits, &z, y, true, 1.0, &mut grad);
        let eps = 1e-6;
        for j in 0..5 {
            let mut up = logits;
            let mut dn = logits;
            up[j] += eps;
            dn[j] -= eps;
            let mut scratch = [0.0; 5];
            let fu = logit_loss_grad(&up, &z, y, true, 1.0, &mut scratch).total();
            let fd = logit_loss_grad(&dn, &z, y, true, 1.0, &mut scratch).total();
            assert!((grad[j] - (fu - fd) / (2.0 * eps)).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn label_distribution_contract(y in 0usize..=100, sigma in 0.3f64..5.0) {
            let d = make_label_distribution(label(y), sigma).unwrap();
            prop_assert!((d.z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.z.iter().all(|v| *v >= 0.0));
            prop_assert_eq!(argmax(&d.z), y);
        }

        #[test]
        fn kl_nonnegative_and_base_dominates(
            a in proptest::collection::vec(0.01f64..1.0, 6),
            b in proptest::collection::vec(0.01f64..1.0, 6),
            y in 0usize..=5,
        ) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let z = LabelDistribution { z: a.iter().map(|v| v / sa).collect(), sigma: 1.0 };
            let p = PredictionDistribution::new(b.iter().map(|v| v / sb).collect()).unwrap();
            let kl = kl_loss(&z, &p).unwrap();
            prop_assert!(kl >= -1e-15);
            let label = AgeLabel::new(y, 5).unwrap();
            let er = er_loss(label, expected_age(&p));
            let base = base_loss(&z, &p, label).unwrap();
            prop_assert_eq!(base, kl + er);
            prop_assert!(base >= kl.max(er));
            if z.z != p.p {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn expectation_is_linear(
            a in proptest::collection::vec(0.01f64..1.0, 8),
            b in proptest::collection::vec(0.01f64..1.0, 8),
            alpha in 0.0f64..1.0,
        ) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            let p: Vec<f64> = a.iter().map(|v| v / sa).collect();
            let q: Vec<f64> = b.iter().map(|v| v / sb).collect();
            let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
            let lhs = expectation(&mix);
            let rhs = alpha * expectation(&p) + (1.0 - alpha) * expectation(&q);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
