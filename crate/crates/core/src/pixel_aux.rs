//! Pixel-level auxiliary supervision.
//!
//! The local branch applies a softmax over categories at every pixel of the
//! score map and averages the per-pixel base losses; it is a training-time
//! signal only. The holistic branch flattens the whole score map through an
//! MLP projection whose `K+1` outputs are the logits used at inference.

use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::labels::{base_loss, logit_loss_grad, AgeLabel, LabelDistribution, LossParts, PredictionDistribution};
use crate::nn::{relu_backward, relu_inplace, Linear, NormCache, ParamStore, RowNorm};
use crate::rearrange::ScoreMap;
use crate::tensor::{Batch, Real};

pub const DEFAULT_HIDDEN_WIDTH: usize = 512;

/// Layout of the holistic projection. Depth 0 is a single affine map from the
/// flattened score map to `K+1` logits; each extra level inserts
/// linear → layer norm → ReLU of width `hidden_width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub depth: usize,
    pub hidden_width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    hidden: Vec<(Linear, RowNorm)>,
    out: Linear,
}

pub struct ProjectionTape<T> {
    inputs: Vec<Vec<T>>,
    norms: Vec<NormCache<T>>,
    acts: Vec<Vec<T>>,
}

impl Projection {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        in_dim: usize,
        out_dim: usize,
        depth: usize,
        hidden_width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth > 0 && hidden_width == 0 {
            bail!(Config, "hidden width must be positive when depth > 0");
        }
        let mut hidden = Vec::with_capacity(depth);
        let mut dim = in_dim;
        for i in 0..depth {
            let lin = Linear::new(store, &format!("proj.hidden{i}"), dim, hidden_width, rng);
            let norm = RowNorm::new(store, &format!("proj.hidden{i}.norm"), hidden_width, rng);
            hidden.push((lin, norm));
            dim = hidden_width;
        }
        let out = Linear::new(store, "proj.out", dim, out_dim, rng);
        Ok(Projection {
            depth,
            hidden_width,
            in_dim,
            out_dim,
            hidden,
            out,
        })
    }

    /// Closed-form parameter count for the given layout.
    pub fn parameter_count(in_dim: usize, out_dim: usize, depth: usize, hidden_width: usize) -> usize {
        let mut total = 0;
        let mut dim = in_dim;
        for _ in 0..depth {
            total += dim * hidden_width + hidden_width + 2 * hidden_width;
            dim = hidden_width;
        }
        total + dim * out_dim + out_dim
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], n: usize) -> Vec<T> {
        let mut h = x.to_vec();
        for (lin, norm) in &self.hidden {
            let z = lin.forward(params, &h, n);
            let (mut a, _) = norm.forward(params, &z, n);
            relu_inplace(&mut a);
            h = a;
        }
        self.out.forward(params, &h, n)
    }

    pub fn forward_tape<T: Real>(&self, params: &[T], x: &[T], n: usize) -> (Vec<T>, ProjectionTape<T>) {
        let mut tape = ProjectionTape {
            inputs: Vec::new(),
            norms: Vec::new(),
            acts: Vec::new(),
        };
        let mut h = x.to_vec();
        for (lin, norm) in &self.hidden {
            let z = lin.forward(params, &h, n);
            tape.inputs.push(h);
            let (mut a, cache) = norm.forward(params, &z, n);
            relu_inplace(&mut a);
            tape.norms.push(cache);
            tape.acts.push(a.clone());
            h = a;
        }
        let logits = self.out.forward(params, &h, n);
        tape.inputs.push(h);
        (logits, tape)
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        tape: &ProjectionTape<T>,
        dlogits: &[T],
        n: usize,
        grads: &mut [T],
    ) -> Vec<T> {
        let mut d = self
            .out
            .backward(params, &tape.inputs[self.depth], dlogits, n, grads, true)
            .expect("input gradient requested");
        for i in (0..self.depth).rev() {
            let (lin, norm) = &self.hidden[i];
            relu_backward(&tape.acts[i], &mut d);
            let dz = norm.backward(params, &tape.norms[i], &d, n, grads);
            d = lin
                .backward(params, &tape.inputs[i], &dz, n, grads, true)
                .expect("input gradient requested");
        }
        d
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BranchLosses {
    pub l_loc: f64,
    pub l_hol: f64,
    pub l_sum: f64,
}

/// Loss switches shared by both branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Include the ℓ1 expectation term; off leaves KL only.
    pub use_er: bool,
    pub local_weight: f64,
    pub holistic_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            use_er: true,
            local_weight: 1.0,
            holistic_weight: 1.0,
        }
    }
}

fn pixel_logits<T: Real>(s: &ScoreMap<T>, h: usize, w: usize) -> Vec<f64> {
    (0..s.c).map(|c| s.at(c, h, w).f64()).collect()
}

/// Per-pixel softmax over categories, in row-major pixel order.
pub fn local_scores<T: Real>(s: &ScoreMap<T>) -> Vec<PredictionDistribution> {
    let mut out = Vec::with_capacity(s.h * s.w);
    for h in 0..s.h {
        for w in 0..s.w {
            out.push(PredictionDistribution::from_logits(&pixel_logits(s, h, w)));
        }
    }
    out
}

pub fn local_loss<T: Real>(s: &ScoreMap<T>, z: &LabelDistribution, y: AgeLabel) -> Result<f64> {
    if s.c != z.len() {
        bail!(Shape, "score map has {} categories, target has {}", s.c, z.len());
    }
    let scores = local_scores(s);
    let mut total = 0.0;
    for p in &scores {
        total += base_loss(z, p, y)?;
    }
    Ok(total / scores.len() as f64)
}

fn flatten<T: Real>(s: &ScoreMap<T>) -> &[T] {
    &s.data
}

pub fn holistic_scores<T: Real>(s: &ScoreMap<T>, proj: &Projection, params: &[T]) -> Result<PredictionDistribution> {
    let x = flatten(s);
    if x.len() != proj.in_dim {
        bail!(
            Shape,
            "projection expects {} inputs, score map has {}",
            proj.in_dim,
            x.len()
        );
    }
    let logits: Vec<f64> = proj.forward(params, x, 1).iter().map(|v| v.f64()).collect();
    Ok(PredictionDistribution::from_logits(&logits))
}

pub fn total_loss<T: Real>(
    s: &ScoreMap<T>,
    proj: &Projection,
    params: &[T],
    z: &LabelDistribution,
    y: AgeLabel,
) -> Result<BranchLosses> {
    let l_loc = local_loss(s, z, y)?;
    let l_hol = base_loss(z, &holistic_scores(s, proj, params)?, y)?;
    Ok(BranchLosses {
        l_loc,
        l_hol,
        l_sum: l_loc + l_hol,
    })
}

/// Local-branch losses for a `C′×N×H′×W′` batch; writes `weight/(H′W′)`-scaled
/// logit gradients into `ds` (same layout) and returns per-sample parts.
pub(crate) fn local_branch_batch<T: Real>(
    s: &Batch<T>,
    targets: &[(AgeLabel, &LabelDistribution)],
    opts: &LossOptions,
    ds: &mut Batch<T>,
) -> Vec<LossParts> {
    let hw = s.plane();
    let plane_stride = s.n * hw;
    let scale = opts.local_weight / hw as f64;
    let mut logits = vec![0.0; s.c];
    let mut grad = vec![0.0; s.c];
    let mut out = Vec::with_capacity(s.n);
    for (b, (label, z)) in targets.iter().enumerate() {
        let mut parts = LossParts::default();
        for pix in 0..hw {
            let base = b * hw + pix;
            for (c, l) in logits.iter_mut().enumerate() {
                *l = s.data[c * plane_stride + base].f64();
            }
            let lp = logit_loss_grad(&logits, z, *label, opts.use_er, scale, &mut grad);
            parts.kl += lp.kl / hw as f64;
            parts.er += lp.er / hw as f64;
            for (c, g) in grad.iter().enumerate() {
                ds.data[c * plane_stride + base] = T::of(*g);
            }
        }
        out.push(parts);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::make_label_distribution;
    use crate::seed;
    use crate::tensor::Tensor3;

    fn score_map(c: usize, h: usize, w: usize, salt: usize) -> Tensor3<f64> {
        let data = (0..c * h * w)
            .map(|i| (((i + salt) * 7919 % 211) as f64) / 60.0 - 1.5)
            .collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn zero_logits_are_uniform() {
        let s = Tensor3::<f64>::zeros(101, 2, 2);
        for p in local_scores(&s) {
            for v in &p.p {
                assert!((v - 1.0 / 101.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shift_invariance_and_toy_softmax() {
        let mut s = score_map(5, 2, 1, 3);
        let before = local_scores(&s);
        for c in 0..5 {
            s.data[c * 2] += 4.0;
        }
        let after = local_scores(&s);
        for (a, b) in before[0].p.iter().zip(&after[0].p) {
            assert!((a - b).abs() < 1e-12);
        }
        let toy = Tensor3::from_vec(2, 1, 1, vec![0.0, 3f64.ln()]).unwrap();
        let p = &local_scores(&toy)[0];
        assert!((p.p[0] - 0.25).abs() < 1e-12 && (p.p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn local_loss_is_mean_of_pixels() {
        let y = AgeLabel::new(2, 4).unwrap();
        let z = make_label_distribution(y, 1.0).unwrap();
        let s = score_map(5, 1, 2, 1);
        let pixels = local_scores(&s);
        let a = base_loss(&z, &pixels[0], y).unwrap();
        let b = base_loss(&z, &pixels[1], y).unwrap();
        assert!((local_loss(&s, &z, y).unwrap() - (a + b) / 2.0).abs() < 1e-12);

        let single = score_map(5, 1, 1, 9);
        let p = &local_scores(&single)[0];
        assert_eq!(local_loss(&single, &z, y).unwrap(), base_loss(&z, p, y).unwrap());
    }

    #[test]
    fn perfect_one_hot_prediction() {
        let y = AgeLabel::new(1, 2).unwrap();
        let z = LabelDistribution::one_hot(y);
        let s = Tensor3::from_vec(3, 1, 1, vec![-200.0, 200.0, -200.0]).unwrap();
        assert!(local_loss(&s, &z, y).unwrap() < 1e-9);

        let mut rng = seed::rng(&[1]);
        let mut store = ParamStore::<f64>::default();
        let proj = Projection::new(&mut store, 3, 3, 0, 0, &mut rng).unwrap();
        store.values.fill(0.0);
        let w = store.slice_mut("proj.out.weight").unwrap();
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        let losses = total_loss(&s, &proj, &store.values, &z, y).unwrap();
        assert!(losses.l_loc < 1e-9 && losses.l_hol < 1e-9 && losses.l_sum < 1e-9);

        // identity projection on a single pixel reproduces the local softmax
        let s2 = score_map(3, 1, 1, 4);
        let hol = holistic_scores(&s2, &proj, &store.values).unwrap();
        for (a, b) in hol.p.iter().zip(&local_scores(&s2)[0].p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_projection_is_uniform() {
        let mut rng = seed::rng(&[2]);
        let mut store = ParamStore::<f64>::default();
        let proj = Projection::new(&mut store, 12, 3, 1, 4, &mut rng).unwrap();
        store.values.fill(0.0);
        let p = holistic_scores(&score_map(3, 2, 2, 0), &proj, &store.values).unwrap();
        assert!(p.p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn parameter_count_closed_form() {
        let mut rng = seed::rng(&[3]);
        let mut store = ParamStore::<f32>::default();
        Projection::new(&mut store, 6464, 101, 2, 512, &mut rng).unwrap();
        let linear_only = (6464 * 512 + 512) + (512 * 512 + 512) + (512 * 101 + 101);
        let norms = 2 * 2 * 512;
        assert_eq!(store.len(), linear_only + norms);
        assert_eq!(Projection::parameter_count(6464, 101, 2, 512), linear_only + norms);
    }

    #[test]
    fn sum_of_branches_and_branch_independence() {
        let y = AgeLabel::new(3, 4).unwrap();
        let z = make_label_distribution(y, 1.0).unwrap();
        let mut rng = seed::rng(&[4]);
        let mut store = ParamStore::<f64>::default();
        let proj = Projection::new(&mut store, 5 * 2 * 2, 5, 1, 6, &mut rng).unwrap();
        let s = score_map(5, 2, 2, 7);
        let losses = total_loss(&s, &proj, &store.values, &z, y).unwrap();
        let l_loc = local_loss(&s, &z, y).unwrap();
        let l_hol = base_loss(&z, &holistic_scores(&s, &proj, &store.values).unwrap(), y).unwrap();
        assert!((losses.l_sum - (l_loc + l_hol)).abs() < 1e-12);
        assert_eq!(losses.l_sum, losses.l_loc + losses.l_hol);
        // the holistic output does not depend on whether the local loss was evaluated
        let alone = holistic_scores(&s, &proj, &store.values).unwrap();
        assert_eq!(alone, holistic_scores(&s, &proj, &store.values).unwrap());
    }

    #[test]
    fn depth_zero_is_affine() {
        let mut rng = seed::rng(&[5]);
        let mut store = ParamStore::<f64>::default();
        let proj = Projection::new(&mut store, 8, 4, 0, 0, &mut rng).unwrap();
        let a: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..8).map(|i| (i * i) as f64 * 0.1).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let f = |x: &[f64]| proj.forward(&store.values, x, 1);
        let (fab, fa, fb, f0) = (f(&ab), f(&a), f(&b), f(&[0.0; 8]));
        for i in 0..4 {
            assert!((fab[i] - fa[i] - fb[i] + f0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = seed::rng(&[6]);
        let mut store = ParamStore::<f64>::default();
        let proj = Projection::new(&mut store, 10, 5, 0, 0, &mut rng).unwrap();
        assert!(holistic_scores(&score_map(5, 1, 1, 0), &proj, &store.values).is_err());
    }
}
