//! Channel-to-space feature rearrangement and the categorizing convolution.
//!
//! Channel `c` of a feature map belongs to group `c / r²`; its in-group index
//! `q = c % r²` selects a cell of an `r×r` patch in row-major order, so pixel
//! `(c, h, w)` lands at `(c / r², h·r + q / r, w·r + q % r)`.

use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::{Batch, Real, Tensor3};

/// Order in which the `r²` channels of a group fill their patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchOrder {
    RowMajor,
}

pub const PATCH_ORDER: PatchOrder = PatchOrder::RowMajor;

/// A `(C/r²)×(H·r)×(W·r)` map produced by [`rearrange`].
#[derive(Clone, Debug, PartialEq)]
pub struct RearrangedMap<T> {
    pub map: Tensor3<T>,
    pub r: usize,
}

pub type ScoreMap<T> = Tensor3<T>;

fn check_factor(c: usize, r: usize) -> Result<()> {
    if r == 0 || !c.is_multiple_of(r * r) {
        bail!(Shape, "{c} channels not divisible by r^2 = {}", r * r);
    }
    Ok(())
}

pub(crate) fn rearrange_batch<T: Real>(x: &Batch<T>, r: usize) -> Result<Batch<T>> {
    check_factor(x.c, r)?;
    let rr = r * r;
    let (ho, wo) = (x.h * r, x.w * r);
    let mut out = Batch::zeros(x.c / rr, x.n, ho, wo);
    for c in 0..x.c {
        let (g, q) = (c / rr, c % rr);
        let (dy, dx) = (q / r, q % r);
        for b in 0..x.n {
            let src = &x.data[(c * x.n + b) * x.h * x.w..][..x.h * x.w];
            let dst = &mut out.data[(g * x.n + b) * ho * wo..][..ho * wo];
            for h in 0..x.h {
                for w in 0..x.w {
                    dst[(h * r + dy) * wo + w * r + dx] = src[h * x.w + w];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn inverse_rearrange_batch<T: Real>(x: &Batch<T>, r: usize) -> Result<Batch<T>> {
    if r == 0 || !x.h.is_multiple_of(r) || !x.w.is_multiple_of(r) {
        bail!(Shape, "{}x{} map cannot be split into {r}x{r} patches", x.h, x.w);
    }
    let rr = r * r;
    let (h, w) = (x.h / r, x.w / r);
    let mut out = Batch::zeros(x.c * rr, x.n, h, w);
    for c in 0..x.c * rr {
        let (g, q) = (c / rr, c % rr);
        let (dy, dx) = (q / r, q % r);
        for b in 0..x.n {
            let src = &x.data[(g * x.n + b) * x.h * x.w..][..x.h * x.w];
            let dst = &mut out.data[(c * x.n + b) * h * w..][..h * w];
            for hh in 0..h {
                for ww in 0..w {
                    dst[hh * w + ww] = src[(hh * r + dy) * x.w + ww * r + dx];
                }
            }
        }
    }
    Ok(out)
}

/// Folds each group of `r²` adjacent channels into one channel of `r×r` patches.
pub fn rearrange<T: Real>(f: &Tensor3<T>, r: usize) -> Result<RearrangedMap<T>> {
    let out = rearrange_batch(&Batch::from_map(f.clone()), r)?;
    Ok(RearrangedMap { map: out.item(0), r })
}

pub fn inverse_rearrange<T: Real>(m: &RearrangedMap<T>) -> Result<Tensor3<T>> {
    Ok(inverse_rearrange_batch(&Batch::from_map(m.map.clone()), m.r)?.item(0))
}

/// Kernel/stride choice of the categorizing convolution, relative to `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrGeometry {
    pub r: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl FrGeometry {
    /// Kernel `r`, stride `r`: one output location per original pixel.
    pub fn aligned(r: usize) -> Self {
        FrGeometry {
            r,
            kernel: r,
            stride: r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.r;
        if r == 0 {
            bail!(Config, "rearrangement factor must be positive");
        }
        if self.kernel != r && self.kernel != 2 * r {
            bail!(Config, "kernel {} must be r or 2r (r = {r})", self.kernel);
        }
        let half_ok = r.is_multiple_of(2) && self.stride == r / 2;
        if self.stride != r && !half_ok {
            bail!(Config, "stride {} must be r or r/2 (r = {r})", self.stride);
        }
        Ok(())
    }
}

/// Categorizing convolution over the rearranged map: `K+1` output channels,
/// no padding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrConv {
    pub geometry: FrGeometry,
    pub conv: Conv2d,
}

impl FrConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        geometry: FrGeometry,
        feature_channels: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        geometry.validate()?;
        check_factor(feature_channels, geometry.r)?;
        let in_c = feature_channels / (geometry.r * geometry.r);
        let conv = Conv2d::new(
            store,
            "fr.conv",
            in_c,
            num_classes,
            geometry.kernel,
            geometry.stride,
            0,
            rng,
        );
        Ok(FrConv { geometry, conv })
    }

    pub fn score_hw(&self, feature_h: usize, feature_w: usize) -> Result<(usize, usize)> {
        self.conv
            .out_hw(feature_h * self.geometry.r, feature_w * self.geometry.r)
    }
}

pub fn score_conv<T: Real>(r: &RearrangedMap<T>, fr: &FrConv, params: &[T]) -> Result<ScoreMap<T>> {
    if r.r != fr.geometry.r {
        bail!(
            Shape,
            "map rearranged with r = {}, convolution expects {}",
            r.r,
            fr.geometry.r
        );
    }
    let (out, _) = fr.conv.forward(params, &Batch::from_map(r.map.clone()))?;
    Ok(out.item(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor3<f64> {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn paper_shape() {
        let m = rearrange(&ramp(512, 7, 7), 16).unwrap();
        assert_eq!(m.map.shape(), [2, 112, 112]);
        assert_eq!(inverse_rearrange(&m).unwrap(), ramp(512, 7, 7));
    }

    #[test]
    fn identity_factor() {
        let f = ramp(3, 4, 5);
        assert_eq!(rearrange(&f, 1).unwrap().map, f);
    }

    #[test]
    fn patch_is_row_major() {
        let f = Tensor3::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = rearrange(&f, 2).unwrap();
        assert_eq!(m.map.shape(), [1, 2, 2]);
        assert_eq!(m.map.data, vec![1.0, 2.0, 3.0, 4.0]);
        // two pixels: the second pixel's patch sits to the right
        let f = Tensor3::from_vec(4, 1, 2, vec![1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]).unwrap();
        let m = rearrange(&f, 2).unwrap();
        assert_eq!(m.map.data, vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn inverse_then_forward() {
        let m = RearrangedMap {
            map: ramp(2, 8, 8),
            r: 2,
        };
        let f = inverse_rearrange(&m).unwrap();
        assert_eq!(f.shape(), [8, 4, 4]);
        assert_eq!(rearrange(&f, 2).unwrap(), m);
    }

    #[test]
    fn divisibility_errors() {
        assert!(rearrange(&ramp(6, 2, 2), 2).is_err());
        let bad = RearrangedMap {
            map: ramp(1, 5, 4),
            r: 2,
        };
        assert!(inverse_rearrange(&bad).is_err());
    }

    #[test]
    fn geometry_admissible_set() {
        for (k, s) in [(8, 8), (8, 4), (16, 8), (16, 4)] {
            assert!(FrGeometry {
                r: 8,
                kernel: k,
                stride: s
            }
            .validate()
            .is_ok());
        }
        assert!(FrGeometry {
            r: 8,
            kernel: 4,
            stride: 8
        }
        .validate()
        .is_err());
        assert!(FrGeometry {
            r: 8,
            kernel: 8,
            stride: 2
        }
        .validate()
        .is_err());
        assert!(FrGeometry {
            r: 3,
            kernel: 3,
            stride: 1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn score_conv_shapes() {
        let mut rng = seed::rng(&[3]);
        let mut store = ParamStore::<f32>::default();
        let fr = FrConv::new(&mut store, FrGeometry::aligned(8), 128, 101, &mut rng).unwrap();
        let f = ramp(128, 8, 8).cast::<f32>();
        let s = score_conv(&rearrange(&f, 8).unwrap(), &fr, &store.values).unwrap();
        assert_eq!(s.shape(), [101, 8, 8]);

        let mut store = ParamStore::<f32>::default();
        let geom = FrGeometry {
            r: 16,
            kernel: 32,
            stride: 16,
        };
        let fr = FrConv::new(&mut store, geom, 512, 101, &mut rng).unwrap();
        assert_eq!(fr.score_hw(7, 7).unwrap(), (6, 6));
    }

    #[test]
    fn unit_convolution_is_identity() {
        let mut rng = seed::rng(&[4]);
        let mut store = ParamStore::<f64>::default();
        let fr = FrConv::new(&mut store, FrGeometry::aligned(1), 1, 3, &mut rng).unwrap();
        store.values.fill(0.0);
        store.slice_mut("fr.conv.weight").unwrap()[0] = 1.0;
        let f = ramp(1, 3, 3);
        let s = score_conv(&rearrange(&f, 1).unwrap(), &fr, &store.values).unwrap();
        assert_eq!(&s.data[..9], &f.data[..]);
    }

    proptest! {
        #[test]
        fn permutation_and_group_sums(
            groups in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4,
            salt in 0u64..1000,
        ) {
            let c = groups * r * r;
            let data: Vec<f64> = (0..c * h * w)
                .map(|i| (((i as u64 + salt) * 7919 % 1009) as f64) / 13.0)
                .collect();
            let f = Tensor3::from_vec(c, h, w, data).unwrap();
            let m = rearrange(&f, r).unwrap();
            prop_assert_eq!(m.map.shape(), [groups, h * r, w * r]);
            prop_assert_eq!(&inverse_rearrange(&m).unwrap(), &f);
            let mut a = f.data.clone();
            let mut b = m.map.data.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            for g in 0..groups {
                for hh in 0..h {
                    for ww in 0..w {
                        let chan: f64 = (0..r * r).map(|q| f.at(g * r * r + q, hh, ww)).sum();
                        let mut patch = 0.0;
                        for dy in 0..r {
                            for dx in 0..r {
                                patch += m.map.at(g, hh * r + dy, ww * r + dx);
                            }
                        }
                        prop_assert!((chan - patch).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
