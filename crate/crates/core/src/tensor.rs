use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{bail, Result};

/// Floating point element type for network tensors.
///
/// Gradient checks run in `f64`; benchmark training uses `f32`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = alpha * a·b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major `c (m×n) = op(a) (m×k) · op(b) (k×n) [+ c]`.
///
/// `ta`/`tb` mean the operand is stored transposed (`a` as `k×m`, `b` as `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertions above bound every access implied by the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A single `C×H×W` map, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            bail!(Shape, "{} values cannot fill a {c}x{h}x{w} tensor", data.len());
        }
        Ok(Tensor3 { c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> T {
        self.data[(c * self.h + h) * self.w + w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.w) {
            row.reverse();
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// A batch of maps stored `C×N×H×W`, so a convolution over the whole batch is
/// a single matrix product. With `n = 1` the layout coincides with [`Tensor3`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Batch {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn from_maps(maps: &[&Tensor3<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| crate::Error::InvalidInput("empty batch".into()))?;
        let (c, h, w) = (first.c, first.h, first.w);
        let n = maps.len();
        let mut out = Batch::zeros(c, n, h, w);
        let hw = h * w;
        for (i, m) in maps.iter().enumerate() {
            if m.shape() != [c, h, w] {
                bail!(
                    Shape,
                    "batch item {i} has shape {:?}, expected {:?}",
                    m.shape(),
                    [c, h, w]
                );
            }
            for ch in 0..c {
                out.data[(ch * n + i) * hw..(ch * n + i + 1) * hw].copy_from_slice(&m.data[ch * hw..(ch + 1) * hw]);
            }
        }
        Ok(out)
    }

    pub fn from_map(map: Tensor3<T>) -> Self {
        Batch {
            c: map.c,
            n: 1,
            h: map.h,
            w: map.w,
            data: map.data,
        }
    }

    pub fn item(&self, i: usize) -> Tensor3<T> {
        let hw = self.plane();
        let mut data = Vec::with_capacity(self.c * hw);
        for ch in 0..self.c {
            let off = (ch * self.n + i) * hw;
            data.extend_from_slice(&self.data[off..off + hw]);
        }
        Tensor3 {
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }
}
